"""Shared test oracles: loop-based loss references, FD probes, step consistency.

These deliberately re-derive quantities with explicit per-path python loops and
plain numpy so the vectorized tape assembly is checked against an independent
construction of the same discrete scheme.
"""

import math

import numpy as np

from fbsnn import autodiff as ad
from fbsnn.fnn import Network
from fbsnn.problems import ns_driver
from fbsnn.trainer import residual_step_ch, residual_step_ns


def eval_np(net, t, x):
    """Network values and full input jacobian as plain arrays."""
    tape = ad.Tape()
    ev = net.evaluate(tape, t, x, want_jacobian=True)
    jac = np.stack([ev.jac[j].value for j in range(x.shape[1])], axis=2)
    return ev.y.value.copy(), jac  # (B, heads), (B, heads, d)


def zero_network(d_in, d_out, hidden=(6,), out_bias=None, **kwargs):
    """Network with all parameters zero; optional constant output bias."""
    net = Network(d_in, d_out, hidden=hidden, **kwargs)
    for w, b in net.layers:
        w[:] = 0.0
        b[:] = 0.0
    if out_bias is not None:
        net.layers[-1][1][0, :] = np.asarray(out_bias, dtype=float)
    return net


def _keep(keep, grid):
    return np.ones(grid.N + 1, dtype=bool) if keep is None else keep


def ref_loss_ns(spec, grid, bundle, net, weights, keep=None):
    """Per-path loop reference of the flow loss parts (no auxiliary terms)."""
    d, K, N = spec.d, bundle.K, bundle.N
    times, dt = grid.times, grid.dt
    keep = _keep(keep, grid)
    dirich = spec.boundary.kind == "dirichlet"
    inc = bundle.repaired_increments if dirich else bundle.increments
    resid_sum = term_sum = div_sum = 0.0
    for k in range(K):
        for n in range(N):
            if not (bundle.step_active[k, n] and keep[n + 1]):
                continue
            tn = np.array([[times[n]]])
            xn = bundle.states[k, n][None]
            y, jac = eval_np(net, tn, xn)
            u, ju, gp = y[:, :d], jac[:, :d, :], jac[:, d, :]
            dy_corr = 0.0
            if spec.boundary.kind == "neumann" and bundle.reflected[k, n]:
                tq = np.array([[times[n + 1]]])
                q = spec.boundary.q(tq, bundle.crossing[k, n][None])
                dy_corr = q * bundle.magnitude[k, n]
            tilde = residual_step_ns(
                u, ju, gp, spec.f(tn, xn), inc[k, n][None], spec.nu, dt, dy_corr
            )
            tm = np.array([[times[n + 1]]])
            ym, _ = eval_np(net, tm, bundle.states[k, n + 1][None])
            resid_sum += float(np.sum((tilde - ym[:, :d]) ** 2))
        ti = bundle.terminal_index[k]
        tt = np.array([[times[ti]]])
        xt = bundle.states[k, ti][None]
        yt, _ = eval_np(net, tt, xt)
        if dirich and bundle.exited[k]:
            h, m = spec.boundary.h.values_and_mask(tt, xt, bundle.exit_code[k : k + 1])
            term_sum += float(np.sum((m * (h - yt[:, :d])) ** 2))
        else:
            g = spec.g(bundle.states[k, N][None])
            term_sum += float(np.sum((g - yt[:, :d]) ** 2))
        for n in range(N + 1):
            if not (bundle.level_active[k, n] and keep[n]):
                continue
            tn = np.array([[times[n]]])
            _, jac = eval_np(net, tn, bundle.states[k, n][None])
            div_sum += float(np.trace(jac[0, :d, :])) ** 2
    return {
        "residual": resid_sum / (N * K),
        "terminal": term_sum / K,
        "divergence": div_sum / (K * (N + 1)),
    }


def _phase_hat_pieces(spec, net, tn, xn, row, u_val=None, f_source=None):
    """Rotated value, derivative row, and driver at one point, as arrays."""
    Ri = spec.diag.R_inv
    y, jac = eval_np(net, tn, xn)
    phi_v, mu_v = y[:, 0:1], y[:, 1:2]
    y_hat = Ri[row, 0] * phi_v + Ri[row, 1] * mu_v
    z_hat = Ri[row, 0] * jac[:, 0, :] + Ri[row, 1] * jac[:, 1, :]
    pre1 = np.array(f_source, dtype=float).reshape(1, 1)
    if u_val is not None:
        pre1 = pre1 + (u_val @ jac[0, 0, :])[None]
    pre2 = (spec.S / spec.L_d) * pre1 - (mu_v + phi_v - phi_v**3) / spec.delta
    f_hat = Ri[row, 0] * pre1 + Ri[row, 1] * pre2
    return y_hat, z_hat, f_hat


def ref_loss_ch(spec, grid, bundles, net, weights, keep=None):
    """Per-path loop reference of the two-channel phase loss parts."""
    K, N = bundles["phi"].K, bundles["phi"].N
    times, dt = grid.times, grid.dt
    keep = _keep(keep, grid)
    Ri = spec.diag.R_inv
    lam = (spec.diag.lam1, spec.diag.lam2)
    resid_sum = term_sum = 0.0
    for row, name in enumerate(("phi", "mu")):
        b = bundles[name]
        dirich = name == "phi" and spec.boundary.kind == "mixed"
        inc = b.repaired_increments if dirich else b.increments
        for k in range(K):
            for n in range(N):
                if not (b.step_active[k, n] and keep[n + 1]):
                    continue
                tn = np.array([[times[n]]])
                xn = b.states[k, n][None]
                y_hat, z_hat, f_hat = _phase_hat_pieces(
                    spec, net, tn, xn, row, f_source=spec.f(tn, xn)
                )
                dy_corr = 0.0
                if name == "mu" and spec.boundary.kind == "mixed" and b.reflected[k, n]:
                    tq = np.array([[times[n + 1]]])
                    xq = b.crossing[k, n][None]
                    _, jq = eval_np(net, tq, xq)
                    dphi_dn = float(jq[0, 0, :] @ b.normal[k, n])
                    qv = float(spec.boundary.q(tq, xq)[0, 0])
                    dy_corr = (Ri[1, 0] * dphi_dn + Ri[1, 1] * qv) * b.magnitude[k, n]
                tilde = residual_step_ch(
                    y_hat, z_hat, f_hat, inc[k, n][None], lam[row], dt, dy_corr
                )
                tm = np.array([[times[n + 1]]])
                ym, _ = eval_np(net, tm, b.states[k, n + 1][None])
                yhm = Ri[row, 0] * ym[:, 0:1] + Ri[row, 1] * ym[:, 1:2]
                resid_sum += float(np.sum((tilde - yhm) ** 2))
            ti = b.terminal_index[k]
            tt = np.array([[times[ti]]])
            xt = b.states[k, ti][None]
            yt, _ = eval_np(net, tt, xt)
            if dirich and b.exited[k]:
                h, m = spec.boundary.h.values_and_mask(tt, xt, b.exit_code[k : k + 1])
                term_sum += float(np.sum((m * (h - yt[:, 0:1])) ** 2))
            else:
                g = spec.g(b.states[k, N][None])
                term_sum += float(np.sum((g - yt[:, 0:1]) ** 2))
    return {"residual": resid_sum / (N * K), "terminal": term_sum / K}


def ref_loss_chns(spec, grid, bundles, nets, weights, keep=None, mass_batch=None):
    """Per-path loop reference of the coupled loss parts."""
    d = spec.d
    K, N = bundles["u"].K, bundles["u"].N
    times, dt = grid.times, grid.dt
    keep = _keep(keep, grid)
    net_u, net_p = nets["u"], nets["phase"]
    Ri = spec.diag.R_inv
    lam = (spec.diag.lam1, spec.diag.lam2)
    resid_sum = 0.0
    b = bundles["u"]
    for k in range(K):
        for n in range(N):
            if not keep[n + 1]:
                continue
            tn = np.array([[times[n]]])
            xn = b.states[k, n][None]
            y, jac = eval_np(net_u, tn, xn)
            u, ju, gp = y[:, :d], jac[:, :d, :], jac[:, d, :]
            y2, jac2 = eval_np(net_p, tn, xn)
            capillary = spec.C * y2[:, 0:1] * jac2[:, 1, :]
            drive = ns_driver(u, ju, gp, spec.f1(tn, xn)) + capillary
            zdw = np.einsum("bij,bj->bi", ju, b.increments[k, n][None])
            tilde = u - drive * dt + math.sqrt(2 * spec.nu) * zdw
            tm = np.array([[times[n + 1]]])
            ym, _ = eval_np(net_u, tm, b.states[k, n + 1][None])
            resid_sum += float(np.sum((tilde - ym[:, :d]) ** 2))
    for row, name in enumerate(("phi", "mu")):
        cb = bundles[name]
        for k in range(K):
            for n in range(N):
                if not keep[n + 1]:
                    continue
                tn = np.array([[times[n]]])
                xn = cb.states[k, n][None]
                yu, _ = eval_np(net_u, tn, xn)
                y_hat, z_hat, f_hat = _phase_hat_pieces(
                    spec, net_p, tn, xn, row, u_val=yu[:, :d], f_source=spec.f2(tn, xn)
                )
                tilde = residual_step_ch(
                    y_hat, z_hat, f_hat, cb.increments[k, n][None], lam[row], dt
                )
                tm = np.array([[times[n + 1]]])
                ym, _ = eval_np(net_p, tm, cb.states[k, n + 1][None])
                yhm = Ri[row, 0] * ym[:, 0:1] + Ri[row, 1] * ym[:, 1:2]
                resid_sum += float(np.sum((tilde - yhm) ** 2))
    term_u = term_phi = div_sum = 0.0
    tN = np.array([[times[N]]])
    for name in ("u", "phi", "mu"):
        cb = bundles[name]
        for k in range(K):
            xt = cb.states[k, N][None]
            yu, _ = eval_np(net_u, tN, xt)
            yp, _ = eval_np(net_p, tN, xt)
            term_u += float(np.sum((spec.g_u(xt) - yu[:, :d]) ** 2)) / K
            term_phi += float(np.sum((spec.g_phi(xt) - yp[:, 0:1]) ** 2)) / K
            for n in range(N + 1):
                if not keep[n]:
                    continue
                tn = np.array([[times[n]]])
                _, jac = eval_np(net_u, tn, cb.states[k, n][None])
                div_sum += float(np.trace(jac[0, :d, :])) ** 2 / (K * (N + 1))
    parts = {
        "residual": resid_sum / (N * K),
        "terminal": term_u,
        "terminal_phi": term_phi,
        "divergence": div_sum,
    }
    if mass_batch is not None:
        acc = 0.0
        M = mass_batch.points.shape[0]
        for tv in mass_batch.times_sel:
            yp = net_p.predict(np.full((M, 1), tv), mass_batch.points)
            integral = mass_batch.volume * float(np.mean(yp[:, 0]))
            acc += (integral - mass_batch.g_integral) ** 2
        parts["mass"] = acc / len(mass_batch.times_sel)
    return parts


def fd_worst_rel(nets, loss_fn, n_probe=2, eps=1e-6):
    """Worst rel error between backprop and central FD on top-|grad| entries."""
    tape, total = loss_fn()
    param_vars, arrays = [], []
    for name in sorted(nets):
        for pair in nets[name].params_on(tape):
            param_vars.extend(pair)
        arrays.extend(nets[name].param_arrays())
    grads = ad.grad_wrt(total, param_vars)
    worst = 0.0
    for a, g in zip(arrays, grads):
        flat = np.argsort(np.abs(g).ravel())[::-1][:n_probe]
        for fi in flat:
            idx = np.unravel_index(fi, a.shape)
            old = a[idx]
            a[idx] = old + eps
            fp = loss_fn()[1].value[0, 0]
            a[idx] = old - eps
            fm = loss_fn()[1].value[0, 0]
            a[idx] = old
            fd = (fp - fm) / (2 * eps)
            denom = max(abs(fd), abs(g[idx]), 1e-8)
            worst = max(worst, abs(fd - g[idx]) / denom)
    return worst


def euler_consistency_medians(backward, nu, box, dts, n_paths, seed):
    """Median one-step residual of the scheme on exact fields, per step size.

    The reference value built from the exact solution at t=0 is compared with
    the exact solution at t=dt on the moved points; halving dt should shrink
    the median residual clearly (better than first order in this metric).
    """
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(box.lows, box.highs, size=(n_paths, box.d))
    t0 = np.zeros((n_paths, 1))
    medians = []
    for dt in dts:
        dW = rng.standard_normal((n_paths, box.d)) * math.sqrt(dt)
        x1 = x0 + math.sqrt(2.0 * nu) * dW
        tilde = residual_step_ns(
            backward.u(t0, x0), backward.jac_u(t0, x0), backward.grad_p(t0, x0),
            backward.f(t0, x0), dW, nu, dt,
        )
        actual = backward.u(np.full((n_paths, 1), dt), x1)
        medians.append(float(np.median(np.linalg.norm(actual - tilde, axis=1))))
    return medians


def ad_fields(exact, tval, x):
    """Values, time derivatives, and spatial gradients of every head via AD."""
    tape = ad.Tape()
    tvar = tape.var(np.full((x.shape[0], 1), tval))
    xvar = tape.var(x.copy())
    heads = exact.on_tape(tape, tvar, xvar)
    out = {}
    for name, var in heads.items():
        grads = ad.grad_wrt(ad.vsum(var), [tvar, xvar])
        out[name] = (var.value.copy(), grads[0].copy(), grads[1].copy())
    return out


def ad_laplacians(exact, tval, x, h=1e-5):
    """Laplacian of every head by central differences of the AD gradient."""
    d = x.shape[1]
    names = list(ad_fields(exact, tval, x).keys())
    lap = {name: np.zeros((x.shape[0], 1)) for name in names}
    for j in range(d):
        shift = np.zeros_like(x)
        shift[:, j] = h
        plus = ad_fields(exact, tval, x + shift)
        minus = ad_fields(exact, tval, x - shift)
        for name in names:
            lap[name] += (plus[name][2][:, j:j + 1] - minus[name][2][:, j:j + 1]) / (2 * h)
    return lap


def stack_u(fields, d):
    """Velocity heads u1..ud restacked as (values, time derivs, jacobian)."""
    u = np.hstack([fields[f"u{i + 1}"][0] for i in range(d)])
    u_t = np.hstack([fields[f"u{i + 1}"][1] for i in range(d)])
    jac = np.stack([fields[f"u{i + 1}"][2] for i in range(d)], axis=1)
    return u, u_t, jac


def ch_residuals(back, coeffs, t, x, f_arg):
    """Residuals of both backward phase-field rows; f_arg includes transport."""
    fields = ad_fields(back, t, x)
    lap = ad_laplacians(back, t, x)
    phi, phi_t = fields["phi"][0], fields["phi"][1]
    mu, mu_t = fields["mu"][0], fields["mu"][1]
    gamma, delta, S, L_d = coeffs
    row1 = phi_t + L_d * lap["mu"] + f_arg
    row2 = (
        mu_t
        - (gamma**2 / delta) * lap["phi"]
        + S * lap["mu"]
        + (S / L_d) * f_arg
        - (mu + phi - phi**3) / delta
    )
    return row1, row2, fields
