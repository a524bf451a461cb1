"""Training: discrete scheme losses, Adam with staged learning rates, history.

The loss couples network evaluations along simulated paths.  All per-iteration
batches are laid out time-major: row n*K + k holds path k at time level n, so
level slices are contiguous and the step residual is a row-shifted difference.
"""

import json
import math

import numpy as np

from . import autodiff as ad
from .fnn import save_checkpoint
from .problems import chns_u_driver, ns_driver
from .sampling import face_sample, rng_for, sample_domain
from .sde import BrownianBatch, TimeGrid, euler_forward


class TrainError(RuntimeError):
    """Raised when training cannot continue; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


# ---------------------------------------------------------------------------
# Configuration types
# ---------------------------------------------------------------------------


class LossWeights:
    """Weights of the loss components: terminal, divergence/second terminal, extra."""

    def __init__(self, alpha1, alpha2=0.0, alpha3=0.0):
        if min(alpha1, alpha2, alpha3) < 0:
            raise ValueError("loss weights must be nonnegative")
        self.alpha1 = float(alpha1)
        self.alpha2 = float(alpha2)
        self.alpha3 = float(alpha3)


FULL_SEGMENTS = ((20000, 5e-3), (30000, 5e-4), (30000, 5e-5), (20000, 5e-6))
DESK_SEGMENTS = ((4000, 5e-3), (6000, 5e-4), (6000, 5e-5), (4000, 5e-6))


class TrainSchedule:
    """Iteration segments with per-segment learning rates, plus Adam settings."""

    def __init__(self, segments=FULL_SEGMENTS, K=100, beta1=0.9, beta2=0.999, eps=1e-8):
        self.segments = tuple((int(n), float(lr)) for n, lr in segments)
        if any(n < 0 or lr <= 0 for n, lr in self.segments):
            raise ValueError("segment counts must be >= 0 and rates positive")
        self.K = int(K)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)

    @property
    def total(self):
        return sum(n for n, _ in self.segments)

    @property
    def boundaries(self):
        """Cumulative iteration counts at which each segment ends."""
        out, acc = [], 0
        for n, _ in self.segments:
            acc += n
            out.append(acc)
        return out

    def lr_at(self, iteration):
        acc = 0
        for n, lr in self.segments:
            acc += n
            if iteration < acc:
                return lr
        return self.segments[-1][1]

    @classmethod
    def desk(cls, K=100, **kwargs):
        return cls(segments=DESK_SEGMENTS, K=K, **kwargs)


def schedule_lr(schedule, iteration):
    """Learning rate in force at the given iteration."""
    return schedule.lr_at(iteration)


class Curriculum:
    """Optional two-stage horizon restriction.

    For the first `fraction` of iterations, step-residual, divergence, and
    auxiliary boundary sums only count time levels in [T/2, T], the half next
    to the terminal data; afterwards the full horizon counts.  The verbatim
    1/N and 1/(N+1) normalizations are kept in both stages.
    """

    def __init__(self, fraction=0.3):
        if not 0.0 <= fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        self.fraction = float(fraction)

    def keep_levels(self, times, T, iteration, total):
        """Boolean keep-mask over the N+1 time levels."""
        if total <= 0 or iteration >= self.fraction * total:
            return np.ones(times.size, dtype=bool)
        return times >= 0.5 * T - 1e-12


class AuxSpec:
    """Auxiliary boundary terms: a moving lid or an inlet/outflow pair.

    kind "cavity": mean |Y1 + lid_speed|^2 over lid samples (face x2 = high).
    kind "obstacle": mean |Y1 + u_in|^2 over inlet samples (face x1 = low) plus
    mean |P n + nu Z n|^2 over outflow samples (face x1 = high, n = (1, 0)).
    """

    def __init__(self, kind, K_b=100, lid_speed=1.0, u_in=3.0):
        if kind not in ("cavity", "obstacle"):
            raise ValueError(f"unknown auxiliary term kind {kind!r}")
        self.kind = kind
        self.K_b = int(K_b)
        self.lid_speed = float(lid_speed)
        self.u_in = float(u_in)


class MassSpec:
    """Mass-conservation term: match the integral of Y^phi to that of g.

    Integrals use one fixed uniform Monte Carlo point set per run.  stride
    subsamples the time levels (1 = the verbatim every-level sum; the mean
    over sampled levels replaces the 1/(N+1) average).
    """

    def __init__(self, n_points=10000, stride=1):
        if n_points < 1 or stride < 1:
            raise ValueError("n_points and stride must be positive")
        self.n_points = int(n_points)
        self.stride = int(stride)


_PART_ORDER = ("residual", "terminal", "terminal_phi", "divergence", "boundary_extra", "mass")


class LossBreakdown:
    """Raw (unweighted) loss parts plus the weighted total."""

    def __init__(self, parts, weights, total):
        self.parts = {k: float(v) for k, v in parts.items()}
        self.weights = {k: float(weights[k]) for k in self.parts}
        self.total = float(total)
        for key, value in self.parts.items():
            if value < 0:
                raise ValueError(f"loss part {key} is negative: {value}")

    def __getattr__(self, name):
        if name in _PART_ORDER:
            return self.parts.get(name, 0.0)
        raise AttributeError(name)

    def weighted_sum(self):
        return sum(self.weights[k] * v for k, v in self.parts.items())

    def finite(self):
        return math.isfinite(self.total) and all(
            math.isfinite(v) for v in self.parts.values()
        )


# ---------------------------------------------------------------------------
# Pointwise reference steps (plain arrays; the taped loss mirrors these)
# ---------------------------------------------------------------------------


def residual_step_ns(y, z, grad_p, f, dW, nu, dt, dy_correction=0.0):
    """Reference value Y_n - F dt + sqrt(2 nu) Z^T dW - dY; z[b,i,j] = dY_i/dx_j."""
    drive = ns_driver(y, z, grad_p, f)
    zdw = np.einsum("bij,bj->bi", z, dW)
    return y - drive * dt + math.sqrt(2.0 * nu) * zdw - dy_correction


def residual_step_ch(y_hat, z_hat, f_hat, dW, lam, dt, dy_correction=0.0):
    """Scalar-channel reference value with diffusion sqrt(2 lam)."""
    zdw = np.sum(z_hat * dW, axis=1, keepdims=True)
    return y_hat - f_hat * dt + math.sqrt(2.0 * lam) * zdw - dy_correction


def residual_step_chns_u(y, z, grad_p, phi, grad_mu, C, f1, dW, nu, dt):
    """Velocity-channel reference value including the capillary force."""
    drive = chns_u_driver(y, z, grad_p, phi, grad_mu, C, f1)
    zdw = np.einsum("bij,bj->bi", z, dW)
    return y - drive * dt + math.sqrt(2.0 * nu) * zdw


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment accumulators for a flat list of parameter arrays."""

    def __init__(self, arrays):
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0


def adam_step(arrays, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update over matching lists of arrays and gradients."""
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ValueError("parameter, gradient, and state lists must align")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        a -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# Tape assembly helpers
# ---------------------------------------------------------------------------


def _rows_time_major(states):
    """(K, N+1, d) path states as ((N+1)K, d) rows ordered level-major."""
    K, levels, d = states.shape
    return states.transpose(1, 0, 2).reshape(levels * K, d)


def _times_column(times, K):
    return np.repeat(times, K)[:, None]


def _tile_cols(var, n):
    return var if n == 1 else ad.concat([var] * n, axis=1)


def _one_hot(rows, width):
    """(len(rows), width) selection matrix: out @ M gathers the given rows."""
    eye = np.zeros((len(rows), width))
    eye[np.arange(len(rows)), rows] = 1.0
    return eye


def _dot_rows(a, b):
    """Rowwise dot product of two (B, d) vars as a (B, 1) var."""
    return ad.sum_rows(ad.mul(a, b))


def _pad_increments(inc, K, d):
    """(K, N, d) step increments as ((N+1)K, d) rows, zero at the last level."""
    N = inc.shape[1]
    rows = np.zeros(((N + 1) * K, d))
    rows[: N * K] = inc.transpose(1, 0, 2).reshape(N * K, d)
    return rows


def _step_mask(bundle, keep, K, N):
    """(NK, 1) mask: step n of path k counts iff alive and level n+1 is kept."""
    mask = bundle.step_active.astype(float) * keep[1:][None, :]
    return mask.T.reshape(N * K, 1)


def _level_mask(bundle, keep, K, N):
    """((N+1)K, 1) mask: level n of path k counts iff reached and kept."""
    mask = bundle.level_active.astype(float) * keep[None, :]
    return mask.T.reshape((N + 1) * K, 1)


def _terminal_rows(bundle, K):
    return bundle.terminal_index * K + np.arange(K)


def _terminal_data(spec_g, boundary, bundle, times):
    """Per-path terminal values and component mask (exit data where stopped)."""
    K = bundle.K
    x_term = bundle.states[np.arange(K), bundle.terminal_index]
    values = spec_g(x_term)
    mask = np.ones_like(values)
    exited = bundle.exited
    if np.any(exited):
        tau = times[bundle.terminal_index[exited]][:, None]
        x_exit = bundle.exit_point[exited]
        codes = bundle.exit_code[exited]
        h_vals, h_mask = boundary.h.values_and_mask(tau, x_exit, codes)
        values[exited] = h_vals
        mask[exited] = h_mask
    return values, mask


def _neumann_correction(bundle, boundary, times, m):
    """(NK, m) constant Neumann correction rows q(t_{n+1}, X'') |dX|."""
    K, N = bundle.K, bundle.N
    rows = np.zeros((N * K, m))
    hit = np.argwhere(bundle.reflected)
    if hit.size:
        k, n = hit[:, 0], hit[:, 1]
        t_next = times[n + 1][:, None]
        q_vals = boundary.q(t_next, bundle.crossing[k, n])
        rows[n * K + k] = q_vals * bundle.magnitude[k, n][:, None]
    return rows


def boundary_extra_loss(kind, tape, net, t, x, nu=None, u_in=1.0, lid_speed=1.0):
    """Auxiliary boundary term as the mean squared misfit over the given rows."""
    if kind == "cavity-lid":
        ev = net.evaluate(tape, t, x)
        term = ad.add(ad.slice_cols(ev.y, 0, 1), ad.constant(np.array(lid_speed)))
    elif kind == "inlet":
        ev = net.evaluate(tape, t, x)
        term = ad.add(ad.slice_cols(ev.y, 0, 1), ad.constant(np.array(u_in)))
    elif kind == "outflow":
        d = x.shape[1]
        ev = net.evaluate(tape, t, x, want_jacobian=True)
        p = ad.slice_cols(ev.y, d, 1)
        # outward normal (1, 0, ...): P n + nu Z n has components (P + nu d1Y1, nu d1Y2, ...)
        comps = [ad.add(p, ad.smul(ad.slice_cols(ev.jac[0], 0, 1), nu))]
        for i in range(1, d):
            comps.append(ad.smul(ad.slice_cols(ev.jac[0], i, 1), nu))
        term = ad.concat(comps, axis=1)
    else:
        raise ValueError(f"unknown boundary term kind {kind!r}")
    return ad.smul(ad.vsum(ad.power(term, 2)), 1.0 / x.shape[0])


def mass_conservation_loss(tape, net, phi_col, g_integral, points, times_sel, volume):
    """Mean over sampled levels of |integral of Y^phi - integral of g|^2."""
    M = points.shape[0]
    rows_t = np.repeat(times_sel, M)[:, None]
    rows_x = np.tile(points, (len(times_sel), 1))
    ev = net.evaluate(tape, rows_t, rows_x)
    phi = ad.slice_cols(ev.y, phi_col, 1)
    term = None
    for i in range(len(times_sel)):
        level = ad.slice_rows(phi, i * M, M)
        integral = ad.smul(ad.vsum(level), volume / M)
        diff = ad.sub(integral, ad.constant(np.array(g_integral)))
        sq = ad.power(diff, 2)
        term = sq if term is None else ad.add(term, sq)
    return ad.smul(term, 1.0 / len(times_sel))


def _weighted_total(part_vars, weight_map):
    total = None
    parts = {}
    weights = {}
    for key in _PART_ORDER:
        if key not in part_vars:
            continue
        var = part_vars[key]
        w = weight_map[key]
        parts[key] = var.value[0, 0]
        weights[key] = w
        term = ad.smul(var, w)
        total = term if total is None else ad.add(total, term)
    breakdown = LossBreakdown(parts, weights, total.value[0, 0])
    return total, breakdown


# ---------------------------------------------------------------------------
# Loss assembly
# ---------------------------------------------------------------------------


class _AuxBatch:
    """Boundary sample rows for one iteration's auxiliary terms."""

    def __init__(self, spec, t, x, t_out=None, x_out=None):
        self.spec = spec
        self.t = t
        self.x = x
        self.t_out = t_out
        self.x_out = x_out


class _MassBatch:
    """Fixed quadrature points, sampled levels, and the reference integral."""

    def __init__(self, points, times_sel, volume, g_integral):
        self.points = points
        self.times_sel = times_sel
        self.volume = volume
        self.g_integral = g_integral


def _velocity_eval(tape, net, tcol, X, d):
    """Velocity-head pieces at the given rows: values, grad p, conv, div, jac."""
    ev = net.evaluate(tape, tcol, X, want_jacobian=True)
    u = ad.slice_cols(ev.y, 0, d)
    p = ad.slice_cols(ev.y, d, 1)
    jac_u = [ad.slice_cols(ev.jac[j], 0, d) for j in range(d)]
    grad_p = ad.concat([ad.slice_cols(ev.jac[j], d, 1) for j in range(d)], axis=1)
    div = None
    for j in range(d):
        piece = ad.slice_cols(jac_u[j], j, 1)
        div = piece if div is None else ad.add(div, piece)
    return ev, u, p, jac_u, grad_p, div


def _directional(jac_cols, weights_rows, d):
    """Sum_j jac_cols[j] * rows[:, j] as a (B, d) var; rows are constants."""
    out = None
    for j in range(d):
        tiled = np.repeat(weights_rows[:, j:j + 1], d, axis=1)
        term = ad.mul(jac_cols[j], ad.constant(tiled))
        out = term if out is None else ad.add(out, term)
    return out


def _convection(jac_u, u, d):
    """(Y . nabla) Y: component i = sum_j Y_j dY_i/dx_j."""
    out = None
    for j in range(d):
        yj = _tile_cols(ad.slice_cols(u, j, 1), d)
        term = ad.mul(jac_u[j], yj)
        out = term if out is None else ad.add(out, term)
    return out


def _assemble_ns(tape, spec, grid, bundle, net, keep, aux_batch):
    """Flow loss on tape; returns part vars keyed per LossBreakdown."""
    d = spec.d
    K, N = bundle.K, bundle.N
    times = grid.times
    X = _rows_time_major(bundle.states)
    tcol = _times_column(times, K)
    _, u, _p, jac_u, grad_p, div = _velocity_eval(tape, net, tcol, X, d)

    mode_dirichlet = spec.boundary.kind == "dirichlet"
    inc = bundle.repaired_increments if mode_dirichlet else bundle.increments
    dW_rows = _pad_increments(inc, K, d)
    ztdw = _directional(jac_u, dW_rows, d)
    conv = _convection(jac_u, u, d)

    f_rows = spec.f(tcol, X)
    drive = ad.add(ad.add(grad_p, conv), ad.constant(f_rows))

    nK = N * K
    head = ad.slice_rows(u, 0, nK)
    tail = ad.slice_rows(u, K, nK)
    tilde = ad.add(
        ad.sub(head, ad.smul(ad.slice_rows(drive, 0, nK), grid.dt)),
        ad.smul(ad.slice_rows(ztdw, 0, nK), math.sqrt(2.0 * spec.nu)),
    )
    if spec.boundary.kind == "neumann":
        corr = _neumann_correction(bundle, spec.boundary, times, d)
        tilde = ad.sub(tilde, ad.constant(corr))
    resid = ad.sub(tilde, tail)
    smask = np.repeat(_step_mask(bundle, keep, K, N), d, axis=1)
    resid = ad.mul(resid, ad.constant(smask))
    parts = {"residual": ad.smul(ad.vsum(ad.power(resid, 2)), 1.0 / (N * K))}

    gather = ad.matmul(ad.constant(_one_hot(_terminal_rows(bundle, K), u.value.shape[0])), u)
    if mode_dirichlet:
        g_vals, g_mask = _terminal_data(spec.g, spec.boundary, bundle, times)
    else:
        g_vals = spec.g(bundle.states[:, N])
        g_mask = np.ones_like(g_vals)
    diff = ad.mul(ad.sub(ad.constant(g_vals), gather), ad.constant(g_mask))
    parts["terminal"] = ad.smul(ad.vsum(ad.power(diff, 2)), 1.0 / K)

    lmask = _level_mask(bundle, keep, K, N)
    div_masked = ad.mul(div, ad.constant(lmask))
    parts["divergence"] = ad.smul(ad.vsum(ad.power(div_masked, 2)), 1.0 / (K * (N + 1)))

    if aux_batch is not None:
        parts["boundary_extra"] = _aux_terms(tape, net, spec, aux_batch)
    return parts


def _aux_terms(tape, net, spec, batch):
    if batch.spec.kind == "cavity":
        return boundary_extra_loss(
            "cavity-lid", tape, net, batch.t, batch.x, lid_speed=batch.spec.lid_speed
        )
    inlet = boundary_extra_loss("inlet", tape, net, batch.t, batch.x, u_in=batch.spec.u_in)
    outflow = boundary_extra_loss(
        "outflow", tape, net, batch.t_out, batch.x_out, nu=spec.nu
    )
    return ad.add(inlet, outflow)


def _phase_channel(tape, spec, grid, bundle, net, row, lam, keep, velocity=None,
                   f_rows=None, dirichlet=False):
    """One rotated phase channel's masked step residual and level-N head values.

    row selects the rotation row (0 for the fast channel, 1 for the slow one).
    velocity: optional (B, d) var of flow values at this channel's rows, which
    adds the transport term u . grad(phi) to the pre-rotation sources.
    Returns (residual var, Y_phi var over all rows, extra dict).
    """
    d = spec.d
    K, N = bundle.K, bundle.N
    times = grid.times
    Ri = spec.diag.R_inv
    X = _rows_time_major(bundle.states)
    tcol = _times_column(times, K)
    inc = bundle.repaired_increments if dirichlet else bundle.increments
    dW_rows = _pad_increments(inc, K, d)
    want_jac = velocity is not None
    ev = net.evaluate(tape, tcol, X, direction=dW_rows, want_jacobian=want_jac)
    phi = ad.slice_cols(ev.y, 0, 1)
    mu = ad.slice_cols(ev.y, 1, 1)
    y_hat = ad.add(ad.smul(phi, Ri[row, 0]), ad.smul(mu, Ri[row, 1]))
    d_hat = ad.add(
        ad.smul(ad.slice_cols(ev.dy, 0, 1), Ri[row, 0]),
        ad.smul(ad.slice_cols(ev.dy, 1, 1), Ri[row, 1]),
    )

    pre1 = ad.constant(f_rows)
    if velocity is not None:
        grad_phi = ad.concat([ad.slice_cols(ev.jac[j], 0, 1) for j in range(d)], axis=1)
        transport = _dot_rows(velocity, grad_phi)
        pre1 = ad.add(pre1, transport)
    cubic = ad.sub(ad.add(mu, phi), ad.power(phi, 3))
    pre2 = ad.add(ad.smul(pre1, spec.S / spec.L_d), ad.smul(cubic, -1.0 / spec.delta))
    f_hat = ad.add(ad.smul(pre1, Ri[row, 0]), ad.smul(pre2, Ri[row, 1]))

    nK = N * K
    tilde = ad.add(
        ad.sub(ad.slice_rows(y_hat, 0, nK), ad.smul(ad.slice_rows(f_hat, 0, nK), grid.dt)),
        ad.smul(ad.slice_rows(d_hat, 0, nK), math.sqrt(2.0 * lam)),
    )
    if spec.boundary.kind == "mixed" and not dirichlet:
        corr = _mixed_flux_correction(tape, spec, grid, bundle, net, nK)
        if corr is not None:
            tilde = ad.sub(tilde, corr)
    resid = ad.sub(tilde, ad.slice_rows(y_hat, K, nK))
    resid = ad.mul(resid, ad.constant(_step_mask(bundle, keep, K, N)))
    return resid, phi, ev


def _mixed_flux_correction(tape, spec, grid, bundle, net, nK):
    """On-tape Neumann correction rows for the slow channel of a mixed run.

    q_hat = Ri[1,0] dphi/dn + Ri[1,1] q with dphi/dn from the network at the
    crossing point; scattered into the (NK, 1) step-residual layout.
    """
    hit = np.argwhere(bundle.reflected)
    if hit.size == 0:
        return None
    K = bundle.K
    k, n = hit[:, 0], hit[:, 1]
    t_next = grid.times[n + 1][:, None]
    crossing = bundle.crossing[k, n]
    normals = bundle.normal[k, n]
    magnitude = bundle.magnitude[k, n][:, None]
    Ri = spec.diag.R_inv
    ev = net.evaluate(tape, t_next, crossing, direction=normals)
    dphi_dn = ad.slice_cols(ev.dy, 0, 1)
    q_vals = spec.boundary.q(t_next, crossing)
    q_hat = ad.add(
        ad.smul(dphi_dn, Ri[1, 0]),
        ad.constant(Ri[1, 1] * q_vals),
    )
    dy = ad.mul(q_hat, ad.constant(magnitude))
    scatter = np.zeros((nK, len(k)))
    scatter[n * K + k, np.arange(len(k))] = 1.0
    return ad.matmul(ad.constant(scatter), dy)


def _phase_terminal(tape, spec, grid, bundles, phi_vars, g_fn):
    """Terminal misfit of the unrotated phase over the union of channel points."""
    total = None
    for name in ("phi", "mu"):
        bundle = bundles[name]
        K, N = bundle.K, bundle.N
        phi = phi_vars[name]
        if _channel_mode(spec, name) == "dirichlet":
            rows = _terminal_rows(bundle, K)
            gather = ad.matmul(ad.constant(_one_hot(rows, phi.value.shape[0])), phi)
            g_vals, _ = _terminal_data(g_fn, spec.boundary, bundle, grid.times)
        else:
            gather = ad.slice_rows(phi, N * K, K)
            g_vals = g_fn(bundle.states[:, N])
        diff = ad.sub(ad.constant(g_vals), gather)
        sq = ad.smul(ad.vsum(ad.power(diff, 2)), 1.0 / K)
        total = sq if total is None else ad.add(total, sq)
    return total


def _assemble_ch(tape, spec, grid, bundles, net, keep):
    lam = (spec.diag.lam1, spec.diag.lam2)
    times = grid.times
    resid_total = None
    phi_vars = {}
    for row, name in enumerate(("phi", "mu")):
        bundle = bundles[name]
        K, N = bundle.K, bundle.N
        tcol = _times_column(times, K)
        f_rows = spec.f(tcol, _rows_time_major(bundle.states))
        dirichlet = _channel_mode(spec, name) == "dirichlet"
        resid, phi, _ = _phase_channel(
            tape, spec, grid, bundle, net, row, lam[row], keep,
            f_rows=f_rows, dirichlet=dirichlet,
        )
        sq = ad.vsum(ad.power(resid, 2))
        resid_total = sq if resid_total is None else ad.add(resid_total, sq)
        phi_vars[name] = phi
    K, N = bundles["phi"].K, bundles["phi"].N
    parts = {"residual": ad.smul(resid_total, 1.0 / (N * K))}
    parts["terminal"] = _phase_terminal(tape, spec, grid, bundles, phi_vars, spec.g)
    return parts


def _assemble_chns(tape, spec, grid, bundles, networks, keep, mass_batch):
    d = spec.d
    net_u, net_p = networks["u"], networks["phase"]
    times = grid.times
    lam = (spec.diag.lam1, spec.diag.lam2)

    # velocity head at every channel's rows: divergence and terminals use the union
    vel = {}
    for name in ("u", "phi", "mu"):
        bundle = bundles[name]
        X = _rows_time_major(bundle.states)
        tcol = _times_column(times, bundle.K)
        vel[name] = _velocity_eval(tape, net_u, tcol, X, d)

    bundle = bundles["u"]
    K, N = bundle.K, bundle.N
    u, jac_u, grad_p = vel["u"][1], vel["u"][3], vel["u"][4]
    X_u = _rows_time_major(bundle.states)
    tcol_u = _times_column(times, K)
    ev2 = net_p.evaluate(tape, tcol_u, X_u, want_jacobian=True)
    phi_at_u = ad.slice_cols(ev2.y, 0, 1)
    grad_mu_at_u = ad.concat([ad.slice_cols(ev2.jac[j], 1, 1) for j in range(d)], axis=1)
    capillary = ad.mul(_tile_cols(ad.smul(phi_at_u, spec.C), d), grad_mu_at_u)

    dW_rows = _pad_increments(bundle.increments, K, d)
    ztdw = _directional(jac_u, dW_rows, d)
    conv = _convection(jac_u, u, d)
    f1_rows = spec.f1(tcol_u, X_u)
    drive = ad.add(ad.add(grad_p, conv), ad.add(capillary, ad.constant(f1_rows)))
    nK = N * K
    tilde = ad.add(
        ad.sub(ad.slice_rows(u, 0, nK), ad.smul(ad.slice_rows(drive, 0, nK), grid.dt)),
        ad.smul(ad.slice_rows(ztdw, 0, nK), math.sqrt(2.0 * spec.nu)),
    )
    resid_u = ad.sub(tilde, ad.slice_rows(u, K, nK))
    resid_u = ad.mul(resid_u, ad.constant(np.repeat(_step_mask(bundle, keep, K, N), d, axis=1)))
    resid_total = ad.vsum(ad.power(resid_u, 2))

    phi_vars = {}
    for row, name in enumerate(("phi", "mu")):
        cb = bundles[name]
        tcol = _times_column(times, cb.K)
        f_rows = spec.f2(tcol, _rows_time_major(cb.states))
        velocity = ad.slice_cols(vel[name][0].y, 0, d)
        resid, phi, _ = _phase_channel(
            tape, spec, grid, cb, net_p, row, lam[row], keep,
            velocity=velocity, f_rows=f_rows,
        )
        resid_total = ad.add(resid_total, ad.vsum(ad.power(resid, 2)))
        phi_vars[name] = phi
    parts = {"residual": ad.smul(resid_total, 1.0 / (N * K))}

    # terminal misfits over the union of all three channels' endpoints
    term_u = None
    term_phi = None
    for name in ("u", "phi", "mu"):
        cb = bundles[name]
        u_var = vel[name][1]
        u_term = ad.slice_rows(u_var, N * cb.K, cb.K)
        gu = spec.g_u(cb.states[:, N])
        sq = ad.smul(ad.vsum(ad.power(ad.sub(ad.constant(gu), u_term), 2)), 1.0 / cb.K)
        term_u = sq if term_u is None else ad.add(term_u, sq)
        if name == "u":
            phi_var = phi_at_u
        else:
            phi_var = phi_vars[name]
        phi_term = ad.slice_rows(phi_var, N * cb.K, cb.K)
        gp = spec.g_phi(cb.states[:, N])
        sqp = ad.smul(ad.vsum(ad.power(ad.sub(ad.constant(gp), phi_term), 2)), 1.0 / cb.K)
        term_phi = sqp if term_phi is None else ad.add(term_phi, sqp)
    parts["terminal"] = term_u
    parts["terminal_phi"] = term_phi

    div_total = None
    for name in ("u", "phi", "mu"):
        cb = bundles[name]
        div = vel[name][5]
        masked = ad.mul(div, ad.constant(_level_mask(cb, keep, cb.K, cb.N)))
        sq = ad.smul(ad.vsum(ad.power(masked, 2)), 1.0 / (cb.K * (cb.N + 1)))
        div_total = sq if div_total is None else ad.add(div_total, sq)
    parts["divergence"] = div_total

    if mass_batch is not None:
        parts["mass"] = mass_conservation_loss(
            tape, net_p, 0, mass_batch.g_integral, mass_batch.points,
            mass_batch.times_sel, mass_batch.volume,
        )
    return parts


def assemble_loss(spec, grid, bundles, networks, weights, keep=None, aux_batch=None,
                  mass_batch=None):
    """Build the full training loss on a fresh tape.

    bundles: dict of PathBundle per channel ("u" for flow; "phi"/"mu" for the
    rotated phase channels).  Returns (tape, total var, LossBreakdown).
    """
    tape = ad.Tape()
    if keep is None:
        keep = np.ones(grid.N + 1, dtype=bool)
    if spec.problem == "ns":
        parts = _assemble_ns(tape, spec, grid, bundles["u"], networks["u"], keep, aux_batch)
        weight_map = {
            "residual": 1.0, "terminal": weights.alpha1,
            "divergence": weights.alpha2, "boundary_extra": weights.alpha3,
        }
    elif spec.problem == "ch":
        parts = _assemble_ch(tape, spec, grid, bundles, networks["phase"], keep)
        weight_map = {"residual": 1.0, "terminal": weights.alpha1}
    elif spec.problem == "chns":
        parts = _assemble_chns(tape, spec, grid, bundles, networks, keep, mass_batch)
        weight_map = {
            "residual": 1.0, "terminal": weights.alpha1,
            "terminal_phi": weights.alpha2, "divergence": weights.alpha3,
            "mass": 1.0,
        }
    else:
        raise ValueError(f"unknown problem {spec.problem!r}")
    total, breakdown = _weighted_total(parts, weight_map)
    return tape, total, breakdown


# ---------------------------------------------------------------------------
# Path construction
# ---------------------------------------------------------------------------

_CHANNELS = {"ns": ("u",), "ch": ("phi", "mu"), "chns": ("u", "phi", "mu")}


def _channel_coefs(spec):
    if spec.problem == "ns":
        return {"u": spec.nu}
    if spec.problem == "ch":
        return {"phi": spec.diag.lam1, "mu": spec.diag.lam2}
    return {"u": spec.nu, "phi": spec.diag.lam1, "mu": spec.diag.lam2}


def _channel_mode(spec, name):
    kind = spec.boundary.kind
    if kind in ("whole-space", "periodic"):
        return "none"
    if kind == "dirichlet":
        return "dirichlet"
    if kind == "neumann":
        return "neumann"
    # mixed: the fast (phi) channel stops, the slow (mu) channel reflects
    return "dirichlet" if name == "phi" else "neumann"


def build_paths(spec, grid, K, seed, iteration):
    """Fresh initial points and Brownian paths for every channel of a problem."""
    channels = _CHANNELS[spec.problem]
    geometry = spec.boundary.geometry
    init_rng = rng_for(seed, "init", iteration)
    x0 = sample_domain(init_rng, K, geometry)
    batch = BrownianBatch.draw(
        K, grid.N, spec.d, len(channels), grid.dt, seed, iteration=iteration
    )
    bundles = {}
    unconstrained = spec.boundary.kind in ("whole-space", "periodic")
    for c, name in enumerate(channels):
        mode = _channel_mode(spec, name)
        bundles[name] = euler_forward(
            x0, _channel_coefs(spec)[name], batch.channel(c),
            geometry=None if unconstrained else geometry,
            mode=mode,
            rng=rng_for(seed, "paths", iteration, c),
            dt=grid.dt,
            reflect_codes=spec.boundary.reflect_codes,
        )
    return bundles


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


class Trainer:
    """Runs the staged optimization for one problem.

    networks: {"u": Network} for flow, {"phase": Network} for phase-field,
    both for the coupled problem.  test_fn(networks, iteration) -> ordered
    dict of named errors, evaluated every log_every iterations.
    """

    def __init__(self, spec, T, N, networks, schedule=None, weights=None,
                 aux=None, curriculum=None, mass=None, seed=0):
        self.spec = spec
        self.grid = TimeGrid(T, N)
        self.networks = dict(networks)
        self.schedule = schedule or TrainSchedule()
        self.weights = weights or LossWeights(alpha1=1.0, alpha2=1.0, alpha3=1.0)
        self.aux = aux
        self.curriculum = curriculum
        self.mass = mass
        self.seed = int(seed)
        self.history = []

        needed = {"ns": ("u",), "ch": ("phase",), "chns": ("u", "phase")}[spec.problem]
        for name in needed:
            if name not in self.networks:
                raise ValueError(f"problem {spec.problem!r} needs a {name!r} network")
        if spec.problem in ("ch", "chns") and abs(self.grid.dt - spec.delta) > 1e-12:
            raise ValueError(
                f"stabilization time scale delta={spec.delta} must equal dt={self.grid.dt}"
            )
        if aux is not None and spec.problem != "ns":
            raise ValueError("auxiliary boundary terms apply to flow problems")
        if mass is not None and spec.problem != "chns":
            raise ValueError("the mass term applies to the coupled problem")

        self._net_names = sorted(self.networks)
        self._arrays = []
        for name in self._net_names:
            self._arrays.extend(self.networks[name].param_arrays())
        self._adam = AdamState(self._arrays)
        self._mass_batch = self._build_mass_batch() if mass is not None else None

    def _build_mass_batch(self):
        geometry = self.spec.boundary.geometry
        rng = rng_for(self.seed, "quadrature", 0)
        points = rng.uniform(
            geometry.lows, geometry.highs, size=(self.mass.n_points, self.spec.d)
        )
        volume = float(np.prod(geometry.highs - geometry.lows))
        g_integral = volume * float(np.mean(self.spec.g_phi(points)))
        times_sel = self.grid.times[:: self.mass.stride]
        return _MassBatch(points, times_sel, volume, g_integral)

    def _aux_batch(self, iteration):
        if self.aux is None:
            return None
        geometry = self.spec.boundary.geometry
        box = getattr(geometry, "box", geometry)
        rng = rng_for(self.seed, "boundary", iteration)
        levels = self.grid.N + 1
        n_total = levels * self.aux.K_b

        def face_rows(dim, side):
            pts = face_sample(rng, n_total, box.lows, box.highs, dim, side)
            t = np.repeat(self.grid.times, self.aux.K_b)[:, None]
            return t, pts

        if self.aux.kind == "cavity":
            t, x = face_rows(1, 1)
            return _AuxBatch(self.aux, t, x)
        t_in, x_in = face_rows(0, 0)
        t_out, x_out = face_rows(0, 1)
        return _AuxBatch(self.aux, t_in, x_in, t_out=t_out, x_out=x_out)

    def loss_once(self, iteration):
        """Paths plus loss for one iteration; returns (tape, total var, breakdown)."""
        bundles = build_paths(self.spec, self.grid, self.schedule.K, self.seed, iteration)
        if self.curriculum is not None:
            keep = self.curriculum.keep_levels(
                self.grid.times, self.grid.T, iteration, self.schedule.total
            )
        else:
            keep = None
        return assemble_loss(
            self.spec, self.grid, bundles, self.networks, self.weights,
            keep=keep, aux_batch=self._aux_batch(iteration),
            mass_batch=self._mass_batch,
        )

    def step(self, iteration):
        """One optimization step; returns (lr, LossBreakdown)."""
        lr = self.schedule.lr_at(iteration)
        tape, total, breakdown = self.loss_once(iteration)
        if not breakdown.finite():
            raise TrainError(
                f"non-finite loss at iteration {iteration}",
                snapshot={
                    "iteration": iteration, "lr": lr,
                    "total": breakdown.total, "parts": breakdown.parts,
                },
            )
        param_vars = []
        for name in self._net_names:
            for wv, bv in self.networks[name].params_on(tape):
                param_vars.extend((wv, bv))
        grads = ad.grad_wrt(total, param_vars)
        adam_step(
            self._arrays, grads, self._adam, lr,
            beta1=self.schedule.beta1, beta2=self.schedule.beta2, eps=self.schedule.eps,
        )
        return lr, breakdown

    def train(self, csv_path=None, checkpoint_dir=None, test_fn=None, log_every=100):
        """Run all scheduled iterations; returns the history of logged rows.

        Each iteration appends (iteration, lr, total and parts); every
        log_every iterations (and at the end) test_fn results are merged in.
        A CSV mirror is written when csv_path is given; checkpoints are saved
        at segment boundaries when checkpoint_dir is given.
        """
        total_iters = self.schedule.total
        boundaries = set(self.schedule.boundaries)
        writer = _HistoryWriter(csv_path, test_fn is not None)
        try:
            for iteration in range(total_iters):
                try:
                    lr, breakdown = self.step(iteration)
                except TrainError as err:
                    if checkpoint_dir is not None:
                        snap_path = f"{checkpoint_dir}/diagnostic.json"
                        with open(snap_path, "w") as fh:
                            json.dump(err.snapshot, fh, indent=2)
                    raise
                row = {
                    "iteration": iteration,
                    "lr": lr,
                    "total": breakdown.total,
                    "residual": breakdown.residual,
                    "terminal": breakdown.terminal + breakdown.terminal_phi,
                    "divergence": breakdown.divergence,
                    "boundary_extra": breakdown.boundary_extra,
                    "mass": breakdown.mass,
                }
                is_log = iteration % log_every == 0 or iteration == total_iters - 1
                if test_fn is not None and is_log:
                    for key, value in test_fn(self.networks, iteration).items():
                        row[f"test_relL2_{key}"] = value
                self.history.append(row)
                writer.write(row)
                if checkpoint_dir is not None and (iteration + 1) in boundaries:
                    save_checkpoint(
                        f"{checkpoint_dir}/checkpoint-{iteration + 1}.json",
                        self.networks,
                        meta={"iteration": iteration + 1, "lr": lr},
                    )
        finally:
            writer.close()
        return self.history


class _HistoryWriter:
    """Streams history rows to CSV with a stable, lazily fixed header."""

    def __init__(self, path, with_tests):
        self.path = path
        self.with_tests = with_tests
        self.fh = None
        self.columns = None

    def write(self, row):
        if self.path is None:
            return
        if self.fh is None:
            self.columns = list(row.keys())
            self.fh = open(self.path, "w")
            self.fh.write(",".join(self.columns) + "\n")
        cells = []
        for col in self.columns:
            value = row.get(col, "")
            cells.append(f"{value:.12g}" if isinstance(value, float) else str(value))
        self.fh.write(",".join(cells) + "\n")

    def close(self):
        if self.fh is not None:
            self.fh.close()
            self.fh = None
