"""Command line: run benchmark experiments, self-check, and dump field grids."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, grad_wrt
from .experiments import EXPERIMENT_IDS, ExperimentConfig, run_experiment
from .fnn import Network, load_checkpoint
from .geometry import Box, geometry_from_dict
from .metrics import emit_fields, field_grid
from .problems import TaylorGreen2D, ch_diagonalize, time_reverse_adapter
from .sampling import rng_for
from .sde import BrownianBatch, euler_forward


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="fbsnn",
        description="Benchmark solvers for flow and phase-field problems "
        "driven by simulated diffusion paths.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="train one experiment and write artifacts")
    run_p.add_argument(
        "--experiment", required=True,
        help="experiment id, one of: " + ", ".join(EXPERIMENT_IDS),
    )
    run_p.add_argument("--config", help="JSON file with config overrides")
    run_p.add_argument("--seed", type=int, help="train a single seed instead of the default three")
    run_p.add_argument("--full-budget", action="store_true", help="use the long training schedule")
    run_p.add_argument("--out", help="output directory (default results/<id>)")

    sub.add_parser("check", help="run the fast property self-checks")

    fields_p = sub.add_parser("fields", help="evaluate a checkpoint on a grid")
    fields_p.add_argument("--checkpoint", required=True, help="checkpoint JSON file")
    fields_p.add_argument("--grid", type=int, default=21, help="points per axis")
    fields_p.add_argument("--times", required=True, help="comma-separated time levels")
    fields_p.add_argument("--out", default="fields.csv", help="output CSV path")
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        return _cmd_run(args, parser)
    if args.command == "check":
        return _cmd_check()
    return _cmd_fields(args, parser)


def _cmd_run(args, parser):
    overrides = {}
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(overrides, dict):
            parser.error(f"config {args.config} must hold a JSON object")
    overrides["experiment"] = args.experiment
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.full_budget:
        overrides["full_budget"] = True
    if args.out is not None:
        overrides["out"] = args.out
    try:
        config = ExperimentConfig.from_dict(overrides)
        median, _ = run_experiment(config, log=print)
    except ValueError as exc:
        parser.error(str(exc))
    out = config.out if config.out is not None else f"results/{config.experiment}"
    print(f"experiment {config.experiment}: seeds {list(config.seeds)}, artifacts in {out}")
    if median.errors:
        for name, pair in sorted(median.errors.items()):
            label = "abs" if pair.absolute else "rel"
            print(f"  {name}: {label}Linf {pair.linf:.3e}, {label}L2 {pair.l2:.3e}")
    else:
        print("  no reference solution; inspect the loss CSV and field snapshots")
    return 0


def _cmd_fields(args, parser):
    try:
        networks, meta = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        parser.error(f"cannot load checkpoint {args.checkpoint}: {exc}")
    domain = (meta or {}).get("domain")
    if domain is None:
        parser.error("checkpoint lacks domain metadata; re-export it with the run command")
    try:
        times = [float(s) for s in args.times.split(",") if s.strip()]
    except ValueError:
        parser.error(f"cannot parse times {args.times!r}")
    if not times:
        parser.error("need at least one time level")
    if args.grid < 2:
        parser.error("grid needs at least two points per axis")
    geometry = geometry_from_dict(domain)
    points = field_grid(geometry, args.grid)
    header = emit_fields(args.out, networks, points, times)
    print(
        f"wrote {args.out}: {len(times)} time level(s) x {points.shape[0]} points, "
        f"columns {','.join(header)}"
    )
    return 0


# ---------------------------------------------------------------------------
# Self-checks: small, fast versions of the property suites
# ---------------------------------------------------------------------------


def _cmd_check():
    checks = (
        ("diagonalization", _check_diagonalization),
        ("network-gradients", _check_network_gradients),
        ("brownian-moments", _check_brownian_moments),
        ("mean-exit-time", _check_mean_exit_time),
        ("exact-fields", _check_exact_fields),
        ("boundary-mechanics", _check_boundary_mechanics),
    )
    failures = 0
    for name, fn in checks:
        try:
            detail = fn()
        except AssertionError as exc:
            print(f"FAIL {name}: {exc}")
            failures += 1
        else:
            print(f"PASS {name}: {detail}")
    if failures:
        print(f"{failures} of {len(checks)} checks failed")
        return 1
    print(f"all {len(checks)} checks passed")
    return 0


def _check_diagonalization():
    """R diag(lam) R^-1 reproduces the system matrix for the benchmark settings."""
    settings = [(gamma, gamma, 0.01) for gamma in (0.5, 0.1, 0.05, 0.01)]
    settings.append((0.01, 0.0032, 0.02))
    worst = 0.0
    for gamma, S, delta in settings:
        diag = ch_diagonalize(5e-4, gamma, delta, S)
        rebuilt = diag.R @ np.diag([diag.lam1, diag.lam2]) @ diag.R_inv
        worst = max(worst, float(np.max(np.abs(rebuilt - diag.A))))
        vieta_sum = abs(diag.lam1 + diag.lam2 - S)
        vieta_prod = abs(diag.lam1 * diag.lam2 - gamma**2 * 5e-4 / delta)
        worst = max(worst, vieta_sum, vieta_prod)
    assert worst <= 1e-12, f"reconstruction error {worst:.2e} exceeds 1e-12"
    return f"{len(settings)} settings, worst error {worst:.2e}"


def _check_network_gradients():
    """Parameter gradients and input derivatives agree with finite differences."""
    rng = np.random.default_rng(20240817)
    worst = 0.0
    for activation in ("cos", "tanh"):
        net = Network(2, 2, hidden=(10, 10), activation=activation, seed=int(rng.integers(1 << 30)))
        x = rng.uniform(-1.0, 1.0, size=(4, 2))
        w_mix = rng.standard_normal((4, 2))

        def loss_value():
            return float(np.sum(w_mix * net.predict(0.3, x)))

        tape = Tape()
        ev = net.evaluate(tape, 0.3, x, want_jacobian=True)
        loss = ad.sum_rows(ad.sum_cols(ad.mul(ev.y, ad.constant(w_mix))))
        grads = grad_wrt(loss, [v for pair in net.params_on(tape) for v in pair])
        arrays = net.param_arrays()
        for _ in range(6):
            a = int(rng.integers(len(arrays)))
            idx = np.unravel_index(int(rng.integers(arrays[a].size)), arrays[a].shape)
            keep = arrays[a][idx]
            eps = 1e-6
            arrays[a][idx] = keep + eps
            up = loss_value()
            arrays[a][idx] = keep - eps
            down = loss_value()
            arrays[a][idx] = keep
            fd = (up - down) / (2 * eps)
            ad_val = float(grads[a][idx])
            worst = max(worst, abs(fd - ad_val) / max(abs(fd), abs(ad_val), 1e-8))
        for j in range(2):
            eps = 1e-6
            xp = x.copy()
            xp[:, j] += eps
            xm = x.copy()
            xm[:, j] -= eps
            fd = (net.predict(0.3, xp) - net.predict(0.3, xm)) / (2 * eps)
            rel = np.abs(fd - ev.jac[j].value) / np.maximum(np.abs(fd), 1e-6)
            worst = max(worst, float(rel.max()))
    assert worst <= 1e-5, f"worst relative mismatch {worst:.2e} exceeds 1e-5"
    return f"worst relative mismatch {worst:.2e}"


def _check_brownian_moments():
    """Increment sample mean and variance match sqrt(dt) scaling."""
    dt = 0.01
    batch = BrownianBatch.draw(500, 40, 5, 1, dt, seed=7, iteration=0)
    inc = batch.channel(0).reshape(-1)
    n = inc.size
    mean_bound = 4.0 * math.sqrt(dt) / math.sqrt(n)
    mean = abs(float(inc.mean()))
    var_rel = abs(float(inc.var()) / dt - 1.0)
    assert mean <= mean_bound, f"mean {mean:.2e} exceeds CLT bound {mean_bound:.2e}"
    assert var_rel <= 0.05, f"variance off by {var_rel:.1%}"
    return f"{n} increments, |mean| {mean:.1e} <= {mean_bound:.1e}, var off {var_rel:.2%}"


def _check_mean_exit_time():
    """Mean exit time of a stopped 1-D diffusion matches x(1-x)/(2c)."""
    coef, dt, n_steps, k = 0.5, 2e-3, 1500, 2000
    geometry = Box([0.0], [1.0])
    x0 = np.full((k, 1), 0.5)
    batch = BrownianBatch.draw(k, n_steps, 1, 1, dt, seed=11, iteration=0)
    bundle = euler_forward(
        x0, coef, batch.channel(0), geometry=geometry, mode="dirichlet",
        rng=rng_for(11, "paths", 0), dt=dt,
    )
    exits = np.minimum(bundle.exit_step, n_steps)
    mean_tau = float(exits.mean()) * dt
    expect = 0.5 * 0.5 / (2 * coef)
    rel = abs(mean_tau - expect) / expect
    assert rel <= 0.10, f"mean exit time {mean_tau:.4f} vs {expect:.4f} ({rel:.1%} off)"
    return f"mean exit {mean_tau:.4f} vs analytic {expect:.4f} ({rel:.2%} off)"


def _check_exact_fields():
    """The reference flow is divergence-free and matches its stated terminal data."""
    rng = np.random.default_rng(3)
    x = rng.uniform(0.0, 2 * math.pi, size=(200, 2))
    forward = TaylorGreen2D(nu=0.1)
    jac = forward.jac_u(0.07, x)
    div = jac[:, 0, 0] + jac[:, 1, 1]
    worst_div = float(np.max(np.abs(div)))
    assert worst_div <= 1e-10, f"divergence {worst_div:.2e} exceeds 1e-10"
    backward = time_reverse_adapter(forward, T=0.1)
    gap = np.abs(backward.g_u(x) - backward.u(0.1, x)).max()
    assert gap <= 1e-14, f"terminal data mismatch {gap:.2e}"
    return f"max divergence {worst_div:.2e}, terminal gap {gap:.2e}"


def _check_boundary_mechanics():
    """Stopped paths land on the boundary; reflected paths stay inside."""
    geometry = Box([0.0, 0.0], [1.0, 1.0])
    k, n_steps, dt = 300, 60, 0.01
    x0 = rng_for(5, "init", 0).uniform(0.2, 0.8, size=(k, 2))
    batch = BrownianBatch.draw(k, n_steps, 2, 2, dt, seed=5, iteration=0)

    stopped = euler_forward(
        x0, 1.0, batch.channel(0), geometry=geometry, mode="dirichlet",
        rng=rng_for(5, "paths", 0, 0), dt=dt,
    )
    exited = stopped.exit_step <= n_steps
    assert exited.any(), "no path reached the boundary"
    pts = stopped.exit_point[exited]
    on_face = np.min(np.abs(np.concatenate([pts, 1.0 - pts], axis=1)), axis=1)
    worst_face = float(on_face.max())
    assert worst_face <= 1e-9, f"exit point off the boundary by {worst_face:.2e}"
    rebuilt = stopped.states[:, :-1] + math.sqrt(2.0) * stopped.repaired_increments
    gap = float(np.max(np.abs((rebuilt - stopped.states[:, 1:])[stopped.step_active])))
    assert gap <= 1e-9, f"path increments inconsistent by {gap:.2e}"

    reflected = euler_forward(
        x0, 1.0, batch.channel(1), geometry=geometry, mode="neumann",
        rng=rng_for(5, "paths", 0, 1), dt=dt,
    )
    inside = geometry.inside(reflected.states.reshape(-1, 2))
    assert inside.all(), "a reflected path escaped the domain"
    assert reflected.reflected.any(), "no reflection was exercised"
    return f"{int(exited.sum())} stopped paths on the boundary, reflected paths stay inside"


if __name__ == "__main__":
    sys.exit(main())
