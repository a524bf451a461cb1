"""Benchmark experiment registry, runner, and artifact writing."""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np

from .fnn import CavityWrapper, Network, ObstacleWrapper, PeriodicEmbedding, save_checkpoint
from .metrics import (
    MetricsReport,
    config_hash,
    emit_fields,
    field_grid,
    median_report,
    reference_errors,
    draw_test_points,
)
from .problems import BoundarySpec, DirichletData, NavierStokesSpec, ProblemSetup, problem_from_config
from .geometry import Box, BoxMinusDisk
from .trainer import (
    DESK_SEGMENTS,
    FULL_SEGMENTS,
    AuxSpec,
    Curriculum,
    LossWeights,
    MassSpec,
    Trainer,
    TrainSchedule,
)

TWO_PI = 2.0 * math.pi
ROOT_TWO = math.sqrt(2.0)


class ExperimentConfig:
    """A run request: experiment id plus optional overrides.

    Unset overrides fall back to the experiment's defaults.  `iterations`
    rescales the schedule segments proportionally (0 skips training);
    `full_budget` switches from the short default schedule to the long one.
    """

    _FIELDS = (
        "experiment",
        "d",
        "gamma",
        "nu",
        "seeds",
        "full_budget",
        "iterations",
        "dt",
        "N",
        "K",
        "weights",
        "curriculum",
        "out",
        "n_test",
        "grid_n",
    )

    def __init__(self, experiment, d=None, gamma=None, nu=None, seeds=(0, 1, 2),
                 full_budget=False, iterations=None, dt=None, N=None, K=None,
                 weights=None, curriculum=None, out=None, n_test=10000, grid_n=None):
        self.experiment = str(experiment)
        self.d = None if d is None else int(d)
        self.gamma = None if gamma is None else float(gamma)
        self.nu = None if nu is None else float(nu)
        if np.isscalar(seeds):
            seeds = (seeds,)
        self.seeds = tuple(int(s) for s in seeds)
        if not self.seeds:
            raise ValueError("need at least one seed")
        self.full_budget = bool(full_budget)
        self.iterations = None if iterations is None else int(iterations)
        self.dt = None if dt is None else float(dt)
        self.N = None if N is None else int(N)
        self.K = None if K is None else int(K)
        self.weights = None if weights is None else tuple(float(w) for w in weights)
        if self.weights is not None and not 1 <= len(self.weights) <= 3:
            raise ValueError("weights take one to three entries")
        self.curriculum = None if curriculum is None else float(curriculum)
        self.out = None if out is None else str(out)
        self.n_test = int(n_test)
        self.grid_n = None if grid_n is None else int(grid_n)

    @classmethod
    def from_dict(cls, doc):
        unknown = sorted(set(doc) - set(cls._FIELDS))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        if "experiment" not in doc:
            raise ValueError("config needs an experiment id")
        return cls(**doc)

    def to_dict(self):
        return {name: getattr(self, name) for name in self._FIELDS}


def scale_segments(segments, total):
    """Rescale segment lengths proportionally to a new total iteration count."""
    total = int(total)
    if total < 0:
        raise ValueError("iteration count must be nonnegative")
    base = sum(n for n, _ in segments)
    counts = [int(round(n * total / base)) for n, _ in segments]
    drift = total - sum(counts)
    for i in range(len(counts) - 1, -1, -1):
        take = max(-counts[i], drift) if drift < 0 else drift
        counts[i] += take
        drift -= take
        if drift == 0:
            break
    return tuple((c, lr) for c, (_, lr) in zip(counts, segments))


def _resolve_steps(cfg, T, n_default):
    """Step count and size from overrides, holding N * dt = T."""
    if cfg.N is not None and cfg.dt is not None:
        if abs(cfg.N * cfg.dt - T) > 1e-9:
            raise ValueError(f"N * dt must equal T = {T}")
        return cfg.N, cfg.dt
    if cfg.N is not None:
        return cfg.N, T / cfg.N
    if cfg.dt is not None:
        n = round(T / cfg.dt)
        if n < 1 or abs(n * cfg.dt - T) > 1e-9:
            raise ValueError(f"dt must divide T = {T}")
        return n, cfg.dt
    return n_default, T / n_default


def _resolve_schedule(cfg, K_default=100):
    segments = FULL_SEGMENTS if cfg.full_budget else DESK_SEGMENTS
    if cfg.iterations is not None:
        segments = scale_segments(segments, cfg.iterations)
    return TrainSchedule(segments=segments, K=cfg.K if cfg.K is not None else K_default)


def _resolve_weights(cfg, default):
    if cfg.weights is None:
        return LossWeights(*default)
    return LossWeights(*cfg.weights)


def _resolve_curriculum(cfg, default_fraction):
    fraction = cfg.curriculum if cfg.curriculum is not None else default_fraction
    if fraction is None or fraction == 0.0:
        return None
    return Curriculum(fraction)


class ExperimentPlan:
    """Everything needed to run one experiment: problem, schedule, networks."""

    def __init__(self, config, setup, N, schedule, weights, networks,
                 aux=None, curriculum=None, mass=None, snapshot_times=(),
                 grid_n=21, notes=""):
        self.config = config
        self.setup = setup
        self.N = int(N)
        self.schedule = schedule
        self.weights = weights
        self.networks = networks  # callable seed -> {name: Network}
        self.aux = aux
        self.curriculum = curriculum
        self.mass = mass
        self.snapshot_times = tuple(float(t) for t in snapshot_times)
        self.grid_n = config.grid_n if config.grid_n is not None else grid_n
        self.notes = notes

    def describe(self):
        """Resolved parameters as a plain mapping, used for the config hash."""
        spec = self.setup.spec
        coef = {}
        for name in ("nu", "C", "L_d", "gamma", "delta", "S"):
            if hasattr(spec, name):
                coef[name] = getattr(spec, name)
        doc = {
            "experiment": self.config.experiment,
            "problem": spec.problem,
            "d": spec.d,
            "T": self.setup.T,
            "N": self.N,
            "dt": self.setup.T / self.N,
            "K": self.schedule.K,
            "segments": [[n, lr] for n, lr in self.schedule.segments],
            "weights": [self.weights.alpha1, self.weights.alpha2, self.weights.alpha3],
            "coefficients": coef,
            "boundary": spec.boundary.kind,
            "domain": spec.boundary.geometry.to_dict(),
            "curriculum": None if self.curriculum is None else self.curriculum.fraction,
            "aux": None if self.aux is None else {
                "kind": self.aux.kind,
                "K_b": self.aux.K_b,
                "lid_speed": self.aux.lid_speed,
                "u_in": self.aux.u_in,
            },
            "mass": None if self.mass is None else {
                "n_points": self.mass.n_points,
                "stride": self.mass.stride,
            },
            "n_test": self.config.n_test,
        }
        return doc


def _flow_networks(d, wrapper=None, activation="cos"):
    def build(seed):
        return {
            "u": Network(
                d,
                d + 1,
                activation=activation,
                wrapper=None if wrapper is None else wrapper(),
                seed=2 * seed,
            )
        }

    return build


def _phase_networks(d, embedding=None, activation="cos"):
    def build(seed):
        return {
            "phase": Network(
                d,
                2,
                activation=activation,
                embedding=None if embedding is None else embedding(),
                seed=2 * seed,
            )
        }

    return build


def _coupled_networks(d, phase_activation="cos"):
    def build(seed):
        return {
            "u": Network(d, d + 1, activation="cos", seed=2 * seed),
            "phase": Network(d, 2, activation=phase_activation, seed=2 * seed + 1),
        }

    return build


# ---------------------------------------------------------------------------
# Builders, one per experiment id
# ---------------------------------------------------------------------------


def _taylor_green_plan(cfg, boundary_kind):
    T = 0.1
    N, _ = _resolve_steps(cfg, T, 5)
    nu = cfg.nu if cfg.nu is not None else 0.1
    setup = problem_from_config({
        "problem": "ns",
        "T": T,
        "coefficients": {"nu": nu},
        "domain": {"kind": "box", "lows": [0.0, 0.0], "highs": [TWO_PI, TWO_PI]},
        "boundary": {"kind": boundary_kind},
        "exact": "taylor-green-2d",
    })
    return ExperimentPlan(
        cfg,
        setup,
        N,
        _resolve_schedule(cfg),
        _resolve_weights(cfg, (0.1, 0.1)),
        _flow_networks(2),
        curriculum=_resolve_curriculum(cfg, None),
        snapshot_times=(0.0, T / 2, T),
    )


def _plan_tg2d(cfg):
    return _taylor_green_plan(cfg, "whole-space")


def _plan_tg2d_dirichlet(cfg):
    return _taylor_green_plan(cfg, "dirichlet")


def _plan_tg2d_neumann(cfg):
    return _taylor_green_plan(cfg, "neumann")


def _plan_abc3d(cfg):
    T = 0.1
    N, _ = _resolve_steps(cfg, T, 5)
    nu = cfg.nu if cfg.nu is not None else 0.1
    setup = problem_from_config({
        "problem": "ns",
        "T": T,
        "coefficients": {"nu": nu},
        "domain": {
            "kind": "box",
            "lows": [0.0, 0.0, 0.0],
            "highs": [TWO_PI, TWO_PI, TWO_PI],
        },
        "boundary": {"kind": "whole-space"},
        "exact": "abc-flow-3d",
    })
    return ExperimentPlan(
        cfg,
        setup,
        N,
        _resolve_schedule(cfg),
        _resolve_weights(cfg, (0.1, 0.1)),
        _flow_networks(3),
        curriculum=_resolve_curriculum(cfg, None),
        snapshot_times=(0.0, T / 2, T),
        grid_n=11,
    )


def _zero_rows(m):
    def fn(t, x):
        return np.zeros((x.shape[0], m))

    return fn


def _plan_cavity(cfg):
    T = 0.5
    N, _ = _resolve_steps(cfg, T, 25)
    nu = cfg.nu if cfg.nu is not None else 0.1
    geometry = Box([0.0, 0.0], [1.0, 1.0])

    def lid(t, x):
        vals = np.zeros((x.shape[0], 2))
        vals[:, 0] = -1.0
        return vals

    zero = _zero_rows(2)
    full = (1.0, 1.0)
    h = DirichletData(pieces={0: (zero, full), 1: (zero, full), 2: (zero, full), 3: (lid, full)})
    boundary = BoundarySpec("dirichlet", geometry, h=h)
    spec = NavierStokesSpec(2, nu, _zero_rows(2), _zero_rows(2), boundary)
    return ExperimentPlan(
        cfg,
        ProblemSetup(spec, T),
        N,
        _resolve_schedule(cfg),
        _resolve_weights(cfg, (0.01, 0.01, 0.01)),
        _flow_networks(2, wrapper=CavityWrapper),
        aux=AuxSpec("cavity", K_b=100, lid_speed=1.0),
        curriculum=_resolve_curriculum(cfg, 0.3),
        snapshot_times=(0.0, T / 2, T),
    )


def _plan_obstacle(cfg):
    T = 1.0
    N, _ = _resolve_steps(cfg, T, 50)
    nu = cfg.nu if cfg.nu is not None else 0.025
    u_in = 3.0
    geometry = BoxMinusDisk([-2.0, -2.0], [10.0, 2.0], [0.0, 0.0], 0.5)

    def inlet(t, x):
        vals = np.zeros((x.shape[0], 2))
        vals[:, 0] = -u_in
        return vals

    zero = _zero_rows(2)
    h = DirichletData(pieces={
        0: (inlet, (1.0, 1.0)),          # inlet: plug flow
        2: (zero, (0.0, 1.0)),           # walls: only the normal component pinned
        3: (zero, (0.0, 1.0)),
        geometry.disk_code: (zero, (1.0, 1.0)),  # obstacle: no slip
    })
    boundary = BoundarySpec("dirichlet", geometry, h=h, reflect_codes=(1,))
    spec = NavierStokesSpec(2, nu, _zero_rows(2), _zero_rows(2), boundary)
    return ExperimentPlan(
        cfg,
        ProblemSetup(spec, T),
        N,
        _resolve_schedule(cfg),
        _resolve_weights(cfg, (0.01, 0.01, 0.01)),
        _flow_networks(2, wrapper=ObstacleWrapper),
        aux=AuxSpec("obstacle", K_b=100, u_in=u_in),
        curriculum=_resolve_curriculum(cfg, 0.3),
        snapshot_times=(0.0, T / 2, T),
        grid_n=25,
    )


def _phase_plan(cfg, domain, boundary, periods=None, grid_n=21):
    T = 0.1
    N, dt = _resolve_steps(cfg, T, 10)
    d = cfg.d if cfg.d is not None else 2
    gamma = cfg.gamma if cfg.gamma is not None else 0.1
    setup = problem_from_config({
        "problem": "ch",
        "T": T,
        "coefficients": {"gamma": gamma, "L_d": 5e-4, "delta": dt, "S": gamma},
        "domain": domain(d),
        "boundary": boundary,
        "exact": "ch-cosine",
    })
    if periods is not None:
        def embedding():
            return PeriodicEmbedding(periods, harmonics=1)
    else:
        embedding = None
    default_alpha1 = 0.01 if boundary["kind"] == "whole-space" else 1.0
    return ExperimentPlan(
        cfg,
        setup,
        N,
        _resolve_schedule(cfg),
        _resolve_weights(cfg, (default_alpha1,)),
        _phase_networks(d, embedding=embedding),
        curriculum=_resolve_curriculum(cfg, None),
        snapshot_times=(0.0, T / 2, T),
        grid_n=grid_n,
    )


def _plan_ch_freespace(cfg):
    return _phase_plan(
        cfg,
        lambda d: {"kind": "box", "lows": [-1.0] * d, "highs": [1.0] * d},
        {"kind": "whole-space"},
    )


def _plan_ch_mixed(cfg):
    return _phase_plan(
        cfg,
        lambda d: {"kind": "ball", "center": [0.0] * d, "radius": 1.0},
        {"kind": "mixed"},
    )


def _plan_ch_periodic(cfg):
    if cfg.d is not None and cfg.d != 2:
        raise ValueError("the periodic experiment is planar (d = 2)")
    period = 2.0 * ROOT_TWO
    return _phase_plan(
        cfg,
        lambda d: {"kind": "box", "lows": [-ROOT_TWO] * 2, "highs": [ROOT_TWO] * 2},
        {"kind": "periodic", "periods": [period, period]},
        periods=(period, period),
    )


def _plan_chns_exact(cfg):
    T = 0.1
    N, dt = _resolve_steps(cfg, T, 5)
    setup = problem_from_config({
        "problem": "chns",
        "T": T,
        "coefficients": {
            "nu": cfg.nu if cfg.nu is not None else 1e-3,
            "C": 1.0,
            "L_d": 5e-4,
            "gamma": cfg.gamma if cfg.gamma is not None else 0.01,
            "delta": dt,
            "S": 0.0032,
        },
        "domain": {"kind": "box", "lows": [0.0, 0.0], "highs": [TWO_PI, TWO_PI]},
        "boundary": {"kind": "whole-space"},
        "exact": "chns-exact",
    })
    return ExperimentPlan(
        cfg,
        setup,
        N,
        _resolve_schedule(cfg),
        _resolve_weights(cfg, (0.01, 0.01, 0.01)),
        _coupled_networks(2),
        curriculum=_resolve_curriculum(cfg, None),
        snapshot_times=(0.0, T / 2, T),
    )


def _plan_chns_bubbles(cfg):
    T = 3.0
    N, dt = _resolve_steps(cfg, T, 300)
    gamma = cfg.gamma if cfg.gamma is not None else 0.03
    setup = problem_from_config({
        "problem": "chns",
        "T": T,
        "coefficients": {
            "nu": cfg.nu if cfg.nu is not None else 1.0,
            "C": 10.0,
            "L_d": 1.0,
            "gamma": gamma,
            "delta": dt,
            "S": 3.3,
        },
        "domain": {"kind": "box", "lows": [-1.0, -1.0], "highs": [1.0, 1.0]},
        "boundary": {"kind": "whole-space"},
        "exact": None,
        "initial": {"id": "two-bubble", "r": 0.4, "gamma": gamma},
    })
    if cfg.full_budget:
        mass = MassSpec(n_points=10000, stride=1)
    else:
        mass = MassSpec(n_points=2000, stride=10)
    return ExperimentPlan(
        cfg,
        setup,
        N,
        _resolve_schedule(cfg),
        _resolve_weights(cfg, (0.01, 0.01, 0.01)),
        _coupled_networks(2, phase_activation="tanh"),
        curriculum=_resolve_curriculum(cfg, 0.3),
        mass=mass,
        snapshot_times=(0.0, 0.2, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0),
    )


_BUILDERS = {
    "tg2d": _plan_tg2d,
    "abc3d": _plan_abc3d,
    "tg2d-dirichlet": _plan_tg2d_dirichlet,
    "tg2d-neumann": _plan_tg2d_neumann,
    "cavity": _plan_cavity,
    "obstacle": _plan_obstacle,
    "ch-freespace": _plan_ch_freespace,
    "ch-mixed": _plan_ch_mixed,
    "ch-periodic": _plan_ch_periodic,
    "chns-exact": _plan_chns_exact,
    "chns-bubbles": _plan_chns_bubbles,
}

EXPERIMENT_IDS = tuple(sorted(_BUILDERS))


def build_plan(config):
    """Resolve an ExperimentConfig (or dict) into a runnable plan."""
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    if config.experiment not in _BUILDERS:
        raise ValueError(
            f"unknown experiment {config.experiment!r}; known ids: "
            + ", ".join(EXPERIMENT_IDS)
        )
    return _BUILDERS[config.experiment](config)


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

_PRIMARY = {"ns": "u1", "ch": "phi", "chns": "u1"}


def _median_run_index(reports, key):
    """Index of the run whose key error sits at the median."""
    if not reports[0].errors:
        return 0
    values = [r.errors[key].l2 for r in reports]
    target = float(np.median(values))
    return int(np.argmin([abs(v - target) for v in values]))


def run_experiment(config, log=None):
    """Train one experiment per seed, score it, and write artifacts.

    Returns (median MetricsReport, per-seed reports).  Artifacts under the
    output directory: report.json, loss-seed<k>.csv, checkpoint-seed<k>.json,
    and fields.csv (domains of at most three dimensions).
    """
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    plan = build_plan(config)
    spec = plan.setup.spec
    out = Path(config.out if config.out is not None else f"results/{config.experiment}")
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(plan.describe())

    geometry = spec.boundary.geometry
    points = draw_test_points(geometry, n=config.n_test, seed=config.seeds[0])

    reports = []
    trained = []
    for seed in config.seeds:
        networks = plan.networks(seed)
        trainer = Trainer(
            spec,
            T=plan.setup.T,
            N=plan.N,
            networks=networks,
            schedule=plan.schedule,
            weights=plan.weights,
            aux=plan.aux,
            curriculum=plan.curriculum,
            mass=plan.mass,
            seed=seed,
        )
        start = time.perf_counter()
        csv_path = out / f"loss-seed{seed}.csv"
        history = trainer.train(csv_path=csv_path)
        wall = time.perf_counter() - start
        if not history and not csv_path.exists():
            csv_path.write_text(
                "iteration,lr,total,residual,terminal,divergence,boundary_extra,mass\n"
            )
        errors = reference_errors(plan.setup, networks, points, t=0.0)
        extra = {
            "iterations": plan.schedule.total,
            "final_loss": history[-1]["total"] if history else None,
        }
        report = MetricsReport(config.experiment, seed, chash, wall, errors, extra)
        reports.append(report)
        trained.append(networks)
        save_checkpoint(
            out / f"checkpoint-seed{seed}.json",
            networks,
            meta={
                "experiment": config.experiment,
                "seed": seed,
                "iterations": plan.schedule.total,
                "T": plan.setup.T,
                "domain": geometry.to_dict(),
            },
        )
        if log is not None:
            log(f"seed {seed}: {wall:.1f} s, {_summary_line(report)}")

    median = median_report(reports)
    doc = {
        "experiment": config.experiment,
        "config": plan.describe(),
        "config_hash": chash,
        "median": median.to_dict(),
        "runs": [r.to_dict() for r in reports],
    }
    with open(out / "report.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if spec.d <= 3 and plan.snapshot_times:
        pick = _median_run_index(reports, _PRIMARY[spec.problem])
        grid = field_grid(geometry, plan.grid_n)
        emit_fields(out / "fields.csv", trained[pick], grid, plan.snapshot_times)
    return median, reports


def _summary_line(report):
    if not report.errors:
        return "no reference solution (see loss CSV and field snapshots)"
    parts = []
    for name, pair in sorted(report.errors.items()):
        label = "abs" if pair.absolute else "rel"
        parts.append(f"{name} {label}L2 {pair.l2:.3e}")
    return ", ".join(parts)
