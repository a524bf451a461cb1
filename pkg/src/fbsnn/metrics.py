"""Relative-error metrics, run reports, and field-snapshot CSV output."""

from __future__ import annotations

import csv
import hashlib
import json
from typing import NamedTuple

import numpy as np

from .autodiff import Tape
from .geometry import AllSpace, Ball, Box, BoxMinusDisk
from .sampling import rng_for, sample_domain


class ErrorPair(NamedTuple):
    """Relative (or, when flagged, absolute) max-norm and RMS-norm errors."""

    linf: float
    l2: float
    absolute: bool = False


def relative_errors(numeric, exact, points=None):
    """Discrete errors of a numeric field against a reference on test points.

    numeric / exact: (n, m) value arrays, or callables mapping an (n, d)
    point array to one.  Columns are pooled, so a multi-column field is
    scored as one vector field.  linf is the ratio of max magnitudes, l2
    the ratio of root-mean-square magnitudes.  A reference that vanishes
    at every test point switches both entries to absolute norms and sets
    the flag.
    """
    num = np.asarray(numeric(points) if callable(numeric) else numeric, dtype=float)
    ref = np.asarray(exact(points) if callable(exact) else exact, dtype=float)
    if num.shape != ref.shape:
        raise ValueError(f"field shapes differ: {num.shape} vs {ref.shape}")
    if num.size == 0:
        raise ValueError("empty test set")
    err = num - ref
    err_inf = float(np.max(np.abs(err)))
    err_l2 = float(np.sqrt(np.mean(err * err)))
    ref_inf = float(np.max(np.abs(ref)))
    if ref_inf == 0.0:
        return ErrorPair(err_inf, err_l2, True)
    ref_l2 = float(np.sqrt(np.mean(ref * ref)))
    return ErrorPair(err_inf / ref_inf, err_l2 / ref_l2, False)


def draw_test_points(geometry, n=10000, seed=0, box=None):
    """Fresh evaluation points; the stream is separate from every training draw."""
    return sample_domain(rng_for(seed, "test-points"), n, geometry, box=box)


def head_gradient(net, t, x, head, chunk=2048):
    """Spatial gradient of one output head, exact through the network."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for lo in range(0, x.shape[0], chunk):
        block = x[lo : lo + chunk]
        ev = net.evaluate(Tape(), t, block, want_jacobian=True)
        for j in range(x.shape[1]):
            out[lo : lo + chunk, j] = ev.jac[j].value[:, head]
    return out


def reference_errors(setup, networks, points, t=0.0):
    """Errors of trained networks against the problem's reference fields.

    Velocity components are scored separately and the pressure gradient
    jointly; phase problems add phi and mu.  Returns {} when the problem
    carries no reference solution.
    """
    backward = setup.backward
    if backward is None:
        return {}
    spec = setup.spec
    d = spec.d
    out = {}
    if spec.problem in ("ns", "chns"):
        net = networks["u"]
        vals = net.predict(t, points)
        exact_u = backward.u(t, points)
        for j in range(d):
            out[f"u{j + 1}"] = relative_errors(
                vals[:, j : j + 1], exact_u[:, j : j + 1], points
            )
        out["grad_p"] = relative_errors(
            head_gradient(net, t, points, head=d), backward.grad_p(t, points), points
        )
    if spec.problem in ("ch", "chns"):
        net = networks["phase"]
        vals = net.predict(t, points)
        out["phi"] = relative_errors(vals[:, 0:1], backward.phi(t, points), points)
        out["mu"] = relative_errors(vals[:, 1:2], backward.mu(t, points), points)
    return out


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


class MetricsReport:
    """Evaluation summary of one run, or the median of several.

    seed is an int for a single run and a list of ints for a median report;
    errors maps component names to ErrorPair entries.
    """

    def __init__(self, experiment, seed, config_hash, wall_clock, errors, extra=None):
        self.experiment = str(experiment)
        self.seed = seed
        self.config_hash = str(config_hash)
        self.wall_clock = float(wall_clock)
        self.errors = {
            name: pair if isinstance(pair, ErrorPair) else ErrorPair(*pair)
            for name, pair in errors.items()
        }
        self.extra = dict(extra or {})

    def to_dict(self):
        return {
            "experiment": self.experiment,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "wall_clock": self.wall_clock,
            "errors": {
                name: {"linf": pair.linf, "l2": pair.l2, "absolute": bool(pair.absolute)}
                for name, pair in sorted(self.errors.items())
            },
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, doc):
        errors = {
            name: ErrorPair(rec["linf"], rec["l2"], bool(rec.get("absolute", False)))
            for name, rec in doc.get("errors", {}).items()
        }
        return cls(
            doc["experiment"],
            doc["seed"],
            doc["config_hash"],
            doc["wall_clock"],
            errors,
            doc.get("extra"),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def median_report(reports):
    """Componentwise median across same-config runs; seeds are collected."""
    if not reports:
        raise ValueError("need at least one report")
    first = reports[0]
    for r in reports[1:]:
        if r.experiment != first.experiment or r.config_hash != first.config_hash:
            raise ValueError("reports mix experiments or configurations")
        if set(r.errors) != set(first.errors):
            raise ValueError("reports carry different error components")
    errors = {}
    for name in first.errors:
        errors[name] = ErrorPair(
            float(np.median([r.errors[name].linf for r in reports])),
            float(np.median([r.errors[name].l2 for r in reports])),
            any(r.errors[name].absolute for r in reports),
        )
    return MetricsReport(
        first.experiment,
        [r.seed for r in reports],
        first.config_hash,
        float(np.median([r.wall_clock for r in reports])),
        errors,
        extra={"runs": len(reports)},
    )


# ---------------------------------------------------------------------------
# Config hashing
# ---------------------------------------------------------------------------


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def canonical_json(obj):
    """Deterministic JSON: sorted keys, numpy values and tuples normalized."""
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))


def config_hash(config):
    """sha256 hex digest of the canonical JSON form of a config mapping."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Field snapshots
# ---------------------------------------------------------------------------


def field_grid(geometry, n, box=None):
    """Regular n-per-axis grid over the geometry's bounding box, kept inside.

    Points are in row-major order over the axes.  Grids keep the closure of
    the domain: box faces and circles stay, but points strictly inside a
    removed disk or strictly outside a ball are dropped.
    """
    if n < 2:
        raise ValueError("need at least two points per axis")
    keep = None
    if isinstance(geometry, AllSpace):
        if box is None:
            raise ValueError("all-space grids need a bounding box")
        lows, highs = box.lows, box.highs
    elif isinstance(geometry, Box):
        lows, highs = geometry.lows, geometry.highs
    elif isinstance(geometry, Ball):
        lows = geometry.center - geometry.radius
        highs = geometry.center + geometry.radius

        def keep(pts):
            dist = np.linalg.norm(pts - geometry.center, axis=1)
            return dist <= geometry.radius * (1.0 + 1e-12)

    elif isinstance(geometry, BoxMinusDisk):
        lows, highs = geometry.box.lows, geometry.box.highs

        def keep(pts):
            dist = np.linalg.norm(pts - geometry.disk.center, axis=1)
            return dist >= geometry.disk.radius * (1.0 - 1e-12)

    else:
        raise TypeError(f"cannot grid {type(geometry).__name__}")
    axes = [np.linspace(lo, hi, int(n)) for lo, hi in zip(lows, highs)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
    if keep is not None:
        pts = pts[keep(pts)]
    return pts


def head_names(name, d_out, d):
    """Stable column names for a network's output heads."""
    if name == "u" and d_out == d + 1:
        return [f"u{j + 1}" for j in range(d)] + ["p"]
    if name == "phase" and d_out == 2:
        return ["phi", "mu"]
    if d_out == 1:
        return [name]
    return [f"{name}{j + 1}" for j in range(d_out)]


def field_columns(networks, d):
    """Header of an emitted field table: time, coordinates, head values."""
    header = ["t"] + [f"x{j + 1}" for j in range(d)]
    for name in sorted(networks):
        header.extend(head_names(name, networks[name].d_out, d))
    return header


def emit_fields(path, networks, points, times):
    """Write field snapshots as CSV rows (t, coordinates, head values).

    Values are the networks' plain forward evaluations, written in full
    precision so a reader recovers them bit for bit.  Returns the header.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("points must be a nonempty (n, d) array")
    d = points.shape[1]
    ordered = [(name, networks[name]) for name in sorted(networks)]
    header = field_columns(networks, d)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in times:
            t = float(t)
            values = np.concatenate([net.predict(t, points) for _, net in ordered], axis=1)
            for i in range(points.shape[0]):
                writer.writerow(
                    [repr(t)]
                    + [repr(float(v)) for v in points[i]]
                    + [repr(float(v)) for v in values[i]]
                )
    return header
