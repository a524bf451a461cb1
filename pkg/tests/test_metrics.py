"""Tests for error metrics, reports, hashing, and field snapshots."""

import csv
import json
import math

import numpy as np
import pytest

from fbsnn.fnn import Network
from fbsnn.geometry import AllSpace, Ball, Box, BoxMinusDisk
from fbsnn.metrics import (
    ErrorPair,
    MetricsReport,
    canonical_json,
    config_hash,
    emit_fields,
    field_columns,
    field_grid,
    head_gradient,
    median_report,
    reference_errors,
    relative_errors,
    draw_test_points,
)
from fbsnn.problems import problem_from_config

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# relative_errors
# ---------------------------------------------------------------------------


def test_identical_fields_have_zero_errors():
    rng = np.random.default_rng(0)
    vals = rng.standard_normal((50, 2))
    pair = relative_errors(vals, vals.copy())
    assert pair == ErrorPair(0.0, 0.0, False)


def test_proportional_fields_give_the_scale_gap():
    rng = np.random.default_rng(1)
    exact = rng.standard_normal((200, 1))
    pair = relative_errors(1.01 * exact, exact)
    assert abs(pair.linf - 0.01) <= 1e-12
    assert abs(pair.l2 - 0.01) <= 1e-12
    assert not pair.absolute


def test_single_point_spike_matches_hand_norms():
    # constant reference c over n points, one numeric entry off by h:
    # relLinf = h / c, relL2 = (h / c) * sqrt(1 / n)
    n, c, h = 400, 2.0, 0.5
    exact = np.full((n, 1), c)
    numeric = exact.copy()
    numeric[17, 0] += h
    pair = relative_errors(numeric, exact)
    assert abs(pair.linf - h / c) <= 1e-12
    assert abs(pair.l2 - (h / c) * math.sqrt(1.0 / n)) <= 1e-12


def test_vanishing_reference_reports_absolute_norms():
    numeric = np.array([[0.3], [-0.4], [0.0]])
    pair = relative_errors(numeric, np.zeros((3, 1)))
    assert pair.absolute
    assert pair.linf == pytest.approx(0.4, abs=1e-15)
    assert pair.l2 == pytest.approx(math.sqrt(0.25 / 3), abs=1e-15)


def test_scaling_both_fields_leaves_errors_unchanged():
    rng = np.random.default_rng(2)
    exact = rng.standard_normal((100, 3)) + 0.5
    numeric = exact + 0.01 * rng.standard_normal((100, 3))
    base = relative_errors(numeric, exact)
    for scale in (1e-8, -3.7, 2.5e5):
        pair = relative_errors(scale * numeric, scale * exact)
        assert abs(pair.linf - base.linf) <= 1e-12 * max(1.0, base.linf)
        assert abs(pair.l2 - base.l2) <= 1e-12 * max(1.0, base.l2)


def test_field_samplers_are_called_on_the_points():
    pts = np.linspace(0.0, 1.0, 7)[:, None]
    pair = relative_errors(lambda x: 2.0 * x, lambda x: x, pts)
    assert pair.linf == pytest.approx(1.0)
    assert pair.l2 == pytest.approx(1.0)


def test_mismatched_shapes_are_rejected():
    with pytest.raises(ValueError):
        relative_errors(np.zeros((3, 1)), np.zeros((4, 1)))


# ---------------------------------------------------------------------------
# evaluation points
# ---------------------------------------------------------------------------


def test_test_points_are_deterministic_and_inside():
    box = Box([0.0, -1.0], [2.0, 1.0])
    a = draw_test_points(box, n=500, seed=3)
    b = draw_test_points(box, n=500, seed=3)
    assert np.array_equal(a, b)
    assert a.shape == (500, 2)
    assert box.inside(a).all()
    c = draw_test_points(box, n=500, seed=4)
    assert not np.array_equal(a, c)


def test_test_points_on_all_space_need_a_box():
    with pytest.raises(ValueError):
        draw_test_points(AllSpace(2), n=10, seed=0)


# ---------------------------------------------------------------------------
# head gradient and reference errors
# ---------------------------------------------------------------------------


def test_head_gradient_matches_finite_differences():
    net = Network(2, 3, hidden=(12, 12), seed=5)
    rng = np.random.default_rng(6)
    x = rng.uniform(-1.0, 1.0, size=(40, 2))
    grad = head_gradient(net, 0.4, x, head=2, chunk=16)
    eps = 1e-6
    for j in range(2):
        xp, xm = x.copy(), x.copy()
        xp[:, j] += eps
        xm[:, j] -= eps
        fd = (net.predict(0.4, xp)[:, 2] - net.predict(0.4, xm)[:, 2]) / (2 * eps)
        assert np.max(np.abs(fd - grad[:, j])) <= 1e-6


def _tg_setup():
    return problem_from_config({
        "problem": "ns",
        "T": 0.1,
        "coefficients": {"nu": 0.1},
        "domain": {"kind": "box", "lows": [0.0, 0.0], "highs": [TWO_PI, TWO_PI]},
        "boundary": {"kind": "whole-space"},
        "exact": "taylor-green-2d",
    })


def test_reference_errors_components_and_consistency():
    setup = _tg_setup()
    nets = {"u": Network(2, 3, hidden=(8,), seed=7)}
    pts = draw_test_points(setup.spec.boundary.geometry, n=300, seed=0)
    errors = reference_errors(setup, nets, pts)
    assert sorted(errors) == ["grad_p", "u1", "u2"]
    direct = relative_errors(
        nets["u"].predict(0.0, pts)[:, 0:1], setup.backward.u(0.0, pts)[:, 0:1]
    )
    assert errors["u1"] == direct
    grad = head_gradient(nets["u"], 0.0, pts, head=2)
    assert errors["grad_p"] == relative_errors(grad, setup.backward.grad_p(0.0, pts))


def test_reference_errors_phase_components():
    setup = problem_from_config({
        "problem": "ch",
        "T": 0.1,
        "coefficients": {"gamma": 0.1, "L_d": 5e-4, "delta": 0.01, "S": 0.1},
        "domain": {"kind": "box", "lows": [-1.0, -1.0], "highs": [1.0, 1.0]},
        "boundary": {"kind": "whole-space"},
        "exact": "ch-cosine",
    })
    nets = {"phase": Network(2, 2, hidden=(8,), seed=8)}
    pts = draw_test_points(setup.spec.boundary.geometry, n=200, seed=1)
    errors = reference_errors(setup, nets, pts)
    assert sorted(errors) == ["mu", "phi"]


def test_reference_errors_empty_without_reference():
    setup = problem_from_config({
        "problem": "ns",
        "T": 0.5,
        "coefficients": {"nu": 0.1},
        "domain": {"kind": "box", "lows": [0.0, 0.0], "highs": [1.0, 1.0]},
        "boundary": {"kind": "whole-space"},
    })
    nets = {"u": Network(2, 3, hidden=(6,), seed=9)}
    assert reference_errors(setup, nets, np.zeros((5, 2))) == {}


# ---------------------------------------------------------------------------
# reports and hashing
# ---------------------------------------------------------------------------


def _report(seed, scale):
    errors = {
        "u1": ErrorPair(0.1 * scale, 0.01 * scale, False),
        "grad_p": ErrorPair(0.5 * scale, 0.05 * scale, False),
    }
    return MetricsReport("tg2d", seed, "abc123", 10.0 * scale, errors, {"iterations": 7})


def test_report_roundtrip(tmp_path):
    report = _report(0, 1.0)
    doc = report.to_dict()
    again = MetricsReport.from_dict(doc)
    assert again.to_dict() == doc
    path = tmp_path / "report.json"
    report.save(path)
    assert MetricsReport.load(path).to_dict() == doc
    assert json.loads(path.read_text())["experiment"] == "tg2d"


def test_median_report_takes_componentwise_medians():
    reports = [_report(0, 1.0), _report(1, 3.0), _report(2, 2.0)]
    med = median_report(reports)
    assert med.seed == [0, 1, 2]
    assert med.errors["u1"].l2 == pytest.approx(0.02)
    assert med.errors["grad_p"].linf == pytest.approx(1.0)
    assert med.wall_clock == pytest.approx(20.0)
    assert med.extra == {"runs": 3}


def test_median_report_rejects_mixed_configs():
    odd = _report(1, 2.0)
    odd.config_hash = "zzz"
    with pytest.raises(ValueError):
        median_report([_report(0, 1.0), odd])
    with pytest.raises(ValueError):
        median_report([])


def test_config_hash_is_order_and_container_insensitive():
    a = {"b": [1, 2], "a": 0.5, "c": {"x": np.float64(2.0)}}
    b = {"c": {"x": 2.0}, "a": 0.5, "b": (1, 2)}
    assert config_hash(a) == config_hash(b)
    assert canonical_json(a) == canonical_json(b)
    c = dict(a)
    c["a"] = 0.50001
    assert config_hash(c) != config_hash(a)


# ---------------------------------------------------------------------------
# grids and snapshots
# ---------------------------------------------------------------------------


def test_field_grid_covers_the_box_row_major():
    pts = field_grid(Box([0.0, 0.0], [1.0, 2.0]), 3)
    assert pts.shape == (9, 2)
    assert np.array_equal(pts[0], [0.0, 0.0])
    assert np.array_equal(pts[1], [0.0, 1.0])
    assert np.array_equal(pts[-1], [1.0, 2.0])


def test_field_grid_drops_points_outside_the_geometry():
    punctured = field_grid(BoxMinusDisk([-1, -1], [1, 1], [0, 0], 0.5), 5)
    assert punctured.shape[0] == 24  # 25-point grid minus the center
    assert (np.linalg.norm(punctured, axis=1) >= 0.5 - 1e-12).all()
    assert (np.abs(punctured) <= 1.0).all()
    ball = field_grid(Ball([0.0, 0.0], 1.0), 5)
    assert (np.linalg.norm(ball, axis=1) <= 1.0 + 1e-12).all()
    with pytest.raises(ValueError):
        field_grid(AllSpace(2), 3)


def test_emit_fields_shape_and_bit_for_bit_values(tmp_path):
    nets = {"phase": Network(2, 2, hidden=(6,), seed=10)}
    pts = field_grid(Box([0.0, 0.0], [1.0, 1.0]), 2)
    path = tmp_path / "fields.csv"
    header = emit_fields(path, nets, pts, times=[0.25])
    assert header == ["t", "x1", "x2", "phi", "mu"]
    rows = list(csv.reader(path.open()))
    assert rows[0] == header
    assert len(rows) == 1 + 4  # header + 2x2 grid, one time
    data = np.array([[float(v) for v in row] for row in rows[1:]])
    expect = nets["phase"].predict(0.25, pts)
    assert np.array_equal(data[:, 3:], expect)
    assert np.array_equal(data[:, 1:3], pts)
    assert (data[:, 0] == 0.25).all()


def test_emit_fields_stacks_times_and_orders_networks(tmp_path):
    nets = {
        "u": Network(2, 3, hidden=(5,), seed=11),
        "phase": Network(2, 2, hidden=(5,), seed=12),
    }
    pts = field_grid(Box([0.0, 0.0], [1.0, 1.0]), 3)
    path = tmp_path / "fields.csv"
    header = emit_fields(path, nets, pts, times=[0.0, 0.5])
    assert header == ["t", "x1", "x2", "phi", "mu", "u1", "u2", "p"]
    assert header == field_columns(nets, 2)
    rows = list(csv.reader(path.open()))
    assert len(rows) == 1 + 2 * 9
    late = np.array([[float(v) for v in row] for row in rows[10:]])
    assert np.array_equal(late[:, 5:], nets["u"].predict(0.5, pts))
