"""Geometry primitives and the path engine: crossings, reflection,
stopping, Euler identities, and exit-time statistics."""

import numpy as np
import pytest

from fbsnn import geometry, sampling, sde


# ---- geometry ----

def test_box_crossing_hand_value():
    box = geometry.Box([0.0], [1.0])
    s, point, normal = box.first_crossing(np.array([[0.5]]), np.array([[1.2]]))
    assert point[0, 0] == 1.0
    assert normal[0, 0] == 1.0
    assert s[0] == pytest.approx(0.5 / 0.7)


def test_box_crossing_points_on_boundary():
    box = geometry.Box([0, 0], [2 * np.pi, 2 * np.pi])
    rng = np.random.default_rng(0)
    a = sampling.lhs_sample(rng, 200, box.lows, box.highs)
    b = a + rng.normal(0, 1.5, size=a.shape)
    out = ~box.inside(b)
    assert out.any()
    _, pts, normals = box.first_crossing(a[out], b[out])
    assert box.distance_to_boundary(pts).max() <= 1e-10
    assert np.allclose(np.linalg.norm(normals, axis=1), 1.0)


def test_ball_crossing_on_sphere():
    ball = geometry.Ball([1.0, -1.0, 0.5], 2.0)
    rng = np.random.default_rng(1)
    a = ball.center + rng.uniform(-0.5, 0.5, size=(100, 3))
    b = a + rng.normal(0, 3.0, size=a.shape)
    out = ~ball.inside(b)
    assert out.any()
    _, pts, normals = ball.first_crossing(a[out], b[out])
    assert np.max(np.abs(np.linalg.norm(pts - ball.center, axis=1) - 2.0)) <= 1e-12
    radial = (pts - ball.center) / 2.0
    assert np.allclose(normals, radial, atol=1e-12)


def test_box_mirror_spec_example_and_involution():
    box = geometry.Box([0, 0], [2 * np.pi, 2 * np.pi])
    b = np.array([[2 * np.pi + 0.1, 1.0]])
    x_ref, crossing, normal, magnitude, ok = box.mirror(None, b)
    assert ok.all()
    assert np.allclose(x_ref, [[2 * np.pi - 0.1, 1.0]], atol=1e-14)
    assert np.allclose(crossing, [[2 * np.pi, 1.0]], atol=1e-14)
    assert magnitude[0] == pytest.approx(0.2, abs=1e-14)
    assert np.allclose(normal, [[1.0, 0.0]])
    # mirroring the image across the same plane recovers the original
    back = x_ref.copy()
    back[0, 0] = 2 * (2 * np.pi) - back[0, 0]
    assert np.allclose(back, b, atol=1e-12)


def test_ball_mirror_inside_and_involution():
    ball = geometry.Ball([0.0, 0.0], 1.0)
    rng = np.random.default_rng(2)
    a = rng.uniform(-0.4, 0.4, size=(50, 2)) + np.array([0.5, 0.0])
    a = a[ball.inside(a)]
    b = a * 1.4  # push radially outward; some leave the ball
    out = ~ball.inside(b)
    assert out.any()
    x_ref, crossing, normal, magnitude, ok = ball.mirror(a[out], b[out])
    assert ok.all()
    assert ball.inside(x_ref).all()
    # reflect back across the same tangent plane
    offset = np.sum((x_ref - crossing) * normal, axis=1, keepdims=True)
    back = x_ref - 2 * offset * normal
    assert np.allclose(back, b[out], atol=1e-12)
    assert np.allclose(np.linalg.norm(b[out] - x_ref, axis=1), magnitude)


def test_box_minus_disk_membership_and_crossing():
    geom = geometry.BoxMinusDisk([-2, -2], [10, 2], [0, 0], 0.5)
    pts = np.array([[0.0, 0.0], [0.3, 0.0], [5.0, 0.0], [-3.0, 0.0], [0.0, 1.99]])
    assert list(geom.inside(pts)) == [False, False, True, False, True]

    # crossing into the disk is found by bisection and lands on the circle
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([[0.1, 0.0], [0.0, 0.2]])
    _, pts, normals = geom.first_crossing(a, b)
    assert np.allclose(np.linalg.norm(pts, axis=1), 0.5, atol=1e-10)
    # outward normal of the domain points toward the disk center
    assert np.allclose(normals, -pts / 0.5, atol=1e-9)
    assert list(geom.classify_boundary(pts)) == [geom.disk_code] * 2

    # crossing through the right face classifies as face code 1
    a = np.array([[9.9, 0.3]])
    b = np.array([[10.2, 0.3]])
    _, pts, normals = geom.first_crossing(a, b)
    assert pts[0, 0] == pytest.approx(10.0, abs=1e-10)
    assert np.allclose(normals, [[1.0, 0.0]])
    assert geom.classify_boundary(pts)[0] == 1


def test_geometry_roundtrip():
    geoms = [
        geometry.AllSpace(3),
        geometry.Box([0, 0], [1, 2]),
        geometry.Ball([0.5], 1.5),
        geometry.BoxMinusDisk([-2, -2], [10, 2], [0, 0], 0.5),
    ]
    for g in geoms:
        g2 = geometry.geometry_from_dict(g.to_dict())
        assert type(g2) is type(g)
        assert g2.d == g.d
    with pytest.raises(ValueError):
        geometry.geometry_from_dict({"kind": "torus"})


# ---- engine ----

def test_time_grid_exact():
    grid = sde.TimeGrid(0.1, 5)
    assert grid.dt * grid.N == grid.T
    assert grid.times[-1] == grid.T
    assert grid.times.shape == (6,)
    with pytest.raises(ValueError):
        sde.TimeGrid(0.0, 5)


def test_brownian_batch_moments():
    dt = 0.02
    batch = sde.BrownianBatch.draw(K=100, N=100, d=100, channels=1, dt=dt, seed=3)
    x = batch.channel(0).ravel()
    assert x.size == 1e6
    assert abs(x.mean()) <= 4 * np.sqrt(dt / x.size)
    assert x.var() == pytest.approx(dt, rel=0.05)
    with pytest.raises(ValueError):
        sde.BrownianBatch.draw(10, 10, 1, 1, dt=0.0, seed=0)


def test_brownian_channels_differ_and_reproduce():
    b1 = sde.BrownianBatch.draw(4, 3, 2, channels=3, dt=0.1, seed=9, iteration=5)
    b2 = sde.BrownianBatch.draw(4, 3, 2, channels=3, dt=0.1, seed=9, iteration=5)
    b3 = sde.BrownianBatch.draw(4, 3, 2, channels=3, dt=0.1, seed=9, iteration=6)
    assert np.array_equal(b1.increments, b2.increments)
    assert not np.array_equal(b1.increments, b3.increments)
    assert not np.array_equal(b1.channel(0), b1.channel(1))


def test_euler_forward_hand_values():
    inc = np.array([[[0.1, -0.2]]])  # K=1, N=1, d=2
    bundle = sde.euler_forward([[1.0, 1.0]], 0.5, inc)
    assert np.allclose(bundle.states[0, 1], [1.1, 0.8])

    still = sde.euler_forward([[1.0, 1.0]], 0.5, np.zeros((1, 4, 2)))
    assert np.allclose(still.states, 1.0)

    with pytest.raises(sde.EngineError):
        sde.euler_forward([[0.0]], -1.0, np.zeros((1, 1, 1)))


def test_euler_forward_terminal_variance():
    coef, T, N = 0.7, 1.0, 20
    dt = T / N
    inc = sampling.rng_for(4, "brownian").normal(0, np.sqrt(dt), size=(10_000, N, 1))
    bundle = sde.euler_forward(np.zeros((10_000, 1)), coef, inc)
    var = bundle.states[:, -1, 0].var()
    assert var == pytest.approx(2 * coef * T, rel=0.05)


def test_dirichlet_exit_spec_example():
    geom = geometry.Box([0.0], [1.0])
    fixed, repaired, exited, pts = sde.dirichlet_exit([[0.5]], [[1.2]], geom, 0.5)
    assert exited[0]
    assert fixed[0, 0] == 1.0
    assert repaired[0, 0] == pytest.approx(0.5, abs=1e-14)

    fixed, repaired, exited, _ = sde.dirichlet_exit([[0.5]], [[0.7]], geom, 0.5)
    assert not exited[0]
    assert fixed[0, 0] == 0.7

    # exactly on the boundary counts as exited
    _, _, exited, pts = sde.dirichlet_exit([[0.5]], [[1.0]], geom, 0.5)
    assert exited[0] and pts[0, 0] == 1.0

    with pytest.raises(sde.EngineError):
        sde.dirichlet_exit([[1.5]], [[1.6]], geom, 0.5)


def test_dirichlet_bundle_freezes_and_repairs():
    geom = geometry.Box([0, 0], [1, 1])
    coef = 0.5
    K, N = 400, 8
    rng = sampling.rng_for(5, "brownian")
    x0 = sampling.lhs_sample(sampling.rng_for(5, "paths"), K, [0.3, 0.3], [0.7, 0.7])
    inc = rng.normal(0, np.sqrt(0.05), size=(K, N, 2))
    bundle = sde.euler_forward(x0, coef, inc, geometry=geom, mode="dirichlet")

    assert bundle.exited.any() and not bundle.exited.all()
    scale = np.sqrt(2 * coef)
    recon = bundle.states[:, :-1] + scale * bundle.repaired_increments
    assert np.max(np.abs(recon - bundle.states[:, 1:])) <= 1e-12

    for k in np.where(bundle.exited)[0]:
        n_exit = bundle.exit_step[k]
        assert geom.distance_to_boundary(bundle.exit_point[k : k + 1])[0] <= 1e-10
        assert np.allclose(bundle.states[k, n_exit:], bundle.exit_point[k])
        assert np.all(bundle.repaired_increments[k, n_exit:] == 0)
        assert bundle.step_active[k, : n_exit].all()
        assert not bundle.step_active[k, n_exit:].any()
        assert bundle.terminal_index[k] == n_exit
    free = ~bundle.exited
    assert np.array_equal(bundle.increments[free], inc[free])
    assert np.array_equal(bundle.repaired_increments[free], inc[free])
    assert np.all(bundle.terminal_index[free] == N)


def test_neumann_bundle_reflects_inside():
    geom = geometry.Box([0, 0], [1, 1])
    coef = 0.5
    K, N = 300, 10
    rng = sampling.rng_for(6, "brownian")
    x0 = sampling.lhs_sample(sampling.rng_for(6, "paths"), K, [0.1, 0.1], [0.9, 0.9])
    inc = rng.normal(0, np.sqrt(0.02), size=(K, N, 2))
    bundle = sde.euler_forward(x0, coef, inc, geometry=geom, mode="neumann",
                               rng=rng, dt=0.02)

    flat = bundle.states.reshape(-1, 2)
    assert np.all((flat >= 0) & (flat <= 1))
    assert bundle.reflected.any()
    assert not bundle.exited.any()
    scale = np.sqrt(2 * coef)
    recon = bundle.states[:, :-1] + scale * bundle.repaired_increments
    assert np.max(np.abs(recon - bundle.states[:, 1:])) <= 1e-12
    # original increments kept verbatim on unreflected steps
    untouched = ~bundle.reflected
    assert np.array_equal(bundle.increments[untouched], inc[untouched])
    ref = bundle.reflected
    assert np.all(bundle.magnitude[ref] > 0)
    assert np.allclose(np.linalg.norm(bundle.normal[ref], axis=1), 1.0)
    assert geom.distance_to_boundary(bundle.crossing[ref]).max() <= 1e-9


def test_neumann_reflect_op_flux():
    geom = geometry.Box([0, 0], [2 * np.pi, 2 * np.pi])

    def q(t, x):
        return np.full((x.shape[0], 2), 3.0)

    x_ref, dy = sde.neumann_reflect(
        np.array([[2 * np.pi + 0.1, 1.0], [1.0, 1.0]]), geom, q, t_next=0.5
    )
    assert np.allclose(x_ref[0], [2 * np.pi - 0.1, 1.0])
    assert np.allclose(x_ref[1], [1.0, 1.0])
    assert np.allclose(dy[0], 0.6)  # |dX| = 0.2 times q = 3
    assert np.allclose(dy[1], 0.0)


def test_obstacle_mode_stops_and_reflects_by_face():
    geom = geometry.BoxMinusDisk([-2, -2], [10, 2], [0, 0], 0.5)
    right = 1  # face code of x1 = 10
    # three deterministic paths: into the right face, the left face, the disk
    x0 = np.array([[9.9, 0.0], [-1.9, 0.0], [0.8, 0.0]])
    inc = np.zeros((3, 1, 2))
    inc[0, 0] = [0.3, 0.0]
    inc[1, 0] = [-0.3, 0.0]
    inc[2, 0] = [-0.35, 0.0]
    bundle = sde.euler_forward(x0, 0.5, inc, geometry=geom, mode="dirichlet",
                               reflect_codes=(right,))
    # right-face path folded back inside and stays alive
    assert not bundle.exited[0]
    assert bundle.reflected[0, 0]
    assert bundle.states[0, 1, 0] == pytest.approx(2 * 10 - (9.9 + 0.3), abs=1e-12)
    # left-face path stopped on the inlet
    assert bundle.exited[1] and bundle.exit_code[1] == 0
    assert bundle.exit_point[1, 0] == pytest.approx(-2.0, abs=1e-10)
    # disk path stopped on the circle
    assert bundle.exited[2] and bundle.exit_code[2] == geom.disk_code
    assert np.linalg.norm(bundle.exit_point[2]) == pytest.approx(0.5, abs=1e-9)


def test_mean_exit_time_one_dimensional_ball():
    # dX = sqrt(2 coef) dW from the center of (-1, 1): E[tau] = 1 at coef = 0.5
    coef, dt, n_paths = 0.5, 1e-3, 10_000
    rng = sampling.rng_for(11, "brownian")
    geom = geometry.Ball([0.0], 1.0)
    x = np.zeros((n_paths, 1))
    steps = np.zeros(n_paths)
    remaining = np.arange(n_paths)
    scale = np.sqrt(2 * coef)
    for n in range(12_000):
        if remaining.size == 0:
            break
        draw = rng.normal(0, np.sqrt(dt), size=(remaining.size, 1))
        nxt = x[remaining] + scale * draw
        _, _, exited, _ = sde.dirichlet_exit(x[remaining], nxt, geom, coef)
        steps[remaining[exited]] = n + 1
        keep = ~exited
        x[remaining[keep]] = nxt[keep]
        remaining = remaining[keep]
    assert remaining.size == 0
    mean_tau = (steps * dt).mean()
    assert abs(mean_tau - 1.0) <= 0.1


def test_path_dump_csv(tmp_path):
    inc = np.zeros((2, 3, 1))
    bundle = sde.euler_forward(np.zeros((2, 1)), 0.5, inc)
    out = tmp_path / "paths.csv"
    sde.dump_paths_csv(out, [bundle, bundle])
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "path,step,channel,x_1,alive"
    assert len(lines) == 1 + 2 * 2 * 4
