"""Reproducible sampling: namespaced RNG streams, Latin hypercube designs on
boxes and adapted designs on balls and punctured boxes, boundary-face
samples, and Gaussian increment batches."""

from __future__ import annotations

import numpy as np

from .geometry import AllSpace, Ball, Box, BoxMinusDisk

# fixed small integers so streams never collide across uses of one seed
NAMESPACES = {
    "init": 0,
    "paths": 1,
    "brownian": 2,
    "test-points": 3,
    "boundary": 4,
    "quadrature": 5,
    "misc": 6,
}


def rng_for(seed, namespace, *keys):
    """Counter-based generator for (seed, namespace, keys...); order-free reuse."""
    ss = np.random.SeedSequence(
        entropy=int(seed), spawn_key=(NAMESPACES[namespace], *map(int, keys))
    )
    return np.random.Generator(np.random.Philox(ss))


def lhs_sample(rng, n, lows, highs):
    """Latin hypercube draw: every axis stratum of width 1/n hit exactly once."""
    lows = np.asarray(lows, dtype=np.float64).reshape(-1)
    highs = np.asarray(highs, dtype=np.float64).reshape(-1)
    if n < 1:
        raise ValueError("need at least one sample")
    d = lows.size
    pts = np.empty((n, d))
    for j in range(d):
        strata = rng.permutation(n)
        pts[:, j] = (strata + rng.uniform(size=n)) / n
    return lows + pts * (highs - lows)


def ball_sample(rng, n, center, radius):
    """Uniform ball draw with the radial coordinate stratified like a 1-D LHS.

    Directions are normalized Gaussians; radii use r = R u^(1/d) with u from
    n equal strata, so the radial distribution is exactly stratified even in
    high dimension (box rejection would be hopeless there).
    """
    center = np.asarray(center, dtype=np.float64).reshape(-1)
    d = center.size
    dirs = rng.standard_normal((n, d))
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    norms = np.where(norms == 0, 1.0, norms)
    dirs /= norms
    u = (rng.permutation(n) + rng.uniform(size=n)) / n
    r = radius * u ** (1.0 / d)
    return center + r[:, None] * dirs


def punctured_box_sample(rng, n, geometry):
    """Box LHS with points landing in the removed disk redrawn uniformly."""
    pts = lhs_sample(rng, n, geometry.box.lows, geometry.box.highs)
    for _ in range(1000):
        bad = ~geometry.inside(pts)
        if not bad.any():
            return pts
        pts[bad] = rng.uniform(
            geometry.box.lows, geometry.box.highs, size=(int(bad.sum()), geometry.d)
        )
    raise RuntimeError("could not place samples outside the disk")


def sample_domain(rng, n, geometry, box=None):
    """Interior samples for a geometry; all-space needs an explicit box."""
    if isinstance(geometry, Box):
        return lhs_sample(rng, n, geometry.lows, geometry.highs)
    if isinstance(geometry, Ball):
        return ball_sample(rng, n, geometry.center, geometry.radius)
    if isinstance(geometry, BoxMinusDisk):
        return punctured_box_sample(rng, n, geometry)
    if isinstance(geometry, AllSpace):
        if box is None:
            raise ValueError("all-space sampling needs a bounding box")
        return lhs_sample(rng, n, box.lows, box.highs)
    raise TypeError(f"cannot sample {type(geometry).__name__}")


def face_sample(rng, n, lows, highs, dim, side):
    """LHS on one box face: coordinate `dim` pinned to its low/high bound."""
    pts = lhs_sample(rng, n, lows, highs)
    lows = np.asarray(lows, dtype=np.float64).reshape(-1)
    highs = np.asarray(highs, dtype=np.float64).reshape(-1)
    pts[:, dim] = lows[dim] if side == 0 else highs[dim]
    return pts
