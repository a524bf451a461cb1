"""Domain geometries: membership, segment-boundary crossings, outward
normals, and mirror reflection of overshooting points.

Boxes and balls use exact segment intersections; the composite box-minus-disk
geometry brackets the crossing by bisection. Reflection mirrors across the
tangent plane at the crossing (for a flat face this is the usual fold) and is
attempted a bounded number of times before the caller must resample.
"""

from __future__ import annotations

import numpy as np

MAX_REFLECT_PASSES = 4
BISECT_ITERS = 60


class AllSpace:
    """Unbounded domain: every point is interior."""

    kind = "all-space"

    def __init__(self, d):
        self.d = int(d)

    def inside(self, x):
        return np.ones(x.shape[0], dtype=bool)

    def to_dict(self):
        return {"kind": self.kind, "d": self.d}


class Box:
    """Open axis-aligned box prod_i (lows_i, highs_i)."""

    kind = "box"

    def __init__(self, lows, highs):
        self.lows = np.asarray(lows, dtype=np.float64).reshape(-1)
        self.highs = np.asarray(highs, dtype=np.float64).reshape(-1)
        if self.lows.shape != self.highs.shape or np.any(self.lows >= self.highs):
            raise ValueError(f"degenerate box: lows={self.lows}, highs={self.highs}")
        self.d = self.lows.size

    def inside(self, x):
        return np.all((x > self.lows) & (x < self.highs), axis=1)

    def first_crossing(self, a, b):
        """Earliest boundary hit of segments [a_i, b_i]; rows must start inside.

        Returns (s, point, normal): point = a + s (b - a), s in (0, 1], and
        the outward unit normal of the face hit first.
        """
        a = np.atleast_2d(a)
        b = np.atleast_2d(b)
        seg = b - a
        rows = a.shape[0]
        s = np.full(rows, np.inf)
        face = np.full(rows, -1, dtype=int)
        for j in range(self.d):
            denom = np.where(seg[:, j] == 0, 1.0, seg[:, j])
            for side, bound in ((0, self.lows[j]), (1, self.highs[j])):
                crossed = (b[:, j] <= bound) if side == 0 else (b[:, j] >= bound)
                sj = np.where(crossed, (bound - a[:, j]) / denom, np.inf)
                better = sj < s
                s = np.where(better, sj, s)
                face = np.where(better, 2 * j + side, face)
        hit = np.isfinite(s)
        s = np.where(hit, s, 1.0)
        point = a + s[:, None] * seg
        normal = np.zeros_like(a)
        for j in range(self.d):
            normal[face == 2 * j, j] = -1.0
            normal[face == 2 * j + 1, j] = 1.0
        # pin the hit coordinate exactly onto the face
        for j in range(self.d):
            point[face == 2 * j, j] = self.lows[j]
            point[face == 2 * j + 1, j] = self.highs[j]
        return s, point, normal

    def boundary_normal(self, x):
        x = np.atleast_2d(x)
        gaps = np.stack([np.abs(x - self.lows), np.abs(self.highs - x)], axis=2)
        flat = gaps.reshape(x.shape[0], -1)
        idx = np.argmin(flat, axis=1)
        normal = np.zeros_like(x)
        dim, side = idx // 2, idx % 2
        normal[np.arange(x.shape[0]), dim] = np.where(side == 0, -1.0, 1.0)
        return normal

    def classify_boundary(self, x):
        """Face code 2*dim + side (side 0 = low, 1 = high) of the nearest face."""
        x = np.atleast_2d(x)
        gaps = np.stack([np.abs(x - self.lows), np.abs(self.highs - x)], axis=2)
        return np.argmin(gaps.reshape(x.shape[0], -1), axis=1)

    def fold(self, b):
        """Mirror across violated face planes until inside or passes exhausted."""
        x = np.array(b, dtype=np.float64)
        for _ in range(MAX_REFLECT_PASSES):
            low = x < self.lows
            high = x > self.highs
            if not (low.any() or high.any()):
                break
            x = np.where(low, 2 * self.lows - x, x)
            x = np.where(high, 2 * self.highs - x, x)
        return x, self.inside(x)

    def mirror(self, a, b):
        """Reflect overshoot points b back inside by folding across faces.

        `a` (previous states) is unused for plane mirrors and may be None.
        Returns (reflected point, boundary crossing, outward normal at the
        crossing, |b - reflected|, success mask). For a single fold the
        crossing is the exact perpendicular foot (the segment midpoint).
        """
        b = np.atleast_2d(b)
        x_ref, ok = self.fold(b)
        crossing = 0.5 * (b + x_ref)
        normal = self.boundary_normal(crossing)
        magnitude = np.linalg.norm(b - x_ref, axis=1)
        return x_ref, crossing, normal, magnitude, ok

    def distance_to_boundary(self, x):
        x = np.atleast_2d(x)
        gaps = np.minimum(np.abs(x - self.lows), np.abs(self.highs - x))
        return gaps.min(axis=1)

    def to_dict(self):
        return {"kind": self.kind, "lows": self.lows.tolist(), "highs": self.highs.tolist()}


class Ball:
    """Open ball of given center and radius."""

    kind = "ball"

    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=np.float64).reshape(-1)
        self.radius = float(radius)
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        self.d = self.center.size

    def inside(self, x):
        return np.linalg.norm(x - self.center, axis=1) < self.radius

    def first_crossing(self, a, b):
        a = np.atleast_2d(a)
        b = np.atleast_2d(b)
        seg = b - a
        rel = a - self.center
        alpha = np.sum(seg * seg, axis=1)
        beta = np.sum(rel * seg, axis=1)
        gamma = np.sum(rel * rel, axis=1) - self.radius ** 2
        alpha = np.where(alpha == 0, 1e-300, alpha)
        disc = np.maximum(beta ** 2 - alpha * gamma, 0.0)
        s = (-beta + np.sqrt(disc)) / alpha
        s = np.clip(s, 0.0, 1.0)
        point = a + s[:, None] * seg
        # pin exactly onto the sphere
        rad = np.linalg.norm(point - self.center, axis=1, keepdims=True)
        rad = np.where(rad == 0, 1.0, rad)
        point = self.center + (point - self.center) * (self.radius / rad)
        normal = (point - self.center) / self.radius
        return s, point, normal

    def boundary_normal(self, x):
        x = np.atleast_2d(x)
        rel = x - self.center
        norm = np.linalg.norm(rel, axis=1, keepdims=True)
        norm = np.where(norm == 0, 1.0, norm)
        return rel / norm

    def classify_boundary(self, x):
        return np.zeros(np.atleast_2d(x).shape[0], dtype=int)

    def mirror(self, a, b):
        a = np.atleast_2d(a)
        b = np.atleast_2d(b)
        x = b.copy()
        prev = a.copy()
        first_cross = None
        first_norm = None
        for _ in range(MAX_REFLECT_PASSES):
            out = ~self.inside(x)
            if not out.any():
                break
            _, crossing, normal = self.first_crossing(prev[out], x[out])
            if first_cross is None:
                first_cross = np.zeros_like(b)
                first_norm = np.zeros_like(b)
                first_cross[out] = crossing
                first_norm[out] = normal
            # mirror across the tangent plane at the crossing
            offset = np.sum((x[out] - crossing) * normal, axis=1, keepdims=True)
            x[out] = x[out] - 2.0 * offset * normal
            prev[out] = crossing
        if first_cross is None:
            first_cross = b.copy()
            first_norm = self.boundary_normal(b)
        magnitude = np.linalg.norm(b - x, axis=1)
        return x, first_cross, first_norm, magnitude, self.inside(x) | (magnitude == 0)

    def distance_to_boundary(self, x):
        return np.abs(np.linalg.norm(np.atleast_2d(x) - self.center, axis=1) - self.radius)

    def to_dict(self):
        return {"kind": self.kind, "center": self.center.tolist(), "radius": self.radius}


class BoxMinusDisk:
    """Box with a closed ball removed; the interior excludes the ball."""

    kind = "box-minus-disk"

    def __init__(self, lows, highs, center, radius):
        self.box = Box(lows, highs)
        self.disk = Ball(center, radius)
        if self.box.d != self.disk.d:
            raise ValueError("box and disk dimensions differ")
        self.d = self.box.d
        # code for the disk piece of the boundary, after the 2d face codes
        self.disk_code = 2 * self.d

    def inside(self, x):
        dist = np.linalg.norm(x - self.disk.center, axis=1)
        return self.box.inside(x) & (dist > self.disk.radius)

    def first_crossing(self, a, b):
        a = np.atleast_2d(a)
        b = np.atleast_2d(b)
        seg = b - a
        lo = np.zeros(a.shape[0])
        hi = np.ones(a.shape[0])
        for _ in range(BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            ok = self.inside(a + mid[:, None] * seg)
            lo = np.where(ok, mid, lo)
            hi = np.where(ok, hi, mid)
        s = hi
        point = a + s[:, None] * seg
        # snap onto whichever boundary piece is nearer
        on_disk = self._nearer_disk(point)
        if on_disk.any():
            rel = point[on_disk] - self.disk.center
            rad = np.linalg.norm(rel, axis=1, keepdims=True)
            rad = np.where(rad == 0, 1.0, rad)
            point[on_disk] = self.disk.center + rel * (self.disk.radius / rad)
        face = self.box.classify_boundary(point)
        for j in range(self.d):
            sel = ~on_disk & (face == 2 * j) & np.isclose(point[:, j], self.box.lows[j], atol=1e-9)
            point[sel, j] = self.box.lows[j]
            sel = ~on_disk & (face == 2 * j + 1) & np.isclose(point[:, j], self.box.highs[j], atol=1e-9)
            point[sel, j] = self.box.highs[j]
        return s, point, self.boundary_normal(point)

    def _nearer_disk(self, x):
        disk_gap = self.disk.distance_to_boundary(x)
        box_gap = self.box.distance_to_boundary(x)
        return disk_gap < box_gap

    def boundary_normal(self, x):
        x = np.atleast_2d(x)
        normal = self.box.boundary_normal(x)
        on_disk = self._nearer_disk(x)
        # outward normal of the domain points into the removed disk
        normal[on_disk] = -self.disk.boundary_normal(x[on_disk])
        return normal

    def classify_boundary(self, x):
        codes = self.box.classify_boundary(x)
        codes[self._nearer_disk(np.atleast_2d(x))] = self.disk_code
        return codes

    def mirror(self, a, b):
        a = np.atleast_2d(a)
        b = np.atleast_2d(b)
        x = b.copy()
        prev = a.copy()
        first_cross = None
        first_norm = None
        for _ in range(MAX_REFLECT_PASSES):
            out = ~self.inside(x)
            if not out.any():
                break
            _, crossing, normal = self.first_crossing(prev[out], x[out])
            if first_cross is None:
                first_cross = np.zeros_like(b)
                first_norm = np.zeros_like(b)
                first_cross[out] = crossing
                first_norm[out] = normal
            offset = np.sum((x[out] - crossing) * normal, axis=1, keepdims=True)
            x[out] = x[out] - 2.0 * offset * normal
            prev[out] = crossing
        if first_cross is None:
            first_cross = b.copy()
            first_norm = self.boundary_normal(b)
        magnitude = np.linalg.norm(b - x, axis=1)
        return x, first_cross, first_norm, magnitude, self.inside(x) | (magnitude == 0)

    def distance_to_boundary(self, x):
        return np.minimum(
            self.box.distance_to_boundary(x), self.disk.distance_to_boundary(x)
        )

    def to_dict(self):
        return {
            "kind": self.kind,
            "lows": self.box.lows.tolist(),
            "highs": self.box.highs.tolist(),
            "center": self.disk.center.tolist(),
            "radius": self.disk.radius,
        }


def geometry_from_dict(doc):
    kind = doc.get("kind")
    if kind == "all-space":
        return AllSpace(doc["d"])
    if kind == "box":
        return Box(doc["lows"], doc["highs"])
    if kind == "ball":
        return Ball(doc["center"], doc["radius"])
    if kind == "box-minus-disk":
        return BoxMinusDisk(doc["lows"], doc["highs"], doc["center"], doc["radius"])
    raise ValueError(f"unknown geometry kind {kind!r}")
