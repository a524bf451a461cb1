"""Euler-Maruyama forward processes with boundary mechanics.

Every forward channel is a pure diffusion X_{n+1} = X_n + sqrt(2 coef) dW_n.
Three per-step treatments exist: free roaming, absorption at the boundary
(first-exit stopping with increment repair, states frozen afterwards), and
mirror reflection back inside with a record of the crossing so a flux
correction can be applied to the backward variable. A stopping geometry can
designate individual boundary pieces as reflecting instead (used for an
outflow face).

Bundles keep both the original increments (the reflecting scheme's residual
uses them) and repaired increments that satisfy the Euler identity for the
stored states; untouched steps share the original draw bit-for-bit.
"""

from __future__ import annotations

import numpy as np

from . import sampling


class EngineError(RuntimeError):
    """Path generation could not satisfy its contract."""


class TimeGrid:
    """Uniform grid on [0, T] with N steps; T is re-derived as N*dt exactly."""

    def __init__(self, T, N):
        N = int(N)
        if N < 1 or T <= 0:
            raise ValueError(f"need N >= 1 and T > 0, got N={N}, T={T}")
        self.N = N
        self.dt = float(T) / N
        self.T = self.dt * N
        self.times = np.arange(N + 1) * self.dt

    def __repr__(self):
        return f"TimeGrid(T={self.T}, N={self.N})"


class BrownianBatch:
    """Independent Gaussian increments, one (K, N, d) block per channel."""

    def __init__(self, increments, dt, seed=None):
        self.increments = np.asarray(increments, dtype=np.float64)
        if self.increments.ndim != 4:
            raise ValueError("increments must be (channels, K, N, d)")
        self.dt = float(dt)
        self.seed = seed

    @property
    def channels(self):
        return self.increments.shape[0]

    def channel(self, c):
        return self.increments[c]

    @classmethod
    def draw(cls, K, N, d, channels, dt, seed, iteration=0):
        if min(K, N, d, channels) < 1:
            raise ValueError("all counts must be >= 1")
        if dt <= 0:
            raise ValueError(f"dt must be positive, got {dt}")
        scale = np.sqrt(dt)
        blocks = [
            sampling.rng_for(seed, "brownian", iteration, c).standard_normal((K, N, d))
            * scale
            for c in range(channels)
        ]
        return cls(np.stack(blocks, axis=0), dt, seed)


class PathBundle:
    """One channel's paths plus boundary bookkeeping.

    exit_step[k] = n means X_n is the stopped point (tau = t_n); N+1 means
    the path never exits. Reflection records live at the step index n of the
    transition t_n -> t_{n+1} that overshot.
    """

    def __init__(self, states, increments, repaired, coef, exit_step, exit_point,
                 exit_code, reflected, crossing, normal, magnitude, resampled=0):
        self.states = states
        self.increments = increments
        self.repaired_increments = repaired
        self.coef = coef
        self.exit_step = exit_step
        self.exit_point = exit_point
        self.exit_code = exit_code
        self.reflected = reflected
        self.crossing = crossing
        self.normal = normal
        self.magnitude = magnitude
        self.resampled = resampled

    @property
    def K(self):
        return self.states.shape[0]

    @property
    def N(self):
        return self.states.shape[1] - 1

    @property
    def step_active(self):
        """(K, N) mask: step n -> n+1 contributes a residual."""
        n = np.arange(self.N)
        return n[None, :] < self.exit_step[:, None]

    @property
    def level_active(self):
        """(K, N+1) mask: time level n is at or before the stopping time."""
        n = np.arange(self.N + 1)
        return n[None, :] <= np.minimum(self.exit_step, self.N)[:, None]

    @property
    def terminal_index(self):
        """Per path, the level where terminal data applies (exit or N)."""
        return np.minimum(self.exit_step, self.N)

    @property
    def exited(self):
        return self.exit_step <= self.N


def dirichlet_exit(x_n, x_next, geometry, coef):
    """Stop overshooting transitions at the boundary and repair increments.

    Returns (states, repaired increments, exited mask, exit points). The
    repaired increment satisfies X' = X_n + sqrt(2 coef) dW; points already
    on the boundary count as exited.
    """
    x_n = np.atleast_2d(np.asarray(x_n, dtype=np.float64))
    x_next = np.atleast_2d(np.asarray(x_next, dtype=np.float64))
    if coef <= 0:
        raise EngineError(f"diffusion coefficient must be positive, got {coef}")
    if not geometry.inside(x_n).all():
        raise EngineError("dirichlet_exit called with previous states outside the domain")
    scale = np.sqrt(2.0 * coef)
    exited = ~geometry.inside(x_next)
    fixed = x_next.copy()
    if exited.any():
        _, pts, _ = geometry.first_crossing(x_n[exited], x_next[exited])
        fixed[exited] = pts
    repaired = (fixed - x_n) / scale
    return fixed, repaired, exited, fixed.copy()


def neumann_reflect(x_next, geometry, q=None, t_next=0.0, x_prev=None):
    """Mirror overshooting points inside and price the flux correction.

    Returns (X' inside, dY) with dY = q(t, crossing) * |X - X'| per component
    (zero rows where no reflection happened, or when q is None). Curved
    geometries need x_prev to locate the crossing.
    """
    x_next = np.atleast_2d(np.asarray(x_next, dtype=np.float64))
    x_prev = None if x_prev is None else np.atleast_2d(np.asarray(x_prev, dtype=np.float64))
    x_ref, crossing, _, magnitude, ok = geometry.mirror(x_prev, x_next)
    if not ok.all():
        raise EngineError(f"{int((~ok).sum())} points overshot beyond the reflectable reach")
    if q is None:
        dy = np.zeros((x_next.shape[0], 1))
    else:
        dy = np.asarray(q(t_next, crossing), dtype=np.float64) * magnitude[:, None]
    return x_ref, dy


def euler_forward(x0, coef, increments, geometry=None, mode="none", rng=None,
                  dt=None, reflect_codes=()):
    """Advance one channel of paths through all steps.

    mode: "none" (free), "dirichlet" (stop at the boundary), or "neumann"
    (reflect). With mode="dirichlet", boundary pieces whose classification
    code is in reflect_codes fold the path back instead of stopping it
    (homogeneous flux). rng and dt together enable redrawing increments for
    the rare overshoots that cannot be reflected back inside.
    """
    if coef <= 0:
        raise EngineError(f"diffusion coefficient must be positive, got {coef}")
    if mode not in ("none", "dirichlet", "neumann"):
        raise EngineError(f"unknown boundary mode {mode!r}")
    if mode != "none" and geometry is None:
        raise EngineError(f"mode {mode!r} needs a geometry")

    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    inc = np.array(increments, dtype=np.float64)
    K, N, d = inc.shape
    scale = np.sqrt(2.0 * coef)

    states = np.zeros((K, N + 1, d))
    states[:, 0] = x0
    rep = inc.copy()
    exit_step = np.full(K, N + 1, dtype=int)
    exit_point = np.full((K, d), np.nan)
    exit_code = np.full(K, -1, dtype=int)
    reflected = np.zeros((K, N), dtype=bool)
    crossing = np.zeros((K, N, d))
    normal = np.zeros((K, N, d))
    magnitude = np.zeros((K, N))
    resampled = 0

    if mode != "none" and not geometry.inside(x0).all():
        raise EngineError("initial points must lie inside the domain")

    def redraw(rows, n):
        nonlocal resampled
        if rng is None or dt is None:
            raise EngineError("unreflectable overshoot; pass rng and dt to resample")
        resampled += np.size(rows)
        fresh = rng.normal(0.0, np.sqrt(dt), size=(np.size(rows), d))
        inc[rows, n] = fresh
        rep[rows, n] = fresh

    alive = np.ones(K, dtype=bool)
    for n in range(N):
        prev = states[:, n]
        nxt = prev + scale * inc[:, n]

        if mode == "none":
            states[:, n + 1] = nxt
            continue

        frozen = ~alive
        if frozen.any():
            nxt[frozen] = prev[frozen]
            rep[frozen, n] = 0.0

        if mode == "dirichlet":
            for k in np.where(alive & ~geometry.inside(nxt))[0]:
                for _ in range(100):
                    if geometry.inside(nxt[k : k + 1])[0]:
                        break  # a redrawn increment landed inside
                    stopped, point, code, handled = _stop_or_fold(
                        geometry, prev[k], nxt[k], reflect_codes
                    )
                    if handled:
                        nxt[k] = point
                        rep[k, n] = (point - prev[k]) / scale
                        if stopped:
                            alive[k] = False
                            exit_step[k] = n + 1
                            exit_point[k] = point
                            exit_code[k] = code
                        else:
                            reflected[k, n] = True
                        break
                    redraw(k, n)
                    nxt[k] = prev[k] + scale * inc[k, n]
                else:
                    raise EngineError("could not resample a usable increment")

        elif mode == "neumann":
            out = ~geometry.inside(nxt)
            guard = 0
            while out.any():
                idx = np.where(out)[0]
                x_ref, cross, norm, mag, ok = geometry.mirror(prev[idx], nxt[idx])
                good = idx[ok]
                nxt[good] = x_ref[ok]
                rep[good, n] = (x_ref[ok] - prev[good]) / scale
                reflected[good, n] = True
                crossing[good, n] = cross[ok]
                normal[good, n] = norm[ok]
                magnitude[good, n] = mag[ok]
                bad = idx[~ok]
                out = np.zeros(K, dtype=bool)
                if bad.size:
                    guard += 1
                    if guard > 100:
                        raise EngineError("could not resample a usable increment")
                    redraw(bad, n)
                    nxt[bad] = prev[bad] + scale * inc[bad, n]
                    out[bad] = ~geometry.inside(nxt[bad])

        states[:, n + 1] = nxt

    return PathBundle(states, inc, rep, coef, exit_step, exit_point, exit_code,
                      reflected, crossing, normal, magnitude, resampled)


def dump_paths_csv(path, bundles):
    """Write bundles (one per channel) as rows (path, step, channel, x, alive)."""
    d = bundles[0].states.shape[2]
    header = "path,step,channel," + ",".join(f"x_{j + 1}" for j in range(d)) + ",alive"
    lines = [header]
    for c, bundle in enumerate(bundles):
        active = bundle.level_active
        for k in range(bundle.K):
            for n in range(bundle.N + 1):
                coords = ",".join(repr(v) for v in bundle.states[k, n])
                lines.append(f"{k},{n},{c},{coords},{int(active[k, n])}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _stop_or_fold(geometry, prev_row, next_row, reflect_codes):
    """Resolve one overshooting row against a stopping geometry.

    Returns (stopped, point, code, handled). Pieces listed in reflect_codes
    fold the point back instead of stopping (pure reflection); folding that
    lands outside again is retried from the new crossing, a few passes.
    """
    a = prev_row.reshape(1, -1)
    b = next_row.reshape(1, -1)
    for _ in range(4):
        _, pts, _ = geometry.first_crossing(a, b)
        code = int(geometry.classify_boundary(pts)[0])
        if code not in reflect_codes:
            return True, pts[0], code, True
        # fold across the face plane of this piece
        dim, side = code // 2, code % 2
        box = geometry.box if hasattr(geometry, "box") else geometry
        bound = box.lows[dim] if side == 0 else box.highs[dim]
        folded = b.copy()
        folded[0, dim] = 2.0 * bound - folded[0, dim]
        if geometry.inside(folded)[0]:
            return False, folded[0], code, True
        a, b = pts, folded
    return False, next_row, -1, False
