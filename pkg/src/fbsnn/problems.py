"""Problem definitions: coefficients, drivers, exact solutions, boundary data.

Every solver-facing quantity lives in the backward frame, where the PDE runs
from t = 0 toward a terminal condition at t = T.  Closed-form reference
solutions are written in the forward (physical) frame and converted with
``time_reverse_adapter``; ``map_back`` undoes the conversion on samples.
"""

import math

import numpy as np

from . import autodiff as ad
from .geometry import Box, geometry_from_dict


def _tcol(t, n):
    """Time values as an (n, 1) column, broadcasting scalars."""
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return np.full((n, 1), float(t))
    return t.reshape(n, 1)


class _Frozen:
    """Mixin that rejects attribute writes once construction finishes."""

    def _freeze(self):
        self.__dict__["_frozen"] = True

    def __setattr__(self, name, value):
        if self.__dict__.get("_frozen"):
            raise AttributeError(f"{type(self).__name__} is immutable; cannot set {name!r}")
        object.__setattr__(self, name, value)


# ---------------------------------------------------------------------------
# Diagonalization of the linearized phase-field system
# ---------------------------------------------------------------------------


class ChDiagonalization(_Frozen):
    """Eigendecomposition A = R diag(lam1, lam2) R_inv of the 2x2 block

        A = [[0, L_d], [-gamma^2/delta, S]],

    with lam1 > lam2 > 0.  Eigenvector columns are normalized to a first
    component of 1.  The identity and both Vieta relations are re-checked at
    construction and a failure raises rather than returning a bad rotation.
    """

    def __init__(self, lam1, lam2, R, R_inv, A):
        self.lam1 = float(lam1)
        self.lam2 = float(lam2)
        self.R = np.asarray(R, dtype=float)
        self.R_inv = np.asarray(R_inv, dtype=float)
        self.A = np.asarray(A, dtype=float)
        for arr in (self.R, self.R_inv, self.A):
            arr.flags.writeable = False

        if not (self.lam1 > self.lam2 > 0.0):
            raise ValueError(f"eigenvalues must satisfy lam1 > lam2 > 0, got {lam1}, {lam2}")
        S = self.A[1, 1]
        L_d = self.A[0, 1]
        prod = -self.A[1, 0] * L_d
        if abs(self.lam1 + self.lam2 - S) > 1e-12 * max(1.0, abs(S)):
            raise ValueError("eigenvalue sum does not match the trace")
        if abs(self.lam1 * self.lam2 - prod) > 1e-12 * max(1.0, abs(prod)):
            raise ValueError("eigenvalue product does not match the determinant")
        ident = self.R @ np.diag([self.lam1, self.lam2]) @ self.R_inv
        if np.max(np.abs(ident - self.A)) > 1e-12 * max(1.0, np.max(np.abs(self.A))):
            raise ValueError("R diag(lam) R_inv does not reproduce the system matrix")
        self._freeze()


def ch_diagonalize(L_d, gamma, delta, S):
    """Diagonalize the stabilized phase-field block in closed form.

    Eigenvalues are lam_{1,2} = (S +/- sqrt(S^2 - 4 gamma^2 L_d / delta)) / 2;
    both are real and positive exactly when S > 2 gamma sqrt(L_d / delta).
    """
    if L_d <= 0 or gamma <= 0 or delta <= 0:
        raise ValueError("L_d, gamma, delta must all be positive")
    s_min = 2.0 * gamma * math.sqrt(L_d / delta)
    if S <= s_min:
        raise ValueError(
            f"stabilization S={S:g} is inadmissible: S must exceed "
            f"2*gamma*sqrt(L_d/delta) = {s_min:.12g}"
        )
    disc = math.sqrt(S * S - 4.0 * gamma * gamma * L_d / delta)
    lam1 = 0.5 * (S + disc)
    lam2 = 0.5 * (S - disc)
    # Eigenvector for lam is (1, lam / L_d); closed-form inverse of R.
    m1 = lam1 / L_d
    m2 = lam2 / L_d
    R = np.array([[1.0, 1.0], [m1, m2]])
    R_inv = np.array([[m2, -1.0], [-m1, 1.0]]) / (m2 - m1)
    A = np.array([[0.0, L_d], [-gamma * gamma / delta, S]])
    return ChDiagonalization(lam1, lam2, R, R_inv, A)


# ---------------------------------------------------------------------------
# Drivers (pointwise right-hand sides of the discrete schemes)
# ---------------------------------------------------------------------------


def ns_driver(y, jac, grad_p, f_val):
    """Velocity driver f + grad p + (Y . nabla) Y, rowwise.

    y, grad_p, f_val: (B, d); jac[b, i, j] = dY_i/dx_j with shape (B, d, d).
    """
    conv = np.einsum("bj,bij->bi", y, jac)
    return f_val + grad_p + conv


def chns_u_driver(y, jac, grad_p, phi, grad_mu, C, f1):
    """Coupled velocity driver: ns_driver plus the capillary force C phi grad mu."""
    return ns_driver(y, jac, grad_p, f1) + C * phi * grad_mu


def ch_driver_hat(phi, mu, conv, f2, spec, diag):
    """Rotated phase-field drivers (F_hat_phi, F_hat_mu).

    Pre-rotation pair is (f2 + conv, (S/L_d)(f2 + conv) - (mu + phi - phi^3)/delta);
    conv is the u.grad(phi) transport term, zero for the pure phase-field system.
    All value arguments are (B, 1) arrays (or scalars).
    """
    pre1 = f2 + conv
    pre2 = (spec.S / spec.L_d) * pre1 - (mu + phi - phi**3) / spec.delta
    Ri = diag.R_inv
    return Ri[0, 0] * pre1 + Ri[0, 1] * pre2, Ri[1, 0] * pre1 + Ri[1, 1] * pre2


# ---------------------------------------------------------------------------
# Closed-form forward solutions
# ---------------------------------------------------------------------------


class TaylorGreen2D(_Frozen):
    """Decaying 2-D vortex lattice on [0, 2pi]^2; solves the flow equations with f = 0."""

    kind = "ns"
    d = 2

    def __init__(self, nu):
        if nu <= 0:
            raise ValueError("nu must be positive")
        self.nu = float(nu)
        self._freeze()

    def u(self, t, x):
        e = np.exp(-2.0 * self.nu * _tcol(t, x.shape[0]))
        c1, s1 = np.cos(x[:, :1]), np.sin(x[:, :1])
        c2, s2 = np.cos(x[:, 1:2]), np.sin(x[:, 1:2])
        return np.hstack([-c1 * s2, s1 * c2]) * e

    def jac_u(self, t, x):
        e = np.exp(-2.0 * self.nu * _tcol(t, x.shape[0]))[:, :, None]
        c1, s1 = np.cos(x[:, 0]), np.sin(x[:, 0])
        c2, s2 = np.cos(x[:, 1]), np.sin(x[:, 1])
        jac = np.empty((x.shape[0], 2, 2))
        jac[:, 0, 0] = s1 * s2
        jac[:, 0, 1] = -c1 * c2
        jac[:, 1, 0] = c1 * c2
        jac[:, 1, 1] = -s1 * s2
        return jac * e

    def p(self, t, x):
        e = np.exp(-4.0 * self.nu * _tcol(t, x.shape[0]))
        return -0.25 * (np.cos(2.0 * x[:, :1]) + np.cos(2.0 * x[:, 1:2])) * e

    def grad_p(self, t, x):
        e = np.exp(-4.0 * self.nu * _tcol(t, x.shape[0]))
        return 0.5 * np.hstack([np.sin(2.0 * x[:, :1]), np.sin(2.0 * x[:, 1:2])]) * e

    def f(self, t, x):
        return np.zeros((x.shape[0], 2))

    def on_tape(self, tape, t, x):
        """Heads {u1, u2, p} as tape variables; t is (B, 1), x is (B, 2)."""
        x1 = ad.slice_cols(x, 0, 1)
        x2 = ad.slice_cols(x, 1, 1)
        e2 = ad.exp(ad.smul(t, -2.0 * self.nu))
        e4 = ad.exp(ad.smul(t, -4.0 * self.nu))
        u1 = ad.smul(ad.mul(ad.mul(ad.cos(x1), ad.sin(x2)), e2), -1.0)
        u2 = ad.mul(ad.mul(ad.sin(x1), ad.cos(x2)), e2)
        sum2 = ad.add(ad.cos(ad.smul(x1, 2.0)), ad.cos(ad.smul(x2, 2.0)))
        p = ad.smul(ad.mul(sum2, e4), -0.25)
        return {"u1": u1, "u2": u2, "p": p}


class AbcFlow3D(_Frozen):
    """Decaying 3-D Beltrami flow on [0, 2pi]^3; solves the flow equations with f = 0."""

    kind = "ns"
    d = 3

    def __init__(self, nu, A=0.5, B=0.5, C=0.5):
        if nu <= 0:
            raise ValueError("nu must be positive")
        self.nu = float(nu)
        self.A = float(A)
        self.B = float(B)
        self.C = float(C)
        self._freeze()

    def u(self, t, x):
        e = np.exp(-self.nu * _tcol(t, x.shape[0]))
        s1, c1 = np.sin(x[:, :1]), np.cos(x[:, :1])
        s2, c2 = np.sin(x[:, 1:2]), np.cos(x[:, 1:2])
        s3, c3 = np.sin(x[:, 2:3]), np.cos(x[:, 2:3])
        u1 = self.A * s3 + self.C * c2
        u2 = self.B * s1 + self.A * c3
        u3 = self.C * s2 + self.B * c1
        return np.hstack([u1, u2, u3]) * e

    def jac_u(self, t, x):
        e = np.exp(-self.nu * _tcol(t, x.shape[0]))[:, :, None]
        s1, c1 = np.sin(x[:, 0]), np.cos(x[:, 0])
        s2, c2 = np.sin(x[:, 1]), np.cos(x[:, 1])
        s3, c3 = np.sin(x[:, 2]), np.cos(x[:, 2])
        jac = np.zeros((x.shape[0], 3, 3))
        jac[:, 0, 1] = -self.C * s2
        jac[:, 0, 2] = self.A * c3
        jac[:, 1, 0] = self.B * c1
        jac[:, 1, 2] = -self.A * s3
        jac[:, 2, 0] = -self.B * s1
        jac[:, 2, 1] = self.C * c2
        return jac * e

    def p(self, t, x):
        e = np.exp(-2.0 * self.nu * _tcol(t, x.shape[0]))
        s1, c1 = np.sin(x[:, :1]), np.cos(x[:, :1])
        s2, c2 = np.sin(x[:, 1:2]), np.cos(x[:, 1:2])
        s3, c3 = np.sin(x[:, 2:3]), np.cos(x[:, 2:3])
        mix = self.B * self.C * c1 * s2 + self.A * self.B * s1 * c3 + self.A * self.C * s3 * c2
        return -mix * e

    def grad_p(self, t, x):
        e = np.exp(-2.0 * self.nu * _tcol(t, x.shape[0]))
        s1, c1 = np.sin(x[:, :1]), np.cos(x[:, :1])
        s2, c2 = np.sin(x[:, 1:2]), np.cos(x[:, 1:2])
        s3, c3 = np.sin(x[:, 2:3]), np.cos(x[:, 2:3])
        g1 = self.B * self.C * s1 * s2 - self.A * self.B * c1 * c3
        g2 = self.A * self.C * s3 * s2 - self.B * self.C * c1 * c2
        g3 = self.A * self.B * s1 * s3 - self.A * self.C * c2 * c3
        return np.hstack([g1, g2, g3]) * e

    def f(self, t, x):
        return np.zeros((x.shape[0], 3))

    def on_tape(self, tape, t, x):
        """Heads {u1, u2, u3, p} as tape variables."""
        x1 = ad.slice_cols(x, 0, 1)
        x2 = ad.slice_cols(x, 1, 1)
        x3 = ad.slice_cols(x, 2, 1)
        e1 = ad.exp(ad.smul(t, -self.nu))
        e2 = ad.exp(ad.smul(t, -2.0 * self.nu))
        u1 = ad.mul(ad.add(ad.smul(ad.sin(x3), self.A), ad.smul(ad.cos(x2), self.C)), e1)
        u2 = ad.mul(ad.add(ad.smul(ad.sin(x1), self.B), ad.smul(ad.cos(x3), self.A)), e1)
        u3 = ad.mul(ad.add(ad.smul(ad.sin(x2), self.C), ad.smul(ad.cos(x1), self.B)), e1)
        mix = ad.add(
            ad.add(
                ad.smul(ad.mul(ad.cos(x1), ad.sin(x2)), self.B * self.C),
                ad.smul(ad.mul(ad.sin(x1), ad.cos(x3)), self.A * self.B),
            ),
            ad.smul(ad.mul(ad.sin(x3), ad.cos(x2)), self.A * self.C),
        )
        p = ad.smul(ad.mul(mix, e2), -1.0)
        return {"u1": u1, "u2": u2, "u3": u3, "p": p}


class ChCosine(_Frozen):
    """Separable cosine phase field in d dimensions.

    phi(t, x) = exp(-t) cos(pi/sqrt(d) sum_i x_i).  The chemical potential and
    source that make (phi, mu) an exact solution follow from the stabilized
    system in closed form: mu = a exp(-t) c + b exp(-3t) c^3 with
    a = (gamma^2 pi^2 - delta S / L_d - 1) / (1 - delta), b = 1 / (1 - 3 delta).
    """

    kind = "ch"

    def __init__(self, d, gamma, L_d=5e-4, delta=0.01, S=None):
        if d < 1:
            raise ValueError("d must be at least 1")
        self.d = int(d)
        self.gamma = float(gamma)
        self.L_d = float(L_d)
        self.delta = float(delta)
        self.S = float(gamma if S is None else S)
        if self.delta in (1.0,) or abs(1.0 - 3.0 * self.delta) < 1e-14:
            raise ValueError("delta must differ from 1 and 1/3")
        self.kappa = math.pi / math.sqrt(self.d)
        self.a = (self.gamma**2 * math.pi**2 - self.delta * self.S / self.L_d - 1.0) / (
            1.0 - self.delta
        )
        self.b = 1.0 / (1.0 - 3.0 * self.delta)
        self._freeze()

    def _c(self, x):
        return np.cos(self.kappa * x.sum(axis=1, keepdims=True))

    def _s(self, x):
        return np.sin(self.kappa * x.sum(axis=1, keepdims=True))

    def phi(self, t, x):
        return np.exp(-_tcol(t, x.shape[0])) * self._c(x)

    def grad_phi(self, t, x):
        g = -self.kappa * np.exp(-_tcol(t, x.shape[0])) * self._s(x)
        return np.repeat(g, self.d, axis=1)

    def mu(self, t, x):
        tc = _tcol(t, x.shape[0])
        c = self._c(x)
        return self.a * np.exp(-tc) * c + self.b * np.exp(-3.0 * tc) * c**3

    def grad_mu(self, t, x):
        tc = _tcol(t, x.shape[0])
        c = self._c(x)
        radial = (self.a * np.exp(-tc) + 3.0 * self.b * np.exp(-3.0 * tc) * c**2) * (
            -self.kappa * self._s(x)
        )
        return np.repeat(radial, self.d, axis=1)

    def f(self, t, x):
        # f = L_d lap(mu) - phi_t with lap(c) = -pi^2 c, lap(c^3) = pi^2 (6c - 9c^3).
        tc = _tcol(t, x.shape[0])
        c = self._c(x)
        pi2 = math.pi**2
        lap_mu = -self.a * pi2 * np.exp(-tc) * c + self.b * pi2 * np.exp(-3.0 * tc) * (
            6.0 * c - 9.0 * c**3
        )
        phi_t = -np.exp(-tc) * c
        return self.L_d * lap_mu - phi_t

    def on_tape(self, tape, t, x):
        """Heads {phi, mu} as tape variables."""
        arg = ad.smul(ad.sum_rows(x), self.kappa)
        c = ad.cos(arg)
        e1 = ad.exp(ad.smul(t, -1.0))
        e3 = ad.exp(ad.smul(t, -3.0))
        phi = ad.mul(e1, c)
        mu = ad.add(
            ad.smul(ad.mul(e1, c), self.a),
            ad.smul(ad.mul(e3, ad.power(c, 3)), self.b),
        )
        return {"phi": phi, "mu": mu}


class ChnsExact(_Frozen):
    """Coupled 2-D solution: decaying vortex velocity with a sine-product phase.

    u is the Taylor-Green profile scaled by exp(-t); phi = exp(-t) sin x1 sin x2.
    mu = a exp(-t) w + b exp(-3t) w^3 with a = (2 gamma^2 - delta S / L_d - 1)/(1 - delta)
    and b = 1/(1 - 3 delta); the sources f1, f2 make the fields exact.
    """

    kind = "chns"
    d = 2

    def __init__(self, nu=1e-3, C=1.0, L_d=5e-4, gamma=0.01, delta=0.02, S=0.0032):
        if nu <= 0:
            raise ValueError("nu must be positive")
        self.nu = float(nu)
        self.C = float(C)
        self.L_d = float(L_d)
        self.gamma = float(gamma)
        self.delta = float(delta)
        self.S = float(S)
        self.a = (2.0 * self.gamma**2 - self.delta * self.S / self.L_d - 1.0) / (
            1.0 - self.delta
        )
        self.b = 1.0 / (1.0 - 3.0 * self.delta)
        self._freeze()

    def u(self, t, x):
        e = np.exp(-_tcol(t, x.shape[0]))
        c1, s1 = np.cos(x[:, :1]), np.sin(x[:, :1])
        c2, s2 = np.cos(x[:, 1:2]), np.sin(x[:, 1:2])
        return np.hstack([-c1 * s2, s1 * c2]) * e

    def jac_u(self, t, x):
        e = np.exp(-_tcol(t, x.shape[0]))[:, :, None]
        c1, s1 = np.cos(x[:, 0]), np.sin(x[:, 0])
        c2, s2 = np.cos(x[:, 1]), np.sin(x[:, 1])
        jac = np.empty((x.shape[0], 2, 2))
        jac[:, 0, 0] = s1 * s2
        jac[:, 0, 1] = -c1 * c2
        jac[:, 1, 0] = c1 * c2
        jac[:, 1, 1] = -s1 * s2
        return jac * e

    def p(self, t, x):
        e = np.exp(-2.0 * _tcol(t, x.shape[0]))
        return -0.25 * (np.cos(2.0 * x[:, :1]) + np.cos(2.0 * x[:, 1:2])) * e

    def grad_p(self, t, x):
        e = np.exp(-2.0 * _tcol(t, x.shape[0]))
        return 0.5 * np.hstack([np.sin(2.0 * x[:, :1]), np.sin(2.0 * x[:, 1:2])]) * e

    def _w(self, x):
        return np.sin(x[:, :1]) * np.sin(x[:, 1:2])

    def phi(self, t, x):
        return np.exp(-_tcol(t, x.shape[0])) * self._w(x)

    def grad_phi(self, t, x):
        e = np.exp(-_tcol(t, x.shape[0]))
        g1 = np.cos(x[:, :1]) * np.sin(x[:, 1:2])
        g2 = np.sin(x[:, :1]) * np.cos(x[:, 1:2])
        return np.hstack([g1, g2]) * e

    def mu(self, t, x):
        tc = _tcol(t, x.shape[0])
        w = self._w(x)
        return self.a * np.exp(-tc) * w + self.b * np.exp(-3.0 * tc) * w**3

    def grad_mu(self, t, x):
        tc = _tcol(t, x.shape[0])
        w = self._w(x)
        radial = self.a * np.exp(-tc) + 3.0 * self.b * np.exp(-3.0 * tc) * w**2
        g1 = np.cos(x[:, :1]) * np.sin(x[:, 1:2])
        g2 = np.sin(x[:, :1]) * np.cos(x[:, 1:2])
        return radial * np.hstack([g1, g2])

    def f1(self, t, x):
        return (1.0 - 2.0 * self.nu) * self.u(t, x) - self.C * self.phi(t, x) * self.grad_mu(t, x)

    def f2(self, t, x):
        # f2 = L_d lap(mu) - phi_t - u.grad(phi) with lap(w) = -2w and
        # lap(w^3) = 6w (cos^2 x1 sin^2 x2 + sin^2 x1 cos^2 x2) - 6w^3.
        tc = _tcol(t, x.shape[0])
        w = self._w(x)
        c1s2 = np.cos(x[:, :1]) * np.sin(x[:, 1:2])
        s1c2 = np.sin(x[:, :1]) * np.cos(x[:, 1:2])
        lap_mu = -2.0 * self.a * np.exp(-tc) * w + 6.0 * self.b * np.exp(-3.0 * tc) * (
            w * (c1s2**2 + s1c2**2) - w**3
        )
        phi_t = -np.exp(-tc) * w
        transport = np.exp(-2.0 * tc) * (s1c2**2 - c1s2**2)
        return self.L_d * lap_mu - phi_t - transport

    def on_tape(self, tape, t, x):
        """Heads {u1, u2, p, phi, mu} as tape variables."""
        x1 = ad.slice_cols(x, 0, 1)
        x2 = ad.slice_cols(x, 1, 1)
        e1 = ad.exp(ad.smul(t, -1.0))
        e2 = ad.exp(ad.smul(t, -2.0))
        e3 = ad.exp(ad.smul(t, -3.0))
        u1 = ad.smul(ad.mul(ad.mul(ad.cos(x1), ad.sin(x2)), e1), -1.0)
        u2 = ad.mul(ad.mul(ad.sin(x1), ad.cos(x2)), e1)
        sum2 = ad.add(ad.cos(ad.smul(x1, 2.0)), ad.cos(ad.smul(x2, 2.0)))
        p = ad.smul(ad.mul(sum2, e2), -0.25)
        w = ad.mul(ad.sin(x1), ad.sin(x2))
        phi = ad.mul(e1, w)
        mu = ad.add(
            ad.smul(ad.mul(e1, w), self.a),
            ad.smul(ad.mul(e3, ad.power(w, 3)), self.b),
        )
        return {"u1": u1, "u2": u2, "p": p, "phi": phi, "mu": mu}


# ---------------------------------------------------------------------------
# Time reversal
# ---------------------------------------------------------------------------

# Sign each field picks up under the forward <-> backward change of variables.
_BACKWARD_SIGN = {
    "u": -1.0,
    "u1": -1.0,
    "u2": -1.0,
    "u3": -1.0,
    "jac_u": -1.0,
    "phi": -1.0,
    "mu": -1.0,
    "grad_phi": -1.0,
    "grad_mu": -1.0,
    "p": 1.0,
    "grad_p": 1.0,
    "f": 1.0,
    "f1": 1.0,
    "f2": 1.0,
}


class BackwardExact:
    """Backward-frame view of a forward closed-form solution on [0, T].

    Velocity and phase fields flip sign and run on reversed time; pressure and
    sources keep their sign.  The terminal data g(x) equals the backward field
    at t = T, i.e. minus the forward initial data.
    """

    def __init__(self, forward, T):
        if T <= 0:
            raise ValueError("T must be positive")
        self.forward = forward
        self.T = float(T)
        self.kind = forward.kind
        self.d = forward.d

    def _flip(self, name, t, x):
        fn = getattr(self.forward, name)
        return _BACKWARD_SIGN[name] * fn(self.T - _tcol(t, x.shape[0]), x)

    def u(self, t, x):
        return self._flip("u", t, x)

    def jac_u(self, t, x):
        fn = self.forward.jac_u
        return -fn(self.T - _tcol(t, x.shape[0]), x)

    def p(self, t, x):
        return self._flip("p", t, x)

    def grad_p(self, t, x):
        return self._flip("grad_p", t, x)

    def phi(self, t, x):
        return self._flip("phi", t, x)

    def grad_phi(self, t, x):
        return self._flip("grad_phi", t, x)

    def mu(self, t, x):
        return self._flip("mu", t, x)

    def grad_mu(self, t, x):
        return self._flip("grad_mu", t, x)

    def f(self, t, x):
        return self._flip("f", t, x)

    def f1(self, t, x):
        return self._flip("f1", t, x)

    def f2(self, t, x):
        return self._flip("f2", t, x)

    def g_u(self, x):
        return self.u(self.T, x)

    def g_phi(self, x):
        return self.phi(self.T, x)

    def g(self, x):
        """Terminal data for the primary field (velocity or phase)."""
        if self.kind == "ns":
            return self.g_u(x)
        if self.kind == "ch":
            return self.g_phi(x)
        raise ValueError("coupled problems have separate g_u and g_phi terminals")

    def on_tape(self, tape, t, x):
        """Backward-frame heads as tape variables; derivatives chain through T - t."""
        s = ad.sub(ad.constant(np.full(t.value.shape, self.T)), t)
        heads = self.forward.on_tape(tape, s, x)
        out = {}
        for name, var in heads.items():
            sign = _BACKWARD_SIGN[name]
            out[name] = ad.smul(var, -1.0) if sign < 0 else var
        return out


def time_reverse_adapter(forward, T):
    """Wrap a forward closed-form solution as its backward-frame counterpart."""
    return BackwardExact(forward, T)


def map_back(sample, T):
    """Map a backward-frame sample dict to the forward frame (an involution).

    The dict may hold "t" plus any subset of the known field names; field
    arrays are sign-flipped per the change of variables and "t" becomes T - t.
    """
    out = {}
    for name, value in sample.items():
        if name == "t":
            out["t"] = T - np.asarray(value, dtype=float)
        elif name in _BACKWARD_SIGN:
            out[name] = _BACKWARD_SIGN[name] * np.asarray(value, dtype=float)
        else:
            raise KeyError(f"unknown field {name!r} in sample")
    return out


# ---------------------------------------------------------------------------
# Boundary data
# ---------------------------------------------------------------------------

BOUNDARY_KINDS = ("whole-space", "dirichlet", "neumann", "mixed", "periodic")


class DirichletData(_Frozen):
    """Boundary values, optionally piecewise by boundary code with component masks.

    Plain form: a single callable h(t, x) -> (B, m) applying to every boundary
    point, with an optional fixed 0/1 component mask.  Piecewise form: a dict
    code -> (callable, mask) keyed by the geometry's boundary classification.
    """

    def __init__(self, fn=None, mask=None, pieces=None):
        if (fn is None) == (pieces is None):
            raise ValueError("provide exactly one of fn or pieces")
        self.fn = fn
        self.mask = None if mask is None else np.asarray(mask, dtype=float)
        self.pieces = None
        if pieces is not None:
            self.pieces = {
                int(code): (piece_fn, np.asarray(piece_mask, dtype=float))
                for code, (piece_fn, piece_mask) in pieces.items()
            }
        self._freeze()

    def values_and_mask(self, t, x, codes=None):
        """Boundary values and the active-component mask at rows of x.

        codes is required in piecewise form: one geometry boundary code per row.
        """
        if self.pieces is None:
            h = self.fn(t, x)
            mask = np.ones_like(h) if self.mask is None else np.broadcast_to(
                self.mask, h.shape
            ).copy()
            return h, mask
        if codes is None:
            raise ValueError("piecewise boundary data needs per-row boundary codes")
        codes = np.asarray(codes, dtype=int)
        m = self.pieces[next(iter(self.pieces))][1].shape[0]
        h = np.zeros((x.shape[0], m))
        mask = np.zeros((x.shape[0], m))
        for code in np.unique(codes):
            if int(code) not in self.pieces:
                raise KeyError(f"no boundary data for code {int(code)}")
            piece_fn, piece_mask = self.pieces[int(code)]
            rows = codes == code
            h[rows] = piece_fn(t, x[rows])
            mask[rows] = piece_mask
        return h, mask


class BoundarySpec(_Frozen):
    """Boundary treatment: one of whole-space, dirichlet, neumann, mixed, periodic.

    geometry is the spatial domain (the sampling region for whole-space runs).
    h carries Dirichlet data (callable or DirichletData), q the normal-derivative
    data, periods the box edge lengths for the periodic embedding.  reflect_codes
    lists boundary codes treated by reflection inside an otherwise stopping run.
    """

    def __init__(self, kind, geometry, h=None, q=None, periods=None, reflect_codes=()):
        if kind not in BOUNDARY_KINDS:
            raise ValueError(f"unknown boundary kind {kind!r}")
        if kind == "dirichlet" and h is None:
            raise ValueError("dirichlet boundary needs h")
        if kind == "neumann" and q is None:
            raise ValueError("neumann boundary needs q")
        if kind == "mixed" and (h is None or q is None):
            raise ValueError("mixed boundary needs both h and q")
        if kind == "periodic":
            if not isinstance(geometry, Box):
                raise ValueError("periodic boundary needs a box geometry")
            edges = geometry.highs - geometry.lows
            if periods is None:
                periods = edges
            periods = np.asarray(periods, dtype=float)
            if periods.shape != edges.shape or np.max(np.abs(periods - edges)) > 1e-12:
                raise ValueError("periods must equal the box edge lengths")
        self.kind = kind
        self.geometry = geometry
        self.h = h
        self.q = q
        self.periods = None if periods is None else np.asarray(periods, dtype=float)
        self.reflect_codes = tuple(int(c) for c in reflect_codes)
        self._freeze()


def dirichlet_data_from_exact(backward):
    """Full-boundary Dirichlet data taken from a backward exact solution."""
    if backward.kind == "ns":
        return DirichletData(fn=backward.u)
    return DirichletData(fn=backward.phi)


def neumann_data_from_exact(backward, geometry):
    """Normal-derivative data n . grad(field) from a backward exact solution.

    Velocity problems use the full Jacobian (one flux per component); phase
    problems use grad(mu), the flux entering the mixed boundary treatment.
    """
    if backward.kind == "ns":

        def q(t, x):
            jac = backward.jac_u(t, x)
            normals = geometry.boundary_normal(x)
            return np.einsum("bij,bj->bi", jac, normals)

        return q

    def q(t, x):
        grad = backward.grad_mu(t, x)
        normals = geometry.boundary_normal(x)
        return np.sum(grad * normals, axis=1, keepdims=True)

    return q


# ---------------------------------------------------------------------------
# Problem specifications
# ---------------------------------------------------------------------------


class NavierStokesSpec(_Frozen):
    """Backward-frame incompressible flow problem.

    f(t, x) -> (B, d) source and g(x) -> (B, d) terminal velocity are callables
    in the backward frame.
    """

    problem = "ns"

    def __init__(self, d, nu, f, g, boundary, exact=None):
        if nu <= 0:
            raise ValueError("nu must be positive")
        if d < 1:
            raise ValueError("d must be at least 1")
        self.d = int(d)
        self.nu = float(nu)
        self.f = f
        self.g = g
        self.boundary = boundary
        self.exact = exact
        self._freeze()


class CahnHilliardSpec(_Frozen):
    """Backward-frame stabilized phase-field problem.

    delta doubles as the training time step: the trainer checks dt == delta.
    The diagonalization is computed at construction, so an inadmissible S
    fails fast with the minimal admissible value in the message.
    """

    problem = "ch"

    def __init__(self, d, L_d, gamma, delta, S, f, g, boundary, exact=None):
        if d < 1:
            raise ValueError("d must be at least 1")
        self.d = int(d)
        self.L_d = float(L_d)
        self.gamma = float(gamma)
        self.delta = float(delta)
        self.S = float(S)
        self.diag = ch_diagonalize(L_d, gamma, delta, S)
        self.f = f
        self.g = g
        self.boundary = boundary
        self.exact = exact
        self._freeze()


class ChnsSpec(_Frozen):
    """Backward-frame coupled flow / phase-field problem.

    C scales the capillary force; f1, f2 are the velocity and phase sources;
    g_u, g_phi the terminal data.  delta doubles as the training time step.
    """

    problem = "chns"

    def __init__(self, d, nu, C, L_d, gamma, delta, S, f1, f2, g_u, g_phi, boundary, exact=None):
        if nu <= 0:
            raise ValueError("nu must be positive")
        if d < 1:
            raise ValueError("d must be at least 1")
        self.d = int(d)
        self.nu = float(nu)
        self.C = float(C)
        self.L_d = float(L_d)
        self.gamma = float(gamma)
        self.delta = float(delta)
        self.S = float(S)
        self.diag = ch_diagonalize(L_d, gamma, delta, S)
        self.f1 = f1
        self.f2 = f2
        self.g_u = g_u
        self.g_phi = g_phi
        self.boundary = boundary
        self.exact = exact
        self._freeze()


# ---------------------------------------------------------------------------
# Initial data for the interface experiment
# ---------------------------------------------------------------------------


def interface_initial(x, r=0.4, gamma=0.03):
    """Two-bubble phase profile and resting velocity on the plane.

    phi0 = max(tanh((r - R1)/(2 gamma)), tanh((r - R2)/(2 gamma))) with bubble
    centers at (+/- 0.7 r, 0); u0 = 0.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[1] != 2:
        raise ValueError("interface initial data is planar (d = 2)")
    r1 = np.sqrt((x[:, :1] - 0.7 * r) ** 2 + x[:, 1:2] ** 2)
    r2 = np.sqrt((x[:, :1] + 0.7 * r) ** 2 + x[:, 1:2] ** 2)
    phi0 = np.maximum(np.tanh((r - r1) / (2.0 * gamma)), np.tanh((r - r2) / (2.0 * gamma)))
    return phi0, np.zeros((x.shape[0], 2))


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------


class ProblemSetup:
    """A parsed problem: spec plus horizon and optional reference fields."""

    def __init__(self, spec, T, forward=None, backward=None):
        self.spec = spec
        self.T = float(T)
        self.forward = forward
        self.backward = backward


_EXACT_KINDS = {
    "taylor-green-2d": "ns",
    "abc-flow-3d": "ns",
    "ch-cosine": "ch",
    "chns-exact": "chns",
}


def _build_exact(name, problem, d, coef):
    if name == "taylor-green-2d":
        return TaylorGreen2D(nu=coef["nu"])
    if name == "abc-flow-3d":
        return AbcFlow3D(
            nu=coef["nu"], A=coef.get("A", 0.5), B=coef.get("B", 0.5), C=coef.get("C", 0.5)
        )
    if name == "ch-cosine":
        return ChCosine(
            d=d,
            gamma=coef["gamma"],
            L_d=coef.get("L_d", 5e-4),
            delta=coef.get("delta", 0.01),
            S=coef.get("S"),
        )
    if name == "chns-exact":
        return ChnsExact(
            nu=coef.get("nu", 1e-3),
            C=coef.get("C", 1.0),
            L_d=coef.get("L_d", 5e-4),
            gamma=coef.get("gamma", 0.01),
            delta=coef.get("delta", 0.02),
            S=coef.get("S", 0.0032),
        )
    raise ValueError(f"unknown exact solution id {name!r}")


def _zeros_fn(m):
    def fn(t, x):
        return np.zeros((x.shape[0], m))

    return fn


def _zeros_terminal(m):
    def fn(x):
        return np.zeros((x.shape[0], m))

    return fn


def _boundary_from_config(bc_cfg, geometry, backward):
    kind = bc_cfg.get("kind", "whole-space")
    reflect_codes = tuple(bc_cfg.get("reflect_codes", ()))
    h = q = None
    if kind == "dirichlet":
        if backward is None:
            raise ValueError("dirichlet data requires an exact solution id")
        h = dirichlet_data_from_exact(backward)
    elif kind == "neumann":
        if backward is None:
            raise ValueError("neumann data requires an exact solution id")
        q = neumann_data_from_exact(backward, geometry)
    elif kind == "mixed":
        if backward is None:
            raise ValueError("mixed data requires an exact solution id")
        h = DirichletData(fn=backward.phi)
        q = neumann_data_from_exact(backward, geometry)
    periods = bc_cfg.get("periods")
    return BoundarySpec(
        kind, geometry, h=h, q=q, periods=periods, reflect_codes=reflect_codes
    )


def problem_from_config(config):
    """Build a ProblemSetup from a config dict.

    Schema: {"problem": "ns"|"ch"|"chns", "T": float, "coefficients": {...},
    "domain": geometry dict, "boundary": {"kind": ...}, "exact": id or null,
    "initial": optional {"id": "two-bubble", ...} for coupled runs}.
    Terminal and source data come from the exact solution when one is named;
    otherwise sources are zero and terminals are zero or the named initial
    profile (sign-flipped into the backward frame).
    """
    problem = config["problem"]
    if problem not in ("ns", "ch", "chns"):
        raise ValueError(f"unknown problem {problem!r}")
    T = float(config["T"])
    coef = dict(config.get("coefficients", {}))
    geometry = geometry_from_dict(config["domain"])
    d = geometry.d

    forward = backward = None
    exact_id = config.get("exact")
    if exact_id:
        if exact_id not in _EXACT_KINDS:
            raise ValueError(f"unknown exact solution id {exact_id!r}")
        if _EXACT_KINDS[exact_id] != problem:
            raise ValueError(f"exact solution {exact_id!r} does not match problem {problem!r}")
        forward = _build_exact(exact_id, problem, d, coef)
        if getattr(forward, "d", d) != d:
            raise ValueError(f"exact solution {exact_id!r} is {forward.d}-dimensional")
        backward = time_reverse_adapter(forward, T)

    boundary = _boundary_from_config(config.get("boundary", {}), geometry, backward)

    if problem == "ns":
        f = backward.f if backward is not None else _zeros_fn(d)
        g = backward.g_u if backward is not None else _zeros_terminal(d)
        spec = NavierStokesSpec(d, coef["nu"], f, g, boundary, exact=backward)
    elif problem == "ch":
        f = backward.f if backward is not None else _zeros_fn(1)
        g = backward.g_phi if backward is not None else _zeros_terminal(1)
        spec = CahnHilliardSpec(
            d,
            coef.get("L_d", 5e-4),
            coef["gamma"],
            coef["delta"],
            coef["S"],
            f,
            g,
            boundary,
            exact=backward,
        )
    else:
        f1 = backward.f1 if backward is not None else _zeros_fn(d)
        f2 = backward.f2 if backward is not None else _zeros_fn(1)
        g_u = backward.g_u if backward is not None else _zeros_terminal(d)
        if backward is not None:
            g_phi = backward.g_phi
        else:
            initial = config.get("initial")
            if initial and initial.get("id") == "two-bubble":
                bubble_r = float(initial.get("r", 0.4))
                bubble_gamma = float(initial.get("gamma", 0.03))

                def g_phi(x):
                    phi0, _ = interface_initial(x, r=bubble_r, gamma=bubble_gamma)
                    return -phi0

            else:
                g_phi = _zeros_terminal(1)
        spec = ChnsSpec(
            d,
            coef["nu"],
            coef.get("C", 1.0),
            coef.get("L_d", 5e-4),
            coef["gamma"],
            coef["delta"],
            coef["S"],
            f1,
            f2,
            g_u,
            g_phi,
            boundary,
            exact=backward,
        )
    return ProblemSetup(spec, T, forward=forward, backward=backward)
