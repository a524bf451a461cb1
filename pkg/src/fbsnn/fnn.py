"""Fully connected networks over the tape engine.

A network maps (t, x) to a vector of solution heads. Besides plain values it
can propagate first-order tangents forward through the layers while staying
on the tape, which yields spatial derivatives (a directional derivative along
a supplied direction, or the full Jacobian for low-dimensional problems) as
tape nodes that remain differentiable with respect to the parameters. A
separate route treats the input itself as the differentiation target and uses
reverse passes; it is the independent oracle for the tangent route.

Inputs can pass through a trigonometric feature map that makes every output
exactly periodic, and outputs can be multiplied by fixed shape functions that
vanish on constrained boundary pieces.
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad


def init_layers(sizes, seed=0):
    """Gaussian fan-in initialization: W ~ N(0, 1/fan_in), zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    layers = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
        b = np.zeros((1, n_out))
        layers.append((w, b))
    return layers


def _t_column(t, rows):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full((rows, 1), float(t))
    t = t.reshape(-1, 1)
    if t.shape[0] == 1 and rows > 1:
        return np.full((rows, 1), t[0, 0])
    if t.shape[0] != rows:
        raise ad.ShapeError(f"time column has {t.shape[0]} rows, points have {rows}")
    return t


class IdentityFeatures:
    """Raw (t, x) input features."""

    def __init__(self, d):
        self.d = int(d)

    @property
    def feature_dim(self):
        return 1 + self.d

    def features(self, t, x):
        return np.concatenate([_t_column(t, x.shape[0]), x], axis=1)

    def tangent_seed(self, x, v):
        # derivative of the features along spatial direction v; t is frozen
        return np.concatenate([np.zeros((x.shape[0], 1)), v], axis=1)

    def features_on_tape(self, t, xvar):
        t_col = ad.constant(_t_column(t, xvar.value.shape[0]))
        return ad.concat([t_col, xvar], axis=1)


class PeriodicEmbedding:
    """Maps each coordinate to sin/cos pairs so outputs are exactly periodic.

    x_i contributes {sin(2 pi j x_i / I_i), cos(2 pi j x_i / I_i)} for
    j = 1..harmonics; time is passed through unchanged in the first column.
    """

    def __init__(self, periods, harmonics=1):
        self.periods = np.asarray(periods, dtype=np.float64).reshape(-1)
        if np.any(self.periods <= 0):
            raise ValueError("periods must be positive")
        self.harmonics = int(harmonics)
        if self.harmonics < 1:
            raise ValueError("harmonics must be >= 1")
        self.d = self.periods.size
        # angular frequency per (dimension, harmonic)
        self._omega = [
            [2.0 * np.pi * j / self.periods[i] for j in range(1, self.harmonics + 1)]
            for i in range(self.d)
        ]

    @property
    def feature_dim(self):
        return 1 + 2 * self.harmonics * self.d

    def features(self, t, x):
        cols = [_t_column(t, x.shape[0])]
        for i in range(self.d):
            xi = x[:, i : i + 1]
            for w in self._omega[i]:
                cols.append(np.sin(w * xi))
                cols.append(np.cos(w * xi))
        return np.concatenate(cols, axis=1)

    def tangent_seed(self, x, v):
        cols = [np.zeros((x.shape[0], 1))]
        for i in range(self.d):
            xi = x[:, i : i + 1]
            vi = v[:, i : i + 1]
            for w in self._omega[i]:
                cols.append(w * np.cos(w * xi) * vi)
                cols.append(-w * np.sin(w * xi) * vi)
        return np.concatenate(cols, axis=1)

    def features_on_tape(self, t, xvar):
        cols = [ad.constant(_t_column(t, xvar.value.shape[0]))]
        for i in range(self.d):
            xi = ad.slice_cols(xvar, i, 1)
            for w in self._omega[i]:
                arg = ad.smul(xi, w)
                cols.append(ad.sin(arg))
                cols.append(ad.cos(arg))
        return ad.concat(cols, axis=1)

    def to_dict(self):
        return {"periods": self.periods.tolist(), "harmonics": self.harmonics}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["periods"], doc["harmonics"])


class CavityWrapper:
    """Shape functions for the unit-square driven cavity.

    The first velocity head vanishes on the three no-slip walls (x1 = 0,
    x1 = 1, x2 = 0) but not on the lid, the second on all four walls; the
    pressure head is untouched. Heads are (u1, u2, p).
    """

    name = "cavity"

    def weights(self, x, m):
        if m != 3:
            raise ad.ShapeError(f"cavity wrapper expects 3 heads, got {m}")
        x1, x2 = x[:, 0:1], x[:, 1:2]
        one = np.ones_like(x1)
        zero = np.zeros_like(x1)
        w = np.concatenate(
            [8 * x1 * (x1 - 1) * x2, 8 * x1 * (x1 - 1) * x2 * (x2 - 1), one], axis=1
        )
        d1 = np.concatenate(
            [8 * (2 * x1 - 1) * x2, 8 * (2 * x1 - 1) * x2 * (x2 - 1), zero], axis=1
        )
        d2 = np.concatenate(
            [8 * x1 * (x1 - 1), 8 * x1 * (x1 - 1) * (2 * x2 - 1), zero], axis=1
        )
        return w, [d1, d2]

    def weights_on_tape(self, xvar, m):
        if m != 3:
            raise ad.ShapeError(f"cavity wrapper expects 3 heads, got {m}")
        one = ad.constant([[1.0]])
        x1 = ad.slice_cols(xvar, 0, 1)
        x2 = ad.slice_cols(xvar, 1, 1)
        base = ad.mul(ad.mul(x1, ad.sub(x1, one)), x2)
        w0 = ad.smul(base, 8.0)
        w1 = ad.smul(ad.mul(base, ad.sub(x2, one)), 8.0)
        ones_col = ad.constant(np.ones((xvar.value.shape[0], 1)))
        return ad.concat([w0, w1, ones_col], axis=1)

    def to_dict(self):
        return {"name": self.name}


class ObstacleWrapper:
    """Shape functions for the channel with a circular obstacle.

    Both velocity heads vanish on the circle r = 1/2 about the origin; the
    second additionally vanishes on the inlet x1 = -2 and the walls x2 = -2,
    x2 = 2. Nothing vanishes on the outflow face. Heads are (u1, u2, p).
    """

    name = "obstacle"

    def weights(self, x, m):
        if m != 3:
            raise ad.ShapeError(f"obstacle wrapper expects 3 heads, got {m}")
        x1, x2 = x[:, 0:1], x[:, 1:2]
        r2 = x1 ** 2 + x2 ** 2
        s = 1.0 - 0.25 / r2
        ds1 = 0.5 * x1 / r2 ** 2
        ds2 = 0.5 * x2 / r2 ** 2
        g = (x1 + 2) * (x2 ** 2 - 4)
        dg1 = x2 ** 2 - 4
        dg2 = (x1 + 2) * 2 * x2
        one = np.ones_like(x1)
        zero = np.zeros_like(x1)
        w = np.concatenate([8 * s, 8 * s * g, one], axis=1)
        d1 = np.concatenate([8 * ds1, 8 * (ds1 * g + s * dg1), zero], axis=1)
        d2 = np.concatenate([8 * ds2, 8 * (ds2 * g + s * dg2), zero], axis=1)
        return w, [d1, d2]

    def weights_on_tape(self, xvar, m):
        if m != 3:
            raise ad.ShapeError(f"obstacle wrapper expects 3 heads, got {m}")
        two = ad.constant([[2.0]])
        x1 = ad.slice_cols(xvar, 0, 1)
        x2 = ad.slice_cols(xvar, 1, 1)
        r2 = ad.add(ad.power(x1, 2), ad.power(x2, 2))
        s = ad.sub(ad.constant([[1.0]]), ad.smul(ad.power(r2, -1), 0.25))
        g = ad.mul(ad.add(x1, two), ad.sub(ad.power(x2, 2), ad.constant([[4.0]])))
        w0 = ad.smul(s, 8.0)
        w1 = ad.smul(ad.mul(s, g), 8.0)
        ones_col = ad.constant(np.ones((xvar.value.shape[0], 1)))
        return ad.concat([w0, w1, ones_col], axis=1)

    def to_dict(self):
        return {"name": self.name}


WRAPPERS = {"cavity": CavityWrapper, "obstacle": ObstacleWrapper}


class EvalResult:
    """Network outputs on a tape: values plus requested spatial derivatives."""

    __slots__ = ("y", "dy", "jac")

    def __init__(self, y, dy=None, jac=None):
        self.y = y  # (B, m) Var
        self.dy = dy  # (B, m) Var: gradient of each head dotted with `direction`
        self.jac = jac  # list of d (B, m) Vars: per-coordinate partials


class Network:
    """Feed-forward network with optional periodic features and output shaping."""

    def __init__(self, d_in, d_out, hidden=(30, 30, 30, 30), activation="cos",
                 embedding=None, wrapper=None, seed=0, layers=None):
        if activation not in ("cos", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        self.d_in = int(d_in)
        self.d_out = int(d_out)
        self.activation = activation
        self.embedding = embedding
        self.features = embedding if embedding is not None else IdentityFeatures(d_in)
        if embedding is not None and embedding.d != self.d_in:
            raise ValueError(
                f"embedding covers {embedding.d} dims, network input is {self.d_in}"
            )
        self.wrapper = wrapper
        self.layer_sizes = [self.features.feature_dim, *map(int, hidden), self.d_out]
        if layers is None:
            layers = init_layers(self.layer_sizes, seed)
        shapes = [(w.shape, b.shape) for w, b in layers]
        want = [
            ((n_in, n_out), (1, n_out))
            for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:])
        ]
        if shapes != want:
            raise ad.ShapeError(f"layer shapes {shapes} do not match sizes {self.layer_sizes}")
        self.layers = [(np.asarray(w, float), np.asarray(b, float)) for w, b in layers]

    # ---- parameters ----

    def params_on(self, tape):
        """Leaf variables for this network's parameters, cached per tape."""
        key = id(self)
        if key not in tape.param_cache:
            tape.param_cache[key] = [
                (tape.var(w), tape.var(b)) for w, b in self.layers
            ]
        return tape.param_cache[key]

    def param_arrays(self):
        return [a for pair in self.layers for a in pair]

    def n_params(self):
        return sum(a.size for a in self.param_arrays())

    # ---- activation helpers ----

    def _act_np(self, a):
        return np.cos(a) if self.activation == "cos" else np.tanh(a)

    def _act_and_deriv(self, a):
        if self.activation == "cos":
            return ad.cos(a), ad.smul(ad.sin(a), -1.0)
        h = ad.tanh(a)
        return h, ad.sub(ad.constant([[1.0]]), ad.mul(h, h))

    # ---- training route: constant inputs, tangents propagated forward ----

    def evaluate(self, tape, t, x, direction=None, want_jacobian=False):
        """Values and spatial derivatives at constant points, on a tape.

        t: scalar or (B, 1); x: (B, d). `direction`: optional (B, d) array;
        the result's dy holds (gradient of head) . (direction row) per point.
        `want_jacobian` adds all d per-coordinate partials. Derivative nodes
        stay on the tape, so losses built from them differentiate correctly
        with respect to the parameters.
        """
        x = np.asarray(x, dtype=np.float64)
        batch = x.shape[0]
        blocks = []
        if direction is not None:
            direction = np.asarray(direction, dtype=np.float64)
            blocks.append(self.features.tangent_seed(x, direction))
        if want_jacobian:
            for j in range(self.d_in):
                ej = np.zeros((batch, self.d_in))
                ej[:, j] = 1.0
                blocks.append(self.features.tangent_seed(x, ej))
        n_blocks = len(blocks)

        h = ad.constant(self.features.features(t, x))
        tang = ad.constant(np.concatenate(blocks, axis=0)) if n_blocks else None
        ones = tape.ones_column(batch)
        params = self.params_on(tape)
        last = len(params) - 1
        for l, (wv, bv) in enumerate(params):
            a = ad.add(ad.matmul(h, wv), ad.matmul(ones, bv))
            if tang is not None:
                tang = ad.matmul(tang, wv)
            if l == last:
                h = a
            else:
                h, dact = self._act_and_deriv(a)
                if tang is not None:
                    tiled = dact if n_blocks == 1 else ad.concat([dact] * n_blocks, axis=0)
                    tang = ad.mul(tiled, tang)

        dir_raw = None
        jac_raw = None
        if n_blocks:
            offset = 0
            if direction is not None:
                dir_raw = ad.slice_rows(tang, 0, batch)
                offset = 1
            if want_jacobian:
                jac_raw = [
                    ad.slice_rows(tang, (offset + j) * batch, batch)
                    for j in range(self.d_in)
                ]

        if self.wrapper is None:
            return EvalResult(h, dir_raw, jac_raw)

        # product rule through the fixed output shaping
        w, dw = self.wrapper.weights(x, self.d_out)
        y = ad.mul(ad.constant(w), h)
        dy = None
        if dir_raw is not None:
            dw_v = sum(dw[j] * direction[:, j : j + 1] for j in range(self.d_in))
            dy = ad.add(ad.mul(ad.constant(dw_v), h), ad.mul(ad.constant(w), dir_raw))
        jac = None
        if jac_raw is not None:
            jac = [
                ad.add(ad.mul(ad.constant(dw[j]), h), ad.mul(ad.constant(w), jac_raw[j]))
                for j in range(self.d_in)
            ]
        return EvalResult(y, dy, jac)

    # ---- diagnostic route: the input itself lives on the tape ----

    def forward_on_tape(self, tape, t, xvar):
        """Forward pass with a taped input, for reverse-mode input Jacobians."""
        h = self.features.features_on_tape(t, xvar)
        ones = tape.ones_column(xvar.value.shape[0])
        params = self.params_on(tape)
        last = len(params) - 1
        for l, (wv, bv) in enumerate(params):
            a = ad.add(ad.matmul(h, wv), ad.matmul(ones, bv))
            if l == last:
                h = a
            else:
                h = ad.cos(a) if self.activation == "cos" else ad.tanh(a)
        if self.wrapper is not None:
            h = ad.mul(self.wrapper.weights_on_tape(xvar, self.d_out), h)
        return h

    # ---- plain numpy route ----

    def predict(self, t, x):
        """Pure numpy forward pass; used for metrics and field output."""
        x = np.asarray(x, dtype=np.float64)
        h = self.features.features(t, x)
        last = len(self.layers) - 1
        for l, (w, b) in enumerate(self.layers):
            a = h @ w + b
            h = a if l == last else self._act_np(a)
        if self.wrapper is not None:
            w, _ = self.wrapper.weights(x, self.d_out)
            h = w * h
        return h


# ---- checkpoints ----

CHECKPOINT_FORMAT = "fbsnn-checkpoint"
CHECKPOINT_VERSION = 1


def network_to_dict(net):
    return {
        "d_in": net.d_in,
        "d_out": net.d_out,
        "activation": net.activation,
        "layer_sizes": net.layer_sizes,
        "layers": [[w.tolist(), b.tolist()] for w, b in net.layers],
        "embedding": net.embedding.to_dict() if net.embedding is not None else None,
        "wrapper": net.wrapper.name if net.wrapper is not None else None,
    }


def network_from_dict(doc):
    embedding = (
        PeriodicEmbedding.from_dict(doc["embedding"]) if doc["embedding"] else None
    )
    wrapper = WRAPPERS[doc["wrapper"]]() if doc["wrapper"] else None
    layers = [
        (np.array(w, dtype=np.float64), np.array(b, dtype=np.float64))
        for w, b in doc["layers"]
    ]
    hidden = doc["layer_sizes"][1:-1]
    return Network(
        doc["d_in"], doc["d_out"], hidden, doc["activation"],
        embedding=embedding, wrapper=wrapper, layers=layers,
    )


def save_checkpoint(path, networks, meta=None):
    """Write named networks and metadata to a versioned JSON file."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "networks": {name: network_to_dict(net) for name, net in networks.items()},
        "meta": meta or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Read a checkpoint; returns (networks dict, meta dict)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint file: format={doc.get('format')!r}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    nets = {name: network_from_dict(d) for name, d in doc["networks"].items()}
    return nets, doc.get("meta", {})
