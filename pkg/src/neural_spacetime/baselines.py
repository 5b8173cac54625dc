"""Fixed comparison geometries and the legacy scalar snowflake.

Euclidean, Minkowski and de Sitter geometries keep their distance fixed and
only train the encoder. Lorentzian embeddings put time in coordinate 0 and
space in the remaining ``dim - 1`` coordinates.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .errors import NegativeInput, OffManifold, ShapeMismatch
from .nst import MLPEncoder, ParamSet, _decode_params, _encode_params

FIXED_KINDS = ("euclidean", "minkowski", "desitter")


def euclidean_distance(x_u, x_v) -> float:
    return float(np.linalg.norm(np.asarray(x_u, dtype=float) - np.asarray(x_v, dtype=float)))


def minkowski_interval(x_u, x_v) -> tuple[float, bool]:
    """(sqrt(max(s^2, 0)), causal) with s^2 = dt^2 - |dx|^2 and time in coordinate 0."""
    d = np.asarray(x_v, dtype=float) - np.asarray(x_u, dtype=float)
    dt = d[0]
    s2 = dt * dt - float(np.dot(d[1:], d[1:]))
    return math.sqrt(max(s2, 0.0)), bool(s2 >= 0 and dt > 0)


def minkowski_inner(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return -a[..., 0] * b[..., 0] + np.sum(a[..., 1:] * b[..., 1:], axis=-1)


def project_to_desitter(x, radius: float = 1.0) -> np.ndarray:
    """Keep the time coordinate and rescale the spatial part onto <x, x>_M = R^2."""
    x = np.array(x, dtype=float)
    spatial = x[..., 1:]
    norm = np.linalg.norm(spatial, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(x)):
        raise OffManifold("cannot project a point with zero spatial part onto the de Sitter hyperboloid")
    target = np.sqrt(radius**2 + x[..., :1] ** 2)
    x[..., 1:] = spatial * (target / norm)
    return x


def desitter_distance(x_u, x_v, radius: float = 1.0) -> float | None:
    """R * arccos(<x, y>_M / R^2) after projection; None when the argument leaves [-1, 1]."""
    a = project_to_desitter(x_u, radius)
    b = project_to_desitter(x_v, radius)
    arg = float(minkowski_inner(a, b)) / radius**2
    if arg > 1.0 or arg < -1.0:
        # rounding can push x == y a hair past 1
        if abs(arg - 1.0) <= 1e-12:
            return 0.0
        return None
    return radius * math.acos(arg)


def _psi_components(u: np.ndarray, a: float, b: float) -> tuple[np.ndarray, ...]:
    au = np.abs(u)
    return 1.0 - np.exp(-au), au**a, np.log1p(au) ** b


class SnowflakeV1Params:
    """Plain-array snowflake: lists of A_j, B_j, C_j and scalars a_j, b_j, p."""

    def __init__(self, A, B, C, a, b, p: float):
        self.A = [np.asarray(m, dtype=float) for m in A]
        self.B = [np.asarray(m, dtype=float) for m in B]
        self.C = [np.asarray(m, dtype=float).reshape(3) for m in C]
        self.a = [float(x) for x in a]
        self.b = [float(x) for x in b]
        self.p = float(p)
        if not (len(self.A) == len(self.B) == len(self.C) == len(self.a) == len(self.b)):
            raise ShapeMismatch("snowflake layer lists must have equal length")
        for m in self.A + self.B + self.C:
            if np.any(m < 0) or not np.any(m > 0):
                raise ShapeMismatch("snowflake matrices must be non-negative with a nonzero entry")


def snowflake_v1(sf: SnowflakeV1Params, r) -> np.ndarray | float:
    """Iterate u_j = B_j psi(A_j u_{j-1}) C_j from u_0 = r and return u_J^(1 + |p|)."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise NegativeInput("snowflake input must be a non-negative distance")
    u = r_arr.reshape(-1, 1)
    for A, B, C, a, b in zip(sf.A, sf.B, sf.C, sf.a, sf.b):
        h = u @ A.T
        c0, c1, c2 = _psi_components(h, a, b)
        u = (C[0] * c0 + C[1] * c1 + C[2] * c2) @ B.T
    out = u[:, 0] ** (1.0 + abs(sf.p))
    return float(out[0]) if r_arr.ndim == 0 else out.reshape(r_arr.shape)


class _EncodedGeometry(ParamSet):
    kind = "base"

    def __init__(self, in_dim: int, out_dim: int, encoder_depth: int, encoder_width: int, seed: int):
        super().__init__()
        self.in_dim = in_dim
        self.encoder_depth, self.encoder_width = encoder_depth, encoder_width
        self.seed = seed
        self.encoder = MLPEncoder(self, in_dim, out_dim, encoder_depth, encoder_width)

    def encode(self, tape: Tape, x) -> Node:
        return self.encoder.forward(tape, x)

    def encoder_forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = self.encode(Tape(), np.atleast_2d(x)).value
        return out[0] if x.ndim == 1 else out

    def to_checkpoint(self) -> dict:
        return {"config": self.config(), "params": _encode_params(self.params)}

    @classmethod
    def from_checkpoint(cls, payload: dict):
        cfg = dict(payload["config"])
        model = cls(**cfg)
        model.load_state(_decode_params(payload["params"]))
        return model


def _row_norm(x: Node) -> Node:
    return ad.sqrt(ad.sum_(ad.square(x), axis=-1))


class FixedGeometryModel(_EncodedGeometry):
    """Encoder into a fixed geometry.

    ``euclidean``: the first ``space_dim`` coordinates get the l2 distance and
    the last ``time_dim`` are used directly as time codes under the product
    order. ``minkowski`` / ``desitter``: ``space_dim`` is the total embedding
    dimension, coordinate 0 being time.
    """

    def __init__(self, kind: str, in_dim: int, space_dim: int, time_dim: int = 0, encoder_depth: int = 10,
                 encoder_width: int = 100, radius: float = 1.0, seed: int = 0):
        if kind not in FIXED_KINDS:
            raise ShapeMismatch(f"unknown fixed geometry {kind!r}")
        if kind != "euclidean" and space_dim < 2:
            raise ShapeMismatch("Lorentzian baselines need at least one time and one space coordinate")
        if not radius > 0:
            raise ShapeMismatch("radius must be positive")
        self.kind = kind
        self.space_dim = space_dim
        self.time_dim = time_dim if kind == "euclidean" else 0
        self.radius = float(radius)
        super().__init__(in_dim, space_dim + self.time_dim, encoder_depth, encoder_width, seed)
        self.init_weights(seed)

    def init_weights(self, seed: int):
        self.seed = seed
        self.encoder.init(np.random.default_rng(seed))
        return self

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "in_dim": self.in_dim,
            "space_dim": self.space_dim,
            "time_dim": self.time_dim,
            "encoder_depth": self.encoder_depth,
            "encoder_width": self.encoder_width,
            "radius": self.radius,
            "seed": self.seed,
        }

    def _project(self, emb: Node) -> Node:
        t = ad.getitem(emb, (slice(None), slice(0, 1)))
        x = ad.getitem(emb, (slice(None), slice(1, self.space_dim)))
        norm = ad.reshape(_row_norm(x), (-1, 1))
        if np.any(norm.value == 0):
            raise OffManifold("embedding has a zero spatial part")
        target = ad.sqrt(ad.add(ad.square(t), self.radius**2))
        return ad.concat([t, ad.mul(x, ad.div(target, norm))], axis=-1)

    def distance(self, tape: Tape, emb: Node, src, dst) -> tuple[Node, np.ndarray]:
        """Predicted distances and a validity mask (False where the geometry gives no distance)."""
        if self.kind == "euclidean":
            sp = ad.getitem(emb, (slice(None), slice(0, self.space_dim)))
            return _row_norm(ad.sub(ad.take(sp, src), ad.take(sp, dst))), np.ones(len(src), dtype=bool)
        if self.kind == "minkowski":
            d = ad.sub(ad.take(emb, dst), ad.take(emb, src))
            dt = ad.getitem(d, (slice(None), 0))
            dx = ad.getitem(d, (slice(None), slice(1, None)))
            s2 = ad.sub(ad.square(dt), ad.sum_(ad.square(dx), axis=-1))
            return ad.sqrt(ad.relu(s2)), np.ones(len(src), dtype=bool)
        pts = self._project(emb)
        a, b = ad.take(pts, src), ad.take(pts, dst)
        prod = ad.mul(a, b)
        inner = ad.sub(ad.sum_(ad.getitem(prod, (slice(None), slice(1, None))), axis=-1),
                       ad.getitem(prod, (slice(None), 0)))
        arg = ad.mul(inner, 1.0 / self.radius**2)
        valid = np.abs(arg.value) <= 1.0
        return ad.mul(ad.arccos(arg), self.radius), valid

    def causal_terms(self, tape: Tape, emb: Node, src, dst) -> Node | None:
        """Per-edge quantities that must all be <= 0 for the edge to be respected."""
        if self.kind == "euclidean":
            if self.time_dim == 0:
                return None
            t = ad.getitem(emb, (slice(None), slice(self.space_dim, None)))
            return ad.sub(ad.take(t, src), ad.take(t, dst))
        pts = emb if self.kind == "minkowski" else self._project(emb)
        d = ad.sub(ad.take(pts, dst), ad.take(pts, src))
        dt = ad.getitem(d, (slice(None), 0))
        dx = ad.getitem(d, (slice(None), slice(1, None)))
        return ad.reshape(ad.sub(_row_norm(dx), dt), (-1, 1))


class SnowflakeModel(_EncodedGeometry):
    """Encoder plus a trainable scalar snowflake applied to the Euclidean distance.

    Matrices are stored raw and used through ``|.|`` so they stay non-negative.
    ``a_j`` and ``b_j`` are fixed at 1; ``p`` is trainable.
    """

    kind = "snowflake-v1"

    def __init__(self, in_dim: int, space_dim: int, encoder_depth: int = 10, encoder_width: int = 100,
                 depth: int = 4, width: int = 10, seed: int = 0, time_dim: int = 0):
        super().__init__(in_dim, space_dim, encoder_depth, encoder_width, seed)
        self.space_dim, self.time_dim = space_dim, 0
        self.depth, self.width = depth, width
        self.layers = []
        dims = [1] + [width] * (depth - 1) + [1]
        for j in range(1, depth + 1):
            self.layers.append((
                self._add(f"snowflake.{j}.A", np.zeros((width, dims[j - 1]))),
                self._add(f"snowflake.{j}.B", np.zeros((dims[j], width))),
                self._add(f"snowflake.{j}.C", np.zeros(3)),
                self._add(f"snowflake.{j}.a", 1.0, trainable=False),
                self._add(f"snowflake.{j}.b", 1.0, trainable=False),
            ))
        self.p = self._add("snowflake.p", 0.1)
        self.init_weights(seed)

    def init_weights(self, seed: int):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.encoder.init(rng)
        for A, B, C, _, _ in self.layers:
            for m in (A, B, C):
                m.value = rng.uniform(0.0, 1.0 / m.value.size, size=m.value.shape)
        self.p.value = np.array(0.1)
        return self

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "in_dim": self.in_dim,
            "space_dim": self.space_dim,
            "encoder_depth": self.encoder_depth,
            "encoder_width": self.encoder_width,
            "depth": self.depth,
            "width": self.width,
            "seed": self.seed,
        }

    @classmethod
    def from_checkpoint(cls, payload: dict):
        cfg = dict(payload["config"])
        cfg.pop("kind", None)
        model = cls(**cfg)
        model.load_state(_decode_params(payload["params"]))
        return model

    def as_params(self) -> SnowflakeV1Params:
        return SnowflakeV1Params(
            A=[np.abs(A.value) for A, *_ in self.layers],
            B=[np.abs(B.value) for _, B, *_ in self.layers],
            C=[np.abs(C.value) for _, _, C, *_ in self.layers],
            a=[float(a.value) for *_, a, _ in self.layers],
            b=[float(b.value) for *_, b in self.layers],
            p=float(self.p.value),
        )

    def warp(self, tape: Tape, r: Node) -> Node:
        u = ad.reshape(r, (-1, 1))
        for A, B, C, a, b in self.layers:
            h = ad.abs_(ad.matmul(u, ad.transpose(ad.abs_(tape.param(A)))))
            c = ad.abs_(tape.param(C))
            c0 = ad.sub(1.0, ad.exp(ad.neg(h)))
            c1 = ad.piecewise_power(h, tape.param(a), tape.param(a), floor=0.0)
            c2 = ad.piecewise_power(ad.log1p(h), tape.param(b), tape.param(b), floor=0.0)
            mix = ad.add(ad.add(ad.mul(c0, c[0]), ad.mul(c1, c[1])), ad.mul(c2, c[2]))
            u = ad.matmul(mix, ad.transpose(ad.abs_(tape.param(B))))
        e = ad.add(1.0, ad.abs_(tape.param(self.p)))
        return ad.piecewise_power(ad.reshape(u, (-1,)), e, e, floor=1.0)

    def distance(self, tape: Tape, emb: Node, src, dst) -> tuple[Node, np.ndarray]:
        r = _row_norm(ad.sub(ad.take(emb, src), ad.take(emb, dst)))
        return self.warp(tape, r), np.ones(len(src), dtype=bool)

    def causal_terms(self, tape: Tape, emb: Node, src, dst) -> None:
        return None
