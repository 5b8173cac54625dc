"""Neural spacetime models: encoder MLP, neural quasi-metric and neural partial order.

An encoded node ``x_hat`` in R^(D+T) is split positionally: the first ``D``
coordinates are spatial and feed the quasi-metric, the last ``T`` are
temporal and feed the partial-order network. Two events are ordered when
every coordinate of their time codes is ordered.

All square weight matrices are stored as ``lam * I + |raw|`` with ``lam > 0``,
which keeps them entrywise non-negative and strictly diagonally dominant
(hence invertible). The final metric row is ``lam * 1 + |raw|``.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Param, Tape
from .errors import (
    ConstraintViolation,
    LengthMismatch,
    MalformedInput,
    NonPositiveLambda,
    ShapeMismatch,
)

LAMBDA_FLOOR = 1e-6
LAMBDA_INIT = 0.1
LEAKY_SLOPE = 0.01


def activation(x, s: float, l: float):
    """sgn(x)|x|^s for |x| < 1 and sgn(x)|x|^l otherwise (sgn(0) = +1)."""
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    sgn = np.where(x >= 0, 1.0, -1.0)
    out = sgn * np.where(ax < 1.0, ax**s, ax**l)
    return float(out) if out.ndim == 0 else out


def positive_invertible(lam: float, raw) -> np.ndarray:
    """``lam * I + |raw|`` for a square ``raw``."""
    if not lam > 0:
        raise NonPositiveLambda(f"lambda must be positive, got {lam}")
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got {raw.shape}")
    return lam * np.eye(raw.shape[0]) + np.abs(raw)


def precedes(t_u, t_v) -> bool:
    """Product order: every coordinate of ``t_u`` is <= the matching one of ``t_v``."""
    t_u = np.asarray(t_u, dtype=float)
    t_v = np.asarray(t_v, dtype=float)
    if t_u.shape != t_v.shape:
        raise LengthMismatch(f"time codes of length {t_u.shape} and {t_v.shape}")
    return bool(np.all(t_u <= t_v))


def _positive_matrix(tape: Tape, lam: Param, raw: Param) -> Node:
    lam_n = tape.param(lam)
    raw_n = tape.param(raw)
    if raw.value.ndim == 2:
        base = ad.mul(lam_n, tape.constant(np.eye(raw.value.shape[0])))
    else:
        base = ad.mul(lam_n, tape.constant(np.ones(raw.value.shape)))
    return ad.add(base, ad.abs_(raw_n))


def _positive_matrix_value(lam: Param, raw: Param) -> np.ndarray:
    if raw.value.ndim == 2:
        return float(lam.value) * np.eye(raw.value.shape[0]) + np.abs(raw.value)
    return float(lam.value) + np.abs(raw.value)


class ParamSet:
    """Ordered name -> Param mapping shared by every trainable geometry."""

    def __init__(self):
        self.params: dict[str, Param] = {}

    def _add(self, name: str, value, lower: float | None = None, trainable: bool = True) -> Param:
        p = Param(np.asarray(value, dtype=float), name=name, lower=lower, trainable=trainable)
        self.params[name] = p
        return p

    def trainable(self) -> list[Param]:
        return [p for p in self.params.values() if p.trainable]

    def check_constraints(self):
        for p in self.params.values():
            p.check()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, v in state.items():
            if k not in self.params:
                raise MalformedInput(f"unknown parameter {k!r}")
            if np.shape(v) != self.params[k].value.shape:
                raise MalformedInput(f"parameter {k!r} has shape {np.shape(v)}, expected {self.params[k].value.shape}")
            self.params[k].value = np.array(v, dtype=float)


class MLPEncoder:
    """``depth`` LeakyReLU hidden layers of ``width`` units plus a linear projection."""

    def __init__(self, owner: ParamSet, in_dim: int, out_dim: int, depth: int, width: int, prefix: str = "encoder"):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.layers: list[tuple[Param, Param]] = []
        dims = [in_dim] + [width] * depth + [out_dim]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            w = owner._add(f"{prefix}.{i}.weight", np.zeros((a, b)))
            bias = owner._add(f"{prefix}.{i}.bias", np.zeros(b))
            self.layers.append((w, bias))

    def init(self, rng: np.random.Generator):
        for w, b in self.layers:
            bound = 1.0 / math.sqrt(w.value.shape[0])
            w.value = rng.uniform(-bound, bound, size=w.value.shape)
            b.value = rng.uniform(-bound, bound, size=b.value.shape)

    def forward(self, tape: Tape, x) -> Node:
        h = x if isinstance(x, Node) else tape.constant(np.atleast_2d(np.asarray(x, dtype=float)))
        if h.shape[-1] != self.in_dim:
            raise ShapeMismatch(f"encoder expects {self.in_dim} features, got {h.shape[-1]}")
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = ad.add(ad.matmul(h, tape.param(w)), tape.param(b))
            if i < last:
                h = ad.leaky_relu(h, LEAKY_SLOPE)
        return h


class NeuralSpacetime(ParamSet):
    """Trainable triplet (encoder, quasi-metric on space, partial order on time).

    ``metric_depth`` is the number of weight matrices in the quasi-metric: the
    first ``metric_depth - 1`` are D x D, the last is a positive row. There are
    ``metric_depth + 1`` activations (one on the raw coordinates, one before
    each matrix). ``output_activation`` adds one more activation after the
    final row, which is what the l^p snowflake construction needs.
    """

    kind = "nst"

    def __init__(self, in_dim: int, space_dim: int, time_dim: int, encoder_depth: int = 10,
                 encoder_width: int = 100, metric_depth: int = 4, order_depth: int = 4,
                 output_activation: bool = False, exponent_floor: float = 1.0, seed: int = 0):
        super().__init__()
        if space_dim < 1 or time_dim < 0 or in_dim < 1:
            raise ShapeMismatch("need in_dim >= 1, space_dim >= 1 and time_dim >= 0")
        if metric_depth < 1 or (time_dim > 0 and order_depth < 1):
            raise ShapeMismatch("network depths must be positive")
        self.in_dim, self.space_dim, self.time_dim = in_dim, space_dim, time_dim
        self.encoder_depth, self.encoder_width = encoder_depth, encoder_width
        self.metric_depth, self.order_depth = metric_depth, order_depth if time_dim > 0 else 0
        self.output_activation = output_activation
        self.exponent_floor = exponent_floor
        self.seed = seed
        D, T = space_dim, time_dim
        self.encoder = MLPEncoder(self, in_dim, D + T, encoder_depth, encoder_width)
        floor = exponent_floor
        self.metric_exponents: list[tuple[Param, Param]] = []
        self.metric_matrices: list[tuple[Param, Param]] = []
        for j in range(metric_depth + 1):
            self.metric_exponents.append((self._add(f"metric.{j}.s", 1.0, floor), self._add(f"metric.{j}.l", 1.0, floor)))
        for j in range(1, metric_depth + 1):
            shape = (D, D) if j < metric_depth else (D,)
            self.metric_matrices.append((self._add(f"metric.{j}.lam", LAMBDA_INIT, LAMBDA_FLOOR),
                                         self._add(f"metric.{j}.raw", np.zeros(shape))))
        self.output_exponents = None
        if output_activation:
            self.output_exponents = (self._add("metric.out.s", 1.0, floor), self._add("metric.out.l", 1.0, floor))
        self.order_layers: list[tuple[Param, Param, Param, Param]] = []
        for j in range(1, self.order_depth + 1):
            self.order_layers.append((
                self._add(f"order.{j}.lam", LAMBDA_INIT, LAMBDA_FLOOR),
                self._add(f"order.{j}.raw", np.zeros((T, T))),
                self._add(f"order.{j}.bias", np.zeros(T)),
                self._add(f"order.{j}.s", 1.0, floor),
            ))
        self.init_weights(seed)

    # -- construction -----------------------------------------------------

    def init_weights(self, seed: int) -> "NeuralSpacetime":
        """Seeded init: encoder U(+-1/sqrt(fan_in)); metric/order raw U(0, 1/(rows*cols)); lam 0.1; exponents 1."""
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.encoder.init(rng)
        for lam, raw in self.metric_matrices:
            lam.value = np.array(LAMBDA_INIT)
            raw.value = rng.uniform(0.0, 1.0 / raw.value.size, size=raw.value.shape)
        for lam, raw, bias, s in self.order_layers:
            lam.value = np.array(LAMBDA_INIT)
            raw.value = rng.uniform(0.0, 1.0 / raw.value.size, size=raw.value.shape)
            bias.value = np.zeros_like(bias.value)
            s.value = np.array(1.0)
        for s, l in self.metric_exponents:
            s.value, l.value = np.array(1.0), np.array(1.0)
        if self.output_exponents:
            for p in self.output_exponents:
                p.value = np.array(1.0)
        return self

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "in_dim": self.in_dim,
            "space_dim": self.space_dim,
            "time_dim": self.time_dim,
            "encoder_depth": self.encoder_depth,
            "encoder_width": self.encoder_width,
            "metric_depth": self.metric_depth,
            "order_depth": self.order_depth,
            "output_activation": self.output_activation,
            "exponent_floor": self.exponent_floor,
            "seed": self.seed,
        }

    # -- forward on a tape ------------------------------------------------

    def encode(self, tape: Tape, x) -> Node:
        return self.encoder.forward(tape, x)

    def space(self, emb: Node) -> Node:
        return ad.getitem(emb, (slice(None), slice(0, self.space_dim)))

    def time(self, emb: Node) -> Node:
        return ad.getitem(emb, (slice(None), slice(self.space_dim, self.space_dim + self.time_dim)))

    def _act(self, tape: Tape, x: Node, pair: tuple[Param, Param]) -> Node:
        return ad.piecewise_power(x, tape.param(pair[0]), tape.param(pair[1]), floor=self.exponent_floor)

    def metric_forward(self, tape: Tape, a: Node, b: Node) -> Node:
        """Quasi-metric between row-batched spatial coordinates ``a`` and ``b`` (shape (P, D))."""
        if a.shape[-1] != self.space_dim or b.shape[-1] != self.space_dim:
            raise ShapeMismatch(f"spatial inputs must have {self.space_dim} columns")
        u = ad.abs_(ad.sub(self._act(tape, a, self.metric_exponents[0]), self._act(tape, b, self.metric_exponents[0])))
        for j, (lam, raw) in enumerate(self.metric_matrices, start=1):
            w = _positive_matrix(tape, lam, raw)
            u = ad.matmul(self._act(tape, u, self.metric_exponents[j]), ad.transpose(w) if raw.value.ndim == 2 else w)
        if self.output_exponents:
            u = self._act(tape, u, self.output_exponents)
        return u

    def order_forward(self, tape: Tape, z: Node) -> Node:
        """Time codes for row-batched temporal coordinates ``z`` (shape (n, T))."""
        if z.shape[-1] != self.time_dim:
            raise ShapeMismatch(f"temporal inputs must have {self.time_dim} columns")
        for lam, raw, bias, s in self.order_layers:
            w = _positive_matrix(tape, lam, raw)
            s_n = tape.param(s)
            h = ad.piecewise_power(ad.leaky_relu(z, LEAKY_SLOPE), s_n, s_n, floor=self.exponent_floor)
            z = ad.add(ad.matmul(h, ad.transpose(w)), tape.param(bias))
        return z

    # geometry protocol used by training
    def distance(self, tape: Tape, emb: Node, src, dst) -> tuple[Node, np.ndarray]:
        sp = self.space(emb)
        pred = self.metric_forward(tape, ad.take(sp, src), ad.take(sp, dst))
        return pred, np.ones(len(src), dtype=bool)

    def time_codes(self, tape: Tape, emb: Node) -> Node | None:
        if self.time_dim == 0:
            return None
        return self.order_forward(tape, self.time(emb))

    def causal_terms(self, tape: Tape, emb: Node, src, dst) -> Node | None:
        """T(u) - T(v) per edge; the edge is respected when every entry is <= 0."""
        times = self.time_codes(tape, emb)
        if times is None:
            return None
        return ad.sub(ad.take(times, src), ad.take(times, dst))

    # -- plain numpy conveniences ------------------------------------------

    def encoder_forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = self.encode(Tape(), np.atleast_2d(x)).value
        return out[0] if x.ndim == 1 else out

    def quasi_metric(self, x_u, x_v) -> np.ndarray | float:
        """Distance between encoded points (single vectors or row batches of length D+T or D)."""
        x_u = np.asarray(x_u, dtype=float)
        x_v = np.asarray(x_v, dtype=float)
        single = x_u.ndim == 1
        a, b = np.atleast_2d(x_u), np.atleast_2d(x_v)
        if a.shape != b.shape:
            raise ShapeMismatch(f"{a.shape} vs {b.shape}")
        if a.shape[1] not in (self.space_dim, self.space_dim + self.time_dim):
            raise ShapeMismatch(f"expected {self.space_dim} or {self.space_dim + self.time_dim} columns")
        tape = Tape()
        out = self.metric_forward(tape, tape.constant(a[:, : self.space_dim]), tape.constant(b[:, : self.space_dim])).value
        return float(out[0]) if single else out

    def partial_order_forward(self, x_hat) -> np.ndarray:
        x_hat = np.asarray(x_hat, dtype=float)
        single = x_hat.ndim == 1
        z = np.atleast_2d(x_hat)
        if z.shape[1] not in (self.time_dim, self.space_dim + self.time_dim):
            raise ShapeMismatch(f"expected {self.time_dim} or {self.space_dim + self.time_dim} columns")
        z = z[:, z.shape[1] - self.time_dim:]
        tape = Tape()
        out = self.order_forward(tape, tape.constant(z)).value
        return out[0] if single else out

    def metric_matrix_values(self) -> list[np.ndarray]:
        return [_positive_matrix_value(lam, raw) for lam, raw in self.metric_matrices]

    def order_matrix_values(self) -> list[np.ndarray]:
        return [_positive_matrix_value(lam, raw) for lam, raw, _, _ in self.order_layers]

    def _all_metric_exponents(self) -> list[tuple[float, float]]:
        pairs = [(float(s.value), float(l.value)) for s, l in self.metric_exponents]
        if self.output_exponents:
            pairs.append(tuple(float(p.value) for p in self.output_exponents))
        return pairs

    def operator_norm_triangle_constant(self) -> float:
        """2^(sum_j beta_j) * prod_j ||W_j||_op with beta_j = max(s_j, l_j) - 1 (clipped at 0)."""
        beta = sum(max(max(s, l) - 1.0, 0.0) for s, l in self._all_metric_exponents())
        norms = [np.linalg.norm(np.atleast_2d(w), 2) for w in self.metric_matrix_values()]
        return float(2.0**beta * np.prod(norms))

    def composed_triangle_constant(self) -> float:
        """2^(prod_j m_j - 1) with m_j = max(s_j, l_j, 1) over the activations after the input one.

        Each layer u -> W sigma(u) on the non-negative orthant is monotone,
        satisfies f(a + b) <= 2^(m - 1) (f(a) + f(b)) and f(c u) <= c^m f(u)
        for c >= 1; composing those bounds telescopes to this constant. The
        input activation only reparametrizes the line, so it does not count.
        """
        exps = self._all_metric_exponents()[1:]
        prod = 1.0
        for s, l in exps:
            prod *= max(s, l, 1.0)
        return float(2.0 ** (prod - 1.0))

    # -- checkpoints -------------------------------------------------------

    def to_checkpoint(self) -> dict:
        return {"config": self.config(), "params": _encode_params(self.params)}

    @classmethod
    def from_checkpoint(cls, payload: dict) -> "NeuralSpacetime":
        cfg = dict(payload["config"])
        cfg.pop("kind", None)
        model = cls(**cfg)
        model.load_state(_decode_params(payload["params"]))
        return model


def _encode_params(params: dict[str, Param]) -> dict:
    return {
        name: {
            "shape": list(p.value.shape),
            "data": [float(x).hex() for x in p.value.reshape(-1)],
            "lower": p.lower,
            "trainable": p.trainable,
        }
        for name, p in params.items()
    }


def _decode_params(payload: dict) -> dict[str, np.ndarray]:
    out = {}
    try:
        for name, rec in payload.items():
            data = np.array([float.fromhex(x) for x in rec["data"]], dtype=float)
            out[name] = data.reshape(rec["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInput(f"bad checkpoint parameters: {exc}") from exc
    return out


def save_checkpoint(path: Path | str, model) -> None:
    Path(path).write_text(json.dumps(model.to_checkpoint(), indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path: Path | str):
    from .baselines import FixedGeometryModel, SnowflakeModel

    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        kind = payload["config"]["kind"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise MalformedInput(f"cannot read checkpoint {path}: {exc}") from exc
    classes = {"nst": NeuralSpacetime, "snowflake-v1": SnowflakeModel}
    cls = classes.get(kind, FixedGeometryModel)
    model = cls.from_checkpoint(payload)
    model.check_constraints()
    return model


def snowflake_norm_model(space_dim: int, p: float, alpha: float) -> NeuralSpacetime:
    """Quasi-metric configured to compute ||x - y||_p ** alpha on the spatial block.

    Two matrices: identity then the all-ones row; exponents 1, p, 1 and a final
    output exponent alpha / p. Exponents below 1 are allowed here.
    """
    m = NeuralSpacetime(in_dim=1, space_dim=space_dim, time_dim=0, encoder_depth=0, encoder_width=1,
                        metric_depth=2, output_activation=True, exponent_floor=0.0)
    (s0, l0), (s1, l1), (s2, l2) = m.metric_exponents
    s0.value, l0.value = np.array(1.0), np.array(1.0)
    s1.value, l1.value = np.array(float(p)), np.array(float(p))
    s2.value, l2.value = np.array(1.0), np.array(1.0)
    (lam1, raw1), (lam2, raw2) = m.metric_matrices
    lam1.value, raw1.value = np.array(1.0), np.zeros((space_dim, space_dim))
    lam2.value, raw2.value = np.array(1.0), np.zeros(space_dim)
    so, lo = m.output_exponents
    so.value, lo.value = np.array(alpha / p), np.array(alpha / p)
    return m


def parameter_count(params: Iterable[Param]) -> int:
    return int(sum(p.value.size for p in params))
