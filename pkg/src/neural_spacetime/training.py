"""Losses, optimizer, training loop and evaluation for spacetime embeddings."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Param, Tape
from .baselines import FIXED_KINDS, FixedGeometryModel, SnowflakeModel
from .errors import EmptyEdgeSet, MalformedInput, ShapeMismatch, TooFewTimeDims
from .graph import UndirectedView, WeightedDigraph, is_dag, reachability, shortest_paths
from .nst import NeuralSpacetime

GEOMETRIES = ("nst",) + FIXED_KINDS + ("snowflake-v1",)
STEEPNESS = 10.0


@dataclass
class TrainConfig:
    space_dim: int = 10
    time_dim: int = 10
    encoder_depth: int = 10
    encoder_width: int = 100
    metric_depth: int = 4
    order_depth: int = 4
    lr: float = 1e-4
    epochs: int = 5000
    clip: float | None = 1.0
    seed: int = 0
    batch_size: int | None = None
    geometry: str = "nst"
    causality: str = "local"
    epsilon: float = 0.1
    smooth_global: bool = False
    targets: str = "edges"
    distance_weight: float = 1.0
    causality_weight: float = 1.0
    weight_decay: float = 0.01
    radius: float = 1.0
    deterministic: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.space_dim < 1 or self.time_dim < 0:
            raise ShapeMismatch("space_dim must be >= 1 and time_dim >= 0")
        if self.geometry not in GEOMETRIES:
            raise MalformedInput(f"unknown geometry {self.geometry!r}; choose from {', '.join(GEOMETRIES)}")
        if self.causality not in ("local", "global"):
            raise MalformedInput("causality must be 'local' or 'global'")
        if self.targets not in ("edges", "geodesic"):
            raise MalformedInput("targets must be 'edges' or 'geodesic'")
        if self.epochs < 0 or self.lr <= 0:
            raise MalformedInput("epochs must be >= 0 and lr > 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise MalformedInput("batch_size must be positive")
        if self.clip is not None and self.clip <= 0:
            raise MalformedInput("clip must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(payload) - names)
        if unknown:
            raise MalformedInput(f"unknown config keys: {', '.join(unknown)}")
        return cls(**payload)


@dataclass
class CurveRow:
    epoch: int
    distance_loss: float
    causality_loss: float
    total_correct: float


@dataclass
class EmbeddingReport:
    ratios: list[float]
    avg_distortion: float
    std_distortion: float
    max_distortion: float
    directionality: float | None
    closure_directionality: float | None
    distance_loss: float
    causality_loss: float
    outliers: int
    pair_count: int
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def summary(self) -> dict:
        d = self.to_dict()
        d.pop("ratios")
        return d


@dataclass
class PairTargets:
    src: np.ndarray
    dst: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return len(self.src)


def edge_targets(graph: WeightedDigraph) -> PairTargets:
    return PairTargets(graph.sources, graph.targets, graph.weights)


def geodesic_targets(graph: WeightedDigraph) -> PairTargets:
    """All unordered pairs with a finite shortest-path distance in the undirected view."""
    dist = shortest_paths(UndirectedView.of(graph))
    iu, ju = np.triu_indices(graph.node_count, k=1)
    keep = np.isfinite(dist[iu, ju])
    return PairTargets(iu[keep], ju[keep], dist[iu, ju][keep])


def targets_for(graph: WeightedDigraph, kind: str) -> PairTargets:
    return edge_targets(graph) if kind == "edges" else geodesic_targets(graph)


# ---------------------------------------------------------------------------
# Losses on arrays and tape nodes


def steep_sigmoid(x):
    x = np.asarray(x, dtype=float)
    z = STEEPNESS * x
    out = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return float(out) if out.ndim == 0 else out


def total_correct_from_terms(terms: np.ndarray) -> float:
    """Fraction of rows whose entries are all <= 0 (sum of ReLUs equal to zero)."""
    terms = np.asarray(terms, dtype=float)
    if terms.shape[0] == 0:
        raise EmptyEdgeSet("total_correct needs at least one edge")
    return float(np.mean(np.sum(np.maximum(terms, 0.0), axis=1) == 0.0))


def total_correct_from_times(times, src, dst) -> float:
    times = np.asarray(times, dtype=float)
    return total_correct_from_terms(times[np.asarray(src)] - times[np.asarray(dst)])


def causality_loss_from_times(times, src, dst) -> float:
    times = np.asarray(times, dtype=float)
    src, dst = np.asarray(src, dtype=int), np.asarray(dst, dtype=int)
    if len(src) == 0:
        return 0.0
    terms = times[src] - times[dst]
    return float(np.sum(steep_sigmoid(terms)) * (1.0 - total_correct_from_terms(terms)))


def distance_loss_node(pred: Node, target: np.ndarray, valid: np.ndarray | None = None) -> Node:
    """Mean squared error over the valid pairs (0 when none are valid)."""
    tape = pred.tape
    target = np.asarray(target, dtype=float)
    if valid is None:
        valid = np.ones(target.shape, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        return tape.constant(0.0)
    if n < len(valid):
        idx = np.flatnonzero(valid)
        pred, target = ad.take(pred, idx), target[idx]
    diff = ad.sub(pred, tape.constant(target))
    return ad.mul(ad.sum_(ad.square(diff)), 1.0 / n)


def causality_loss_node(terms: Node) -> Node:
    """sum(steep_sigmoid(terms)) * (1 - total_correct), the factor held constant."""
    tape = terms.tape
    if terms.shape[0] == 0:
        return tape.constant(0.0)
    miss = 1.0 - total_correct_from_terms(terms.value)
    return ad.mul(ad.sum_(ad.sigmoid(terms, STEEPNESS)), miss)


def _order_pairs(graph: WeightedDigraph) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    reach = reachability(graph)
    strict = reach & ~np.eye(graph.node_count, dtype=bool)
    anti = ~(reach | reach.T)
    cs, cd = np.nonzero(strict)
    a_s, a_d = np.nonzero(anti)
    return cs, cd, a_s, a_d


def global_causality_loss_node(times: Node, closure: tuple[np.ndarray, np.ndarray],
                               antichain: tuple[np.ndarray, np.ndarray], epsilon: float,
                               smooth: bool = False) -> Node:
    tape = times.tape
    act = (lambda x: ad.sigmoid(x, STEEPNESS)) if smooth else ad.relu
    total = tape.constant(0.0)
    cs, cd = closure
    if len(cs):
        total = ad.add(total, ad.sum_(act(ad.sub(ad.take(times, cs), ad.take(times, cd)))))
    a_s, a_d = antichain
    if len(a_s):
        if times.shape[1] < 2:
            raise TooFewTimeDims("separating incomparable pairs needs at least two time dimensions")
        gap = ad.add(ad.sub(ad.take(times, a_d), ad.take(times, a_s)), epsilon)
        total = ad.add(total, ad.sum_(ad.min_(act(gap), axis=-1)))
    return total


# ---------------------------------------------------------------------------
# Model-level conveniences returning floats


def _forward(model, graph: WeightedDigraph):
    tape = Tape()
    return tape, model.encode(tape, graph.features)


def distance_loss(model, graph: WeightedDigraph, targets: PairTargets | None = None) -> float:
    targets = targets or edge_targets(graph)
    if len(targets) == 0:
        return 0.0
    tape, emb = _forward(model, graph)
    pred, valid = model.distance(tape, emb, targets.src, targets.dst)
    return float(distance_loss_node(pred, targets.target, valid).value)


def _edge_terms(model, graph: WeightedDigraph) -> np.ndarray | None:
    tape, emb = _forward(model, graph)
    terms = model.causal_terms(tape, emb, graph.sources, graph.targets)
    return None if terms is None else terms.value


def total_correct(model, graph: WeightedDigraph) -> float:
    if graph.edge_count == 0:
        raise EmptyEdgeSet("total_correct needs at least one edge")
    terms = _edge_terms(model, graph)
    if terms is None:
        raise ShapeMismatch("this geometry has no time coordinates")
    return total_correct_from_terms(terms)


def causality_loss(model, graph: WeightedDigraph) -> float:
    if graph.edge_count == 0:
        return 0.0
    tape, emb = _forward(model, graph)
    terms = model.causal_terms(tape, emb, graph.sources, graph.targets)
    return 0.0 if terms is None else float(causality_loss_node(terms).value)


def global_causality_loss(model, graph: WeightedDigraph, epsilon: float = 0.1, smooth: bool = False) -> float:
    tape, emb = _forward(model, graph)
    times = model.time_codes(tape, emb)
    if times is None:
        raise ShapeMismatch("this geometry has no time codes")
    cs, cd, a_s, a_d = _order_pairs(graph)
    return float(global_causality_loss_node(times, (cs, cd), (a_s, a_d), epsilon, smooth).value)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[Param], grads: list[np.ndarray], state: AdamState, lr: float,
               clip: float | None = 1.0, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01) -> float:
    """Clip by global norm, apply one decoupled-weight-decay Adam update, then project.

    Returns the gradient norm before clipping.
    """
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    if clip is not None:
        grads, norm = ad.clip_by_global_norm(grads, clip)
    else:
        norm = float(math.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p.value = p.value * (1.0 - lr * weight_decay)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value = np.asarray(p.value - lr * (m / c1) / (np.sqrt(v / c2) + eps), dtype=float)
        p.project()
    return norm


class AdamW:
    def __init__(self, params: list[Param], lr: float, clip: float | None = 1.0, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.clip, self.weight_decay = lr, clip, weight_decay
        self.betas, self.eps = betas, eps
        self.state = AdamState()

    def zero_grad(self):
        ad.zero_grads(self.params)

    def step(self) -> float:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in self.params]
        return adamw_step(self.params, grads, self.state, self.lr, self.clip, self.betas, self.eps,
                          self.weight_decay)


# ---------------------------------------------------------------------------
# Training and evaluation


def build_model(in_dim: int, config: TrainConfig):
    if config.geometry == "nst":
        return NeuralSpacetime(in_dim, config.space_dim, config.time_dim, config.encoder_depth,
                               config.encoder_width, config.metric_depth, config.order_depth, seed=config.seed)
    if config.geometry == "snowflake-v1":
        return SnowflakeModel(in_dim, config.space_dim, config.encoder_depth, config.encoder_width,
                              seed=config.seed)
    return FixedGeometryModel(config.geometry, in_dim, config.space_dim, config.time_dim, config.encoder_depth,
                              config.encoder_width, radius=config.radius, seed=config.seed)


class _Objective:
    """Builds the per-step loss for one graph and config."""

    def __init__(self, model, graph: WeightedDigraph, config: TrainConfig, targets: PairTargets):
        self.model, self.graph, self.config, self.targets = model, graph, config, targets
        self.global_pairs = None
        if config.causality == "global":
            cs, cd, a_s, a_d = _order_pairs(graph)
            self.global_pairs = ((cs, cd), (a_s, a_d))

    def __call__(self, tape: Tape, batch: np.ndarray | None = None) -> tuple[Node, float, float, float]:
        t = self.targets
        src, dst, tgt = (t.src, t.dst, t.target) if batch is None else (t.src[batch], t.dst[batch], t.target[batch])
        emb = self.model.encode(tape, self.graph.features)
        if len(src):
            pred, valid = self.model.distance(tape, emb, src, dst)
            dl = distance_loss_node(pred, tgt, valid)
        else:
            dl = tape.constant(0.0)
        loss = ad.mul(dl, self.config.distance_weight)
        cl_value, tc = 0.0, float("nan")
        if self.graph.edge_count:
            terms = self.model.causal_terms(tape, emb, self.graph.sources, self.graph.targets)
            if terms is not None:
                tc = total_correct_from_terms(terms.value)
                if self.global_pairs is not None:
                    times = self.model.time_codes(tape, emb)
                    cl = global_causality_loss_node(times, *self.global_pairs, self.config.epsilon,
                                                    self.config.smooth_global)
                else:
                    cl = causality_loss_node(terms)
                cl_value = float(cl.value)
                loss = ad.add(loss, ad.mul(cl, self.config.causality_weight))
        return loss, float(dl.value), cl_value, tc


def train(graph: WeightedDigraph, config: TrainConfig, model=None, progress=None):
    """Train a geometry on ``graph``; returns (model, report, curve)."""
    start = time.perf_counter()
    if config.causality == "global" and not is_dag(graph):
        reachability(graph)  # raises CyclicInput
    model = model if model is not None else build_model(graph.features.shape[1], config)
    targets = targets_for(graph, config.targets)
    objective = _Objective(model, graph, config, targets)
    opt = AdamW(model.trainable(), config.lr, config.clip, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    curve: list[CurveRow] = []
    n = len(targets)
    for epoch in range(1, config.epochs + 1):
        if config.batch_size is None or config.batch_size >= n:
            batches = [None]
        else:
            order = rng.permutation(n)
            batches = [order[i:i + config.batch_size] for i in range(0, n, config.batch_size)]
        rows = []
        for batch in batches:
            tape = Tape()
            loss, dl, cl, tc = objective(tape, batch)
            opt.zero_grad()
            ad.backward(tape, loss)
            opt.step()
            rows.append((dl, cl, tc))
        arr = np.array(rows, dtype=float)
        curve.append(CurveRow(epoch, float(arr[:, 0].mean()), float(arr[:, 1].mean()), float(arr[-1, 2])))
        if progress is not None:
            progress(curve[-1])
    report = evaluate(model, graph, targets=targets)
    report.wall_time = time.perf_counter() - start
    return model, report, curve


def evaluate(model, graph: WeightedDigraph, targets: PairTargets | None = None) -> EmbeddingReport:
    """Distortion ratios D_pred / D_true over the target pairs plus directionality."""
    targets = targets if targets is not None else edge_targets(graph)
    tape, emb = _forward(model, graph)
    ratios: list[float] = []
    outliers = 0
    dl = 0.0
    if len(targets):
        pred, valid = model.distance(tape, emb, targets.src, targets.dst)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = pred.value / targets.target
        ok = valid & np.isfinite(r) & np.isfinite(targets.target)
        outliers = int((~ok).sum())
        ratios = [float(x) for x in r[ok]]
        dl = float(distance_loss_node(pred, targets.target, ok).value)
    if ratios:
        arr = np.array(ratios)
        avg, std, mx = float(arr.mean()), float(arr.std()), float(arr.max())
    else:
        avg = std = mx = math.inf if outliers else float("nan")
    direction = closure = None
    cl = 0.0
    if graph.edge_count:
        terms = model.causal_terms(tape, emb, graph.sources, graph.targets)
        if terms is not None:
            direction = total_correct_from_terms(terms.value)
            cl = float(causality_loss_node(terms).value)
            if is_dag(graph):
                reach = reachability(graph) & ~np.eye(graph.node_count, dtype=bool)
                cs, cd = np.nonzero(reach)
                closure = total_correct_from_terms(model.causal_terms(tape, emb, cs, cd).value)
    return EmbeddingReport(ratios, avg, std, mx, direction, closure, dl, cl, outliers, len(targets))


def write_curve(path: Path | str, curve: list[CurveRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "distance_loss", "causality_loss", "total_correct"])
        for row in curve:
            w.writerow([row.epoch, repr(row.distance_loss), repr(row.causality_loss), repr(row.total_correct)])


def write_report(path: Path | str, report: EmbeddingReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1) + "\n", encoding="utf-8")
