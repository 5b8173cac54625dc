"""Command-line entry point: ``nst <command> [options]``.

Commands: generate, train, evaluate, inspect, repro-table1, repro-tree.
Exit codes: 0 success, 2 constraint violation, 3 malformed input.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from threadpoolctl import threadpool_limits

from .errors import (
    ConstraintViolation,
    CyclicInput,
    MalformedInput,
    NegativeWeight,
    ShapeMismatch,
    TooFewTimeDims,
    UnknownMetric,
)
from .graph import (
    SYNTHETIC_METRICS,
    UndirectedView,
    WeightedDigraph,
    dag_to_poset,
    diameter,
    doubling_constant_estimate,
    generate_random_dag,
    generate_tree,
    hasse_reduction,
    load_graph,
    poset_width,
    separation,
    shortest_paths,
    write_edge_list,
    write_features,
)
from .nst import load_checkpoint, save_checkpoint
from .training import GEOMETRIES, TrainConfig, evaluate, targets_for, train, write_curve, write_report

EXIT_OK, EXIT_CONSTRAINT, EXIT_MALFORMED = 0, 2, 3
EDGES, FEATURES, MANIFEST = "edges.tsv", "features.csv", "manifest.json"
DOUBLING_LIMIT = 16

# Synthetic-DAG protocol: 50-node DAG, edge probability 0.9, lr 1e-4, clip 1, 5000 epochs
DAG_PROTOCOL = dict(nodes=50, edge_prob=0.9, epochs=5000, lr=1e-4, clip=1.0)
DAG_LIMITS = {10: (1.05, 2.0), 2: (1.35, 10.0)}
# Tree protocol: binary tree, embedding dim 2, all-pairs geodesic targets in batches
TREE = dict(nodes=200, space_dim=2, epochs=500, lr=3e-3, batch_size=10_000)


@dataclass
class ExperimentSpec:
    """Everything needed to replay a run; written next to every output."""

    command: str
    seed: int = 0
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    generator: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentSpec":
        if not isinstance(payload, dict):
            raise MalformedInput("manifest must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(payload) - names)
        if unknown:
            raise MalformedInput(f"unknown manifest keys: {', '.join(unknown)}")
        if "command" not in payload:
            raise MalformedInput("manifest lacks 'command'")
        spec = cls(**payload)
        if spec.config:
            TrainConfig.from_dict(spec.config)
        return spec


def write_manifest(out: Path, spec: ExperimentSpec) -> None:
    (out / MANIFEST).write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path: Path | str) -> ExperimentSpec:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise MalformedInput(f"cannot read manifest {path}: {exc}") from exc
    return ExperimentSpec.from_dict(payload)


# ---------------------------------------------------------------------------
# Argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_MALFORMED, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser, defaults: TrainConfig) -> None:
    p.add_argument("--space-dim", type=int, default=defaults.space_dim)
    p.add_argument("--time-dim", type=int, default=defaults.time_dim)
    p.add_argument("--geometry", choices=GEOMETRIES, default=defaults.geometry)
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--clip", type=float, default=defaults.clip)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--deterministic", action="store_true", help="single BLAS thread for reproducible reductions")
    p.add_argument("--causality", choices=("local", "global"), default=defaults.causality)
    p.add_argument("--epsilon", type=float, default=defaults.epsilon)
    p.add_argument("--encoder-depth", type=int, default=defaults.encoder_depth)
    p.add_argument("--encoder-width", type=int, default=defaults.encoder_width)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--targets", choices=("edges", "geodesic"), default=defaults.targets)
    p.add_argument("--config", type=Path, help="JSON file of config overrides; unknown keys are rejected")


def _add_generator_flags(p: argparse.ArgumentParser, nodes: int = 50) -> None:
    p.add_argument("--nodes", type=int, default=nodes)
    p.add_argument("--edge-prob", type=float, default=0.9)
    p.add_argument("--metric", choices=sorted(SYNTHETIC_METRICS), default="m1")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nst", description="Embed weighted DAGs as events in a learned spacetime.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a random DAG or tree as edge list + features")
    _add_generator_flags(g)
    g.add_argument("--tree", action="store_true", help="complete tree instead of a random DAG")
    g.add_argument("--branching", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train a geometry on a graph directory")
    t.add_argument("--graph", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    _add_config_flags(t, TrainConfig())

    e = sub.add_parser("evaluate", help="report distortion and directionality of a checkpoint")
    e.add_argument("--graph", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--targets", choices=("edges", "geodesic"), default="edges")
    e.add_argument("--out", type=Path)

    i = sub.add_parser("inspect", help="print poset and metric facts of a graph")
    i.add_argument("--graph", type=Path, required=True)

    r = sub.add_parser("repro-table1", help="synthetic-DAG protocol, one metric row")
    _add_generator_flags(r, nodes=DAG_PROTOCOL["nodes"])
    _add_config_flags(r, TrainConfig(epochs=DAG_PROTOCOL["epochs"], lr=DAG_PROTOCOL["lr"], clip=DAG_PROTOCOL["clip"]))
    r.add_argument("--out", type=Path, required=True)

    tr = sub.add_parser("repro-tree", help="binary tree protocol, NST against a euclidean baseline")
    tr.add_argument("--nodes", type=int, default=TREE["nodes"])
    tr.add_argument("--space-dim", type=int, default=TREE["space_dim"])
    tr.add_argument("--epochs", type=int, default=TREE["epochs"])
    tr.add_argument("--lr", type=float, default=TREE["lr"])
    tr.add_argument("--batch-size", type=int, default=TREE["batch_size"])
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--deterministic", action="store_true")
    tr.add_argument("--out", type=Path, required=True)
    return parser


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    cfg = dict(
        space_dim=args.space_dim, time_dim=args.time_dim, geometry=args.geometry, epochs=args.epochs,
        lr=args.lr, clip=args.clip, seed=args.seed, deterministic=args.deterministic,
        causality=args.causality, epsilon=args.epsilon, encoder_depth=args.encoder_depth,
        encoder_width=args.encoder_width, batch_size=args.batch_size, targets=args.targets,
    )
    if args.config is not None:
        try:
            overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise MalformedInput(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(overrides, dict):
            raise MalformedInput("config file must hold a JSON object")
        TrainConfig.from_dict(overrides)
        cfg.update(overrides)
    return TrainConfig.from_dict(cfg)


# ---------------------------------------------------------------------------
# Commands


def read_graph_dir(path: Path) -> WeightedDigraph:
    edges = path / EDGES
    if not edges.is_file():
        raise MalformedInput(f"{edges} not found")
    feats = path / FEATURES
    return load_graph(edges, feats if feats.is_file() else None)


def write_graph_dir(out: Path, g: WeightedDigraph) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_edge_list(out / EDGES, g)
    write_features(out / FEATURES, g.features)


def _generate(nodes: int, edge_prob: float, metric: str, seed: int, tree: bool = False,
              branching: int = 2) -> WeightedDigraph:
    try:
        if tree:
            return generate_tree(branching, nodes, seed)
        return generate_random_dag(nodes, edge_prob, seed, metric)
    except (ValueError, KeyError) as exc:
        if isinstance(exc, UnknownMetric):
            raise
        raise MalformedInput(str(exc)) from exc


def cmd_generate(args) -> int:
    g = _generate(args.nodes, args.edge_prob, args.metric, args.seed, args.tree, args.branching)
    write_graph_dir(args.out, g)
    gen = dict(nodes=args.nodes, edge_prob=args.edge_prob, metric=args.metric, tree=args.tree,
               branching=args.branching)
    write_manifest(args.out, ExperimentSpec("generate", args.seed, outputs={"edges": EDGES, "features": FEATURES},
                                            generator=gen))
    print(f"wrote {g.node_count} nodes, {g.edge_count} edges to {args.out}")
    return EXIT_OK


def _run_training(g: WeightedDigraph, cfg: TrainConfig, out: Path, spec: ExperimentSpec, label: str = ""):
    out.mkdir(parents=True, exist_ok=True)
    prefix = f"{label}_" if label else ""
    model, report, curve = train(g, cfg)
    files = {"curve": f"{prefix}curve.csv", "report": f"{prefix}report.json", "checkpoint": f"{prefix}checkpoint.json"}
    write_curve(out / files["curve"], curve)
    write_report(out / files["report"], report)
    save_checkpoint(out / files["checkpoint"], model)
    spec.outputs.update({f"{prefix}{k}": v for k, v in files.items()} if label else files)
    return model, report


def _print_report(report, label: str = "") -> None:
    head = f"[{label}] " if label else ""
    s = report.summary()
    print(f"{head}avg distortion {s['avg_distortion']:.4f} +/- {s['std_distortion']:.4f}, "
          f"max {s['max_distortion']:.4f}, directionality {s['directionality']}, "
          f"closure {s['closure_directionality']}, outliers {s['outliers']}, {s['wall_time']:.1f}s")


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    g = read_graph_dir(args.graph)
    spec = ExperimentSpec("train", cfg.seed, inputs={"graph": str(args.graph)}, config=cfg.to_dict())
    _, report = _run_training(g, cfg, args.out, spec)
    write_manifest(args.out, spec)
    _print_report(report)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    g = read_graph_dir(args.graph)
    model = load_checkpoint(args.checkpoint)
    report = evaluate(model, g, targets_for(g, args.targets))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        write_report(args.out / "report.json", report)
        write_manifest(args.out, ExperimentSpec(
            "evaluate", inputs={"graph": str(args.graph), "checkpoint": str(args.checkpoint)},
            outputs={"report": "report.json"}, config={}))
    _print_report(report)
    return EXIT_OK


def inspect_facts(g: WeightedDigraph) -> dict:
    poset = dag_to_poset(g)
    dist = shortest_paths(UndirectedView.of(g))
    width = poset_width(poset)
    facts = {
        "nodes": g.node_count,
        "edges": g.edge_count,
        "width": width,
        "hasse_edges": len(hasse_reduction(poset)),
        "diameter": diameter(dist),
        "separation": separation(dist),
        "doubling": doubling_constant_estimate(dist) if g.node_count <= DOUBLING_LIMIT else None,
        "suggested_time_dim": width,
    }
    return facts


def cmd_inspect(args) -> int:
    facts = inspect_facts(read_graph_dir(args.graph))
    for key, value in facts.items():
        print(f"{key}: {'n/a (too many nodes)' if value is None else value}")
    return EXIT_OK


def cmd_repro_table1(args) -> int:
    cfg = resolve_config(args)
    g = _generate(args.nodes, args.edge_prob, args.metric, cfg.seed)
    write_graph_dir(args.out, g)
    gen = dict(nodes=args.nodes, edge_prob=args.edge_prob, metric=args.metric)
    spec = ExperimentSpec("repro-table1", cfg.seed, outputs={"edges": EDGES, "features": FEATURES},
                          generator=gen, config=cfg.to_dict())
    _, report = _run_training(g, cfg, args.out, spec)
    write_manifest(args.out, spec)
    _print_report(report, f"{args.metric} D={cfg.space_dim} T={cfg.time_dim}")
    limits = DAG_LIMITS.get(cfg.space_dim) if cfg.space_dim == cfg.time_dim else None
    if limits is not None:
        ok = (report.directionality == 1.0 and report.avg_distortion <= limits[0]
              and report.max_distortion <= limits[1])
        print(f"thresholds avg <= {limits[0]}, max <= {limits[1]}, directionality 1.0: {'met' if ok else 'missed'}")
    return EXIT_OK


def cmd_repro_tree(args) -> int:
    g = _generate(args.nodes, 0.0, "m1", args.seed, tree=True, branching=2)
    write_graph_dir(args.out, g)
    shared = dict(space_dim=args.space_dim, time_dim=0, epochs=args.epochs, lr=args.lr, seed=args.seed,
                  batch_size=args.batch_size, targets="geodesic", deterministic=args.deterministic)
    spec = ExperimentSpec("repro-tree", args.seed, outputs={"edges": EDGES, "features": FEATURES},
                          generator=dict(nodes=args.nodes, tree=True, branching=2))
    reports = {}
    for geometry in ("nst", "euclidean"):
        cfg = TrainConfig(geometry=geometry, **shared)
        spec.config = cfg.to_dict() if geometry == "nst" else spec.config
        _, reports[geometry] = _run_training(g, cfg, args.out, spec, label=geometry)
        _print_report(reports[geometry], geometry)
    write_manifest(args.out, spec)
    nst, euc = reports["nst"], reports["euclidean"]
    ok = nst.avg_distortion <= 1.05 and nst.max_distortion < euc.max_distortion
    print(f"nst avg <= 1.05 and nst max < euclidean max: {'met' if ok else 'missed'}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "inspect": cmd_inspect,
    "repro-table1": cmd_repro_table1,
    "repro-tree": cmd_repro_tree,
}


def thread_cap(deterministic: bool) -> int | None:
    """BLAS thread limit: 1 when deterministic, else ``NST_THREADS`` if set."""
    if deterministic:
        return 1
    raw = os.environ.get("NST_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError as exc:
        raise MalformedInput(f"NST_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise MalformedInput("NST_THREADS must be >= 1")
    return n


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cap = thread_cap(getattr(args, "deterministic", False))
        limits = threadpool_limits(limits=cap) if cap is not None else contextlib.nullcontext()
        with limits:
            return COMMANDS[args.command](args)
    except (ConstraintViolation, ShapeMismatch, TooFewTimeDims) as exc:
        print(f"nst: constraint violation: {exc}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except (MalformedInput, CyclicInput, NegativeWeight, UnknownMetric, OSError) as exc:
        print(f"nst: malformed input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED


if __name__ == "__main__":
    sys.exit(main())
