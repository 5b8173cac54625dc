import json

import pytest

from neural_spacetime.cli import (
    EXIT_CONSTRAINT,
    EXIT_MALFORMED,
    EXIT_OK,
    ExperimentSpec,
    inspect_facts,
    main,
    read_graph_dir,
    read_manifest,
    thread_cap,
    write_graph_dir,
)
from neural_spacetime.errors import MalformedInput
from neural_spacetime.graph import WeightedDigraph, load_graph, write_edge_list, write_features

SMALL = ["--space-dim", "2", "--time-dim", "2", "--encoder-depth", "1", "--encoder-width", "8"]


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def graph_dir(tmp_path, k, edges, name="g"):
    d = tmp_path / name
    write_graph_dir(d, WeightedDigraph(k, [[float(i), 0.0] for i in range(k)], tuple((u, v, 1.0) for u, v in edges)))
    return d


def test_generate_is_bit_identical(tmp_path):
    args = ["generate", "--nodes", "50", "--edge-prob", "0.9", "--metric", "m1", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    assert files(tmp_path / "a") == files(tmp_path / "b")
    manifest = read_manifest(tmp_path / "a" / "manifest.json")
    assert manifest.seed == 7 and manifest.generator["metric"] == "m1"


def test_generate_edge_cases(tmp_path):
    assert main(["generate", "--nodes", "1", "--out", str(tmp_path / "one")]) == EXIT_OK
    assert (tmp_path / "one" / "edges.tsv").read_text() == ""
    assert main(["generate", "--tree", "--nodes", "1000", "--out", str(tmp_path / "tree")]) == EXIT_OK
    assert len((tmp_path / "tree" / "edges.tsv").read_text().splitlines()) == 999


def test_generate_load_serialize_round_trip(tmp_path):
    main(["generate", "--nodes", "20", "--edge-prob", "0.4", "--metric", "m3", "--seed", "2", "--out", str(tmp_path / "a")])
    g = load_graph(tmp_path / "a" / "edges.tsv", tmp_path / "a" / "features.csv")
    (tmp_path / "b").mkdir()
    write_edge_list(tmp_path / "b" / "edges.tsv", g)
    write_features(tmp_path / "b" / "features.csv", g.features)
    for name in ("edges.tsv", "features.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_bad_generator_input_exit_code(tmp_path):
    assert main(["generate", "--edge-prob", "1.5", "--out", str(tmp_path / "x")]) == EXIT_MALFORMED
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--metric", "m9", "--out", str(tmp_path / "x")])
    assert exc.value.code == EXIT_MALFORMED


def test_train_then_evaluate_matches(tmp_path, capsys):
    main(["generate", "--nodes", "8", "--edge-prob", "0.5", "--seed", "1", "--out", str(tmp_path / "g")])
    out = tmp_path / "run"
    assert main(["train", "--graph", str(tmp_path / "g"), "--out", str(out), "--epochs", "20", "--lr", "1e-3"] + SMALL) == EXIT_OK
    assert {"curve.csv", "report.json", "checkpoint.json", "manifest.json"} <= set(files(out))
    trained = json.loads((out / "report.json").read_text())
    ev = tmp_path / "eval"
    assert main(["evaluate", "--graph", str(tmp_path / "g"), "--checkpoint", str(out / "checkpoint.json"),
                 "--out", str(ev)]) == EXIT_OK
    again = json.loads((ev / "report.json").read_text())
    trained.pop("wall_time"), again.pop("wall_time")
    assert trained == again
    manifest = read_manifest(out / "manifest.json")
    assert manifest.config["epochs"] == 20 and manifest.config["space_dim"] == 2


def test_evaluate_missing_checkpoint(tmp_path):
    d = graph_dir(tmp_path, 3, [(0, 1)])
    assert main(["evaluate", "--graph", str(d), "--checkpoint", str(tmp_path / "none.json")]) == EXIT_MALFORMED


def test_missing_graph_and_bad_config(tmp_path):
    assert main(["train", "--graph", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == EXIT_MALFORMED
    d = graph_dir(tmp_path, 3, [(0, 1)])
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "momentum": 0.9}))
    assert main(["train", "--graph", str(d), "--out", str(tmp_path / "o"), "--config", str(cfg)] + SMALL) == EXIT_MALFORMED


def test_constraint_violation_exit_code(tmp_path):
    # the global no-causality term needs two time dimensions when incomparable pairs exist
    d = graph_dir(tmp_path, 3, [(0, 1)])
    args = ["train", "--graph", str(d), "--out", str(tmp_path / "o"), "--epochs", "1", "--causality", "global",
            "--space-dim", "2", "--time-dim", "1", "--encoder-depth", "1", "--encoder-width", "4"]
    assert main(args) == EXIT_CONSTRAINT


def test_cyclic_global_training_is_malformed(tmp_path):
    d = graph_dir(tmp_path, 2, [(0, 1), (1, 0)])
    args = ["train", "--graph", str(d), "--out", str(tmp_path / "o"), "--epochs", "1", "--causality", "global"] + SMALL
    assert main(args) == EXIT_MALFORMED


def test_inspect_examples(tmp_path, capsys):
    chain = inspect_facts(read_graph_dir(graph_dir(tmp_path, 5, [(i, i + 1) for i in range(4)], "chain")))
    assert chain["width"] == 1 and chain["suggested_time_dim"] == 1
    anti = inspect_facts(read_graph_dir(graph_dir(tmp_path, 4, [], "anti")))
    assert anti["width"] == 4
    fork = graph_dir(tmp_path, 5, [(0, 1), (1, 2), (1, 3), (3, 4)], "fork")
    facts = inspect_facts(read_graph_dir(fork))
    assert facts["width"] == 2 and facts["hasse_edges"] == 4
    assert facts["diameter"] == 3.0 and facts["separation"] == 1.0 and facts["doubling"] is not None
    assert main(["inspect", "--graph", str(fork)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "width: 2" in out and "suggested_time_dim: 2" in out


def test_inspect_rejects_cycles(tmp_path):
    d = graph_dir(tmp_path, 3, [(0, 1), (1, 2), (2, 0)])
    assert main(["inspect", "--graph", str(d)]) == EXIT_MALFORMED


def test_manifest_rejects_unknown_keys(tmp_path):
    with pytest.raises(MalformedInput):
        ExperimentSpec.from_dict({"command": "train", "colour": "blue"})
    with pytest.raises(MalformedInput):
        ExperimentSpec.from_dict({"command": "train", "config": {"epochz": 3}})
    spec = ExperimentSpec("train", 3, config={"epochs": 3})
    assert ExperimentSpec.from_dict(spec.to_dict()) == spec


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("NST_THREADS", raising=False)
    assert thread_cap(False) is None and thread_cap(True) == 1
    monkeypatch.setenv("NST_THREADS", "3")
    assert thread_cap(False) == 3
    monkeypatch.setenv("NST_THREADS", "many")
    with pytest.raises(MalformedInput):
        thread_cap(False)


def test_repro_commands_small(tmp_path, capsys):
    out = tmp_path / "t1"
    args = ["repro-table1", "--nodes", "6", "--epochs", "3", "--out", str(out)] + SMALL
    assert main(args) == EXIT_OK
    assert "thresholds" in capsys.readouterr().out
    tree = tmp_path / "tree"
    assert main(["repro-tree", "--nodes", "7", "--epochs", "2", "--out", str(tree)]) == EXIT_OK
    assert {"nst_report.json", "euclidean_report.json", "manifest.json"} <= set(files(tree))
