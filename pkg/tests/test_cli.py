import json

import pytest
import yaml

import main
from core.baselines import read_labels
from core.instances import read_dataset, write_dataset
from core.utils import read_jsonl


@pytest.fixture
def config_path(tmp_path, monkeypatch):
    monkeypatch.delenv("DRHG_LOG", raising=False)
    config = {
        "app": {"name": "test", "log_dir": str(tmp_path / "logs")},
        "labels": {"mode": "exact", "max_exact_n": 12},
        "model": {"d_h": 8, "L": 1, "heads": 2, "r_f": 2, "r_c": 2, "d_ff": 16},
        "training": {"epochs": 1, "batch_size": 4, "micro_batch": 2, "k_min": 3,
                     "val_count": 1, "val_iters": 2},
        "search": {"iterations": 4, "k_min": 2},
    }
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(config))
    return str(path)


@pytest.fixture
def corpus(tmp_path, config_path):
    data = tmp_path / "tsp8.jsonl"
    labels = tmp_path / "labels.jsonl"
    assert main.run(["--config", config_path, "gen", "--kind", "tsp", "--n", "8", "--count", "5",
                     "--seed", "1", "--out", str(data)]) == 0
    assert main.run(["--config", config_path, "label", "--data", str(data), "--out", str(labels)]) == 0
    return data, labels


class TestPipeline:
    def test_gen_writes_dataset_and_manifest(self, corpus, tmp_path):
        data, labels = corpus
        instances = read_dataset(data)
        assert len(instances) == 5
        assert all(inst.n == 8 for inst in instances)
        assert set(read_labels(labels)) == {inst.name for inst in instances}
        manifest = json.loads((tmp_path / "tsp8.jsonl.manifest.json").read_text())
        assert manifest["command"] == "gen"
        assert manifest["status"] == "ok"
        assert manifest["seed"] == 1

    def test_train_solve_eval(self, corpus, tmp_path, config_path, capsys):
        data, labels = corpus
        ckpt_dir = tmp_path / "ckpt"
        assert main.run(["--config", config_path, "train", "--data", str(data), "--labels", str(labels),
                         "--out", str(ckpt_dir)]) == 0
        assert (ckpt_dir / "best.ckpt").exists()
        assert (ckpt_dir / "manifest.json").exists()

        solutions = tmp_path / "solutions.jsonl"
        trace_dir = tmp_path / "trace"
        assert main.run(["--config", config_path, "solve", "--data", str(data), "--ckpt",
                         str(ckpt_dir / "best.ckpt"), "--iters", "3", "--trace", str(trace_dir),
                         "--snapshots", "0,2", "--out", str(solutions)]) == 0
        docs = list(read_jsonl(solutions))
        assert len(docs) == 5
        first = docs[0]["instance_name"]
        assert (trace_dir / f"{first}.csv").read_text().count("\n") == 4
        assert len(list(read_jsonl(trace_dir / f"{first}.snapshots.jsonl"))) == 2

        capsys.readouterr()
        report = tmp_path / "eval.csv"
        assert main.run(["--config", config_path, "eval", "--data", str(data), "--solver", "labels",
                         "--labels", str(labels), "--out", str(report)]) == 0
        assert "0.000%" in capsys.readouterr().out
        assert report.read_text().startswith("name,objective")

        assert main.run(["--config", config_path, "eval", "--data", str(data), "--solutions",
                         str(solutions), "--labels", str(labels)]) == 0

    def test_exact_solver_without_checkpoint(self, corpus, tmp_path, config_path):
        data, labels = corpus
        out = tmp_path / "exact.jsonl"
        assert main.run(["--config", config_path, "solve", "--data", str(data), "--solver", "exact",
                         "--k-max", "5", "--out", str(out)]) == 0
        assert {d["instance_name"] for d in read_jsonl(out)} == set(read_labels(labels))

    def test_gen_is_reproducible(self, tmp_path, config_path):
        outputs = []
        for name in ("a.jsonl", "b.jsonl"):
            path = tmp_path / name
            assert main.run(["--config", config_path, "gen", "--kind", "cvrp", "--n", "10", "--count", "3",
                             "--seed", "9", "--out", str(path)]) == 0
            outputs.append(path.read_bytes())
        assert outputs[0] == outputs[1]

    def test_zero_iterations_keep_the_initial_tour(self, corpus, tmp_path, config_path):
        data, _ = corpus
        objectives = {}
        for solver, extra in (("exact", ["--iters", "0"]), ("initial", [])):
            out = tmp_path / f"{solver}.jsonl"
            assert main.run(["--config", config_path, "solve", "--data", str(data), "--solver", solver,
                             "--seed", "5", "--out", str(out)] + extra) == 0
            objectives[solver] = [d["objective"] for d in read_jsonl(out)]
        assert objectives["exact"] == objectives["initial"]


class TestPlot:
    def test_square_is_deterministic(self, tmp_path, config_path, unit_square):
        data = tmp_path / "square.jsonl"
        write_dataset(data, [unit_square])
        solutions = tmp_path / "square_solution.jsonl"
        solutions.write_text(json.dumps({"instance_name": "square", "order": [0, 1, 2, 3]}) + "\n")
        outputs = []
        for name in ("a.svg", "b.svg"):
            assert main.run(["--config", config_path, "plot", "--data", str(data), "--solutions",
                             str(solutions), "--out", str(tmp_path / name)]) == 0
            outputs.append((tmp_path / name).read_bytes())
        assert outputs[0] == outputs[1]
        assert outputs[0].decode().count('id="edge-') == 4

    def test_snapshot_panels(self, corpus, tmp_path, config_path):
        data, _ = corpus
        trace_dir = tmp_path / "trace"
        assert main.run(["--config", config_path, "solve", "--data", str(data), "--solver", "exact",
                         "--iters", "4", "--k-max", "5", "--snapshots", "0,1,3", "--trace", str(trace_dir),
                         "--out", str(tmp_path / "s.jsonl")]) == 0
        snaps = sorted(trace_dir.glob("*.snapshots.jsonl"))[0]
        svg = tmp_path / "panels.svg"
        assert main.run(["--config", config_path, "plot", "--data", str(data), "--trace", str(snaps),
                         "--panels", "2", "--out", str(svg)]) == 0
        assert svg.read_text().count('id="panel-') == 2

        assert main.run(["--config", config_path, "plot", "--data", str(data), "--trace", str(snaps),
                         "--panels", "9", "--out", str(svg)]) == 2

    def test_mismatched_solution(self, tmp_path, config_path, unit_square):
        data = tmp_path / "square.jsonl"
        write_dataset(data, [unit_square])
        solutions = tmp_path / "bad.jsonl"
        solutions.write_text(json.dumps({"instance_name": "square", "order": [0, 1, 2]}) + "\n")
        assert main.run(["--config", config_path, "plot", "--data", str(data), "--solutions",
                         str(solutions), "--out", str(tmp_path / "bad.svg")]) == 1


class TestExitCodes:
    def test_usage_errors(self, tmp_path, config_path):
        out = str(tmp_path / "x.jsonl")
        assert main.run(["--config", config_path, "gen", "--kind", "tsp", "--n", "2", "--out", out]) == 2
        assert main.run(["--config", config_path, "gen", "--n", "5", "--out", out]) == 2
        assert main.run(["--config", config_path, "gen", "--kind", "tsp", "--n", "5", "--bogus"]) == 2
        assert main.run(["--config", config_path, "solve", "--data", out]) == 2
        assert main.run(["--config", config_path, "plot", "--data", out, "--out", out]) == 2

    def test_runtime_failure(self, tmp_path, config_path):
        code = main.run(["--config", config_path, "solve", "--data", str(tmp_path / "missing.jsonl"),
                         "--solver", "initial", "--out", str(tmp_path / "o.jsonl")])
        assert code == 1
        manifest = json.loads((tmp_path / "o.jsonl.manifest.json").read_text())
        assert manifest["status"] == "failed"

    def test_bad_log_level(self, tmp_path, config_path, monkeypatch):
        monkeypatch.setenv("DRHG_LOG", "loud")
        assert main.run(["--config", config_path, "gen", "--kind", "tsp", "--n", "5",
                         "--out", str(tmp_path / "g.jsonl")]) == 2

    def test_exact_labels_refuse_large_instances(self, tmp_path, config_path):
        data = tmp_path / "tsp20.jsonl"
        assert main.run(["--config", config_path, "gen", "--kind", "tsp", "--n", "20", "--count", "1",
                         "--out", str(data)]) == 0
        out = tmp_path / "labels.jsonl"
        assert main.run(["--config", config_path, "label", "--data", str(data), "--mode", "exact",
                         "--out", str(out)]) == 1
        assert json.loads((tmp_path / "labels.jsonl.manifest.json").read_text())["status"] == "failed"

    def test_missing_config(self, tmp_path):
        assert main.run(["--config", str(tmp_path / "nope.yaml"), "gen", "--kind", "tsp", "--n", "5"]) == 1
