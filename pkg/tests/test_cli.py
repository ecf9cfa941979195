import json

import pytest

from memq_lab.cli import EXIT_BUDGET, EXIT_CONFIG, EXIT_DOMAIN, EXIT_IO, EXIT_OK, main


@pytest.fixture(scope="module")
def graph(tmp_path_factory):
    path = tmp_path_factory.mktemp("g") / "g.npz"
    assert main(["graph", "gen", "--label", "S-D-U-R", "--states", "24", "--actions", "2", "-o", str(path)]) == EXIT_OK
    return path


def write_config(path, graph, **extra):
    cfg = {"graph": str(graph), "k": 2, "k_total": 4, "steps": 20_000, "zeta": 0.5, "seed": 3, **extra}
    path.write_text(json.dumps(cfg))
    return path


def test_run_ccq_is_reproducible(tmp_path, graph):
    cfg = write_config(tmp_path / "run.json", graph, tracked_pairs=[[0, 0], [1, 1]])
    assert main(["run", "ccq", "--config", str(cfg), "-o", str(tmp_path / "a")]) == EXIT_OK
    assert main(["run", "ccq", "--config", str(cfg), "-o", str(tmp_path / "b")]) == EXIT_OK
    a = (tmp_path / "a" / "report.json").read_bytes()
    assert a == (tmp_path / "b" / "report.json").read_bytes()
    report = json.loads(a)
    assert report["chosen"] == [1, 2] and report["nEQL_invocations"] == 1
    for name in ("selection.json", "config.resolved.json", "trace.jsonl", "metadata.json"):
        assert (tmp_path / "a" / name).exists()
    assert "runtime_seconds" in json.loads((tmp_path / "a" / "metadata.json").read_text())


def test_missing_graph_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path / "run.json", tmp_path / "missing.npz")
    assert main(["run", "ccq", "--config", str(cfg), "-o", str(tmp_path / "o")]) == EXIT_IO
    assert "missing.npz" in capsys.readouterr().err


def test_bad_schedule_exit_code(tmp_path, graph, capsys):
    cfg = write_config(tmp_path / "run.json", graph, schedules={"c2": 2.0})
    assert main(["run", "ccq", "--config", str(cfg)]) == EXIT_CONFIG
    assert "schedules.c2" in capsys.readouterr().err


def test_infeasible_graph_exit_code(tmp_path):
    assert main(["graph", "gen", "--label", "S-S-U-R", "--states", "41", "-o", str(tmp_path / "x.npz")]) == EXIT_DOMAIN


def test_select_methods(tmp_path, graph):
    out = tmp_path / "cov.json"
    assert main(["select", "--method", "coverage", "--k", "3", "--ktotal", "6", "--zeta", "0.5",
                 "--graph", str(graph), "-o", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["chosen"] == [1, 2, 3]
    assert (tmp_path / "cov.metadata.json").exists()
    out = tmp_path / "part.json"
    assert main(["select", "--method", "partial", "--k", "4", "--ktotal", "8", "--graph", str(graph),
                 "-o", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["chosen"] == [1, 2, 3, 5]


def test_exhaustive_budget_exit_code(tmp_path, graph, capsys):
    code = main(["select", "--method", "exhaustive", "--k", "5", "--ktotal", "10", "--graph", str(graph),
                 "--budget", "10", "--steps", "100", "-o", str(tmp_path / "e.json")])
    assert code == EXIT_BUDGET
    assert "1260" in capsys.readouterr().err


def test_validate_bounds_writes_csv(tmp_path):
    out = tmp_path / "v"
    assert main(["validate", "bounds", "--prop", "1", "--pairs", "0:0,1:1", "--states", "40",
                 "--steps", "40000", "--checkpoints", "40", "-o", str(out)]) == EXIT_OK
    summary = json.loads((out / "bounds_summary.json").read_text())
    assert summary["prop"] == 1 and len(summary["contained"]) == 2
    assert (out / "bounds_prop1_0_0.csv").exists()


def test_bad_pairs_exit_code(tmp_path):
    assert main(["validate", "bounds", "--prop", "1", "--pairs", "0-0", "--states", "40",
                 "-o", str(tmp_path)]) == EXIT_CONFIG


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as exc:
        main(["select"])
    assert exc.value.code == 2
