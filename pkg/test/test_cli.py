import json

import pandas as pd
import pytest

from cli import EXIT_NO_TERMINATION, EXIT_OK, EXIT_USAGE, EXIT_VERIFY_FAILED, exit_code, main, sweep_grid, parse_args
from dataset import EdgeDataset, PointDataset
from forelem.config import RunConfig
from forelem.executor import RunStatus
from runner import PageRankRunner


@pytest.fixture(autouse=True)
def wide_terminal(monkeypatch):
    monkeypatch.setenv("COLUMNS", "250")
    monkeypatch.delenv("FORELEM_SEED", raising=False)


def test_list_variants(capsys):
    assert main(["list-variants"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in ("Kmeans_1", "PageRank_TRR", "Matmul_JD", "Sort_all_pairs"):
        assert name in out


def test_list_variants_filters_by_app(capsys):
    assert main(["list-variants", "--app", "sort"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "Sort_adjacent" in out and "Kmeans_1" not in out


def test_list_variants_from_file(tmp_path, capsys):
    path = tmp_path / "variants.json"
    path.write_text(json.dumps({"variants": [{"name": "PR_mine", "app": "pagerank", "pipeline": ["split(u)"]}]}))
    assert main(["list-variants", "--variants-file", str(path)]) == EXIT_OK
    assert "PR_mine" in capsys.readouterr().out
    empty = tmp_path / "empty.json"
    empty.write_text("")
    assert main(["list-variants", "--variants-file", str(empty)]) == EXIT_OK
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    assert main(["list-variants", "--variants-file", str(broken)]) == EXIT_USAGE


def test_generate_points(tmp_path):
    out = tmp_path / "points.txt"
    assert main(["generate", "kmeans", "--n", "50", "--dim", "3", "--k", "2", "--out", str(out), "--quiet"]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0].startswith("#") and len(lines) == 51
    assert PointDataset(out, dim=3).samples.shape == (50, 3)


def test_generate_graph_is_deterministic(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    for out in (a, b):
        assert main(["generate", "graph", "--scale", "5", "--edge-factor", "4", "--seed", "3", "--out", str(out)]) == 0
    assert a.read_text() == b.read_text()
    edges = EdgeDataset(a)
    assert 0 < len(edges) <= 32 * 4 and edges.samples.max() < 32


def test_generate_empty_point_file(tmp_path, capsys):
    out = tmp_path / "empty.txt"
    assert main(["generate", "kmeans", "--n", "0", "--out", str(out)]) == EXIT_OK
    assert "warning" in capsys.readouterr().out
    assert len(PointDataset(out)) == 0


def test_run_sort_appends_csv(tmp_path):
    csv = tmp_path / "results.csv"
    argv = ["run", "--app", "sort", "--size", "20", "--verify", "--csv", str(csv), "--quiet"]
    assert main(argv) == EXIT_OK
    assert main(argv + ["--variant", "Sort_all_pairs", "--scheduler", "shuffled"]) == EXIT_OK
    df = pd.read_csv(csv)
    assert list(df.columns[:10]) == ["app", "variant", "P", "W", "sweeps", "guards_fired", "state_changes", "calc_ms", "verify", "residual"]
    assert df["variant"].tolist() == ["Sort_adjacent", "Sort_all_pairs"]
    assert (df["verify"] == "pass").all() and (df["residual"] == 0).all()


def test_run_matmul_writes_csv_to_stdout(capsys):
    argv = ["run", "--app", "matmul", "--variant", "Matmul_JD", "--size", "8", "--density", "0.3", "--verify"]
    assert main(argv) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("app,variant,P,W,sweeps")
    assert out[1].startswith("matmul,Matmul_JD,1,1,")
    assert ",pass," in out[1]


@pytest.mark.parametrize(
    "argv",
    [
        ["--app", "pagerank", "--variant", "PageRank_1", "--scale", "4", "--edge-factor", "4", "--epsilon", "1e-12"],
        ["--app", "pagerank", "--variant", "PageRank_2", "--scale", "4", "--edge-factor", "4", "--exchange", "master"],
        ["--app", "kmeans", "--variant", "Kmeans_1", "--n", "60", "--dim", "2", "--k", "3"],
        ["--app", "kmeans", "--variant", "Kmeans_3", "--n", "60", "--dim", "2", "--k", "3"],
    ],
)
def test_partitioned_runs_verify(tmp_path, argv):
    csv = tmp_path / "out.csv"
    assert main(["run", *argv, "--partitions", "2", "--verify", "--csv", str(csv), "--quiet"]) == EXIT_OK
    row = pd.read_csv(csv).iloc[0]
    assert row["P"] == 2 and row["verify"] == "pass"
    assert row["exchanges"] == row["rounds"]


def test_run_from_input_file(tmp_path):
    points = tmp_path / "points.txt"
    main(["generate", "kmeans", "--n", "40", "--dim", "2", "--k", "2", "--out", str(points), "--quiet"])
    csv = tmp_path / "out.csv"
    argv = ["run", "--app", "kmeans", "--k", "2", "--input", str(points), "--verify", "--csv", str(csv), "--quiet"]
    assert main(argv) == EXIT_OK
    row = pd.read_csv(csv).iloc[0]
    assert row["verify"] == "pass" and row["residual"] <= 1e-9


def test_run_pagerank_keeps_isolated_vertices(tmp_path):
    edges = tmp_path / "edges.txt"
    edges.write_text("0 1\n1 0\n")
    assert PageRankRunner(RunConfig(app="pagerank", input=edges, vertices=5, quiet=True)).problem.vertices == 5
    csv = tmp_path / "out.csv"
    argv = ["run", "--app", "pagerank", "--input", str(edges), "--verify", "--csv", str(csv), "--quiet"]
    assert main([*argv, "--vertices", "5"]) == EXIT_OK
    assert pd.read_csv(csv).iloc[0]["verify"] == "pass"
    assert main([*argv, "--vertices", "1"]) == EXIT_USAGE


def test_budget_exhaustion_exit_code(tmp_path):
    csv = tmp_path / "out.csv"
    argv = ["run", "--app", "sort", "--size", "30", "--max-sweeps", "1", "--csv", str(csv), "--quiet"]
    assert main(argv) == EXIT_NO_TERMINATION
    assert pd.read_csv(csv).iloc[0]["status"] == "SweepBudgetExhausted"


@pytest.mark.parametrize(
    "argv",
    [
        ["run", "--app", "sort", "--variant", "Nope"],
        ["run", "--app", "sort", "--variant", "Kmeans_1"],
        ["run", "--app", "sort", "--partitions", "0"],
        ["run", "--app", "matmul", "--input", "missing.txt"],
        ["run", "--app", "kmeans", "--input", "missing.txt"],
        ["run", "--app", "kmeans", "--n", "3", "--k", "4"],
    ],
)
def test_usage_errors(argv):
    assert main([*argv, "--quiet"]) == EXIT_USAGE


def test_parser_errors_exit_with_usage_code():
    with pytest.raises(SystemExit) as err:
        main(["run", "--app", "quicksort"])
    assert err.value.code == EXIT_USAGE


def test_exit_code_precedence():
    assert exit_code(RunStatus.TERMINATED, None) == EXIT_OK
    assert exit_code(RunStatus.TERMINATED, True) == EXIT_OK
    assert exit_code(RunStatus.EARLY_STOP, False) == EXIT_VERIFY_FAILED
    assert exit_code(RunStatus.BUDGET_EXHAUSTED, False) == EXIT_NO_TERMINATION


def test_sweep_grid_axes():
    args = parse_args(["sweep", "--app", "kmeans", "--variants", "Kmeans_1", "Kmeans_2", "--partitions", "1", "2", "--sizes", "30", "60"])
    cells = sweep_grid(args)
    assert len(cells) == 8
    assert {"variant", "workers", "partitions", "n"} <= set(cells[0])


def test_sweep_writes_one_row_per_cell(tmp_path):
    csv = tmp_path / "sweep.csv"
    argv = ["sweep", "--app", "sort", "--sizes", "8", "12", "--workers", "1", "2", "--verify", "--csv", str(csv), "--quiet"]
    assert main(argv) == EXIT_OK
    df = pd.read_csv(csv)
    assert len(df) == 4
    assert sorted(df["size"].tolist()) == [8, 8, 12, 12]
    assert (df["verify"] == "pass").all()
