"""
End-to-end tests of the command-line surface on a tiny configuration.
"""
import json

import pytest

from stlmine_cli import build_parser, list_commands, main

TINY_CONFIG = {
    "seed": 0,
    "threads": 1,
    "trajectories": {"n_pos": 10, "n_neg": 10, "n_points": 100},
    "enumeration": {"max_nodes": 2, "n_vars": 1, "n_values": 5, "n_times": 4, "cap": 50,
                    "signature_size": 30, "tau_sim": 0.98},
    "embedding": {"n_train": 30, "n_mc": 200, "n_vars": 1},
    "bo": {"maxiter": 3, "initial_batch": 4, "burn_in": 2,
           "gp": {"fit_hyperparameters": False, "lengthscale": 3.0}},
    "cross_validation": {"n_folds": 2},
    "retrieval_eval": {"n_queries": 5, "n_traj": 100, "k": 2},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config file, dataset and database built once through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.json"
    config.write_text(json.dumps(TINY_CONFIG))
    data = root / "linear.csv"
    db = root / "index.db"
    assert main(["--config", str(config), "gen-data", "linear", "--out", str(data)]) == 0
    assert main(["--config", str(config), "build-db", "--out", str(db)]) == 0
    return {"root": root, "config": str(config), "data": str(data), "db": str(db)}


def test_registry():
    assert list_commands() == ["gen-data", "build-db", "mine", "query", "eval-retrieval"]
    args = build_parser().parse_args(["--seed", "4", "query", "index.db", "x0 >= 1", "-k", "3"])
    assert (args.seed, args.command, args.k, args.formula) == (4, "query", 3, "x0 >= 1")


def test_gen_data_is_deterministic(tmp_path):
    print("\n=== TESTING GEN-DATA ===")
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["--seed", "3", "gen-data", "linear", "--out", str(first)]) == 0
    assert main(["--seed", "3", "gen-data", "linear", "--out", str(second)]) == 0
    assert first.read_bytes() == second.read_bytes()
    manifest = json.loads((tmp_path / "a.csv.manifest.json").read_text())
    assert manifest["kind"] == "linear" and manifest["seed"] == 3 and manifest["n_pos"] == 100


def test_usage_errors_exit_with_two(tmp_path):
    with pytest.raises(SystemExit) as excinfo:
        main(["gen-data", "sinusoid", "--out", str(tmp_path / "x.csv")])
    assert excinfo.value.code == 2
    with pytest.raises(SystemExit) as excinfo:
        main([])
    assert excinfo.value.code == 2


def test_runtime_errors_exit_with_one(tmp_path, workspace):
    assert main(["query", str(tmp_path / "missing.db"), "x0 >= 0"]) == 1
    assert main(["--config", str(tmp_path / "absent.json"), "gen-data", "linear",
                 "--out", str(tmp_path / "x.csv")]) == 1
    assert main(["--config", workspace["config"], "query", workspace["db"], "x0 >= "]) == 1
    assert main(["--config", workspace["config"], "mine", str(tmp_path / "missing.csv"),
                 "--db", workspace["db"]]) == 1


def test_build_db_writes_both_files(workspace):
    print("\n=== TESTING BUILD-DB ===")
    root = workspace["root"]
    assert (root / "index.db").stat().st_size > 0
    assert (root / "index.ref").stat().st_size > 0


def test_query(capsys, workspace):
    capsys.readouterr()
    assert main(["--config", workspace["config"], "query", workspace["db"], "F[0,50] (x0 >= 1)", "-k", "3"]) == 0
    lines = [line for line in capsys.readouterr().out.splitlines() if line.strip()]
    assert len(lines) == 3
    assert [line.split()[0] for line in lines] == ["1", "2", "3"]
    distances = [float(line.split()[1]) for line in lines]
    assert distances == sorted(distances)


@pytest.mark.slow
def test_mine(capsys, workspace):
    print("\n=== TESTING MINE ===")
    out = workspace["root"] / "report.json"
    status = main(["--config", workspace["config"], "mine", workspace["data"], "--db", workspace["db"],
                   "--out", str(out)])
    assert status == 0
    printed = capsys.readouterr().out
    assert "best formula:" in printed and "mcr:" in printed
    report = json.loads(out.read_text())
    assert set(report) == {"config", "dataset", "cross_validation", "runs", "best_formula"}
    assert len(report["cross_validation"]["folds"]) == 2
    assert report["config"]["bo"]["maxiter"] == 3


@pytest.mark.slow
def test_eval_retrieval(workspace):
    out = workspace["root"] / "eval.json"
    rows = workspace["root"] / "eval.csv"
    status = main(["--config", workspace["config"], "eval-retrieval", workspace["db"], "--out", str(out),
                   "--csv-out", str(rows), "--n-queries", "4"])
    assert status == 0
    report = json.loads(out.read_text())
    assert report["n_queries"] == 4
    assert "all" in report["summary"]
    assert rows.exists()
