import filecmp
import json

import pytest

from distbvnet import cli, ids
from distbvnet.metrics import KPI_HEADER, read_kpi_csv

FAST = ["--rounds", "30"]


def _tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)

    def same(c):
        if c.left_only or c.right_only or c.funny_files:
            return False
        _, mismatch, errors = filecmp.cmpfiles(c.left, c.right, c.common_files, shallow=False)
        return not mismatch and not errors and all(same(s) for s in c.subdirs.values())
    return same(cmp)


def test_validate_default(capsys):
    assert cli.main(["validate"]) == 0


def test_run_happy_path(tmp_path):
    assert cli.main(["run", "--seed", "1", "--out", str(tmp_path), *FAST]) == 0
    header = (tmp_path / "kpi.csv").read_text().splitlines()[0]
    assert tuple(header.split(",")) == KPI_HEADER
    assert (tmp_path / "ledgers" / "cloud.jsonl").exists()
    assert (tmp_path / "clusters.csv").exists()


def test_bad_config_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("n_vehicles = 0\n")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "n_vehicles" in capsys.readouterr().err
    assert cli.main(["validate", "--config", str(cfg)]) == 2


def test_unknown_key_exit_2(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("vehicles = 3\n")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_missing_config_exit_2(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "none.toml"), "--out", str(tmp_path)]) == 2


def test_run_byte_identical(tmp_path):
    args = ["run", "--seed", "1", *FAST, "--events", "--verbose"]
    assert cli.main([*args, "--out", str(tmp_path / "a")]) == 0
    assert cli.main([*args, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "events.jsonl").exists() and (tmp_path / "a" / "decisions.jsonl").exists()
    assert _tree_equal(tmp_path / "a", tmp_path / "b")


def test_decisions_are_json_lines(tmp_path):
    cli.main(["run", *FAST, "--verbose", "--out", str(tmp_path)])
    recs = [json.loads(l) for l in (tmp_path / "decisions.jsonl").read_text().splitlines()]
    assert recs and set(recs[0]) == {"round", "message", "action", "verify", "t_s", "t_n_effective"}


def test_sweep_grid(tmp_path):
    assert cli.main(["sweep", "--vehicles", "20,30", "--cluster-sizes", "5,10", *FAST,
                     "--out", str(tmp_path)]) == 0
    rows = read_kpi_csv(tmp_path / "kpi.csv")
    assert [(r.vehicles, r.cluster_size) for r in rows] == [(20, 5), (20, 10), (30, 5), (30, 10)]


def test_single_cell_sweep_equals_run(tmp_path):
    assert cli.main(["sweep", "--vehicles", "30", "--cluster-sizes", "5", *FAST, "--out", str(tmp_path / "s")]) == 0
    assert cli.main(["run", "--vehicles", "30", "--cluster-size", "5", *FAST, "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "s" / "kpi.csv").read_bytes() == (tmp_path / "r" / "kpi.csv").read_bytes()
    assert _tree_equal(tmp_path / "s" / "series", tmp_path / "r" / "series")


def test_bad_list_argument():
    with pytest.raises(SystemExit) as exc:
        cli.main(["sweep", "--vehicles", "a,b"])
    assert exc.value.code == 2


def test_ids_train_then_eval(tmp_path, capsys):
    assert cli.main(["ids-train", "--subsample", "64", "--out", str(tmp_path)]) == 0
    assert cli.main(["ids-eval", "--model", str(tmp_path / "forest.json"), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "eval.json").read_text())
    assert report["recall"] >= 95.0


def test_ids_eval_predictions_equal_labels(tmp_path):
    data = tmp_path / "p.csv"
    data.write_text("x,Label,Pred\n1,Benign,Benign\n2,DoS,DoS\n3,Benign,Benign\n")
    assert cli.main(["ids-eval", "--data", str(data), "--features", "x", "--predictions", "Pred",
                     "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "eval.json").read_text())
    assert all(report[k] == 100.0 for k in ("accuracy", "precision", "recall", "f1"))


def test_ids_eval_empty_file(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("")
    assert cli.main(["ids-eval", "--data", str(empty), "--model", "x", "--out", str(tmp_path)]) == 2
    header_only = tmp_path / "h.csv"
    header_only.write_text("x,Label\n")
    assert cli.main(["ids-eval", "--data", str(header_only), "--model", "x", "--out", str(tmp_path)]) == 2


def test_ids_eval_bad_model(tmp_path):
    assert cli.main(["ids-eval", "--model", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2


def test_gas_fit_bundled(tmp_path, capsys):
    assert cli.main(["gas-fit", "--out", str(tmp_path)]) == 0
    out = dict(line.split() for line in capsys.readouterr().out.splitlines())
    assert float(out["r_squared"]) >= 0.99
    assert "fixed_overhead" in (tmp_path / "gas_model.toml").read_text()


def test_gas_fit_perfect_line(tmp_path, capsys):
    t = tmp_path / "g.csv"
    t.write_text("tx_count,gas\n1,5400\n2,10800\n3,16200\n")
    assert cli.main(["gas-fit", "--table", str(t), "--out", str(tmp_path)]) == 0
    out = dict(line.split() for line in capsys.readouterr().out.splitlines())
    assert float(out["r_squared"]) == 1.0


def test_gas_fit_single_row(tmp_path):
    t = tmp_path / "g.csv"
    t.write_text("tx_count,gas\n5,27000\n")
    assert cli.main(["gas-fit", "--table", str(t), "--out", str(tmp_path)]) == 2


def test_gas_model_snippet_loads(tmp_path):
    from distbvnet.core import load_config
    cli.main(["gas-fit", "--out", str(tmp_path)])
    cfg = load_config(tmp_path / "gas_model.toml")
    assert cfg.gas_model.g0 == pytest.approx(2944.244604316547)


def test_run_with_trained_model(tmp_path):
    forest = ids.fit(ids.synthetic_flows(dim=4)[0], ids.ForestConfig(n_trees=20), seed=1)
    ids.save_forest(forest, tmp_path / "f.json")
    assert cli.main(["run", *FAST, "--model", str(tmp_path / "f.json"), "--out", str(tmp_path / "o")]) == 0
