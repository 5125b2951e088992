import json
import shutil
from pathlib import Path

import pytest
import yaml

from reject_inference.cli import ConfigError, load_config, main, parse_config

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
GOLDEN = Path(__file__).parent / "golden"


def write_yaml(tmp_path, doc, name="run.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc))
    return p


MINIMAL = {
    "seed": 5,
    "scenario": {"generator": {"n_total": 400, "d": 2, "theta_true": [-1.0, 1.0, 1.0]},
                 "mechanism": {"kind": "MAR_stochastic", "floor": 0.1}},
    "methods": ["financed_only"],
    "rates": [1.0],
    "n_test": 500,
    "bootstrap": 200,
}


def test_minimal_sweep_single_row(tmp_path, capsys):
    cfg = write_yaml(tmp_path, MINIMAL)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "method,rate,gini,lo,hi,param_l2" and len(lines) == 2
    assert lines[1].startswith("financed_only,1,")
    assert (tmp_path / "o" / "summary.txt").exists()
    assert "financed_only" in capsys.readouterr().out


def test_default_sweep_matches_golden(tmp_path):
    assert main(["sweep", "--config", str(CONFIGS / "default_sweep.yaml"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "sweep.csv").read_bytes() == (GOLDEN / "default_sweep.csv").read_bytes()


def test_unknown_key_exit_2(tmp_path, capsys):
    doc = dict(MINIMAL, colour="blue")
    assert main(["sweep", "--config", str(write_yaml(tmp_path, doc))]) == 2
    assert "colour" in capsys.readouterr().err


def test_unknown_nested_key_named(tmp_path, capsys):
    doc = yaml.safe_load(yaml.safe_dump(MINIMAL))
    doc["scenario"]["mechanism"]["steepnes"] = 3
    assert main(["sweep", "--config", str(write_yaml(tmp_path, doc))]) == 2
    err = capsys.readouterr().err
    assert "steepnes" in err and "scenario.mechanism" in err


@pytest.mark.parametrize("patch", [
    {"methods": ["financed_only", "bogus"]},
    {"rates": [1.5]},
    {"bootstrap": 10},
    {"seed": -1},
    {"scenario": {"generator": {"n_total": 3, "d": 2, "theta_true": [0, 0, 0]},
                  "mechanism": {"kind": "MAR_stochastic"}}},
    {"scenario": {"generator": {"n_total": 300, "d": 2, "theta_true": [0, 0, 0]},
                  "mechanism": {"kind": "MAGIC"}}},
])
def test_invalid_configs_exit_2(tmp_path, patch):
    assert main(["sweep", "--config", str(write_yaml(tmp_path, dict(MINIMAL, **patch)))]) == 2


def test_validation_happens_before_computation(tmp_path):
    doc = dict(MINIMAL, methods=["financed_only", "augmentation", {"name": "parceling", "inflaton": 2}])
    with pytest.raises(ConfigError, match="inflaton"):
        parse_config(doc)


def test_numerical_failure_exit_3_names_method_and_rate(tmp_path, capsys):
    doc = yaml.safe_load(yaml.safe_dump(MINIMAL))
    doc["scenario"]["mechanism"] = {"kind": "MAR_cutoff"}
    doc["methods"] = ["financed_only", "ideal_reweighting"]
    doc["rates"] = [1.0, 0.5]
    assert main(["sweep", "--config", str(write_yaml(tmp_path, doc)), "--out", str(tmp_path / "o")]) == 3
    err = capsys.readouterr().err
    assert "ideal_reweighting" in err and "0.5" in err


def test_table1_insufficient_replications(tmp_path, capsys):
    cfg = write_yaml(tmp_path, {"seed": 1, "table1": {"replications": 1}})
    assert main(["table1", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "insufficient replications" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_table1_rerun_byte_identical(tmp_path):
    cfg = write_yaml(tmp_path, {"seed": 2, "table1": {"n": 1500, "replications": 20, "reference_n": 100_000}})
    assert main(["table1", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["table1", "--config", str(cfg), "--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    a = (tmp_path / "a" / "table1.csv").read_bytes()
    assert a == (tmp_path / "b" / "table1.csv").read_bytes()
    assert main(["table1", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "3"]) == 0
    assert (tmp_path / "c" / "table1.csv").read_bytes() != a


def test_seed_override(tmp_path):
    cfg = write_yaml(tmp_path, MINIMAL)
    main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "6"])
    doc = dict(MINIMAL, seed=6)
    main(["sweep", "--config", str(write_yaml(tmp_path, doc, "six.yaml")), "--out", str(tmp_path / "c")])
    a, b, c = ((tmp_path / k / "sweep.csv").read_bytes() for k in "abc")
    assert a != b and b == c


def test_fit_toy_csv(tmp_path, capsys):
    args = ["fit", "--config", str(CONFIGS / "fit_toy.yaml"), "--data", str(CONFIGS / "toy.csv")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert "financed_only: intercept=" in out and "holdout Gini" in out
    model = json.loads((tmp_path / "a" / "model.json").read_text())
    assert len(model["methods"]["financed_only"]["theta"]) == 3
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "model.json").read_bytes() == (tmp_path / "b" / "model.json").read_bytes()


def test_fit_missing_financing_column(tmp_path, capsys):
    src = (CONFIGS / "toy.csv").read_text().splitlines()
    rows = [",".join(c for i, c in enumerate(line.split(",")) if i != 3) for line in src]
    bad = tmp_path / "nofin.csv"
    bad.write_text("\n".join(rows) + "\n")
    assert main(["fit", "--config", str(CONFIGS / "fit_toy.yaml"), "--data", str(bad),
                 "--out", str(tmp_path / "o")]) == 2
    assert "financed" in capsys.readouterr().err


def test_real_data_sweep_prints_caveat(tmp_path, capsys):
    shutil.copy(CONFIGS / "toy.csv", tmp_path / "toy.csv")
    shutil.copy(CONFIGS / "real_sweep.yaml", tmp_path / "real_sweep.yaml")
    assert main(["sweep", "--config", str(tmp_path / "real_sweep.yaml"), "--out", str(tmp_path / "o")]) == 0
    assert "FINANCED records only" in capsys.readouterr().out
    assert "FINANCED records only" in (tmp_path / "o" / "summary.txt").read_text()


def test_inputs_untouched(tmp_path):
    cfg = write_yaml(tmp_path, MINIMAL)
    before = cfg.read_bytes()
    main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert cfg.read_bytes() == before
    assert sorted(p.name for p in tmp_path.iterdir()) == ["o", "run.yaml"]


@pytest.mark.parametrize("name", ["default_sweep", "lognormal_sweep", "generative_truth", "table1", "fit_toy",
                                  "real_sweep"])
def test_shipped_configs_parse(name):
    load_config(CONFIGS / f"{name}.yaml")
