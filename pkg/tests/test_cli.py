from __future__ import annotations

import csv
import json

import pytest

from mfforce.cli import main
from mfforce.config import ConfigError, RunConfig, load_run_config, run_config_from_dict
from mfforce.structures import EV_PER_A3_TO_GPA, parse_frames

SUBCOMMANDS = ("gen-synth", "show-config", "train", "eval", "predict", "ablate", "transfer")

TINY_CONFIG = {
    "epochs": 1,
    "seeds": [0],
    "sweep_n_hf": [4],
    "model": {"feature_dim": 8, "hidden_dim": 8, "n_layers": 2, "n_radial": 7, "n_angular": 5},
}


@pytest.mark.parametrize("command", SUBCOMMANDS)
def test_help_exits_zero(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    assert "--" in capsys.readouterr().out


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 2


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synth", "--n-lf", "8", "--n-hf", "12", "--max-atoms", "8", "--out", str(root / "d.jsonl")]) == 0
    assert main(["gen-synth", "--n-lf", "8", "--n-hf", "0", "--max-atoms", "8", "--out", str(root / "lf.jsonl")]) == 0
    assert main(["gen-synth", "--n-lf", "0", "--n-hf", "12", "--seed", "1", "--max-atoms", "8",
                 "--out", str(root / "hf.jsonl")]) == 0
    (root / "c.json").write_text(json.dumps(TINY_CONFIG))
    assert main(["train", "--config", str(root / "c.json"), "--data", str(root / "d.jsonl"), "--out", str(root / "run")]) == 0
    return root


def test_gen_synth_is_deterministic(workspace, tmp_path):
    main(["gen-synth", "--n-lf", "8", "--n-hf", "12", "--max-atoms", "8", "--out", str(tmp_path / "again.jsonl")])
    assert (tmp_path / "again.jsonl").read_bytes() == (workspace / "d.jsonl").read_bytes()
    frames = parse_frames(workspace / "d.jsonl")
    assert sum(fr.fidelity == 1 for fr in frames) == 8


def test_train_outputs(workspace):
    run = workspace / "run"
    summary = json.loads((run / "summary.json").read_text())
    assert summary["config"]["epochs"] == 1
    assert set(summary["test"]) == {"overall", "per_fidelity"}
    with open(run / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["epoch", "lr", "loss"] and len(rows) == 2
    assert json.loads((run / "checkpoint.json").read_text())["format"] == "mfforce-checkpoint/1"


def test_eval_reports_null_magmoms_for_unlabeled_fidelity(workspace, capsys):
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint.json"), "--data", str(workspace / "lf.jsonl")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["overall"]["magmom_mae"] is None
    assert report["overall"]["force_mae"] >= 0


def test_predict_outputs_gpa_stress(workspace, capsys):
    record = json.loads((workspace / "d.jsonl").read_text().splitlines()[0])
    (workspace / "s.json").write_text(json.dumps({k: record[k] for k in ("lattice", "species", "positions")}))
    capsys.readouterr()
    ck = str(workspace / "run" / "checkpoint.json")
    assert main(["predict", "--checkpoint", ck, "--structure", str(workspace / "s.json"), "--fidelity", "2"]) == 0
    out = json.loads(capsys.readouterr().out)
    n = len(record["species"])
    assert len(out["forces_eV_per_A"]) == n and len(out["magmoms_muB"]) == n
    for row_a, row_b in zip(out["stress_GPa"], out["stress_eV_per_A3"]):
        for a, b in zip(row_a, row_b):
            assert a == pytest.approx(b * EV_PER_A3_TO_GPA, rel=1e-14)
    assert main(["predict", "--checkpoint", ck, "--structure", str(workspace / "s.json"), "--fidelity", "3"]) == 2


def test_missing_inputs_exit_two(workspace, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.json"), "--data", str(workspace / "d.jsonl")]) == 2
    ck = str(workspace / "run" / "checkpoint.json")
    assert main(["eval", "--checkpoint", ck, "--data", str(tmp_path / "none.jsonl")]) == 2
    (tmp_path / "bad.json").write_text('{"learning_rate": 1}')
    assert main(["train", "--config", str(tmp_path / "bad.json"), "--data", str(workspace / "d.jsonl"),
                 "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "broken.jsonl").write_text("{nope\n")
    assert main(["eval", "--checkpoint", ck, "--data", str(tmp_path / "broken.jsonl")]) == 2


def test_runtime_failure_exit_one(workspace, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen-synth", "--n-lf", "1", "--n-hf", "0", "--max-atoms", "8", "--out", str(blocker / "x.jsonl")]) == 1


def test_ablate_writes_ten_rows(workspace):
    out = workspace / "ablation.csv"
    assert main(["ablate", "--config", str(workspace / "c.json"), "--data-lf", str(workspace / "lf.jsonl"),
                 "--data-hf", str(workspace / "hf.jsonl"), "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["N", "F", "E", "M", "R", "C", "E_bar", "M_bar", "R_bar", "C_bar"]
    assert len(rows[0]) == 2 + 16


def test_transfer_writes_table_and_manifest(workspace):
    out = workspace / "transfer.csv"
    assert main(["transfer", "--config", str(workspace / "c.json"), "--data-lf", str(workspace / "lf.jsonl"),
                 "--data-hf", str(workspace / "hf.jsonl"), "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert {r["method"] for r in rows} == {"transfer", "multi_fidelity"}
    manifest = json.loads(out.with_suffix(".frozen.json").read_text())
    assert "element_embedding" in manifest["frozen"]
    assert all(not name.startswith("layers.") for name in manifest["trainable"])
    assert any(name.startswith("readout_heads.") for name in manifest["trainable"])


def test_show_config_round_trip(tmp_path, capsys):
    assert main(["show-config"]) == 0
    defaults = json.loads(capsys.readouterr().out)
    assert defaults["lr"] == 0.005 and defaults["model"]["feature_dim"] == 64
    assert run_config_from_dict(defaults) == RunConfig()
    (tmp_path / "c.json").write_text(json.dumps({"lr": 0.01, "fidelity": {"enable_R": False}}))
    cfg = load_run_config(tmp_path / "c.json")
    assert cfg.train.lr == 0.01 and not cfg.train.fidelity.enable_R


def test_config_errors():
    with pytest.raises(ConfigError):
        run_config_from_dict({"model": {"depth": 3}})
    with pytest.raises(ConfigError):
        run_config_from_dict({"test_fraction": 1.5})
    with pytest.raises(ConfigError):
        run_config_from_dict({"batch_size": 0})
