from __future__ import annotations

import csv

import numpy as np
import pytest

from mfforce import experiments
from mfforce.experiments import ABLATION_CONFIGS, RunRecord, subsample, summarize, summary_columns, write_csv
from mfforce.model import ModelConfig
from mfforce.synthdata import make_dataset
from mfforce.train import ErrorAccumulator, TrainConfig

TINY = TrainConfig(epochs=1, model=ModelConfig(feature_dim=4, hidden_dim=4, n_layers=2, r_atom=3.5, r_bond=2.5))


def _metrics(force_err):
    acc = ErrorAccumulator()
    acc.add("force", 2, np.array([force_err]))
    return acc.metrics()


def test_ablation_table_has_ten_distinct_configurations():
    assert len(ABLATION_CONFIGS) == 10
    assert len(set(ABLATION_CONFIGS.values())) == 10
    assert ABLATION_CONFIGS["N"] == (False,) * 5
    assert ABLATION_CONFIGS["F"] == (True,) * 5
    for name in "EMRC":
        on = ABLATION_CONFIGS[name][:4]
        off = ABLATION_CONFIGS[name + "_bar"][:4]
        assert sum(on) == 1 and sum(off) == 3
        assert tuple(not t for t in on) == off


def test_subsample_is_sorted_deterministic_and_bounded():
    pool = list(range(30))
    a = subsample(pool, 10, 4)
    assert a == subsample(pool, 10, 4)
    assert a == sorted(a) and len(set(a)) == 10
    with pytest.raises(ValueError):
        subsample(pool, 31, 0)


def test_summarize_mean_and_half_range():
    records = [RunRecord("mixed", s, 20, 500, _metrics(e)) for s, e in enumerate((0.1, -0.3, 0.2))]
    (row,) = summarize(records, keys=("method", "n_hf"))
    assert row["n_seeds"] == 3
    assert row["force_mae_mean"] == pytest.approx(0.2)
    assert row["force_mae_spread"] == pytest.approx(0.1)
    assert row["magmom_mae_mean"] is None


def test_write_csv_blank_for_missing(tmp_path):
    records = [RunRecord("F", 0, 20, 100, _metrics(0.5))]
    cols = summary_columns(("method",))
    path = tmp_path / "out.csv"
    write_csv(summarize(records, keys=("method",)), cols, path)
    header, row = list(csv.reader(path.open()))
    assert header == cols
    assert row[cols.index("force_mae_mean")] == "0.5"
    assert row[cols.index("energy_mae_mean")] == ""


def test_lf_size_sweep_sets_are_nested_subsets_of_the_pool_draw(monkeypatch):
    frames = make_dataset(12, 6, 1, atoms_range=(8, 8))
    lf, hf = frames[:12], frames[12:]
    seen = []

    def fake_train_and_test(train_frames, config, hf_test):
        seen.append((config.seed, [id(fr) for fr in train_frames if fr.fidelity == 1]))
        return None, _metrics(0.0)

    monkeypatch.setattr(experiments, "train_and_test", fake_train_and_test)
    experiments.lf_size_sweep(lf, hf, hf[:1], (3, 6), 2, TINY, seeds=(0, 1), pool_size=9)
    for seed in (0, 1):
        drawn = {id(fr) for fr in subsample(lf, 9, seed)}
        small, large = [ids for s, ids in seen if s == seed]
        assert len(small) == 3 and len(large) == 6
        assert set(small) <= set(large) <= drawn


def test_mixed_vs_single_arms_share_the_high_fidelity_subset(monkeypatch):
    frames = make_dataset(10, 8, 2, atoms_range=(8, 8))
    lf, hf = frames[:10], frames[10:]
    calls = []

    def fake_train_and_test(train_frames, config, hf_test):
        calls.append((config.fidelity, [id(fr) for fr in train_frames if fr.fidelity == 2], len(train_frames)))
        return None, _metrics(0.0)

    monkeypatch.setattr(experiments, "train_and_test", fake_train_and_test)
    records = experiments.mixed_vs_single(lf, hf, hf[:1], (3,), 5, TINY, seeds=(0,))
    (mixed_cfg, mixed_hf, n_mixed), (single_cfg, single_hf, n_single) = calls
    assert mixed_hf == single_hf
    assert (n_mixed, n_single) == (8, 3)
    assert mixed_cfg.enable_E and not any((single_cfg.enable_E, single_cfg.enable_M, single_cfg.enable_R, single_cfg.enable_C))
    assert [r.method for r in records] == ["mixed", "single"]


def test_transfer_train_freezes_embedding_and_convolutions():
    frames = make_dataset(6, 6, 3, atoms_range=(8, 8))
    lf, hf = frames[:6], frames[6:]
    tr = experiments.transfer_train(lf, hf[:5], TINY, hf_test=hf[5:])
    assert tr.frozen and all(n.startswith(experiments.TRANSFER_FROZEN_PREFIXES) for n in tr.frozen)
    assert any(n.startswith("readout_heads.") for n in tr.trainable)
    assert any(n.startswith("magmom_head") for n in tr.trainable)
    assert 2 in tr.metrics.per_fidelity and 1 not in tr.metrics.per_fidelity
