from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from mfforce.model import FidelityConfig, ModelConfig, MultiFidelityModel, Prediction, predict
from mfforce.structures import LabeledFrame
from mfforce.synthdata import make_dataset
from mfforce.tensorcore import DTYPE, grad_loss_wrt_params
from mfforce.train import (
    METRIC_KEYS,
    AdamState,
    TrainConfig,
    TrainingError,
    adam_step,
    cosine_lr,
    evaluate,
    frame_loss,
    huber,
    train,
    write_history_csv,
    HISTORY_COLUMNS,
)

from conftest import random_cell

TINY = ModelConfig(feature_dim=8, hidden_dim=8, n_layers=2, n_radial=7, n_angular=5, r_atom=4.0, r_bond=2.6)


def test_huber_values():
    assert huber(0.0, 0.1) == 0.0
    assert huber(0.05, 0.1) == pytest.approx(0.00125, abs=1e-15)
    assert huber(1.0, 0.1) == pytest.approx(0.095, abs=1e-15)
    assert huber(-1.0, 0.1) == pytest.approx(0.095, abs=1e-15)


def test_huber_is_c1_at_delta():
    r = torch.tensor([0.1 - 1e-9, 0.1 + 1e-9], dtype=DTYPE, requires_grad=True)
    (g,) = torch.autograd.grad(huber(r, 0.1).sum(), r)
    assert abs(float(g[0] - g[1])) < 1e-8
    assert abs(float(huber(torch.tensor(0.1, dtype=DTYPE), 0.1)) - 0.005) < 1e-15


def _frame_and_prediction(rng, magmoms=True):
    s = random_cell(rng, 5)
    label = LabeledFrame(
        s, 1, float(rng.normal(-20, 1)), rng.normal(size=(5, 3)), np.diag(rng.normal(size=3)) * 0.05,
        rng.normal(size=5) if magmoms else None,
    )
    stress = rng.normal(size=(3, 3)) * 0.1
    pred = Prediction(float(rng.normal(-20, 1)), rng.normal(size=(5, 3)), stress + stress.T, rng.normal(size=5))
    return label, pred


def _brute_force_loss(pred, label, delta=0.1, weights=(1, 1, 0.1, 0.1)):
    def h(r):
        r = abs(r)
        return 0.5 * r * r if r <= delta else delta * (r - 0.5 * delta)

    n = label.n_atoms
    total = weights[0] * h((pred.energy - label.energy) / n)
    total += weights[1] * sum(h(x) for x in (pred.forces - label.forces).ravel()) / (3 * n)
    total += weights[2] * sum(h(x) for x in (pred.stress - label.stress).ravel()) / 9
    if label.magmoms is not None:
        total += weights[3] * sum(h(x) for x in (pred.magmoms - label.magmoms)) / n
    return total


def test_frame_loss_matches_componentwise_oracle(rng):
    for magmoms in (True, False):
        label, pred = _frame_and_prediction(rng, magmoms)
        assert float(frame_loss(pred, label)) == pytest.approx(_brute_force_loss(pred, label), rel=1e-13)


def test_frame_loss_zero_at_labels(rng):
    label, _ = _frame_and_prediction(rng)
    exact = Prediction(label.energy, label.forces, label.stress, label.magmoms)
    assert float(frame_loss(exact, label)) == 0.0


def test_frame_loss_ignores_magmoms_without_labels(rng):
    label, pred = _frame_and_prediction(rng, magmoms=False)
    other = Prediction(pred.energy, pred.forces, pred.stress, pred.magmoms + 100.0)
    assert float(frame_loss(pred, label)) == float(frame_loss(other, label))


def test_frame_loss_shape_mismatch(rng):
    label, pred = _frame_and_prediction(rng)
    bad = Prediction(pred.energy, pred.forces[:3], pred.stress, pred.magmoms)
    with pytest.raises(ValueError):
        frame_loss(bad, label)


def test_masked_magmom_gradient_is_exactly_zero(rng):
    from mfforce.model import collate, graph_for
    from mfforce.train import LabelBatch, frame_losses

    model = MultiFidelityModel(TINY, FidelityConfig(2), seed=1)
    label, _ = _frame_and_prediction(rng, magmoms=False)
    batch = collate([label.structure], [1], [graph_for(label.structure, model)])
    out = model(batch, create_graph=True)
    loss = frame_losses(out, LabelBatch.from_frames([label]), batch, TrainConfig()).sum()
    params = {n: p for n, p in model.named_parameters() if p.requires_grad}
    grads = grad_loss_wrt_params(loss, params)
    assert torch.count_nonzero(grads["magmom_head.weight"]) == 0
    assert torch.count_nonzero(grads["magmom_head.bias"]) == 0
    assert torch.count_nonzero(grads["element_embedding"]) > 0


def test_adam_zero_gradient_and_first_step():
    p = {"w": torch.tensor([1.0, -2.0, 3.0], dtype=DTYPE)}
    state = AdamState()
    adam_step(p, {"w": torch.zeros(3, dtype=DTYPE)}, state, lr=0.01)
    assert state.step == 1 and p["w"].tolist() == [1.0, -2.0, 3.0]
    p = {"w": torch.tensor([1.0, -2.0, 3.0], dtype=DTYPE)}
    state = AdamState()
    g = torch.tensor([0.3, -5.0, 1e-3], dtype=DTYPE)
    adam_step(p, {"w": g}, state, lr=0.01)
    step = p["w"] - torch.tensor([1.0, -2.0, 3.0], dtype=DTYPE)
    torch.testing.assert_close(step, -0.01 * torch.sign(g), rtol=1e-4, atol=0)


def test_adam_rejects_non_finite_gradient():
    p = {"layer.weight": torch.zeros(2, dtype=DTYPE)}
    with pytest.raises(TrainingError, match="layer.weight"):
        adam_step(p, {"layer.weight": torch.tensor([1.0, math.nan], dtype=DTYPE)}, AdamState(), 0.1)


def test_adam_quadratic_bowl_is_monotone_after_warmup():
    curvature = torch.tensor([1.0, 4.0, 0.25], dtype=DTYPE)
    p = {"x": torch.tensor([2.0, -1.5, 3.0], dtype=DTYPE)}
    state = AdamState()
    losses = []
    for _ in range(100):
        x = p["x"]
        losses.append(float(0.5 * (curvature * x * x).sum()))
        adam_step(p, {"x": curvature * x}, state, lr=0.01)
    tail = losses[10:]
    assert all(b <= a for a, b in zip(tail, tail[1:]))


def test_cosine_lr():
    assert cosine_lr(0, 60, 0.005) == 0.005
    assert cosine_lr(59, 60, 0.005) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(30, 61, 0.005) == pytest.approx(0.0025, abs=1e-15)
    for total in range(2, 20):
        assert cosine_lr(0, total, 1.0) == 1.0
        assert cosine_lr(total - 1, total, 1.0) == pytest.approx(0.0, abs=1e-15)


def test_default_config_matches_table():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.epochs, cfg.lr) == (4, 60, 0.005)
    assert cfg.weights == (1.0, 1.0, 0.1, 0.1)
    assert (cfg.beta1, cfg.beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)
    assert cfg.scheduler == "cosine"
    assert (cfg.model.feature_dim, cfg.model.n_layers, cfg.model.n_radial, cfg.model.n_angular) == (64, 4, 31, 31)
    with pytest.raises(ValueError):
        TrainConfig(weights=(1, -1, 0, 0))
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


@pytest.fixture(scope="module")
def small_data():
    return make_dataset(6, 6, seed=3, atoms_range=(8, 8))


def test_evaluate_exact_and_offset(small_data):
    model = MultiFidelityModel(TINY, FidelityConfig(2), seed=0)
    exact = []
    for fr in small_data:
        p = predict(fr.structure, fr.fidelity, model)
        exact.append(LabeledFrame(fr.structure, fr.fidelity, p.energy, p.forces, p.stress,
                                  p.magmoms if fr.magmoms is not None else None))
    m = evaluate(model, exact).flat()
    for key in METRIC_KEYS:
        assert m[key] == pytest.approx(0.0, abs=1e-12)
    delta = 0.8
    shifted = [LabeledFrame(fr.structure, fr.fidelity, fr.energy + delta, fr.forces, fr.stress, fr.magmoms)
               for fr in exact]
    m = evaluate(model, shifted).flat()
    expected = np.mean([delta / fr.n_atoms for fr in exact])
    assert m["energy_mae"] == pytest.approx(expected, rel=1e-10)
    assert m["force_mae"] == pytest.approx(0.0, abs=1e-12)


def test_evaluate_matches_independent_recomputation_and_order(small_data):
    model = MultiFidelityModel(TINY, FidelityConfig(2), seed=2)
    metrics = evaluate(model, small_data, batch_size=5)
    preds = [predict(fr.structure, fr.fidelity, model) for fr in small_data]
    force_err = np.concatenate([(p.forces - fr.forces).ravel() for p, fr in zip(preds, small_data)])
    energy_err = np.array([(p.energy - fr.energy) / fr.n_atoms for p, fr in zip(preds, small_data)])
    mag_err = np.concatenate([p.magmoms - fr.magmoms for p, fr in zip(preds, small_data) if fr.magmoms is not None])
    flat = metrics.flat()
    assert flat["force_mae"] == pytest.approx(np.abs(force_err).mean(), rel=1e-10)
    assert flat["force_rmse"] == pytest.approx(np.sqrt((force_err**2).mean()), rel=1e-10)
    assert flat["energy_mae"] == pytest.approx(np.abs(energy_err).mean(), rel=1e-10)
    assert flat["magmom_mae"] == pytest.approx(np.abs(mag_err).mean(), rel=1e-10)
    assert metrics.flat(1)["magmom_mae"] is None
    for key in ("energy", "force", "stress", "magmom"):
        assert flat[f"{key}_rmse"] >= flat[f"{key}_mae"] >= 0
    reversed_metrics = evaluate(model, small_data[::-1], batch_size=3).flat()
    for key in METRIC_KEYS:
        assert reversed_metrics[key] == pytest.approx(flat[key], rel=1e-12)


def test_train_is_deterministic_and_writes_history(small_data, tmp_path):
    cfg = TrainConfig(epochs=2, model=TINY, clip_norm=None)
    a = train(small_data, cfg)
    b = train(small_data, cfg)
    assert a.history == b.history
    for (n1, p1), (n2, p2) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(p1, p2)
    assert len(a.history) == 2 and a.history[0]["lr"] == cfg.lr and a.history[1]["lr"] == 0.0
    write_history_csv(a.history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0].split(",") == list(HISTORY_COLUMNS)
    assert len(lines) == 3


def test_training_on_fidelity_one_leaves_fidelity_two_untouched(small_data):
    lf = [fr for fr in small_data if fr.fidelity == 1]
    cfg = TrainConfig(epochs=10, batch_size=2, max_steps=10, model=TINY, clip_norm=None, val_fraction=0.0)
    model = MultiFidelityModel(TINY, FidelityConfig(2), seed=0)
    before = {name: t[idx].clone() for name, (t, idx) in model.fidelity_exclusive_slices(2).items()}
    seen = []

    def check(step, grads):
        seen.append(step)
        named = dict(model.named_parameters())
        for name, (tensor, idx) in model.fidelity_exclusive_slices(2).items():
            pname = next((n for n, p in named.items() if p is tensor), None)
            if pname in grads:
                assert torch.count_nonzero(grads[pname][idx]) == 0, name

    result = train(lf, cfg, model=model, on_step=check)
    assert result.steps == 10 and len(seen) == 10
    for name, (t, idx) in model.fidelity_exclusive_slices(2).items():
        assert torch.equal(t[idx], before[name]), name


def test_frozen_prefixes_are_not_updated(small_data):
    cfg = TrainConfig(epochs=1, model=TINY)
    model = MultiFidelityModel(TINY, FidelityConfig(2), seed=0)
    frozen = {n: p.detach().clone() for n, p in model.named_parameters() if n.startswith("layers.")}
    train(small_data, cfg, model=model, frozen_prefixes=("layers.",))
    for n, p in model.named_parameters():
        if n in frozen:
            assert torch.equal(p, frozen[n])
    assert not torch.equal(model.readout_heads[0].out.weight, MultiFidelityModel(TINY, FidelityConfig(2), seed=0).readout_heads[0].out.weight)


def test_train_rejects_bad_input(small_data):
    with pytest.raises(ValueError):
        train([], TrainConfig(model=TINY))
    with pytest.raises(ValueError):
        train(small_data, TrainConfig(model=TINY, fidelity=FidelityConfig(1)))
