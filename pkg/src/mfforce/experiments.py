"""Experiment protocols: mixed vs single-fidelity learning curves, low-fidelity
size sweeps, fidelity-mechanism ablations and the frozen-layer transfer baseline.

Every protocol evaluates on a reserved high-fidelity test set and repeats over
seeds; a seed fixes both the sampled training subsets and the model
initialization.
"""

from __future__ import annotations

import csv
import logging
import random
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch

from .model import FidelityConfig, MultiFidelityModel
from .structures import LabeledFrame, split_dataset
from .train import METRIC_KEYS, Metrics, TrainConfig, evaluate, train

logger = logging.getLogger(__name__)

LF, HF = 1, 2

# name -> (enable_E, enable_M, enable_R, enable_C, uses low-fidelity data)
ABLATION_CONFIGS = {
    "N": (False, False, False, False, False),
    "F": (True, True, True, True, True),
    "E": (True, False, False, False, True),
    "M": (False, True, False, False, True),
    "R": (False, False, True, False, True),
    "C": (False, False, False, True, True),
    "E_bar": (False, True, True, True, True),
    "M_bar": (True, False, True, True, True),
    "R_bar": (True, True, False, True, True),
    "C_bar": (True, True, True, False, True),
}

# parameters of the embedding and convolution layers, frozen during fine-tuning
TRANSFER_FROZEN_PREFIXES = (
    "element_embedding",
    "fidelity_embedding",
    "bond_embedding",
    "angle_embedding",
    "layers.",
)


@dataclass
class RunRecord:
    method: str
    seed: int
    n_hf: int
    n_lf: int
    metrics: Metrics

    def row(self) -> dict:
        out = {"method": self.method, "seed": self.seed, "n_hf": self.n_hf, "n_lf": self.n_lf}
        out.update(self.metrics.flat(HF if HF in self.metrics.per_fidelity else None))
        return out


def subsample(frames: Sequence[LabeledFrame], n: int, seed: int) -> list[LabeledFrame]:
    """``n`` frames drawn without replacement, in their original order."""
    if n > len(frames):
        raise ValueError(f"requested {n} frames from a pool of {len(frames)}")
    idx = sorted(random.Random(seed).sample(range(len(frames)), n))
    return [frames[i] for i in idx]


def reserve_test(hf_frames: Sequence[LabeledFrame], test_fraction: float = 0.1, seed: int = 0):
    """Split high-fidelity frames into (train pool, reserved test set)."""
    return split_dataset(list(hf_frames), test_fraction, seed)


def _with_toggles(config: TrainConfig, toggles, seed: int, n_fidelities: int = 2) -> TrainConfig:
    e, m, r, c = toggles
    return replace(config, seed=seed, fidelity=FidelityConfig(n_fidelities, e, m, r, c))


def train_and_test(frames, config: TrainConfig, hf_test) -> tuple[MultiFidelityModel, Metrics]:
    result = train(frames, config)
    return result.model, evaluate(result.model, hf_test)


def mixed_vs_single(
    lf_pool: Sequence[LabeledFrame],
    hf_pool: Sequence[LabeledFrame],
    hf_test: Sequence[LabeledFrame],
    n_hf_values: Sequence[int],
    n_lf: int,
    config: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
) -> list[RunRecord]:
    """Multi-fidelity training on (n_lf LF + n_hf HF) against HF-only training.

    Both arms see the same high-fidelity subset for a given seed. The HF-only
    arm has every fidelity mechanism off.
    """
    records = []
    for seed in seeds:
        lf = subsample(lf_pool, n_lf, seed)
        for n_hf in n_hf_values:
            hf = subsample(hf_pool, n_hf, seed)
            _, m_mixed = train_and_test(lf + hf, _with_toggles(config, ABLATION_CONFIGS["F"][:4], seed), hf_test)
            records.append(RunRecord("mixed", seed, n_hf, n_lf, m_mixed))
            _, m_single = train_and_test(hf, _with_toggles(config, ABLATION_CONFIGS["N"][:4], seed), hf_test)
            records.append(RunRecord("single", seed, n_hf, 0, m_single))
            logger.info(
                "seed %d n_hf %d: force MAE mixed %.4f single %.4f",
                seed, n_hf, m_mixed.flat(HF)["force_mae"], m_single.flat(HF)["force_mae"],
            )
    return records


def lf_size_sweep(
    lf_pool,
    hf_pool,
    hf_test,
    n_lf_values: Sequence[int],
    n_hf: int,
    config: TrainConfig,
    seeds=(0, 1, 2),
    pool_size: int | None = None,
) -> list[RunRecord]:
    """Multi-fidelity training at fixed n_hf and growing low-fidelity sets.

    For each seed the low-fidelity sets are nested subsets of one draw of
    ``pool_size`` frames (default: the largest requested size). Passing the
    ``n_lf`` of an earlier :func:`mixed_vs_single` run makes every set a
    subset of that run's low-fidelity frames for the same seed.
    """
    records = []
    for seed in seeds:
        lf_all = subsample(lf_pool, pool_size or max(n_lf_values), seed)
        order = list(range(len(lf_all)))
        random.Random(seed + 7919).shuffle(order)
        hf = subsample(hf_pool, n_hf, seed)
        for n_lf in n_lf_values:
            lf = [lf_all[i] for i in sorted(order[:n_lf])]
            _, metrics = train_and_test(lf + hf, _with_toggles(config, ABLATION_CONFIGS["F"][:4], seed), hf_test)
            records.append(RunRecord("mixed", seed, n_hf, n_lf, metrics))
    return records


def ablate(
    lf_frames: Sequence[LabeledFrame],
    hf_frames: Sequence[LabeledFrame],
    config: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    hf_test: Sequence[LabeledFrame] | None = None,
    configurations: Sequence[str] = tuple(ABLATION_CONFIGS),
) -> list[RunRecord]:
    """Train every fidelity-mechanism configuration on the same data.

    ``N`` trains on the high-fidelity frames alone with all mechanisms off;
    every other configuration trains on all frames. Without ``hf_test``,
    10% of ``hf_frames`` is reserved for testing.
    """
    if hf_test is None:
        hf_frames, hf_test = reserve_test(hf_frames)
    records = []
    for seed in seeds:
        for name in configurations:
            *toggles, uses_lf = ABLATION_CONFIGS[name]
            frames = list(lf_frames) + list(hf_frames) if uses_lf else list(hf_frames)
            _, metrics = train_and_test(frames, _with_toggles(config, toggles, seed), hf_test)
            records.append(RunRecord(name, seed, len(hf_frames), len(lf_frames) if uses_lf else 0, metrics))
            logger.info("ablation %s seed %d: force MAE %.4f", name, seed, metrics.flat(HF)["force_mae"])
    return records


@dataclass
class TransferResult:
    model: MultiFidelityModel
    metrics: Metrics
    frozen: list[str]
    trainable: list[str]


def transfer_train(
    lf_frames: Sequence[LabeledFrame],
    hf_frames: Sequence[LabeledFrame],
    config: TrainConfig,
    hf_test: Sequence[LabeledFrame] | None = None,
) -> TransferResult:
    """Pretrain a single-fidelity model on LF data, then fine-tune on HF data.

    Fine-tuning refits the composition model on the HF frames and updates
    only the readout and magmom heads; embedding and convolution parameters
    stay frozen.
    """
    if not lf_frames or not hf_frames:
        raise ValueError("transfer learning needs both low- and high-fidelity frames")
    if hf_test is None:
        hf_frames, hf_test = reserve_test(hf_frames)
    single = replace(config, fidelity=FidelityConfig.all_off(1))
    pre = train([fr.with_fidelity(1) for fr in lf_frames], single)
    model = pre.model
    before = {
        name: p.detach().clone()
        for name, p in model.named_parameters()
        if name.startswith(TRANSFER_FROZEN_PREFIXES)
    }
    fine = train(
        [fr.with_fidelity(1) for fr in hf_frames],
        single,
        model=model,
        frozen_prefixes=TRANSFER_FROZEN_PREFIXES,
    )
    for name, p in model.named_parameters():
        if name in before and not torch.equal(before[name], p.detach()):
            raise AssertionError(f"frozen parameter {name} changed during fine-tuning")
    metrics = evaluate(fine.model, [fr.with_fidelity(1) for fr in hf_test])
    trainable = [n for n, p in model.named_parameters() if p.requires_grad and n not in before]
    return TransferResult(fine.model, _relabel_metrics(metrics, 1, HF), sorted(before), trainable)


def _relabel_metrics(metrics: Metrics, src: int, dst: int) -> Metrics:
    per = dict(metrics.per_fidelity)
    if src in per:
        per[dst] = per.pop(src)
    return Metrics(metrics.overall, per)


def compare_transfer(
    lf_pool,
    hf_pool,
    hf_test,
    n_hf_values: Sequence[int],
    n_lf: int,
    config: TrainConfig,
    seeds=(0, 1, 2),
    manifest: dict | None = None,
) -> list[RunRecord]:
    """Frozen-layer transfer learning against multi-fidelity training on identical subsets.

    If ``manifest`` is given it is filled with the frozen and trainable
    parameter names of the fine-tuned models.
    """
    records = []
    for seed in seeds:
        lf = subsample(lf_pool, n_lf, seed)
        for n_hf in n_hf_values:
            hf = subsample(hf_pool, n_hf, seed)
            cfg = replace(config, seed=seed)
            tr = transfer_train(lf, hf, cfg, hf_test=hf_test)
            if manifest is not None:
                manifest.update(
                    frozen_prefixes=list(TRANSFER_FROZEN_PREFIXES), frozen=tr.frozen, trainable=tr.trainable
                )
            records.append(RunRecord("transfer", seed, n_hf, n_lf, tr.metrics))
            _, m_mf = train_and_test(lf + hf, _with_toggles(config, ABLATION_CONFIGS["F"][:4], seed), hf_test)
            records.append(RunRecord("multi_fidelity", seed, n_hf, n_lf, m_mf))
    return records


def summarize(records: Sequence[RunRecord], keys=("method", "n_hf", "n_lf")) -> list[dict]:
    """Mean and half-range over seeds for each group of records."""
    groups: dict[tuple, list[dict]] = {}
    for rec in records:
        row = rec.row()
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    out = []
    for key, rows in groups.items():
        summary = dict(zip(keys, key))
        summary["n_seeds"] = len(rows)
        for metric in METRIC_KEYS:
            vals = [r[metric] for r in rows if r[metric] is not None]
            if vals:
                summary[f"{metric}_mean"] = float(np.mean(vals))
                summary[f"{metric}_spread"] = 0.5 * float(max(vals) - min(vals))
            else:
                summary[f"{metric}_mean"] = summary[f"{metric}_spread"] = None
        out.append(summary)
    return out


def summary_columns(keys=("method", "n_hf", "n_lf")) -> list[str]:
    cols = list(keys) + ["n_seeds"]
    for metric in METRIC_KEYS:
        cols += [f"{metric}_mean", f"{metric}_spread"]
    return cols


def write_csv(rows: Sequence[dict], columns: Sequence[str], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if row.get(c) is None else row.get(c) for c in columns])
