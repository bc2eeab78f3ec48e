"""Loss, optimizer, schedule, training loop and error metrics."""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .graph import CrystalGraph
from .model import (
    FidelityConfig,
    GraphBatch,
    ModelConfig,
    MultiFidelityModel,
    Prediction,
    collate,
    fit_composition,
    graph_for,
    save_checkpoint,
    set_composition,
)
from .structures import LabeledFrame, split_dataset
from .tensorcore import DTYPE, grad_loss_wrt_params

logger = logging.getLogger(__name__)

LABELS = ("energy", "force", "stress", "magmom")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    epochs: int = 60
    lr: float = 0.005
    huber_delta: float = 0.1
    weights: tuple[float, float, float, float] = (1.0, 1.0, 0.1, 0.1)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    scheduler: str = "cosine"
    seed: int = 0
    val_fraction: float = 0.1
    clip_norm: float | None = 10.0
    max_steps: int | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    fidelity: FidelityConfig = field(default_factory=FidelityConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if len(self.weights) != 4 or any(w < 0 for w in self.weights):
            raise ValueError("weights must be four non-negative numbers (E, F, stress, magmom)")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        if self.scheduler not in ("cosine", "constant"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")


def huber(residual, delta: float):
    """Quadratic inside ``|r| <= delta``, linear outside, C1 at the seam."""
    if isinstance(residual, torch.Tensor):
        a = residual.abs()
        return torch.where(a <= delta, 0.5 * residual**2, delta * (a - 0.5 * delta))
    a = np.abs(residual)
    return np.where(a <= delta, 0.5 * np.square(residual), delta * (a - 0.5 * delta))


@dataclass(eq=False)
class LabelBatch:
    energy: torch.Tensor
    forces: torch.Tensor
    stress: torch.Tensor
    magmoms: torch.Tensor
    graph_has_magmoms: torch.Tensor
    atom_has_magmoms: torch.Tensor

    @classmethod
    def from_frames(cls, frames: Sequence[LabeledFrame]) -> LabelBatch:
        mags, atom_mask = [], []
        for fr in frames:
            if fr.magmoms is not None:
                mags.append(fr.magmoms)
                atom_mask.append(np.ones(fr.n_atoms, dtype=bool))
            else:
                mags.append(np.zeros(fr.n_atoms))
                atom_mask.append(np.zeros(fr.n_atoms, dtype=bool))
        return cls(
            energy=torch.as_tensor([fr.energy for fr in frames], dtype=DTYPE),
            forces=torch.as_tensor(np.concatenate([fr.forces for fr in frames]), dtype=DTYPE),
            stress=torch.as_tensor(np.stack([fr.stress for fr in frames]), dtype=DTYPE),
            magmoms=torch.as_tensor(np.concatenate(mags), dtype=DTYPE),
            graph_has_magmoms=torch.as_tensor([fr.magmoms is not None for fr in frames]),
            atom_has_magmoms=torch.as_tensor(np.concatenate(atom_mask)),
        )


def frame_losses(out: Mapping[str, torch.Tensor], labels: LabelBatch, batch: GraphBatch, config: TrainConfig):
    """Per-frame weighted Huber loss, shape (n_graphs,).

    Energy enters per atom; forces, stress and magmoms are averaged over
    their components. Frames without magmom labels get an exactly-zero
    magmom term that does not touch the graph of the magmom head.
    """
    w_e, w_f, w_s, w_m = config.weights
    delta = config.huber_delta
    n_atoms = batch.n_atoms.to(DTYPE)
    agi = batch.atom_graph_index
    if out["forces"].shape != labels.forces.shape or out["stress"].shape != labels.stress.shape:
        raise ValueError("prediction and label shapes disagree")
    loss = w_e * huber((out["energy"] - labels.energy) / n_atoms, delta)
    force_term = huber(out["forces"] - labels.forces, delta).sum(-1)
    loss = loss + w_f * torch.zeros_like(loss).index_add(0, agi, force_term) / (3 * n_atoms)
    loss = loss + w_s * huber(out["stress"] - labels.stress, delta).sum((-1, -2)) / 9.0
    if bool(labels.graph_has_magmoms.any()):
        idx = torch.nonzero(labels.atom_has_magmoms).squeeze(-1)
        mag_term = huber(out["magmoms"][idx] - labels.magmoms[idx], delta)
        mag = torch.zeros_like(loss).index_add(0, agi[idx], mag_term) / n_atoms
        loss = loss + w_m * mag
    return loss


def frame_loss(pred: Prediction | Mapping, label: LabeledFrame, config: TrainConfig | None = None) -> torch.Tensor:
    """Loss of one prediction against one labeled frame."""
    config = config or TrainConfig()
    if isinstance(pred, Prediction):
        pred = {
            "energy": torch.tensor([pred.energy], dtype=DTYPE),
            "forces": torch.tensor(np.array(pred.forces), dtype=DTYPE),
            "stress": torch.tensor(np.array(pred.stress), dtype=DTYPE).reshape(1, 3, 3),
            "magmoms": torch.tensor(np.array(pred.magmoms), dtype=DTYPE),
        }
    s = label.structure
    if pred["forces"].shape != (s.n_atoms, 3) or pred["magmoms"].shape != (s.n_atoms,):
        raise ValueError("prediction shape does not match the labeled structure")
    pseudo = _GraphShape(
        n_atoms=torch.as_tensor([s.n_atoms]),
        atom_graph_index=torch.zeros(s.n_atoms, dtype=torch.long),
    )
    return frame_losses(pred, LabelBatch.from_frames([label]), pseudo, config)[0]


@dataclass
class _GraphShape:
    n_atoms: torch.Tensor
    atom_graph_index: torch.Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[Mapping[str, torch.Tensor], AdamState]:
    """One bias-corrected Adam update, applied in place."""
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return params, state


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """Cosine decay from ``lr0`` at epoch 0 to zero at the last epoch."""
    if total_epochs <= 1:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / (total_epochs - 1)))


def clip_gradients(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return total


class ErrorAccumulator:
    """Running absolute and squared errors per label and per fidelity."""

    def __init__(self):
        self.sums: dict[tuple, list[float]] = {}

    def add(self, label: str, fidelity: int, err: np.ndarray) -> None:
        err = np.asarray(err, dtype=np.float64).ravel()
        if err.size == 0:
            return
        for key in ((label, None), (label, fidelity)):
            acc = self.sums.setdefault(key, [0.0, 0.0, 0])
            acc[0] += float(np.abs(err).sum())
            acc[1] += float(np.square(err).sum())
            acc[2] += err.size

    def add_batch(self, out, frames: Sequence[LabeledFrame]) -> None:
        energy = out["energy"].detach().numpy()
        forces = out["forces"].detach().numpy()
        stress = out["stress"].detach().numpy()
        magmoms = out["magmoms"].detach().numpy()
        start = 0
        for k, fr in enumerate(frames):
            sl = slice(start, start + fr.n_atoms)
            start += fr.n_atoms
            f = fr.fidelity
            self.add("energy", f, (energy[k] - fr.energy) / fr.n_atoms)
            self.add("force", f, forces[sl] - fr.forces)
            self.add("stress", f, stress[k] - fr.stress)
            if fr.magmoms is not None:
                self.add("magmom", f, magmoms[sl] - fr.magmoms)

    def metrics(self) -> Metrics:
        def block(fid):
            out = {}
            for label in LABELS:
                acc = self.sums.get((label, fid))
                out[label] = None if acc is None else LabelErrors(acc[0] / acc[2], math.sqrt(acc[1] / acc[2]), acc[2])
            return out

        fids = sorted({k[1] for k in self.sums if k[1] is not None})
        return Metrics(overall=block(None), per_fidelity={f: block(f) for f in fids})


@dataclass(frozen=True)
class LabelErrors:
    mae: float
    rmse: float
    count: int


@dataclass(frozen=True)
class Metrics:
    """MAE/RMSE per label: energy eV/atom, force eV/A and stress eV/A^3 per component, magmom muB.

    A label is ``None`` when no evaluated frame carries it.
    """

    overall: dict
    per_fidelity: dict

    def flat(self, fidelity: int | None = None) -> dict[str, float | None]:
        block = self.overall if fidelity is None else self.per_fidelity.get(fidelity, {})
        out = {}
        for label in LABELS:
            err = block.get(label)
            out[f"{label}_mae"] = None if err is None else err.mae
            out[f"{label}_rmse"] = None if err is None else err.rmse
        return out

    def to_dict(self) -> dict:
        return {
            "overall": self.flat(),
            "per_fidelity": {str(f): self.flat(f) for f in sorted(self.per_fidelity)},
        }


METRIC_KEYS = tuple(f"{label}_{kind}" for label in LABELS for kind in ("mae", "rmse"))


def _batches(items: Sequence[int], size: int) -> Iterable[list[int]]:
    for start in range(0, len(items), size):
        yield list(items[start : start + size])


class GraphCache:
    """Crystal graphs keyed by frame identity, built once per model geometry."""

    def __init__(self, model_config: ModelConfig):
        self.model_config = model_config
        self._graphs: dict[int, tuple[LabeledFrame, CrystalGraph]] = {}

    def get(self, frame: LabeledFrame, model: MultiFidelityModel) -> CrystalGraph:
        hit = self._graphs.get(id(frame))
        if hit is None or hit[0] is not frame:
            hit = (frame, graph_for(frame.structure, model))
            self._graphs[id(frame)] = hit
        return hit[1]

    def batch(self, frames: Sequence[LabeledFrame], model: MultiFidelityModel) -> GraphBatch:
        return collate(
            [fr.structure for fr in frames],
            [fr.fidelity for fr in frames],
            [self.get(fr, model) for fr in frames],
        )


def evaluate(
    model: MultiFidelityModel,
    frames: Sequence[LabeledFrame],
    batch_size: int = 16,
    cache: GraphCache | None = None,
) -> Metrics:
    """Errors of ``model`` on ``frames``; magmom errors only over frames that carry them."""
    if not frames:
        raise ValueError("evaluate needs at least one frame")
    cache = cache or GraphCache(model.model_config)
    acc = ErrorAccumulator()
    for idx in _batches(list(range(len(frames))), batch_size):
        chunk = [frames[i] for i in idx]
        out = model(cache.batch(chunk, model))
        acc.add_batch(out, chunk)
    return acc.metrics()


@dataclass
class TrainResult:
    model: MultiFidelityModel
    history: list[dict]
    train_frames: list[LabeledFrame]
    val_frames: list[LabeledFrame]
    steps: int


def trainable_parameters(model: MultiFidelityModel, frozen_prefixes: Sequence[str] = ()) -> dict[str, torch.Tensor]:
    return {
        name: p
        for name, p in model.named_parameters()
        if p.requires_grad and not any(name.startswith(pre) for pre in frozen_prefixes)
    }


def train(
    frames: Sequence[LabeledFrame],
    config: TrainConfig,
    model: MultiFidelityModel | None = None,
    *,
    frozen_prefixes: Sequence[str] = (),
    refit_composition: bool = True,
    checkpoint_path=None,
    on_step: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Fit composition weights, then optimize the network with Adam.

    Each frame is evaluated at its own fidelity; batches may mix fidelities.
    Parameters whose names start with any of ``frozen_prefixes`` are never
    updated. ``on_step(step, grads)`` sees the clipped gradients before each
    update.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("cannot train on an empty frame list")
    fc = config.fidelity
    for fr in frames:
        if not 1 <= fr.fidelity <= fc.n_fidelities:
            raise ValueError(f"frame fidelity {fr.fidelity} outside [1, {fc.n_fidelities}]")
    train_frames, val_frames = split_dataset(frames, config.val_fraction, config.seed)
    if not train_frames:
        train_frames, val_frames = frames, []
    if model is None:
        model = MultiFidelityModel(config.model, fc, seed=config.seed)
    if refit_composition:
        set_composition(model, fit_composition(train_frames, fc.n_fidelities, enable_C=fc.enable_C))

    params = trainable_parameters(model, frozen_prefixes)
    cache = GraphCache(model.model_config)
    state = AdamState()
    rng = random.Random(config.seed)
    history = []
    order = list(range(len(train_frames)))
    steps = 0
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr) if config.scheduler == "cosine" else config.lr
        rng.shuffle(order)
        acc = ErrorAccumulator()
        loss_sum = 0.0
        n_seen = 0
        for b, idx in enumerate(_batches(order, config.batch_size)):
            chunk = [train_frames[i] for i in idx]
            batch = cache.batch(chunk, model)
            out = model(batch, create_graph=True)
            loss = frame_losses(out, LabelBatch.from_frames(chunk), batch, config).mean()
            if not bool(torch.isfinite(loss)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b} (frames {idx})")
            grads = grad_loss_wrt_params(loss, params)
            if config.clip_norm is not None:
                clip_gradients(grads, config.clip_norm)
            if on_step is not None:
                on_step(steps, grads)
            adam_step(params, grads, state, lr, config.beta1, config.beta2, config.adam_eps)
            steps += 1
            loss_sum += float(loss.detach()) * len(chunk)
            n_seen += len(chunk)
            acc.add_batch(out, chunk)
            if config.max_steps is not None and steps >= config.max_steps:
                break
        row = {"epoch": epoch, "lr": lr, "loss": loss_sum / n_seen}
        row.update({f"train_{k}": v for k, v in acc.metrics().flat().items()})
        if val_frames:
            row.update({f"val_{k}": v for k, v in evaluate(model, val_frames, cache=cache).flat().items()})
        history.append(row)
        logger.info("epoch %d lr %.5f loss %.5f", epoch, lr, row["loss"])
        if config.max_steps is not None and steps >= config.max_steps:
            break
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return TrainResult(model, history, train_frames, val_frames, steps)


HISTORY_COLUMNS = ("epoch", "lr", "loss") + tuple(
    f"{split}_{k}" for split in ("train", "val") for k in METRIC_KEYS
)


def write_history_csv(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow(["" if row.get(c) is None else repr(row.get(c)) for c in HISTORY_COLUMNS])
