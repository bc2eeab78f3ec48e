"""Multi-fidelity graph network force field with energies, forces, stresses and magnetic moments."""

from __future__ import annotations

from .graph import CrystalGraph, build_crystal_graph
from .model import FidelityConfig, ModelConfig, MultiFidelityModel, Prediction, load_checkpoint, predict, save_checkpoint
from .structures import LabeledFrame, Structure, parse_frames, split_dataset, write_frames
from .train import TrainConfig, evaluate, train

__all__ = [
    "CrystalGraph",
    "FidelityConfig",
    "LabeledFrame",
    "ModelConfig",
    "MultiFidelityModel",
    "Prediction",
    "Structure",
    "TrainConfig",
    "build_crystal_graph",
    "evaluate",
    "load_checkpoint",
    "parse_frames",
    "predict",
    "save_checkpoint",
    "split_dataset",
    "train",
    "write_frames",
]
