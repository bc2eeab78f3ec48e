"""Derivatives of recorded energy computations.

Torch's autograd graph is the tape: every operation on float64 tensors is
recorded, and passing ``create_graph=True`` records the adjoint pass too, so
losses that contain forces or stresses can be differentiated again with
respect to the parameters.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np
import torch

DTYPE = torch.float64


class TapeError(RuntimeError):
    """Raised when a requested derivative is not defined by the recorded computation."""


def _check_scalar(value: torch.Tensor) -> None:
    if not isinstance(value, torch.Tensor) or value.numel() != 1:
        raise TapeError("target of differentiation must be a scalar tensor")


def _as_float64(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.tensor(np.asarray(x), dtype=DTYPE)


def symmetric_strain(strain: torch.Tensor) -> torch.Tensor:
    """Deformation gradient ``I + (eps + eps^T)/2`` for a (..., 3, 3) strain leaf."""
    eye = torch.eye(3, dtype=strain.dtype)
    return eye + 0.5 * (strain + strain.transpose(-1, -2))


def grad_wrt_positions(
    energy_fn: Callable[[torch.Tensor], torch.Tensor], positions, create_graph: bool = False
) -> torch.Tensor:
    """``dE/dr`` for an energy computed from an (N, 3) position array."""
    pos = _as_float64(positions).detach().clone().requires_grad_(True)
    energy = energy_fn(pos)
    _check_scalar(energy)
    (grad,) = torch.autograd.grad(energy, pos, create_graph=create_graph)
    return grad


def grad_wrt_strain(
    energy_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    positions,
    lattice,
    create_graph: bool = False,
) -> torch.Tensor:
    """``dE/d(eps)`` at zero symmetric strain.

    ``energy_fn(positions, lattice)`` is evaluated on the homogeneously
    deformed cell ``L (I + eps)``, ``r (I + eps)`` (rows are vectors).
    """
    pos = _as_float64(positions)
    lat = _as_float64(lattice)
    strain = torch.zeros(3, 3, dtype=DTYPE, requires_grad=True)
    deform = symmetric_strain(strain)
    energy = energy_fn(pos @ deform, lat @ deform)
    _check_scalar(energy)
    (grad,) = torch.autograd.grad(energy, strain, create_graph=create_graph)
    return grad


def energy_derivatives(
    energy: torch.Tensor,
    positions: torch.Tensor,
    strain: torch.Tensor | None = None,
    create_graph: bool = False,
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Gradients of an already-recorded energy w.r.t. its position and strain leaves.

    ``energy`` may hold one value per structure of a batch; the sum is
    differentiated, which is exact because structures do not interact.
    """
    total = energy.sum()
    inputs = [positions] if strain is None else [positions, strain]
    grads = torch.autograd.grad(total, inputs, create_graph=create_graph)
    return grads[0], (grads[1] if strain is not None else None)


def grad_loss_wrt_params(
    loss: torch.Tensor, params: Mapping[str, torch.Tensor]
) -> dict[str, torch.Tensor]:
    """Exact gradient of ``loss`` w.r.t. each named parameter leaf.

    Parameters the loss does not depend on get an all-zero gradient.
    """
    _check_scalar(loss)
    names = list(params)
    for name in names:
        p = params[name]
        if not (p.requires_grad and p.is_leaf):
            raise TapeError(f"parameter {name!r} is not a differentiable leaf on the tape")
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return {
        n: (g if g is not None else torch.zeros_like(params[n])) for n, g in zip(names, grads)
    }
