"""Periodic crystal graphs: atom graph of bonds, bond graph of angles.

Topology (which bonds and angles exist) is computed once in numpy at the
reference geometry. Distances and angles are recomputed differentiably by the
model from positions and strain, so the basis functions here accept both
numpy arrays and torch tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .structures import Structure

DEFAULT_R_ATOM = 5.0
DEFAULT_R_BOND = 3.0
DEFAULT_MAX_IMAGES = 8
N_RADIAL = 31
N_ANGULAR = 31
COS_SLACK = 1e-9


class NeighborSearchError(ValueError):
    """Raised when the periodic image search would exceed its configured bound."""


@dataclass(frozen=True, eq=False)
class AtomGraph:
    """Directed bonds ``i -> j`` to the periodic image ``j + image``.

    ``vectors[e] = positions[dst[e]] + images[e] @ lattice - positions[src[e]]``.
    """

    src: np.ndarray
    dst: np.ndarray
    images: np.ndarray
    distances: np.ndarray
    vectors: np.ndarray

    @property
    def n_edges(self) -> int:
        return len(self.src)

    @property
    def unit_vectors(self) -> np.ndarray:
        return self.vectors / self.distances[:, None]


@dataclass(frozen=True, eq=False)
class BondGraph:
    """Ordered pairs of distinct bonds sharing their source atom (the angle center).

    Triplet t joins ``edge_a[t]`` (center -> i) and ``edge_b[t]`` (center -> k).
    """

    edge_a: np.ndarray
    edge_b: np.ndarray
    center: np.ndarray
    cos_theta: np.ndarray

    @property
    def n_triplets(self) -> int:
        return len(self.edge_a)


@dataclass(frozen=True, eq=False)
class CrystalGraph:
    atom_graph: AtomGraph
    bond_graph: BondGraph
    n_atoms: int
    r_atom: float
    r_bond: float
    fidelity: int | None = None

    def radial_features(self, n: int = N_RADIAL) -> np.ndarray:
        return radial_basis(self.atom_graph.distances, self.r_atom, n)

    def angular_features(self, n: int = N_ANGULAR) -> np.ndarray:
        return angular_basis(self.bond_graph.cos_theta, n)


def _image_range(frac: np.ndarray, widths: np.ndarray, r_cut: float, max_images: int):
    span_lo = frac.min(axis=0) - frac.max(axis=0)
    span_hi = frac.max(axis=0) - frac.min(axis=0)
    reach = r_cut / widths
    if np.any(np.ceil(reach) > max_images):
        raise NeighborSearchError(
            f"cutoff {r_cut} A needs up to {int(np.ceil(reach.max()))} periodic images per axis "
            f"(limit {max_images}); use a larger cell or a smaller cutoff"
        )
    lo = np.ceil(-reach - span_hi).astype(int)
    hi = np.floor(reach - span_lo).astype(int)
    return lo, hi


def build_neighbor_list(
    structure: Structure, r_cut: float, max_images: int = DEFAULT_MAX_IMAGES
) -> AtomGraph:
    """All directed pairs ``(i, j, T)`` with ``0 < |r_j + T L - r_i| <= r_cut``.

    Includes repeated images of the same neighbor and self-images (``i == j``,
    ``T != 0``). Edges are ordered by source atom, then image, then target.
    """
    if r_cut <= 0:
        raise ValueError(f"r_cut must be positive, got {r_cut}")
    lattice = structure.lattice
    pos = structure.positions
    volume = structure.volume
    widths = np.array(
        [volume / np.linalg.norm(np.cross(lattice[(k + 1) % 3], lattice[(k + 2) % 3])) for k in range(3)]
    )
    frac = structure.frac_coords
    lo, hi = _image_range(frac, widths, r_cut, max_images)
    grid = np.stack(
        np.meshgrid(*(np.arange(a, b + 1) for a, b in zip(lo, hi)), indexing="ij"), axis=-1
    ).reshape(-1, 3)
    shifts = grid @ lattice
    # (N_i, M, N_j, 3)
    vec = pos[None, None, :, :] + shifts[None, :, None, :] - pos[:, None, None, :]
    dist = np.sqrt(np.einsum("imjk,imjk->imj", vec, vec))
    mask = (dist <= r_cut) & (dist > 0)
    i_idx, m_idx, j_idx = np.nonzero(mask)
    return AtomGraph(
        src=i_idx.astype(np.int64),
        dst=j_idx.astype(np.int64),
        images=grid[m_idx].astype(np.int64),
        distances=dist[i_idx, m_idx, j_idx],
        vectors=vec[i_idx, m_idx, j_idx],
    )


def build_bond_graph(atom_graph: AtomGraph, n_atoms: int, r_bond: float) -> BondGraph:
    short = np.nonzero(atom_graph.distances <= r_bond)[0]
    unit = atom_graph.unit_vectors
    edge_a, edge_b = [], []
    by_center = [[] for _ in range(n_atoms)]
    for e in short:
        by_center[atom_graph.src[e]].append(e)
    for edges in by_center:
        for a in edges:
            for b in edges:
                if a != b:
                    edge_a.append(a)
                    edge_b.append(b)
    edge_a = np.array(edge_a, dtype=np.int64)
    edge_b = np.array(edge_b, dtype=np.int64)
    cos = np.einsum("tk,tk->t", unit[edge_a], unit[edge_b]) if len(edge_a) else np.zeros(0)
    return BondGraph(
        edge_a=edge_a,
        edge_b=edge_b,
        center=atom_graph.src[edge_a] if len(edge_a) else np.zeros(0, dtype=np.int64),
        cos_theta=np.clip(cos, -1.0, 1.0),
    )


def build_crystal_graph(
    structure: Structure,
    r_atom: float = DEFAULT_R_ATOM,
    r_bond: float = DEFAULT_R_BOND,
    fidelity: int | None = None,
    max_images: int = DEFAULT_MAX_IMAGES,
) -> CrystalGraph:
    if not 0 < r_bond <= r_atom:
        raise ValueError(f"need 0 < r_bond <= r_atom, got r_bond={r_bond}, r_atom={r_atom}")
    atom_graph = build_neighbor_list(structure, r_atom, max_images=max_images)
    bond_graph = build_bond_graph(atom_graph, structure.n_atoms, r_bond)
    return CrystalGraph(atom_graph, bond_graph, structure.n_atoms, r_atom, r_bond, fidelity)


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, True
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), False


def cosine_envelope(d, r_cut: float):
    """``0.5 * (cos(pi d / r_cut) + 1)``: value and slope vanish at ``r_cut``."""
    if isinstance(d, torch.Tensor):
        return 0.5 * (torch.cos(d * (math.pi / r_cut)) + 1.0)
    return 0.5 * (np.cos(np.asarray(d) * (math.pi / r_cut)) + 1.0)


def radial_basis(d, r_cut: float, n: int = N_RADIAL):
    """Enveloped Gaussians centered uniformly on ``[0, r_cut]``.

    Width equals the center spacing. Output has shape ``d.shape + (n,)`` and
    the same array type as ``d``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    t, is_torch = _as_tensor(d)
    if t.numel() and (bool((t > r_cut).any()) or bool((t <= 0).any())):
        raise ValueError(f"distances must lie in (0, {r_cut}]")
    width = r_cut / (n - 1) if n > 1 else r_cut
    centers = torch.linspace(0.0, r_cut, n, dtype=t.dtype) if n > 1 else torch.zeros(1, dtype=t.dtype)
    gauss = torch.exp(-0.5 * ((t[..., None] - centers) / width) ** 2)
    out = gauss * cosine_envelope(t, r_cut)[..., None]
    return out if is_torch else out.numpy()


def angular_basis(cos_theta, n: int = N_ANGULAR):
    """Fourier basis ``cos(k theta)``, ``k = 0..n-1``, via Chebyshev recurrence in cos(theta)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    c, is_torch = _as_tensor(cos_theta)
    if c.numel() and bool((c.abs() > 1.0 + COS_SLACK).any()):
        raise ValueError("cos(theta) outside [-1, 1]")
    c = c.clamp(-1.0, 1.0)
    terms = [torch.ones_like(c)]
    if n > 1:
        terms.append(c)
    for _ in range(2, n):
        terms.append(2.0 * c * terms[-1] - terms[-2])
    out = torch.stack(terms, dim=-1)
    return out if is_torch else out.numpy()
