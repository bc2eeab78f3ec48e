"""Synthetic two-fidelity reference data.

Structures are distorted rock-salt cells of Li/Mn/Fe cations on an O anion
lattice with cation vacancies. Labels come from an analytic potential (an
8-4 Mie pair term plus a three-body angular term, both smoothly cut off),
differentiated by hand for forces and stress. The low-fidelity potential is
a bounded perturbation of the high-fidelity one with different per-element
reference energies, and its labels carry Gaussian noise and no magmoms.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import build_neighbor_list
from .structures import LabeledFrame, Structure

LI, O, MN, FE = 3, 8, 25, 26
CATIONS = (LI, MN, FE)
ANION = O

PAIR_CUTOFF = 4.5
THREE_BODY_CUTOFF = 2.8
MAGMOM_CUTOFF = 3.0
MIN_ORACLE_DISTANCE = 0.5
LF_ENERGY_NOISE = 0.002  # eV/atom
LF_FORCE_NOISE = 0.02  # eV/A


class SamplingError(RuntimeError):
    pass


def _pair_key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class OracleParams:
    """Parameters of the analytic reference potential.

    ``pair`` maps a sorted species pair to ``(well depth eV, equilibrium distance A)``.
    """

    pair: dict
    three_body: float
    reference_energy: dict
    magmom_base: dict = field(default_factory=dict)
    magmom_coef: dict = field(default_factory=dict)

    def pair_params(self, a: int, b: int) -> tuple[float, float]:
        return self.pair[_pair_key(a, b)]


def high_fidelity_params() -> OracleParams:
    cat_an = {LI: (0.45, 2.15), MN: (0.60, 2.22), FE: (0.55, 2.17)}
    pair = {}
    for c, val in cat_an.items():
        pair[_pair_key(c, ANION)] = val
    for a, b in itertools.combinations_with_replacement(CATIONS, 2):
        depth = {LI: 0.04, MN: 0.09, FE: 0.08}
        pair[_pair_key(a, b)] = (math.sqrt(depth[a] * depth[b]), 3.05 + 0.03 * ((a + b) % 3))
    pair[_pair_key(ANION, ANION)] = (0.06, 3.10)
    return OracleParams(
        pair=pair,
        three_body=0.25,
        reference_energy={LI: -1.91, O: -4.95, MN: -9.03, FE: -8.31},
        magmom_base={LI: 0.0, O: 0.0, MN: 4.65, FE: 3.85},
        magmom_coef={LI: 0.0, O: 0.012, MN: -0.14, FE: -0.11},
    )


def low_fidelity_params() -> OracleParams:
    """Deterministic perturbation of the high-fidelity set (at most 8% per parameter)."""
    hf = high_fidelity_params()
    rng = np.random.default_rng(20240917)
    pair = {}
    for key in sorted(hf.pair):
        depth, dist = hf.pair[key]
        pair[key] = (depth * (1 + rng.uniform(-0.08, 0.08)), dist * (1 + rng.uniform(-0.02, 0.02)))
    return replace(
        hf,
        pair=pair,
        three_body=hf.three_body * 0.93,
        reference_energy={LI: -1.87, O: -4.58, MN: -8.12, FE: -7.64},
    )


def _allowed_dims(min_atoms: int, max_atoms: int) -> list[tuple[int, int, int]]:
    out = []
    for dims in itertools.product((2, 4, 6), repeat=3):
        if min_atoms <= np.prod(dims) <= max_atoms and list(dims) == sorted(dims, reverse=True):
            out.append(dims)
    return out


def gen_structures(
    template: str = "rocksalt",
    n: int = 1,
    seed: int = 0,
    *,
    atoms_range: tuple[int, int] = (8, 56),
    spacing: float = 2.2,
    jitter: float = 0.1,
    max_vacancy_fraction: float = 0.25,
    max_strain: float = 0.03,
    min_distance: float = 1.2,
    max_attempts: int = 1000,
) -> list[Structure]:
    """Random distorted rock-salt supercells.

    Cell sizes are products of even repeats (8, 16, 24, 32, 48 sites within
    ``atoms_range``) before vacancies. Each structure uses its own child
    seed, so structure ``k`` does not depend on ``n``.
    """
    if template != "rocksalt":
        raise ValueError(f"unknown lattice template {template!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    dims_choices = _allowed_dims(*atoms_range)
    if not dims_choices:
        raise ValueError(f"no rock-salt supercell fits atoms_range={atoms_range}")
    children = np.random.SeedSequence(seed).spawn(n)
    return [
        _sample_one(np.random.default_rng(child), dims_choices, spacing, jitter,
                    max_vacancy_fraction, max_strain, min_distance, max_attempts)
        for child in children
    ]


def _sample_one(rng, dims_choices, spacing, jitter, max_vac, max_strain, min_distance, max_attempts):
    for _ in range(max_attempts):
        dims = np.array(dims_choices[rng.integers(len(dims_choices))])
        rng.shuffle(dims)
        grid = np.array(list(itertools.product(*(range(k) for k in dims))), dtype=np.float64)
        is_anion = grid.sum(axis=1).astype(int) % 2 == 1
        n_species = int(rng.integers(1, 4))
        chosen = rng.choice(CATIONS, size=n_species, replace=False)
        cation_sites = np.nonzero(~is_anion)[0]
        species = np.full(len(grid), ANION)
        labels = np.concatenate([chosen, rng.choice(chosen, size=len(cation_sites) - n_species)])
        rng.shuffle(labels)
        species[cation_sites] = labels
        n_vac = int(rng.integers(0, int(max_vac * len(cation_sites)) + 1))
        keep = np.ones(len(grid), dtype=bool)
        if n_vac:
            keep[rng.choice(cation_sites, size=n_vac, replace=False)] = False
        strain = rng.uniform(-max_strain, max_strain, size=(3, 3))
        deform = np.eye(3) + 0.5 * (strain + strain.T)
        lattice = np.diag(dims * spacing) @ deform
        frac = grid[keep] / dims
        positions = frac @ lattice + rng.normal(0.0, jitter, size=(keep.sum(), 3)) if jitter else frac @ lattice
        structure = Structure(lattice, species[keep], positions)
        if min_distance <= 0 or build_neighbor_list(structure, min_distance).n_edges == 0:
            return structure
    raise SamplingError(f"no valid structure after {max_attempts} attempts")


def _envelope(d, rc):
    x = np.pi * d / rc
    return 0.5 * (np.cos(x) + 1.0), -0.5 * np.pi / rc * np.sin(x)


def oracle_label(structure: Structure, params: OracleParams) -> tuple[float, np.ndarray, np.ndarray]:
    """Energy (eV), forces (eV/A) and stress (eV/A^3) of the analytic potential.

    Derivatives are taken with respect to every directed bond vector and then
    scattered to atoms; stress is the symmetrized virial over the volume.
    """
    species = structure.species
    n = structure.n_atoms
    energy = float(sum(params.reference_energy[int(z)] for z in species))
    graph = build_neighbor_list(structure, PAIR_CUTOFF)
    forces = np.zeros((n, 3))
    stress = np.zeros((3, 3))
    if graph.n_edges == 0:
        return energy, forces, stress
    d = graph.distances
    if d.min() < MIN_ORACLE_DISTANCE:
        raise ValueError(f"atoms closer than {MIN_ORACLE_DISTANCE} A ({d.min():.3f} A)")
    u = graph.unit_vectors
    zi, zj = species[graph.src], species[graph.dst]
    depth = np.empty(len(d))
    sigma = np.empty(len(d))
    for e, (a, b) in enumerate(zip(zi, zj)):
        depth[e], sigma[e] = params.pair_params(int(a), int(b))

    # pair term, each unordered pair appears twice as directed edges
    s4 = (sigma / d) ** 4
    s8 = s4 * s4
    mie = depth * (s8 - 2.0 * s4)
    dmie = depth * (-8.0 * s8 + 8.0 * s4) / d
    env, denv = _envelope(d, PAIR_CUTOFF)
    energy += 0.5 * float(np.sum(mie * env))
    grad_edge = (0.5 * (dmie * env + mie * denv))[:, None] * u

    # three-body term over ordered bond pairs sharing a center
    short = np.nonzero(d <= THREE_BODY_CUTOFF)[0]
    by_center: dict[int, list[int]] = {}
    for e in short:
        by_center.setdefault(int(graph.src[e]), []).append(int(e))
    pairs = [(a, b) for edges in by_center.values() for a in edges for b in edges if a != b]
    if pairs:
        ea, eb = np.array(pairs).T
        w, dw = _envelope(d, THREE_BODY_CUTOFF)
        cos = np.einsum("tk,tk->t", u[ea], u[eb])
        shifted = cos + 1.0 / 3.0
        lam = 0.5 * params.three_body
        energy += float(np.sum(lam * w[ea] * w[eb] * shifted**2))
        for x, y in ((ea, eb), (eb, ea)):
            radial = lam * dw[x] * w[y] * shifted**2
            angular = lam * w[x] * w[y] * 2.0 * shifted / d[x]
            g = radial[:, None] * u[x] + angular[:, None] * (u[y] - cos[:, None] * u[x])
            np.add.at(grad_edge, x, g)

    grad_atoms = np.zeros((n, 3))
    np.add.at(grad_atoms, graph.dst, grad_edge)
    np.add.at(grad_atoms, graph.src, -grad_edge)
    virial = graph.vectors.T @ grad_edge
    stress = 0.5 * (virial + virial.T) / structure.volume
    return energy, -grad_atoms, stress


def oracle_magmom(structure: Structure, params: OracleParams | None = None) -> np.ndarray:
    """Per-atom moments: species base value plus a coordination-dependent shift.

    Coordination is a cosine-weighted neighbor count within 3 A.
    """
    params = params or high_fidelity_params()
    species = structure.species
    base = np.array([params.magmom_base.get(int(z), 0.0) for z in species])
    coef = np.array([params.magmom_coef.get(int(z), 0.0) for z in species])
    graph = build_neighbor_list(structure, MAGMOM_CUTOFF)
    coordination = np.zeros(structure.n_atoms)
    if graph.n_edges:
        w, _ = _envelope(graph.distances, MAGMOM_CUTOFF)
        np.add.at(coordination, graph.src, w)
    return base + coef * coordination


def label_frame(structure: Structure, fidelity: int, params: OracleParams, magmoms: bool) -> LabeledFrame:
    energy, forces, stress = oracle_label(structure, params)
    return LabeledFrame(
        structure, fidelity, energy, forces, stress, oracle_magmom(structure) if magmoms else None
    )


def make_dataset(
    n_lf: int,
    n_hf: int,
    seed: int = 0,
    *,
    atoms_range: tuple[int, int] = (8, 56),
    lf_energy_noise: float = LF_ENERGY_NOISE,
    lf_force_noise: float = LF_FORCE_NOISE,
) -> list[LabeledFrame]:
    """``n_lf`` noisy low-fidelity frames (fidelity 1) followed by ``n_hf`` high-fidelity ones (fidelity 2).

    The two structure pools are drawn independently from the same generator.
    """
    if n_lf < 0 or n_hf < 0:
        raise ValueError("frame counts must be non-negative")
    lf_seq, hf_seq, noise_seq = np.random.SeedSequence(seed).spawn(3)
    frames = []
    if n_lf:
        lf_params = low_fidelity_params()
        noise = np.random.default_rng(noise_seq)
        for s in gen_structures("rocksalt", n_lf, _seed_int(lf_seq), atoms_range=atoms_range):
            energy, forces, stress = oracle_label(s, lf_params)
            energy += noise.normal(0.0, lf_energy_noise) * s.n_atoms
            forces = forces + noise.normal(0.0, lf_force_noise, size=forces.shape)
            frames.append(LabeledFrame(s, 1, energy, forces, stress, None))
    if n_hf:
        hf_params = high_fidelity_params()
        for s in gen_structures("rocksalt", n_hf, _seed_int(hf_seq), atoms_range=atoms_range):
            frames.append(label_frame(s, 2, hf_params, magmoms=True))
    return frames


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, dtype=np.uint64)[0])
