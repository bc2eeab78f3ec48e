"""Periodic structures, labeled frames, and the JSON-lines frame format."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

N_ELEMENTS = 94
EV_PER_A3_TO_GPA = 160.21766208
STRESS_ASYMMETRY_TOL = 1e-6


class FrameFormatError(ValueError):
    """Raised when a frame file or frame record is malformed."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Structure:
    """A periodic cell.

    Attributes:
        lattice: (3, 3) array, rows are the cell vectors in Å.
        species: (N,) atomic numbers in [1, 94].
        positions: (N, 3) Cartesian coordinates in Å.
    """

    lattice: np.ndarray
    species: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        lattice = np.array(self.lattice, dtype=np.float64).reshape(3, 3)
        species = np.array(self.species, dtype=np.int64).reshape(-1)
        positions = np.array(self.positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise ValueError(f"positions must have shape (N, 3), got {positions.shape}")
        if len(species) == 0:
            raise ValueError("structure must contain at least one atom")
        if len(species) != len(positions):
            raise ValueError(
                f"species has {len(species)} entries but positions has {len(positions)} rows"
            )
        if species.min() < 1 or species.max() > N_ELEMENTS:
            raise ValueError(f"atomic numbers must lie in [1, {N_ELEMENTS}]")
        if np.linalg.det(lattice) <= 0:
            raise ValueError("lattice must have positive determinant")
        object.__setattr__(self, "lattice", _frozen(lattice))
        object.__setattr__(self, "species", _frozen(species))
        object.__setattr__(self, "positions", _frozen(positions))

    def __len__(self) -> int:
        return len(self.species)

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    @property
    def volume(self) -> float:
        return float(np.linalg.det(self.lattice))

    @property
    def frac_coords(self) -> np.ndarray:
        return self.positions @ np.linalg.inv(self.lattice)

    def wrapped(self) -> Structure:
        """Copy with every atom mapped into the home cell."""
        frac = self.frac_coords
        frac = frac - np.floor(frac)
        return Structure(self.lattice, self.species, frac @ self.lattice)

    def translated(self, shift) -> Structure:
        return Structure(self.lattice, self.species, self.positions + np.asarray(shift))

    def rotated(self, rotation: np.ndarray) -> Structure:
        """Apply a proper rotation to lattice and positions (row-vector convention)."""
        rot = np.asarray(rotation, dtype=np.float64)
        return Structure(self.lattice @ rot.T, self.species, self.positions @ rot.T)

    def permuted(self, order: Sequence[int]) -> Structure:
        order = np.asarray(order)
        return Structure(self.lattice, self.species[order], self.positions[order])

    def supercell(self, reps: Sequence[int]) -> Structure:
        """Repeat the cell ``reps[k]`` times along lattice vector k."""
        na, nb, nc = (int(r) for r in reps)
        shifts = np.array(
            [[a, b, c] for a in range(na) for b in range(nb) for c in range(nc)], dtype=np.float64
        )
        offsets = shifts @ self.lattice
        positions = (offsets[:, None, :] + self.positions[None, :, :]).reshape(-1, 3)
        species = np.tile(self.species, len(shifts))
        lattice = self.lattice * np.array([[na], [nb], [nc]], dtype=np.float64)
        return Structure(lattice, species, positions)

    def to_dict(self) -> dict:
        return {
            "lattice": self.lattice.tolist(),
            "species": self.species.tolist(),
            "positions": self.positions.tolist(),
        }


@dataclass(frozen=True, eq=False)
class LabeledFrame:
    """A structure with reference labels at one fidelity.

    Energy is the total cell energy in eV, forces in eV/Å, stress in eV/Å^3
    (``(1/V) dE/d(strain)``), magmoms in Bohr magnetons. Frames computed
    without spin polarization carry ``magmoms=None``.
    """

    structure: Structure
    fidelity: int
    energy: float
    forces: np.ndarray
    stress: np.ndarray
    magmoms: np.ndarray | None = field(default=None)

    def __post_init__(self):
        n = self.structure.n_atoms
        fidelity = int(self.fidelity)
        if fidelity < 1:
            raise ValueError(f"fidelity must be >= 1, got {fidelity}")
        forces = np.array(self.forces, dtype=np.float64)
        if forces.shape != (n, 3):
            raise ValueError(f"forces shape {forces.shape} does not match {n} atoms")
        stress = np.array(self.stress, dtype=np.float64)
        if stress.shape != (3, 3):
            raise ValueError(f"stress must be 3x3, got {stress.shape}")
        asym = np.abs(stress - stress.T).max()
        if asym > STRESS_ASYMMETRY_TOL:
            raise ValueError(f"stress asymmetry {asym:.3e} eV/A^3 exceeds {STRESS_ASYMMETRY_TOL}")
        stress = 0.5 * (stress + stress.T)
        magmoms = self.magmoms
        if magmoms is not None:
            magmoms = np.array(magmoms, dtype=np.float64).reshape(-1)
            if magmoms.shape != (n,):
                raise ValueError(f"magmoms length {magmoms.shape[0]} does not match {n} atoms")
            magmoms = _frozen(magmoms)
        object.__setattr__(self, "fidelity", fidelity)
        object.__setattr__(self, "energy", float(self.energy))
        object.__setattr__(self, "forces", _frozen(forces))
        object.__setattr__(self, "stress", _frozen(stress))
        object.__setattr__(self, "magmoms", magmoms)

    @property
    def n_atoms(self) -> int:
        return self.structure.n_atoms

    @property
    def has_magmoms(self) -> bool:
        return self.magmoms is not None

    def with_fidelity(self, fidelity: int) -> LabeledFrame:
        return LabeledFrame(
            self.structure, fidelity, self.energy, self.forces, self.stress, self.magmoms
        )

    def to_dict(self) -> dict:
        record = self.structure.to_dict()
        record.update(
            fidelity=self.fidelity,
            energy=self.energy,
            forces=self.forces.tolist(),
            stress=self.stress.tolist(),
        )
        if self.magmoms is not None:
            record["magmoms"] = self.magmoms.tolist()
        return record

    @classmethod
    def from_dict(cls, record: dict) -> LabeledFrame:
        structure = Structure(record["lattice"], record["species"], record["positions"])
        return cls(
            structure=structure,
            fidelity=record["fidelity"],
            energy=record["energy"],
            forces=record["forces"],
            stress=record["stress"],
            magmoms=record.get("magmoms"),
        )


def composition_vector(structure: Structure) -> np.ndarray:
    """Atomic fractions indexed by atomic number.

    Returns a length-95 array so that ``x[Z]`` is the fraction of element Z;
    entry 0 is always zero and carries no element.
    """
    counts = np.bincount(structure.species, minlength=N_ELEMENTS + 1).astype(np.float64)
    return counts / structure.n_atoms


_REQUIRED_KEYS = ("lattice", "species", "positions", "fidelity", "energy", "forces", "stress")
_ALLOWED_KEYS = set(_REQUIRED_KEYS) | {"magmoms"}


def parse_frames(path, n_fidelities: int | None = None) -> list[LabeledFrame]:
    """Read a JSON-lines frame file.

    Blank lines are skipped. Errors carry the 1-based line number. When
    ``n_fidelities`` is given, fidelity tags outside ``[1, n_fidelities]``
    are rejected.
    """
    frames = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FrameFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise FrameFormatError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in _REQUIRED_KEYS if k not in record]
            if missing:
                raise FrameFormatError(f"{path}:{lineno}: missing keys {missing}")
            unknown = sorted(set(record) - _ALLOWED_KEYS)
            if unknown:
                raise FrameFormatError(f"{path}:{lineno}: unknown keys {unknown}")
            fidelity = record["fidelity"]
            if not isinstance(fidelity, int) or isinstance(fidelity, bool) or fidelity < 1 or (
                n_fidelities is not None and fidelity > n_fidelities
            ):
                bound = n_fidelities if n_fidelities is not None else "n_F"
                raise FrameFormatError(
                    f"{path}:{lineno}: fidelity {fidelity!r} outside [1, {bound}]"
                )
            try:
                frames.append(LabeledFrame.from_dict(record))
            except (ValueError, TypeError) as exc:
                raise FrameFormatError(f"{path}:{lineno}: {exc}") from exc
    return frames


def write_frames(frames: Sequence[LabeledFrame], path) -> None:
    """Write frames as JSON lines.

    Python's float repr is the shortest string that round-trips, so values
    are reproduced bit-exactly by :func:`parse_frames`.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for frame in frames:
            fh.write(json.dumps(frame.to_dict(), separators=(",", ":")))
            fh.write("\n")


def split_dataset(frames: Sequence, test_fraction: float, seed: int) -> tuple[list, list]:
    """Shuffle-split ``frames`` into (train, test) with ``round(test_fraction * n)`` test items."""
    if not 0 <= test_fraction < 1:
        raise ValueError(f"test_fraction must be in [0, 1), got {test_fraction}")
    n = len(frames)
    n_test = int(round(test_fraction * n))
    order = list(range(n))
    random.Random(seed).shuffle(order)
    test_idx = sorted(order[:n_test])
    train_idx = sorted(order[n_test:])
    return [frames[i] for i in train_idx], [frames[i] for i in test_idx]


def load_structure(path) -> Structure:
    """Load a single structure from a JSON object (label keys are ignored)."""
    record = json.loads(Path(path).read_text(encoding="utf-8"))
    return Structure(record["lattice"], record["species"], record["positions"])
