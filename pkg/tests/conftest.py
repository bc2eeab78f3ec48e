from __future__ import annotations

import numpy as np
import pytest
import torch

from mfforce.structures import Structure

torch.set_num_threads(1)

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda ln: int(ln.split()[0][1:])):
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for an acceptance criterion and return the verdict."""

    def _report(criterion: str, passed: bool, detail: str) -> bool:
        line = f"{criterion} {'PASS' if passed else 'FAIL'} {detail}"
        print(line)
        request.config.stash[_ACCEPTANCE].append(line)
        return passed

    return _report


def random_cell(rng: np.random.Generator, n_atoms: int, *, length=(4.0, 6.0), species=(3, 8, 25, 26), min_dist=1.4):
    """Random triclinic cell with atoms at least ``min_dist`` apart (periodically)."""
    while True:
        lengths = rng.uniform(*length, size=3)
        lattice = np.diag(lengths) + rng.uniform(-0.6, 0.6, size=(3, 3)) * (1 - np.eye(3))
        if np.linalg.det(lattice) <= 0:
            continue
        frac = []
        for _ in range(2000):
            cand = rng.uniform(size=3)
            ok = True
            for f in frac:
                diff = cand - f
                diff -= np.round(diff)
                if np.linalg.norm(diff @ lattice) < min_dist:
                    ok = False
                    break
            if ok:
                frac.append(cand)
            if len(frac) == n_atoms:
                break
        if len(frac) == n_atoms:
            return Structure(lattice, rng.choice(species, size=n_atoms), np.array(frac) @ lattice)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
