import numpy as np
import pytest
import torch

from unimol.molgraph import Atom, Bond, BondOrder, Molecule

torch.set_num_threads(1)


def path_molecule(zs, orders=None, coords=None, mol_id="path"):
    orders = orders or [BondOrder.SINGLE] * (len(zs) - 1)
    bonds = [Bond(k, k + 1, o) for k, o in enumerate(orders)]
    return Molecule(mol_id, [Atom(z) for z in zs], bonds, coords)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def oco():
    """O=C=O-like path with two equivalent terminal oxygens."""
    coords = np.array([[-1.2, 0.1, 0.0], [0.0, 0.0, 0.0], [1.15, -0.2, 0.3]])
    return path_molecule([8, 6, 8], coords=coords, mol_id="oco")


# -- acceptance summary: one PASS/FAIL line per criterion at the end of the run

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
