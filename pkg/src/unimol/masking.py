"""Mask plans: which atoms and coordinate rows a forward pass hides."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .molgraph import Molecule, stable_hash


@dataclass(frozen=True, eq=False)
class MaskPlan:
    """Unmasked atom indices, unmasked coordinate rows, and the random rows
    that stand in for the masked coordinates."""

    unmasked_atoms: frozenset[int]
    unmasked_coords: frozenset[int]
    mask_ratio: float = 0.0
    replacements: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "unmasked_atoms", frozenset(int(k) for k in self.unmasked_atoms))
        object.__setattr__(self, "unmasked_coords", frozenset(int(k) for k in self.unmasked_coords))

    def __eq__(self, other):
        if not isinstance(other, MaskPlan):
            return NotImplemented
        return (
            (self.unmasked_atoms, self.unmasked_coords, self.mask_ratio)
            == (other.unmasked_atoms, other.unmasked_coords, other.mask_ratio)
            and self.replacements.keys() == other.replacements.keys()
            and all(np.array_equal(v, other.replacements[k]) for k, v in self.replacements.items())
        )

    __hash__ = None

    def masked_atoms(self, n_atoms: int) -> list[int]:
        return [k for k in range(n_atoms) if k not in self.unmasked_atoms]

    def masked_coords(self, n_atoms: int) -> list[int]:
        return [k for k in range(n_atoms) if k not in self.unmasked_coords]

    def validate(self, n_atoms: int) -> None:
        universe = set(range(n_atoms))
        if not self.unmasked_atoms <= universe or not self.unmasked_coords <= universe:
            raise ValueError("mask plan references atoms outside the molecule")
        if set(self.replacements) != universe - self.unmasked_coords:
            raise ValueError("coordinate replacements must cover exactly the masked rows")

    def apply_coords(self, conf: np.ndarray) -> np.ndarray:
        out = np.array(conf, dtype=np.float64)
        for k, row in self.replacements.items():
            out[k] = row
        return out

    @classmethod
    def unmasked(cls, n_atoms: int) -> "MaskPlan":
        return cls(frozenset(range(n_atoms)), frozenset(range(n_atoms)))

    @classmethod
    def all_atoms_masked(cls, n_atoms: int) -> "MaskPlan":
        return cls(frozenset(), frozenset(range(n_atoms)), 1.0)

    @classmethod
    def all_coords_random(cls, n_atoms: int, rng: np.random.Generator) -> "MaskPlan":
        rows = rng.uniform(-1.0, 1.0, size=(n_atoms, 3))
        return cls(frozenset(range(n_atoms)), frozenset(), 1.0, {k: rows[k] for k in range(n_atoms)})


def _rng(mol: Molecule, seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed % 2**63, step, stable_hash(mol.id), stream])


def make_mask_plan(mol: Molecule, p: float, seed: int, step: int = 0) -> MaskPlan:
    """Mask each atom, and independently each coordinate row, with probability ``p``."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {p}")
    rng = _rng(mol, seed, step, 0)
    n = mol.n_atoms
    atom_masked = rng.random(n) < p
    coord_masked = rng.random(n) < p
    rows = rng.uniform(-1.0, 1.0, size=(n, 3))
    return MaskPlan(
        frozenset(np.flatnonzero(~atom_masked).tolist()),
        frozenset(np.flatnonzero(~coord_masked).tolist()),
        p,
        {int(k): rows[k] for k in np.flatnonzero(coord_masked)},
    )


@dataclass(frozen=True)
class StepPlan:
    """The three input corruptions used by one pre-training step."""

    masked: MaskPlan
    coords_random: MaskPlan
    atoms_masked: MaskPlan


def make_step_plan(mol: Molecule, p: float, seed: int, step: int = 0) -> StepPlan:
    return StepPlan(
        make_mask_plan(mol, p, seed, step),
        MaskPlan.all_coords_random(mol.n_atoms, _rng(mol, seed, step, 1)),
        MaskPlan.all_atoms_masked(mol.n_atoms),
    )
