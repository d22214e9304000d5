"""Conformation sampling through the 2D->3D pathway, and coverage/matching scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .align import rmsd
from .encoder import ModelConfig, ModelParams, forward_batch, make_batch
from .molgraph import Molecule, random_coordinates

DELTA_PRESETS = {"qm9": 0.5, "drugs": 1.25}


@dataclass
class ConfSet:
    mol_id: str
    conformations: list[np.ndarray]

    def __post_init__(self):
        self.conformations = [np.asarray(c, dtype=np.float64) for c in self.conformations]
        shapes = {c.shape for c in self.conformations}
        if len(shapes) > 1:
            raise ValueError(f"{self.mol_id}: conformations disagree on shape {sorted(shapes)}")
        for c in self.conformations:
            if c.ndim != 2 or c.shape[1] != 3:
                raise ValueError(f"{self.mol_id}: conformation of shape {c.shape} is not (n, 3)")

    def __len__(self):
        return len(self.conformations)

    @property
    def n_atoms(self) -> int:
        return self.conformations[0].shape[0] if self.conformations else 0


@dataclass(frozen=True)
class EvalConfig:
    delta: float = DELTA_PRESETS["qm9"]
    samples_per_reference: int = 2

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.samples_per_reference < 1:
            raise ValueError("samples_per_reference must be >= 1")

    @classmethod
    def preset(cls, name: str) -> "EvalConfig":
        return cls(delta=DELTA_PRESETS[name])


def generate_conformations(params: ModelParams, config: ModelConfig, mol: Molecule, k: int,
                           seed: int) -> ConfSet:
    """``k`` predictions from independent random starting coordinates (seeds ``seed .. seed+k-1``)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    starts = [random_coordinates(mol.n_atoms, seed + i) for i in range(k)]
    with torch.no_grad():
        out = forward_batch(params, config, make_batch([mol] * k, starts, [None] * k, config))
    offsets = out.batch.atom_offsets
    pred = out.predicted_conformation.numpy()
    return ConfSet(mol.id, [pred[offsets[i]:offsets[i + 1]].copy() for i in range(k)])


def rmsd_table(gen: ConfSet, ref: ConfSet) -> np.ndarray:
    """RMSD of every (reference, generated) pair, ``(len(ref), len(gen))``."""
    if not len(gen) or not len(ref):
        raise ValueError("conformation sets must be nonempty")
    if gen.n_atoms != ref.n_atoms:
        raise ValueError(f"{ref.mol_id}: atom counts differ ({gen.n_atoms} generated vs {ref.n_atoms} reference)")
    return np.array([[rmsd(r, g) for g in gen.conformations] for r in ref.conformations])


def conf_metrics(gen: ConfSet, ref: ConfSet, cfg: EvalConfig = EvalConfig()) -> tuple[float, float]:
    """(COV in percent, MAT in angstrom) of ``gen`` against ``ref``."""
    best = rmsd_table(gen, ref).min(axis=1)
    return 100.0 * float(np.mean(best < cfg.delta)), float(np.mean(best))


def coverage_curve(gen: ConfSet, ref: ConfSet, deltas: Iterable[float]) -> np.ndarray:
    best = rmsd_table(gen, ref).min(axis=1)
    return np.array([100.0 * float(np.mean(best < d)) for d in deltas])


def group_conformations(molecules: Sequence[Molecule]) -> dict[str, ConfSet]:
    """Collect the conformations of repeated records sharing a molecule id, in file order."""
    groups: dict[str, list[np.ndarray]] = {}
    for mol in molecules:
        if mol.coords is None:
            raise ValueError(f"{mol.id}: record has no coordinates")
        groups.setdefault(mol.id, []).append(np.array(mol.coords))
    return {mid: ConfSet(mid, confs) for mid, confs in groups.items()}


def evaluate_sets(gen: dict[str, ConfSet], ref: dict[str, ConfSet], cfg: EvalConfig) -> list[dict]:
    """Per-molecule COV/MAT rows for every reference molecule, sorted by id."""
    rows = []
    for mid in sorted(ref):
        if mid not in gen:
            raise ValueError(f"{mid}: no generated conformations")
        cov, mat = conf_metrics(gen[mid], ref[mid], cfg)
        rows.append({"id": mid, "n_ref": len(ref[mid]), "n_gen": len(gen[mid]), "cov": cov, "mat": mat})
    return rows


def summarize(rows: Sequence[dict]) -> dict[str, float]:
    cov = np.array([r["cov"] for r in rows])
    mat = np.array([r["mat"] for r in rows])
    return {
        "cov_mean": float(cov.mean()), "cov_median": float(np.median(cov)),
        "mat_mean": float(mat.mean()), "mat_median": float(np.median(mat)),
    }
