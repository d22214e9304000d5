"""Pre-training losses.

The coordinate losses are minimized over the molecule's automorphism set; the
conformation-generation loss is additionally minimized over proper rigid
motions. Minimizers are found on detached values and the loss is then
re-evaluated differentiably at the chosen branch, which gives the exact
gradient of the minimum wherever the minimizer is unique.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .align import optimal_alignment
from .encoder import DTYPE, ModelConfig, ModelParams, atom_type_index, forward_batch, make_batch
from .masking import StepPlan
from .molgraph import Molecule
from .symmetry import AutomorphismSet, find_automorphisms

LOSS_NAMES = ("atom", "coord", "2d3d", "3d2d")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.array(x, dtype=np.float64), dtype=DTYPE)


def _zero_like(t: torch.Tensor) -> torch.Tensor:
    return t.sum() * 0.0 + 0.0   # keeps the graph; "+ 0.0" turns -0.0 into 0.0


def _perm_tensor(automorphisms: AutomorphismSet, n: int) -> torch.Tensor:
    if any(len(p) != n for p in automorphisms.perms):
        raise ValueError("automorphism length does not match the conformation")
    return torch.as_tensor(list(automorphisms.perms), dtype=torch.long).view(-1, n)


def loss_atom(logits, targets, masked: Iterable[int], reduction: str = "mean") -> torch.Tensor:
    """Negative log-likelihood of the true types of the masked atoms."""
    logits = _as_tensor(logits)
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    idx = torch.as_tensor(sorted(int(k) for k in masked), dtype=torch.long)
    if idx.numel() and (idx.min() < 0 or idx.max() >= logits.shape[0]):
        raise IndexError("masked index outside the molecule")
    if targets.shape[0] != logits.shape[0]:
        raise ValueError("logits and targets disagree on atom count")
    if idx.numel() == 0:
        return _zero_like(logits)
    return F.cross_entropy(logits[idx], targets[idx], reduction=reduction)


def loss_3d2d(logits, targets, reduction: str = "mean") -> torch.Tensor:
    """Mean negative log-likelihood over all atoms of a fully masked pass."""
    logits = _as_tensor(logits)
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    if logits.dim() != 2 or targets.shape[0] != logits.shape[0]:
        raise ValueError("logits must be (n_atoms, n_classes) matching the targets")
    return F.cross_entropy(logits, targets, reduction=reduction)


def _check_coords(ref: torch.Tensor, pred: torch.Tensor) -> None:
    if ref.shape != pred.shape or ref.dim() != 2 or ref.shape[1] != 3:
        raise ValueError(f"conformation shapes differ: {tuple(ref.shape)} vs {tuple(pred.shape)}")


def loss_coord_naive(ref, pred, masked: Iterable[int], reduction: str = "mean") -> torch.Tensor:
    """Squared error on the masked rows, no symmetry handling."""
    ref, pred = _as_tensor(ref), _as_tensor(pred)
    _check_coords(ref, pred)
    idx = torch.as_tensor(sorted(int(k) for k in masked), dtype=torch.long)
    if idx.numel() == 0:
        return _zero_like(pred)
    err = ((ref[idx] - pred[idx]) ** 2).sum()
    return err / idx.numel() if reduction == "mean" else err


def loss_coord(ref, pred, masked: Iterable[int], automorphisms: AutomorphismSet,
               reduction: str = "mean") -> torch.Tensor:
    """Squared error on the masked rows, minimized over symmetry relabelings of ``pred``."""
    ref, pred = _as_tensor(ref), _as_tensor(pred)
    _check_coords(ref, pred)
    n = ref.shape[0]
    idx = torch.as_tensor(sorted(int(k) for k in masked), dtype=torch.long)
    if idx.numel() == 0:
        return _zero_like(pred)
    perms = _perm_tensor(automorphisms, n)
    candidates = pred[perms][:, idx]                      # (k, m, 3)
    errs = ((candidates - ref[idx]) ** 2).sum(dim=(1, 2))
    best = int(torch.argmin(errs.detach()))
    err = errs[best]
    return err / idx.numel() if reduction == "mean" else err


def best_alignment_branch(ref: np.ndarray, pred: np.ndarray, automorphisms: AutomorphismSet):
    """The (permutation, transform) pair minimizing the aligned squared error."""
    best = None
    for perm in automorphisms:
        transform, value = optimal_alignment(ref, pred[list(perm)])
        if best is None or value < best[0]:
            best = (value, perm, transform)
    return best[1], best[2]


def loss_2d3d(ref, pred, automorphisms: AutomorphismSet) -> torch.Tensor:
    """Mean squared error after the best relabeling and proper rigid motion of ``pred``."""
    ref, pred = _as_tensor(ref), _as_tensor(pred)
    _check_coords(ref, pred)
    n = ref.shape[0]
    if any(len(p) != n for p in automorphisms):
        raise ValueError("automorphism length does not match the conformation")
    perm, transform = best_alignment_branch(ref.detach().numpy(), pred.detach().numpy(), automorphisms)
    Q = torch.as_tensor(transform.Q, dtype=DTYPE)
    t = torch.as_tensor(transform.t, dtype=DTYPE)
    moved = pred[list(perm)] @ Q + t
    return ((ref - moved) ** 2).sum() / n


@dataclass
class LossReport:
    l_atom: float
    l_coord: float
    l_2d3d: float
    l_3d2d: float
    total: float
    masked_atoms: int
    masked_coords: int

    def as_dict(self) -> dict:
        return asdict(self)

    def component(self, name: str) -> float:
        return getattr(self, "l_" + name)


DEFAULT_WEIGHTS = {name: 1.0 for name in LOSS_NAMES}


def pretrain_losses(params: ModelParams, config: ModelConfig,
                    items: Sequence[tuple[Molecule, np.ndarray, StepPlan]],
                    weights: Optional[dict[str, float]] = None,
                    enabled: Optional[Iterable[str]] = None,
                    automorphisms: Optional[dict[str, AutomorphismSet]] = None,
                    pass_order: Sequence[str] = ("masked", "2d3d", "3d2d")):
    """The weighted pre-training objective over a batch and its per-loss report.

    ``items`` holds ``(molecule, true conformation, StepPlan)`` triples. Passes
    whose losses are all disabled are skipped and report zero. Token losses are
    averaged over all masked tokens of the batch; the generation loss is
    averaged over molecules.
    """
    if not items:
        raise ValueError("empty batch")
    enabled = set(LOSS_NAMES if enabled is None else enabled)
    unknown = enabled - set(LOSS_NAMES)
    if unknown:
        raise ValueError(f"unknown losses {sorted(unknown)}")
    weights = {**DEFAULT_WEIGHTS, **(weights or {})}
    if automorphisms is None:
        automorphisms = {}
    mols = [it[0] for it in items]
    refs = [np.array(it[1], dtype=np.float64) for it in items]
    plans = [it[2] for it in items]
    auts = []
    for mol in mols:
        if mol.id not in automorphisms:
            automorphisms[mol.id] = find_automorphisms(mol)
        auts.append(automorphisms[mol.id])
    targets = torch.as_tensor(np.concatenate([atom_type_index(m, config) for m in mols]), dtype=torch.long)
    ref_t = [torch.as_tensor(r, dtype=DTYPE) for r in refs]

    values: dict[str, torch.Tensor] = {}
    masked_atoms = masked_coords = 0

    def run_masked():
        nonlocal masked_atoms, masked_coords
        out = forward_batch(params, config, make_batch(mols, refs, [p.masked for p in plans], config))
        offsets = out.batch.atom_offsets
        atom_idx = torch.nonzero(out.batch.atom_masked).flatten()
        masked_atoms = int(atom_idx.numel())
        values["atom"] = loss_atom(out.atom_logits, targets, atom_idx.tolist(), reduction="sum") / max(masked_atoms, 1)
        coord_sum = _zero_like(out.predicted_conformation)
        for m, plan in enumerate(plans):
            rows = plan.masked.masked_coords(mols[m].n_atoms)
            if rows:
                pred = out.predicted_conformation[offsets[m]:offsets[m + 1]]
                coord_sum = coord_sum + loss_coord(ref_t[m], pred, rows, auts[m], reduction="sum")
                masked_coords += len(rows)
        values["coord"] = coord_sum / max(masked_coords, 1)

    def run_2d3d():
        out = forward_batch(params, config, make_batch(mols, refs, [p.coords_random for p in plans], config))
        offsets = out.batch.atom_offsets
        per_mol = [
            loss_2d3d(ref_t[m], out.predicted_conformation[offsets[m]:offsets[m + 1]], auts[m])
            for m in range(len(mols))
        ]
        values["2d3d"] = torch.stack(per_mol).mean()

    def run_3d2d():
        out = forward_batch(params, config, make_batch(mols, refs, [p.atoms_masked for p in plans], config))
        values["3d2d"] = loss_3d2d(out.atom_logits, targets)

    runners = {"masked": run_masked, "2d3d": run_2d3d, "3d2d": run_3d2d}
    needed = {"masked": bool(enabled & {"atom", "coord"}), "2d3d": "2d3d" in enabled, "3d2d": "3d2d" in enabled}
    for name in pass_order:
        if needed[name]:
            runners[name]()

    total = None
    for name in LOSS_NAMES:
        if name in enabled:
            term = weights[name] * values[name]
            total = term if total is None else total + term
    if total is None:
        raise ValueError("no losses enabled")
    comp = {name: float(values[name].detach()) if name in enabled else 0.0 for name in LOSS_NAMES}
    report = LossReport(
        l_atom=comp["atom"], l_coord=comp["coord"], l_2d3d=comp["2d3d"], l_3d2d=comp["3d2d"],
        total=float(total.detach()), masked_atoms=masked_atoms, masked_coords=masked_coords,
    )
    return total, report
