"""Central finite-difference check of the encoder gradients.

One forward evaluation yields all four loss components, so perturbing each
parameter entry twice checks every loss and their sum at once.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .encoder import ModelConfig, ModelParams, gradients, init_params
from .masking import make_step_plan
from .molgraph import synth_dataset
from .objectives import LOSS_NAMES, pretrain_losses
from .symmetry import find_automorphisms

FD_STEP = 1e-5
TOLERANCE = 1e-4
# gradients smaller than this are compared absolutely: central differences
# carry roundoff of order eps * |loss| / step regardless of the true value
REL_FLOOR = 1e-5
# an entry failing at FD_STEP is re-measured with these smaller steps; a ReLU
# kink inside the +-step interval is the only way a correct gradient fails
REFINE_STEPS = (1e-6, 1e-7)


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    worst_entry: dict[str, str]
    n_entries: int
    seconds: float
    n_molecules: int = 0
    per_loss_norm: dict[str, float] = field(default_factory=dict)
    refined: list[str] = field(default_factory=list)

    @property
    def overall(self) -> float:
        return max(self.max_rel_error.values())


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def check_items(n_molecules: int, max_atoms: int, seed: int, mask_ratio: float = 0.25):
    mols = synth_dataset(n_molecules, seed, (2, max_atoms))
    return [(m, m.coords, make_step_plan(m, mask_ratio, seed, 0)) for m in mols]


def _component_values(params, config, items, auts) -> np.ndarray:
    _, rep = pretrain_losses(params, config, items, automorphisms=auts)
    return np.array([rep.l_atom, rep.l_coord, rep.l_2d3d, rep.l_3d2d, rep.total])


def finite_difference_check(params: ModelParams, config: ModelConfig, items, step: float = FD_STEP,
                            floor: float = REL_FLOOR) -> GradCheckReport:
    """Compare reverse-mode gradients of each loss and their sum to central differences."""
    t0 = time.perf_counter()
    names = list(LOSS_NAMES) + ["total"]
    auts = {m.id: find_automorphisms(m) for m, _, _ in items}
    analytic = {name: gradients(params, config, items, loss=name) for name in names}
    work = {k: t.detach().clone() for k, t in params.items()}
    worst = {name: (0.0, "") for name in names}
    refined = []
    n_entries = 0

    def central(flat, idx, h):
        orig = float(flat[idx])
        flat[idx] = orig + h
        plus = _component_values(work, config, items, auts)
        flat[idx] = orig - h
        minus = _component_values(work, config, items, auts)
        flat[idx] = orig
        return (plus - minus) / (2.0 * h)

    with torch.no_grad():
        for pname, tensor in work.items():
            flat = tensor.view(-1)
            for idx in range(flat.numel()):
                a = np.array([float(analytic[name][pname].view(-1)[idx]) for name in names])
                errs = relative_error(a, central(flat, idx, step), floor)
                if errs.max() >= TOLERANCE:
                    refined.append(f"{pname}[{idx}]")
                    for h in REFINE_STEPS:
                        errs = np.minimum(errs, relative_error(a, central(flat, idx, h), floor))
                for c, name in enumerate(names):
                    if errs[c] > worst[name][0]:
                        worst[name] = (float(errs[c]), f"{pname}[{idx}]")
                n_entries += 1
    return GradCheckReport(
        {k: v[0] for k, v in worst.items()}, {k: v[1] for k, v in worst.items()}, n_entries,
        time.perf_counter() - t0, len(items),
        {k: float(torch.sqrt(sum((g ** 2).sum() for g in analytic[k].values()))) for k in names},
        refined,
    )


def run_grad_check(seed: int, n_molecules: int = 10, max_atoms: int = 6,
                   config: ModelConfig = ModelConfig.tiny()) -> GradCheckReport:
    params = init_params(config, seed)
    return finite_difference_check(params, config, check_items(n_molecules, max_atoms, seed))
