"""The unified 2D/3D graph-network encoder.

Each block fuses the current conformation into atom and bond states, updates
bonds, updates atoms by attention over their neighbors, updates the global
node, and refines the conformation with mean-centered displacements. All
tensors are float64; parameters live in a flat ``name -> tensor`` dict so the
trainer can serialize them and the tests can perturb them one at a time.

Bonds are carried as two directed edges ``(i, j)`` and ``(j, i)``; the edge
``(i, j)`` is the one atom ``i`` reads during its attention step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .masking import MaskPlan
from .molgraph import Molecule

DTYPE = torch.float64
CHARGE_OFFSET = 4
CHARGE_VOCAB = 2 * CHARGE_OFFSET + 1

ModelParams = dict[str, torch.Tensor]


@dataclass(frozen=True)
class ModelConfig:
    L: int = 4
    d: int = 64
    atom_vocab: int = 119
    bond_vocab: int = 4
    leaky_slope: float = 0.01
    norm_epsilon: float = 1e-5

    def __post_init__(self):
        if self.L < 1 or self.d < 2 or self.atom_vocab < 2 or self.bond_vocab < 2:
            raise ValueError(f"invalid model config {self}")

    @classmethod
    def large(cls) -> "ModelConfig":
        return cls(L=12, d=256)

    @classmethod
    def tiny(cls) -> "ModelConfig":
        return cls(L=2, d=8, atom_vocab=17)

    def to_dict(self) -> dict:
        return asdict(self)


# -- parameters ----------------------------------------------------------------------


def _ff_shapes(prefix: str, n_in: int, hidden: int, n_out: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.w1": (n_in, hidden),
        f"{prefix}.b1": (hidden,),
        f"{prefix}.scale": (hidden,),
        f"{prefix}.shift": (hidden,),
        f"{prefix}.w2": (hidden, n_out),
        f"{prefix}.b2": (n_out,),
    }


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = config.d
    h = d
    shapes: dict[str, tuple[int, ...]] = {
        "atom_embed": (config.atom_vocab, d),
        "charge_embed": (CHARGE_VOCAB, d),
        "bond_embed": (config.bond_vocab, d),
        "mask_atom": (d,),
        "mask_bond": (d,),
        "global_init": (d,),
    }
    for l in range(config.L):
        p = f"block{l}"
        shapes.update(_ff_shapes(f"{p}.coord_ff", 3, h, d))
        shapes.update(_ff_shapes(f"{p}.dist_ff", 1, h, d))
        shapes.update(_ff_shapes(f"{p}.bond_ff", 4 * d, h, d))
        shapes[f"{p}.attn_a"] = (d,)
        shapes[f"{p}.attn_wq"] = (d, d)
        shapes[f"{p}.attn_wk"] = (2 * d, d)
        shapes[f"{p}.attn_wv"] = (2 * d, d)
        shapes.update(_ff_shapes(f"{p}.atom_mlp", 3 * d, h, d))
        shapes.update(_ff_shapes(f"{p}.global_ff", 3 * d, h, d))
        shapes.update(_ff_shapes(f"{p}.disp_ff", d, h, 3))
    shapes.update(_ff_shapes("atom_head", d, h, config.atom_vocab))
    return shapes


def _init_tensor(name: str, shape: tuple[int, ...], fan_in: int, gen: torch.Generator) -> torch.Tensor:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "scale":
        return torch.ones(shape, dtype=DTYPE)
    if leaf == "shift":
        return torch.zeros(shape, dtype=DTYPE)
    if name.endswith("embed") or name in ("mask_atom", "mask_bond", "global_init"):
        bound = 0.1
    elif leaf in ("b1", "b2"):
        # zero biases would make the first normalization erase input magnitude
        bound = 1.0 / math.sqrt(fan_in)
    else:
        bound = math.sqrt(6.0 / fan_in)
    return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Weights uniform in +-sqrt(6/fan_in), biases in +-1/sqrt(fan_in),
    embeddings in +-0.1, normalization scale 1 and shift 0."""
    gen = torch.Generator().manual_seed(seed % 2**63)
    shapes = param_shapes(config)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".b1") or name.endswith(".b2"):
            prefix, leaf = name.rsplit(".", 1)
            fan_in = shapes[f"{prefix}.w{leaf[1:]}"][0]
        else:
            fan_in = shape[0]
        params[name] = _init_tensor(name, shape, fan_in, gen)
    return params


def check_params(params: ModelParams, config: ModelConfig) -> None:
    expected = param_shapes(config)
    missing = set(expected) - set(params)
    if missing:
        raise ValueError(f"missing parameter tensors: {sorted(missing)}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"tensor {name!r} has shape {tuple(params[name].shape)}, expected {shape}")


# -- batching ------------------------------------------------------------------------


@dataclass
class GraphBatch:
    """Several molecules packed into one disjoint graph."""

    atom_type: torch.Tensor      # (N,)
    charge: torch.Tensor         # (N,)
    atom_masked: torch.Tensor    # (N,) bool
    coords: torch.Tensor         # (N, 3) network input, masked rows already replaced
    atom_mol: torch.Tensor       # (N,)
    edge_src: torch.Tensor       # (E,) receiving atom i of directed edge (i, j)
    edge_dst: torch.Tensor       # (E,) neighbor j
    bond_type: torch.Tensor      # (E,)
    edge_masked: torch.Tensor    # (E,) bool
    edge_mol: torch.Tensor       # (E,)
    atom_offsets: list[int]
    n_mols: int

    @property
    def n_atoms(self) -> int:
        return int(self.atom_type.shape[0])


def atom_type_index(mol: Molecule, config: ModelConfig) -> np.ndarray:
    z = mol.atomic_numbers
    if np.any(z >= config.atom_vocab):
        raise ValueError(f"molecule {mol.id}: atomic number {int(z.max())} outside atom vocabulary of {config.atom_vocab}")
    return z


def make_batch(mols: Sequence[Molecule], confs: Sequence[np.ndarray], plans: Sequence[Optional[MaskPlan]],
               config: ModelConfig) -> GraphBatch:
    atom_type, charge, atom_masked, coords, atom_mol = [], [], [], [], []
    src, dst, btype, emask, emol = [], [], [], [], []
    offsets = [0]
    for m, (mol, conf, plan) in enumerate(zip(mols, confs, plans)):
        n = mol.n_atoms
        conf = np.asarray(conf, dtype=np.float64)
        if conf.shape != (n, 3):
            raise ValueError(f"molecule {mol.id}: conformation shape {conf.shape} does not match {n} atoms")
        if plan is None:
            plan = MaskPlan.unmasked(n)
        plan.validate(n)
        base = offsets[-1]
        masked = np.array([k not in plan.unmasked_atoms for k in range(n)], dtype=bool)
        atom_type.append(atom_type_index(mol, config))
        charge.append(np.clip(mol.formal_charges + CHARGE_OFFSET, 0, CHARGE_VOCAB - 1))
        atom_masked.append(masked)
        coords.append(plan.apply_coords(conf))
        atom_mol.append(np.full(n, m))
        for b in mol.bonds:
            if int(b.order) >= config.bond_vocab:
                raise ValueError(f"molecule {mol.id}: bond order {b.order.label} outside bond vocabulary")
            hidden = bool(masked[b.i] or masked[b.j])
            for i, j in ((b.i, b.j), (b.j, b.i)):
                src.append(base + i)
                dst.append(base + j)
                btype.append(int(b.order))
                emask.append(hidden)
                emol.append(m)
        offsets.append(base + n)

    def cat(parts, dtype):
        return torch.as_tensor(np.concatenate(parts) if parts else np.zeros(0), dtype=dtype)

    long = torch.long
    return GraphBatch(
        atom_type=cat(atom_type, long),
        charge=cat(charge, long),
        atom_masked=cat(atom_masked, torch.bool),
        coords=torch.as_tensor(np.concatenate(coords, axis=0), dtype=DTYPE),
        atom_mol=cat(atom_mol, long),
        edge_src=torch.as_tensor(src, dtype=long),
        edge_dst=torch.as_tensor(dst, dtype=long),
        bond_type=torch.as_tensor(btype, dtype=long),
        edge_masked=torch.as_tensor(emask, dtype=torch.bool),
        edge_mol=torch.as_tensor(emol, dtype=long),
        atom_offsets=offsets,
        n_mols=len(mols),
    )


# -- building blocks -----------------------------------------------------------------


def segment_sum(x: torch.Tensor, seg: torch.Tensor, n_seg: int) -> torch.Tensor:
    out = torch.zeros((n_seg,) + tuple(x.shape[1:]), dtype=x.dtype)
    return out.index_add(0, seg, x)


def segment_mean(x: torch.Tensor, seg: torch.Tensor, n_seg: int) -> torch.Tensor:
    """Per-segment mean; empty segments give zeros."""
    counts = torch.bincount(seg, minlength=n_seg).to(x.dtype).clamp(min=1.0)
    return segment_sum(x, seg, n_seg) / counts.view(-1, *([1] * (x.dim() - 1)))


def set_norm(x: torch.Tensor, scale, shift, eps: float, seg=None, n_seg: int = 0) -> torch.Tensor:
    """Normalize rows by the root-mean-square over their molecule, then scale and shift.

    Rows of one molecule share the statistic, so per-atom magnitudes survive.
    Without ``seg`` (molecule-level inputs, one row per molecule) each row is
    layer-normalized over its features instead.
    """
    if seg is None:
        mean = x.mean(dim=-1, keepdim=True)
        var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
        return (x - mean) / torch.sqrt(var + eps) * scale + shift
    ms = segment_mean(x * x, seg, n_seg)[seg]
    return x / torch.sqrt(ms + eps) * scale + shift


def feed_forward(params: ModelParams, prefix: str, inputs: Sequence[torch.Tensor], eps: float, seg=None, n_seg=0) -> torch.Tensor:
    """Concatenate, linear, normalize, ReLU, linear."""
    x = torch.cat(list(inputs), dim=-1) if len(inputs) > 1 else inputs[0]
    h = x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]
    h = set_norm(h, params[f"{prefix}.scale"], params[f"{prefix}.shift"], eps, seg, n_seg)
    return torch.relu(h) @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def segment_softmax(scores: torch.Tensor, seg: torch.Tensor, n_seg: int) -> torch.Tensor:
    peak = torch.full((n_seg,), -torch.inf, dtype=scores.dtype)
    peak = peak.scatter_reduce(0, seg, scores.detach(), reduce="amax", include_self=True)
    w = torch.exp(scores - peak[seg])
    return w / segment_sum(w, seg, n_seg)[seg]


# -- forward -------------------------------------------------------------------------


@dataclass
class BatchOutput:
    atom_reprs: torch.Tensor                 # (N, d)
    global_repr: torch.Tensor                # (M, d)
    predicted_conformation: torch.Tensor     # (N, 3)
    atom_logits: torch.Tensor                # (N, atom_vocab)
    per_block_conformations: list[torch.Tensor]
    attention: list[torch.Tensor]            # per block, (E,)
    batch: GraphBatch

    def molecule(self, m: int) -> "EncoderOutput":
        lo, hi = self.batch.atom_offsets[m], self.batch.atom_offsets[m + 1]
        return EncoderOutput(
            atom_reprs=self.atom_reprs[lo:hi],
            global_repr=self.global_repr[m],
            predicted_conformation=self.predicted_conformation[lo:hi],
            atom_logits=self.atom_logits[lo:hi],
            per_block_conformations=[r[lo:hi] for r in self.per_block_conformations],
        )


@dataclass
class EncoderOutput:
    atom_reprs: torch.Tensor
    global_repr: torch.Tensor
    predicted_conformation: torch.Tensor
    atom_logits: torch.Tensor
    per_block_conformations: list[torch.Tensor]


def _check_finite(t: torch.Tensor, what: str, block: int) -> None:
    if not bool(torch.isfinite(t).all()):
        raise FloatingPointError(f"non-finite {what} in block {block}")


def forward_batch(params: ModelParams, config: ModelConfig, batch: GraphBatch) -> BatchOutput:
    eps = config.norm_epsilon
    slope = config.leaky_slope
    M = batch.n_mols
    N = batch.n_atoms
    amol, emol = batch.atom_mol, batch.edge_mol
    src, dst = batch.edge_src, batch.edge_dst

    x = params["atom_embed"][batch.atom_type] + params["charge_embed"][batch.charge]
    x = torch.where(batch.atom_masked[:, None], params["mask_atom"].expand(N, -1), x)
    e = params["bond_embed"][batch.bond_type]
    e = torch.where(batch.edge_masked[:, None], params["mask_bond"].expand(len(src), -1), e)
    u = params["global_init"].expand(M, -1)
    conf = batch.coords
    confs = [conf]
    attention = []

    for l in range(config.L):
        p = f"block{l}"
        # geometric fusion from this block's incoming conformation
        x_bar = x + feed_forward(params, f"{p}.coord_ff", [conf], eps, amol, M)
        dist = torch.linalg.vector_norm(conf[src] - conf[dst], dim=1, keepdim=True)
        e_bar = e + feed_forward(params, f"{p}.dist_ff", [dist], eps, emol, M)

        e_new = e + feed_forward(params, f"{p}.bond_ff", [x_bar[src], x_bar[dst], e_bar, u[emol]], eps, emol, M)

        q = x_bar @ params[f"{p}.attn_wq"]
        k = torch.cat([x_bar[dst], e_bar], dim=1) @ params[f"{p}.attn_wk"]
        scores = torch.nn.functional.leaky_relu(q[src] + k, slope) @ params[f"{p}.attn_a"]
        alpha = segment_softmax(scores, src, N)
        values = torch.cat([e_new, x_bar[dst]], dim=1) @ params[f"{p}.attn_wv"]
        summary = segment_sum(alpha[:, None] * values, src, N)
        x_new = x + feed_forward(params, f"{p}.atom_mlp", [x_bar, summary, u[amol]], eps, amol, M)

        u = u + feed_forward(
            params, f"{p}.global_ff", [segment_mean(x_new, amol, M), segment_mean(e_new, emol, M), u], eps,
        )

        delta = feed_forward(params, f"{p}.disp_ff", [x_new], eps, amol, M)
        delta = delta - segment_mean(delta, amol, M)[amol]
        conf = conf + delta

        x, e = x_new, e_new
        _check_finite(x, "atom representations", l)
        _check_finite(conf, "conformation", l)
        confs.append(conf)
        attention.append(alpha)

    logits = feed_forward(params, "atom_head", [x], eps, amol, M)
    return BatchOutput(x, u, conf, logits, confs, attention, batch)


def forward(params: ModelParams, config: ModelConfig, mol: Molecule, conf: np.ndarray,
            plan: Optional[MaskPlan] = None) -> EncoderOutput:
    batch = make_batch([mol], [conf], [plan], config)
    return forward_batch(params, config, batch).molecule(0)


def gradients(params: ModelParams, config: ModelConfig, items, loss: str = "total",
              weights: Optional[dict[str, float]] = None) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of one pre-training loss over a batch.

    ``items`` holds ``(molecule, conformation, StepPlan)`` triples; ``loss`` is
    one of ``atom``, ``coord``, ``2d3d``, ``3d2d`` or ``total``.
    """
    from .objectives import pretrain_losses

    leaves = {name: t.detach().clone().requires_grad_(True) for name, t in params.items()}
    enabled = None if loss == "total" else {loss}
    value, _ = pretrain_losses(leaves, config, items, weights=weights, enabled=enabled)
    if not bool(torch.isfinite(value)):
        raise FloatingPointError(f"non-finite {loss} loss")
    names = list(leaves)
    grads = torch.autograd.grad(value, [leaves[n] for n in names], allow_unused=True)
    return {n: (torch.zeros_like(leaves[n]) if g is None else g) for n, g in zip(names, grads)}
