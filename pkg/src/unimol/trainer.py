"""Pre-training loop: three corrupted passes per step, Adam, epochs, checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .encoder import DTYPE, ModelConfig, ModelParams, check_params, init_params, param_shapes
from .masking import MaskPlan, StepPlan, make_mask_plan, make_step_plan
from .molgraph import Molecule
from .objectives import LOSS_NAMES, LossReport, pretrain_losses
from .symmetry import AutomorphismSet

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"UNIMOLCK"
CHECKPOINT_VERSION = 1

__all__ = [
    "MaskPlan", "StepPlan", "make_mask_plan", "make_step_plan", "TrainConfig", "TrainState",
    "new_state", "adam_update", "pretrain_step", "evaluate", "train", "TrainResult",
    "save_checkpoint", "load_checkpoint", "checkpoint_roundtrip", "CheckpointError",
]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 8
    epochs: int = 100
    mask_ratio: float = 0.25
    seed: int = 0
    loss_weights: dict = field(default_factory=lambda: {name: 1.0 for name in LOSS_NAMES})
    losses: tuple[str, ...] = LOSS_NAMES
    val_fraction: float = 0.05

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask ratio must lie in (0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("validation fraction must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be positive and epochs non-negative")
        object.__setattr__(self, "losses", tuple(self.losses))
        unknown = set(self.losses) - set(LOSS_NAMES)
        if unknown or not self.losses:
            raise ValueError(f"losses must be a nonempty subset of {LOSS_NAMES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["losses"] = list(self.losses)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{**d, "losses": tuple(d["losses"])})


@dataclass
class TrainState:
    """Everything needed to continue training bit-identically.

    Randomness is counter-based: mask plans derive from ``(seed, step)`` and
    epoch shuffles from ``(seed, epoch)``, so the counters are the RNG state.
    """

    params: ModelParams
    m: ModelParams
    v: ModelParams
    step: int
    epoch: int
    model_config: ModelConfig
    train_config: TrainConfig
    best_val: float = math.inf

    @property
    def seed(self) -> int:
        return self.train_config.seed


def new_state(model_config: ModelConfig, train_config: TrainConfig) -> TrainState:
    params = init_params(model_config, train_config.seed)
    zeros = {k: torch.zeros_like(t) for k, t in params.items()}
    return TrainState(params, zeros, {k: t.clone() for k, t in zeros.items()}, 0, 0, model_config, train_config)


def adam_update(params: ModelParams, grads: ModelParams, m: ModelParams, v: ModelParams, step: int,
                lr: float) -> tuple[ModelParams, ModelParams, ModelParams]:
    """One textbook Adam step; ``step`` is the 1-based update count."""
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - ADAM_BETA1 ** step
    c2 = 1.0 - ADAM_BETA2 ** step
    for name, p in params.items():
        g = grads[name]
        mk = ADAM_BETA1 * m[name] + (1.0 - ADAM_BETA1) * g
        vk = ADAM_BETA2 * v[name] + (1.0 - ADAM_BETA2) * g * g
        new_p[name] = p - lr * (mk / c1) / (torch.sqrt(vk / c2) + ADAM_EPS)
        new_m[name] = mk
        new_v[name] = vk
    return new_p, new_m, new_v


def _require_coords(batch: Sequence[Molecule]) -> None:
    missing = [m.id for m in batch if m.coords is None]
    if missing:
        raise ValueError(f"molecules without coordinates: {', '.join(missing)}")


def _diagnose(state: TrainState, items, automorphisms) -> str:
    cfg = state.train_config
    for item in items:
        _, report = pretrain_losses(state.params, state.model_config, [item], enabled=cfg.losses,
                                    automorphisms=automorphisms)
        for name in cfg.losses:
            if not math.isfinite(report.component(name)):
                return f"molecule {item[0].id}, loss {name}"
    return "unknown molecule"


def batch_items(batch: Sequence[Molecule], seed: int, step: int, p: float):
    return [(mol, mol.coords, make_step_plan(mol, p, seed, step)) for mol in batch]


def pretrain_step(state: TrainState, batch: Sequence[Molecule],
                  automorphisms: Optional[dict[str, AutomorphismSet]] = None) -> tuple[TrainState, LossReport]:
    """One optimizer step on the summed losses; the report holds pre-update values."""
    _require_coords(batch)
    cfg = state.train_config
    if automorphisms is None:
        automorphisms = {}
    items = batch_items(batch, cfg.seed, state.step, cfg.mask_ratio)
    leaves = {k: t.detach().clone().requires_grad_(True) for k, t in state.params.items()}
    total, report = pretrain_losses(leaves, state.model_config, items, weights=cfg.loss_weights,
                                    enabled=cfg.losses, automorphisms=automorphisms)
    if not math.isfinite(report.total):
        raise FloatingPointError(f"non-finite loss ({_diagnose(state, items, automorphisms)})")
    names = list(leaves)
    grads = torch.autograd.grad(total, [leaves[n] for n in names], allow_unused=True)
    grads = {n: (torch.zeros_like(leaves[n]) if g is None else g) for n, g in zip(names, grads)}
    params, m, v = adam_update(state.params, grads, state.m, state.v, state.step + 1, cfg.lr)
    return replace(state, params=params, m=m, v=v, step=state.step + 1), report


def evaluate(state: TrainState, molecules: Sequence[Molecule], seed: Optional[int] = None,
             automorphisms: Optional[dict[str, AutomorphismSet]] = None) -> LossReport:
    """Losses on fixed corruptions (step counter 0 of ``seed``), no update.

    Molecules are scored in batches and the components averaged, weighted by
    batch size.
    """
    _require_coords(molecules)
    cfg = state.train_config
    seed = cfg.seed if seed is None else seed
    sums = dict.fromkeys(("l_atom", "l_coord", "l_2d3d", "l_3d2d", "total"), 0.0)
    counts = [0, 0]
    with torch.no_grad():
        for lo in range(0, len(molecules), cfg.batch_size):
            chunk = molecules[lo:lo + cfg.batch_size]
            items = batch_items(chunk, seed, 0, cfg.mask_ratio)
            _, rep = pretrain_losses(state.params, state.model_config, items, weights=cfg.loss_weights,
                                     enabled=cfg.losses, automorphisms=automorphisms)
            for key in sums:
                sums[key] += getattr(rep, key) * len(chunk)
            counts[0] += rep.masked_atoms
            counts[1] += rep.masked_coords
    n = len(molecules)
    return LossReport(*(sums[k] / n for k in ("l_atom", "l_coord", "l_2d3d", "l_3d2d", "total")), *counts)


def split_dataset(dataset: Sequence[Molecule], val_fraction: float, seed: int):
    """Deterministic train/validation split; ``round(val_fraction * n)`` go to validation."""
    n = len(dataset)
    n_val = int(round(val_fraction * n))
    if n_val >= n:
        n_val = n - 1
    order = np.random.default_rng([seed % 2**63, 0x5B117]).permutation(n)
    val = [dataset[k] for k in sorted(order[:n_val])]
    train_set = [dataset[k] for k in sorted(order[n_val:])]
    return train_set, val


@dataclass
class TrainResult:
    state: TrainState
    best_params: Optional[ModelParams]
    log: list[dict]


def train(train_config: TrainConfig, model_config: ModelConfig, dataset: Sequence[Molecule],
          state: Optional[TrainState] = None, on_record: Optional[Callable[[dict], None]] = None,
          best_path=None, stop_after_epoch: Optional[int] = None) -> TrainResult:
    """Run (or resume) pre-training up to ``train_config.epochs`` epochs.

    Every step and every epoch appends a record to the metrics log. After each
    epoch the validation loss is measured and, if it improves, the parameters
    are kept as the best checkpoint (written to ``best_path`` when given).
    """
    if not dataset:
        raise ValueError("empty dataset")
    _require_coords(dataset)
    if state is None:
        state = new_state(model_config, train_config)
    train_set, val_set = split_dataset(dataset, train_config.val_fraction, train_config.seed)
    automorphisms: dict[str, AutomorphismSet] = {}
    records: list[dict] = []
    best_params = None

    def emit(rec):
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    last_epoch = train_config.epochs if stop_after_epoch is None else min(stop_after_epoch, train_config.epochs)
    while state.epoch < last_epoch:
        epoch = state.epoch
        order = np.random.default_rng([train_config.seed % 2**63, epoch]).permutation(len(train_set))
        epoch_total = 0.0
        n_batches = 0
        for lo in range(0, len(order), train_config.batch_size):
            batch = [train_set[k] for k in order[lo:lo + train_config.batch_size]]
            state, report = pretrain_step(state, batch, automorphisms)
            emit({"kind": "step", "step": state.step, "epoch": epoch, **report.as_dict()})
            epoch_total += report.total
            n_batches += 1
        state = replace(state, epoch=epoch + 1)
        rec = {"kind": "epoch", "epoch": epoch, "step": state.step, "train_loss": epoch_total / max(n_batches, 1)}
        if val_set:
            rec["val_loss"] = evaluate(state, val_set, automorphisms=automorphisms).total
            score = rec["val_loss"]
        else:
            score = rec["train_loss"]
        if score < state.best_val:
            state = replace(state, best_val=score)
            best_params = {k: t.clone() for k, t in state.params.items()}
            rec["best"] = True
            if best_path is not None:
                save_checkpoint(state, best_path)
        log.info("epoch %d: train %.4f%s", epoch, rec["train_loss"],
                 f", val {rec['val_loss']:.4f}" if "val_loss" in rec else "")
        emit(rec)
    return TrainResult(state, best_params, records)


# -- checkpoints ---------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def _tensor_groups(state: TrainState) -> list[tuple[str, str, torch.Tensor]]:
    out = []
    for group, tensors in (("params", state.params), ("m", state.m), ("v", state.v)):
        for name in param_shapes(state.model_config):
            out.append((group, name, tensors[name]))
    return out


def save_checkpoint(state: TrainState, path) -> None:
    """Magic bytes, a length-prefixed JSON header, then float64 LE tensor payloads."""
    entries = _tensor_groups(state)
    payload = b"".join(t.detach().to(DTYPE).contiguous().numpy().astype("<f8").tobytes() for _, _, t in entries)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": state.model_config.to_dict(),
        "train_config": state.train_config.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "best_val": None if math.isinf(state.best_val) else state.best_val,
        "tensors": [{"group": g, "name": n, "shape": list(t.shape)} for g, n, t in entries],
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path, model_config: Optional[ModelConfig] = None) -> TrainState:
    """Read a checkpoint, verifying magic, version, checksum and tensor shapes.

    With ``model_config`` given, the stored tensors must match its shapes.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    pos = len(CHECKPOINT_MAGIC)
    if len(data) < pos + 4:
        raise CheckpointError("checksum failure: truncated header")
    (hlen,) = struct.unpack("<I", data[pos:pos + 4])
    pos += 4
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("checksum failure: corrupt header") from None
    pos += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    payload = data[pos:]
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError("checksum failure: payload does not match header")

    stored_config = ModelConfig(**header["model_config"])
    config = model_config or stored_config
    expected = param_shapes(config)
    for entry in header["tensors"]:
        want = expected.get(entry["name"])
        if want is None:
            raise CheckpointError(f"unexpected tensor {entry['name']!r}")
        if tuple(entry["shape"]) != want:
            raise CheckpointError(
                f"shape mismatch for tensor {entry['name']!r}: checkpoint {tuple(entry['shape'])}, config {want}")

    groups: dict[str, ModelParams] = {"params": {}, "m": {}, "v": {}}
    offset = 0
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        offset += 8 * count
        groups[entry["group"]][entry["name"]] = torch.from_numpy(arr.astype(np.float64))
    for group in groups.values():
        check_params(group, config)
    best = header.get("best_val")
    return TrainState(
        groups["params"], groups["m"], groups["v"], header["step"], header["epoch"], config,
        TrainConfig.from_dict(header["train_config"]), math.inf if best is None else best,
    )


def checkpoint_roundtrip(state: TrainState, path) -> TrainState:
    save_checkpoint(state, path)
    return load_checkpoint(path)
