"""Property prediction on top of the pre-trained encoder.

A two-layer head reads the final global node of the encoder and emits one
output per task. Molecules without a conformation get seeded uniform [-1, 1]
coordinates, one fixed draw per run.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from .encoder import DTYPE, ModelConfig, ModelParams, feed_forward, forward_batch, make_batch
from .molgraph import Molecule, random_coordinates, stable_hash
from .trainer import TrainState, adam_update

KINDS = ("binary_classification", "regression")
METRICS = ("roc_auc", "average_precision", "r2", "rmse", "mae")
FINETUNE_MAGIC = b"UNIMOLFT"
FINETUNE_VERSION = 1


@dataclass(frozen=True)
class TaskSpec:
    names: tuple[str, ...]
    kind: str = "binary_classification"
    multitask: bool = True

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise ValueError("at least one task is required")
        if len(set(self.names)) != len(self.names):
            raise ValueError("task names must be distinct")
        if self.kind not in KINDS:
            raise ValueError(f"task kind must be one of {KINDS}, got {self.kind!r}")
        if not self.multitask and len(self.names) != 1:
            raise ValueError("single-task mode takes exactly one task")

    @property
    def is_classification(self) -> bool:
        return self.kind == "binary_classification"

    @property
    def default_metric(self) -> str:
        return "roc_auc" if self.is_classification else "rmse"


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    freeze_encoder: bool = False

    def __post_init__(self):
        if not self.lr >= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError(f"invalid fine-tuning config {self}")


@dataclass
class FinetunedModel:
    """Encoder and head parameters in one flat dict; head tensors are prefixed ``head``."""

    params: ModelParams
    model_config: ModelConfig
    spec: TaskSpec
    coord_seed: int = 0


@dataclass
class FinetuneResult:
    model: FinetunedModel
    metrics: dict[str, dict[str, float]]
    log: list[dict] = field(default_factory=list)


# -- head and inputs -----------------------------------------------------------------


def head_shapes(config: ModelConfig, n_tasks: int) -> dict[str, tuple[int, ...]]:
    d = config.d
    return {
        "head.w1": (d, d), "head.b1": (d,), "head.scale": (d,), "head.shift": (d,),
        "head.w2": (d, n_tasks), "head.b2": (n_tasks,),
    }


def init_head(config: ModelConfig, n_tasks: int, seed: int) -> ModelParams:
    gen = torch.Generator().manual_seed((seed + 0x4EAD) % 2**63)
    out = {}
    for name, shape in head_shapes(config, n_tasks).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "scale":
            out[name] = torch.ones(shape, dtype=DTYPE)
        elif leaf == "shift":
            out[name] = torch.zeros(shape, dtype=DTYPE)
        else:
            fan_in = config.d
            bound = 1.0 / math.sqrt(fan_in) if leaf.startswith("b") else math.sqrt(6.0 / fan_in)
            out[name] = (torch.rand(shape, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound
    return out


def input_coordinates(mol: Molecule, coord_seed: int) -> np.ndarray:
    """The molecule's own conformation, or a seeded random one when it has none."""
    if mol.coords is not None:
        return np.array(mol.coords)
    return random_coordinates(mol.n_atoms, (coord_seed % 2**32) * 2**32 + stable_hash(mol.id))


def label_matrix(molecules: Sequence[Molecule], spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Labels and a presence mask, both ``(n_molecules, n_tasks)``."""
    y = np.zeros((len(molecules), len(spec.names)))
    present = np.zeros_like(y, dtype=bool)
    for r, mol in enumerate(molecules):
        labels = mol.labels or {}
        for c, name in enumerate(spec.names):
            value = labels.get(name)
            if value is not None and math.isfinite(value):
                y[r, c] = value
                present[r, c] = True
    if spec.is_classification and np.any((y[present] != 0.0) & (y[present] != 1.0)):
        raise ValueError("classification labels must be 0 or 1")
    return y, present


def head_outputs(params: ModelParams, config: ModelConfig, molecules: Sequence[Molecule],
                 coord_seed: int) -> torch.Tensor:
    """Raw head outputs (logits for classification), ``(n_molecules, n_tasks)``."""
    confs = [input_coordinates(m, coord_seed) for m in molecules]
    out = forward_batch(params, config, make_batch(molecules, confs, [None] * len(molecules), config))
    return feed_forward(params, "head", [out.global_repr], config.norm_epsilon)


def task_loss(raw: torch.Tensor, y: np.ndarray, present: np.ndarray, spec: TaskSpec) -> torch.Tensor:
    """Sum over tasks of the per-task mean loss over labeled molecules.

    A task without any labels in the batch contributes zero.
    """
    y_t = torch.as_tensor(y, dtype=DTYPE)
    mask = torch.as_tensor(present, dtype=DTYPE)
    if spec.is_classification:
        per = F.binary_cross_entropy_with_logits(raw, y_t, reduction="none")
    else:
        per = (raw - y_t) ** 2
    counts = mask.sum(dim=0)
    per_task = (per * mask).sum(dim=0) / counts.clamp(min=1.0)
    return per_task.sum()


# -- training ------------------------------------------------------------------------


def finetune_run(ckpt: TrainState | FinetunedModel | tuple[ModelParams, ModelConfig],
                 dataset: Sequence[Molecule], spec: TaskSpec,
                 config: FinetuneConfig = FinetuneConfig()) -> FinetuneResult:
    """Fine-tune encoder plus a fresh head (or only the head, if frozen).

    Metrics are measured on ``dataset`` after the last epoch.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if isinstance(ckpt, TrainState):
        encoder, model_config = ckpt.params, ckpt.model_config
    elif isinstance(ckpt, FinetunedModel):
        encoder = {k: t for k, t in ckpt.params.items() if not k.startswith("head.")}
        model_config = ckpt.model_config
    else:
        encoder, model_config = ckpt
    y, present = label_matrix(dataset, spec)
    empty = [name for c, name in enumerate(spec.names) if not present[:, c].any()]
    if len(empty) == len(spec.names) or (empty and not spec.multitask):
        raise ValueError(f"no labeled examples for task(s): {', '.join(empty)}")

    params = {k: t.detach().clone() for k, t in encoder.items()}
    params.update(init_head(model_config, len(spec.names), config.seed))
    trainable = [k for k in params if k.startswith("head.") or not config.freeze_encoder]
    m = {k: torch.zeros_like(params[k]) for k in trainable}
    v = {k: torch.zeros_like(params[k]) for k in trainable}
    log: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed % 2**63, epoch, 0xF17E]).permutation(len(dataset))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            batch = [dataset[k] for k in idx]
            leaves = {k: (t.detach().clone().requires_grad_(True) if k in m else t) for k, t in params.items()}
            raw = head_outputs(leaves, model_config, batch, config.seed)
            loss = task_loss(raw, y[idx], present[idx], spec)
            if not bool(torch.isfinite(loss)):
                raise FloatingPointError(f"non-finite fine-tuning loss at epoch {epoch}")
            grads = torch.autograd.grad(loss, [leaves[k] for k in trainable], allow_unused=True)
            grads = {k: (torch.zeros_like(params[k]) if g is None else g) for k, g in zip(trainable, grads)}
            step += 1
            sub = {k: params[k] for k in trainable}
            new_p, m, v = adam_update(sub, grads, m, v, step, config.lr)
            params.update(new_p)
            losses.append(float(loss.detach()))
        log.append({"epoch": epoch, "step": step, "loss": float(np.mean(losses))})

    model = FinetunedModel(params, model_config, spec, config.seed)
    return FinetuneResult(model, evaluate_model(model, dataset), log)


def predict(model: FinetunedModel, molecules: Sequence[Molecule], coord_seed: Optional[int] = None,
            batch_size: int = 64) -> np.ndarray:
    """Per-task outputs, ``(n_molecules, n_tasks)``: probabilities or real values."""
    seed = model.coord_seed if coord_seed is None else coord_seed
    rows = []
    with torch.no_grad():
        for lo in range(0, len(molecules), batch_size):
            raw = head_outputs(model.params, model.model_config, molecules[lo:lo + batch_size], seed)
            rows.append(torch.sigmoid(raw) if model.spec.is_classification else raw)
    if not rows:
        return np.zeros((0, len(model.spec.names)))
    return torch.cat(rows).numpy()


def evaluate_model(model: FinetunedModel, molecules: Sequence[Molecule]) -> dict[str, dict[str, float]]:
    """All applicable metrics per task, on the molecules labeled for that task."""
    preds = predict(model, molecules)
    y, present = label_matrix(molecules, model.spec)
    kinds = ("roc_auc", "average_precision") if model.spec.is_classification else ("r2", "rmse", "mae")
    out = {}
    for c, name in enumerate(model.spec.names):
        sel = present[:, c]
        scores = {}
        for kind in kinds:
            try:
                scores[kind] = compute_metric(kind, preds[sel, c], y[sel, c])
            except ValueError:
                scores[kind] = float("nan")
        out[name] = scores
    return out


# -- metrics -------------------------------------------------------------------------


def _check_binary(labels: np.ndarray) -> None:
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    if labels.all() or not labels.any():
        raise ValueError("need at least one positive and one negative label")


def compute_metric(kind: str, preds, labels) -> float:
    preds = np.asarray(preds, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"preds and labels differ in length: {preds.size} vs {labels.size}")
    if preds.size == 0:
        raise ValueError("empty inputs")
    if kind == "roc_auc":
        _check_binary(labels)
        ranks = rankdata(preds)     # ties share their midrank
        pos = labels == 1
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
    if kind == "average_precision":
        _check_binary(labels)
        # one operating point per distinct score, highest first
        order = np.argsort(-preds, kind="stable")
        p, t = preds[order], labels[order]
        last = np.r_[np.flatnonzero(np.diff(p) != 0), p.size - 1]
        tp = np.cumsum(t)[last]
        precision = tp / (last + 1)
        recall = tp / t.sum()
        return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    if kind == "r2":
        pc, lc = preds - preds.mean(), labels - labels.mean()
        denom = math.sqrt(float(pc @ pc) * float(lc @ lc))
        if denom == 0.0:
            return float("nan")
        return float((pc @ lc) / denom) ** 2
    if kind == "rmse":
        return math.sqrt(float(np.mean((preds - labels) ** 2)))
    if kind == "mae":
        return float(np.mean(np.abs(preds - labels)))
    raise ValueError(f"unknown metric {kind!r}; expected one of {METRICS}")


def prediction_spread(model: FinetunedModel, molecules: Sequence[Molecule], seeds: Sequence[int]) -> float:
    """Largest change of any output across random-coordinate seeds."""
    stack = np.stack([predict(model, molecules, coord_seed=s) for s in seeds])
    return float((stack.max(axis=0) - stack.min(axis=0)).max())


def with_synthetic_labels(molecules: Sequence[Molecule]) -> list[Molecule]:
    """Attach ``parity`` (atom count odd) and ``size`` (atom count) labels."""
    return [m.with_labels({**(m.labels or {}), "parity": float(m.n_atoms % 2), "size": float(m.n_atoms)})
            for m in molecules]


# -- persistence ---------------------------------------------------------------------


def save_finetuned(model: FinetunedModel, path) -> None:
    names = sorted(model.params)
    payload = b"".join(model.params[n].detach().contiguous().numpy().astype("<f8").tobytes() for n in names)
    header = {
        "format_version": FINETUNE_VERSION,
        "model_config": model.model_config.to_dict(),
        "task_spec": {**asdict(model.spec), "names": list(model.spec.names)},
        "coord_seed": model.coord_seed,
        "tensors": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FINETUNE_MAGIC + struct.pack("<I", len(blob)) + blob + payload)


def load_finetuned(path) -> FinetunedModel:
    from .trainer import CheckpointError

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != FINETUNE_MAGIC:
        raise CheckpointError("not a fine-tuned model file (bad magic bytes)")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("checksum failure: corrupt header") from None
    if header.get("format_version") != FINETUNE_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}")
    payload = data[12 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError("checksum failure: payload does not match header")
    params, offset = {}, 0
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        params[entry["name"]] = torch.from_numpy(arr.astype(np.float64))
        offset += 8 * count
    spec = TaskSpec(**header["task_spec"])
    return FinetunedModel(params, ModelConfig(**header["model_config"]), spec, header["coord_seed"])
