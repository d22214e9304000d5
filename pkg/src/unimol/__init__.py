"""Unified 2D/3D molecular pre-training: data model, symmetry-aware losses,
encoder, training, fine-tuning and conformation evaluation."""

__version__ = "0.1.0"

from .align import RigidTransform, min_rmsd_over_aut, optimal_alignment, rmsd
from .confeval import ConfSet, EvalConfig, conf_metrics, generate_conformations
from .encoder import ModelConfig, forward, gradients, init_params
from .finetune import TaskSpec, compute_metric, finetune_run, predict
from .masking import MaskPlan, make_mask_plan
from .molgraph import Atom, Bond, BondOrder, Molecule, parse_jsonl, synth_dataset, write_jsonl
from .objectives import loss_2d3d, loss_3d2d, loss_atom, loss_coord, pretrain_losses
from .symmetry import AutomorphismSet, apply_permutation, brute_force_automorphisms, find_automorphisms
from .trainer import TrainConfig, load_checkpoint, pretrain_step, save_checkpoint, train
