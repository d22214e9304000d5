"""Command-line entry point: ``unimol <subcommand> [flags]``.

Exit status is 0 on success, 1 on domain errors (bad data, shape mismatches,
corrupt checkpoints) and 2 on usage errors. Logs go to standard error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .align import min_rmsd_over_aut, optimal_alignment
from .confeval import (DELTA_PRESETS, ConfSet, EvalConfig, evaluate_sets, generate_conformations,
                       group_conformations, rmsd_table, summarize)
from .encoder import ModelConfig
from .finetune import (FinetuneConfig, TaskSpec, finetune_run, load_finetuned, predict, save_finetuned,
                       with_synthetic_labels)
from .molgraph import MoleculeFormatError, read_jsonl_file, synth_dataset, write_jsonl_file
from .objectives import LOSS_NAMES
from .symmetry import cycle_notation, find_automorphisms
from .trainer import CheckpointError, TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("unimol")


class UsageError(Exception):
    pass


# -- argument parsing ----------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="JSON", help="flat JSON file of flag values; explicit flags win")
    p.add_argument("--seed", type=int, default=0, help="single source of randomness for this invocation")
    p.add_argument("--threads", type=int, default=1, help="cap on worker threads (1 = reproducibility reference)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--L", type=int, default=4, help="number of encoder blocks")
    p.add_argument("--d", type=int, default=64, help="hidden width")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unimol", description="Unified 2D/3D molecular pre-training, fine-tuning and conformation tools.")
    parser.add_argument("--version", action="version", version=f"unimol {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", help="write a deterministic synthetic molecule dataset")
    _common(p)
    p.add_argument("--out", required=True, help="output JSONL")
    p.add_argument("--count", type=int, default=100, help="number of molecules")
    p.add_argument("--min-atoms", type=int, default=2)
    p.add_argument("--max-atoms", type=int, default=12)
    p.add_argument("--symmetric-fraction", type=float, default=0.25,
                   help="share of molecules built with two identical pendant branches")
    p.add_argument("--labels", action="store_true", help="attach 'parity' and 'size' labels")
    p.add_argument("--no-coords", action="store_true", help="drop coordinates (2D-only records)")

    p = sub.add_parser("pretrain", help="pre-train the encoder on molecules with coordinates")
    _common(p)
    _model_flags(p)
    p.add_argument("--data", required=True, help="training JSONL (records need coordinates)")
    p.add_argument("--out", required=True, help="checkpoint path (best validation parameters)")
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--mask-ratio", type=float, default=0.25)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--val-fraction", type=float, default=0.05)
    p.add_argument("--losses", default=",".join(LOSS_NAMES),
                   help="comma list of enabled losses among " + ",".join(LOSS_NAMES))
    p.add_argument("--metrics", help="metrics JSONL (default: <out>.metrics.jsonl)")
    p.add_argument("--plot", help="loss-curve figure (default: <out>.loss.png)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("finetune", help="fine-tune a pre-trained checkpoint on labeled molecules")
    _common(p)
    p.add_argument("--ckpt", required=True, help="pre-training checkpoint")
    p.add_argument("--data", required=True, help="labeled JSONL")
    p.add_argument("--tasks", required=True, help="comma list of label names")
    p.add_argument("--kind", choices=("classification", "regression"), default="classification")
    p.add_argument("--out", help="fine-tuned model file (default: <ckpt>.ft)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--freeze-encoder", action="store_true", help="train only the prediction head")
    p.add_argument("--single-task", action="store_true", help="require exactly one task")

    p = sub.add_parser("predict", help="per-task predictions from a fine-tuned model, as JSONL")
    _common(p)
    p.add_argument("--ckpt", required=True, help="fine-tuned model file")
    p.add_argument("--data", required=True, help="JSONL molecules")
    p.add_argument("--out", help="output JSONL (default: standard output)")
    p.add_argument("--coord-seed", type=int, help="random-coordinate seed for 2D-only molecules "
                                                  "(default: the fine-tuning seed)")

    p = sub.add_parser("gen-conf", help="sample conformations through the 2D->3D pathway")
    _common(p)
    p.add_argument("--ckpt", required=True, help="pre-training checkpoint")
    p.add_argument("--data", required=True, help="JSONL molecules; repeated ids count as reference conformations")
    p.add_argument("--k", default="2x", help="samples per molecule: an integer, or Nx for N times the "
                                             "number of reference records of that molecule")
    p.add_argument("--out", required=True, help="output JSONL, one record per generated conformation")

    p = sub.add_parser("eval-conf", help="COV/MAT of generated against reference conformations")
    _common(p)
    p.add_argument("--gen", required=True, help="generated JSONL")
    p.add_argument("--ref", required=True, help="reference JSONL")
    p.add_argument("--delta", default="0.5", help="threshold in angstrom, or a preset: " + ", ".join(DELTA_PRESETS))
    p.add_argument("--out", help="per-molecule CSV; a report figure is written next to it")
    p.add_argument("--plot", help="report figure path (default: <out>.png when --out is given)")

    p = sub.add_parser("automorphisms", help="list the symmetry permutations of each molecule")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--cap", type=int, default=1000, help="enumeration cap; beyond it only the identity is used")

    p = sub.add_parser("align", help="optimal superposition RMSD of paired conformations")
    _common(p)
    p.add_argument("--ref", required=True, help="reference JSONL")
    p.add_argument("--pred", required=True, help="JSONL paired with --ref by line")
    p.add_argument("--use-symmetry", action="store_true", help="minimize over automorphism relabelings too")

    p = sub.add_parser("grad-check", help="finite-difference check of the encoder gradients (tiny config)")
    _common(p)
    p.add_argument("--molecules", type=int, default=10)
    p.add_argument("--max-atoms", type=int, default=6)
    return parser


def _config_path(argv: list[str]):
    for k, tok in enumerate(argv):
        if tok == "--config" and k + 1 < len(argv):
            return argv[k + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``, taking defaults from the ``--config`` JSON file if one is named."""
    path = _config_path(argv)
    command = next((tok for tok in argv if not tok.startswith("-")), None)
    subparsers = parser._subparsers._group_actions[0].choices
    if path is None or command not in subparsers:
        return parser.parse_args(argv)
    try:
        with open(path, encoding="utf-8") as fh:
            values = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    if not isinstance(values, dict):
        raise UsageError("config file must hold a flat JSON object")
    sub = subparsers[command]
    known = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in values.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known:
            raise UsageError(f"unknown key {key!r} in config file for {command}")
        action = known[dest]
        if action.type is not None and value is not None and not isinstance(value, bool):
            try:
                value = action.type(value)
            except (TypeError, ValueError):
                raise UsageError(f"bad value for {key!r} in config file: {value!r}") from None
        defaults[dest] = value
    sub.set_defaults(**defaults)
    for dest in defaults:
        known[dest].required = False
    return parser.parse_args(argv)


# -- subcommands ---------------------------------------------------------------------


def _losses(text: str) -> tuple[str, ...]:
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [n for n in names if n not in LOSS_NAMES]
    if bad or not names:
        raise UsageError(f"--losses takes a comma list of {', '.join(LOSS_NAMES)}; got {text!r}")
    return names


def cmd_gen_data(args) -> int:
    mols = synth_dataset(args.count, args.seed, (args.min_atoms, args.max_atoms), args.symmetric_fraction)
    if args.labels:
        mols = with_synthetic_labels(mols)
    if args.no_coords:
        mols = [m.with_coords(None) for m in mols]
    write_jsonl_file(args.out, mols)
    print(f"wrote {len(mols)} molecules to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    mols = read_jsonl_file(args.data)
    model_config = ModelConfig(L=args.L, d=args.d)
    train_config = TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs, mask_ratio=args.mask_ratio,
                               seed=args.seed, losses=_losses(args.losses), val_fraction=args.val_fraction)
    state = None
    if args.resume:
        state = load_checkpoint(args.resume)
        model_config = state.model_config
        state = _replace_train_config(state, train_config)
    metrics_path = Path(args.metrics or f"{args.out}.metrics.jsonl")
    plot_path = Path(args.plot or f"{args.out}.loss.png")
    last_path = Path(f"{args.out}.last")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        def record(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        result = train(train_config, model_config, mols, state=state, on_record=record, best_path=args.out)
    save_checkpoint(result.state, last_path)
    if result.best_params is None:
        save_checkpoint(result.state, args.out)
    from .plotting import plot_loss_curves

    plot_loss_curves(result.log, plot_path)
    epochs = [r for r in result.log if r["kind"] == "epoch"]
    print(f"steps={result.state.step} epochs={result.state.epoch} best={result.state.best_val:.6g}")
    if epochs:
        print(f"final train_loss={epochs[-1]['train_loss']:.6g}"
              + (f" val_loss={epochs[-1]['val_loss']:.6g}" if "val_loss" in epochs[-1] else ""))
    print(f"checkpoint={args.out} last={last_path} metrics={metrics_path} plot={plot_path}")
    return 0


def _replace_train_config(state, train_config):
    from dataclasses import replace

    return replace(state, train_config=train_config)


def cmd_finetune(args) -> int:
    state = load_checkpoint(args.ckpt)
    mols = read_jsonl_file(args.data)
    names = tuple(t.strip() for t in args.tasks.split(",") if t.strip())
    kind = "binary_classification" if args.kind == "classification" else "regression"
    spec = TaskSpec(names, kind, multitask=not args.single_task)
    cfg = FinetuneConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch, seed=args.seed,
                         freeze_encoder=args.freeze_encoder)
    result = finetune_run(state, mols, spec, cfg)
    out = args.out or f"{args.ckpt}.ft"
    save_finetuned(result.model, out)
    for name in names:
        print(json.dumps({"task": name, **result.metrics[name]}, sort_keys=True))
    print(f"model={out}", file=sys.stderr)
    return 0


def cmd_predict(args) -> int:
    model = load_finetuned(args.ckpt)
    mols = read_jsonl_file(args.data)
    preds = predict(model, mols, coord_seed=args.coord_seed)
    lines = [json.dumps({"id": m.id, **{n: float(preds[r, c]) for c, n in enumerate(model.spec.names)}})
             for r, m in enumerate(mols)]
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _sample_count(spec: str, n_ref: int) -> int:
    spec = spec.strip().lower()
    try:
        if spec.endswith("x"):
            k = int(spec[:-1] or 1) * n_ref
        else:
            k = int(spec)
    except ValueError:
        raise UsageError(f"--k takes an integer or Nx, got {spec!r}") from None
    if k < 1:
        raise UsageError("--k must give at least one sample")
    return k


def cmd_gen_conf(args) -> int:
    state = load_checkpoint(args.ckpt)
    mols = read_jsonl_file(args.data)
    first, counts = {}, {}
    for m in mols:
        first.setdefault(m.id, m)
        counts[m.id] = counts.get(m.id, 0) + 1
    out = []
    for mid, mol in first.items():
        k = _sample_count(args.k, counts[mid])
        cs = generate_conformations(state.params, state.model_config, mol, k, args.seed)
        out.extend(mol.with_coords(c).with_labels(None) for c in cs.conformations)
    write_jsonl_file(args.out, out)
    print(f"wrote {len(out)} conformations for {len(first)} molecules to {args.out}")
    return 0


def _delta(text: str) -> float:
    if text in DELTA_PRESETS:
        return DELTA_PRESETS[text]
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"--delta takes a number or one of {', '.join(DELTA_PRESETS)}") from None


def cmd_eval_conf(args) -> int:
    cfg = EvalConfig(delta=_delta(args.delta))
    gen = group_conformations(read_jsonl_file(args.gen))
    ref = group_conformations(read_jsonl_file(args.ref))
    rows = evaluate_sets(gen, ref, cfg)
    stats = summarize(rows)
    print(f"molecules={len(rows)} delta={cfg.delta:g}")
    print(f"COV mean={stats['cov_mean']:.2f} median={stats['cov_median']:.2f}")
    print(f"MAT mean={stats['mat_mean']:.4f} median={stats['mat_median']:.4f}")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["id", "n_ref", "n_gen", "cov", "mat"])
            writer.writeheader()
            for row in rows:
                writer.writerow({**row, "cov": f"{row['cov']:.4f}", "mat": f"{row['mat']:.6f}"})
    plot_path = args.plot or (f"{Path(args.out).with_suffix('')}.png" if args.out else None)
    if plot_path:
        from .plotting import plot_conformation_report

        best = {r["id"]: rmsd_table(gen[r["id"]], ref[r["id"]]).min(axis=1) for r in rows}
        plot_conformation_report(best, cfg.delta, plot_path)
        print(f"figure={plot_path}")
    return 0


def cmd_automorphisms(args) -> int:
    for mol in read_jsonl_file(args.data):
        auts = find_automorphisms(mol, cap=args.cap)
        note = " (truncated: cap exceeded, identity only)" if auts.truncated else ""
        print(f"{mol.id}\t{len(auts)}{note}")
        for perm in auts:
            print(f"  {cycle_notation(perm)}")
    return 0


def cmd_align(args) -> int:
    refs = read_jsonl_file(args.ref)
    preds = read_jsonl_file(args.pred)
    if len(refs) != len(preds):
        raise ValueError(f"--ref has {len(refs)} records but --pred has {len(preds)}")
    for ref, pred in zip(refs, preds):
        if ref.coords is None or pred.coords is None:
            raise ValueError(f"{ref.id}: both records need coordinates")
        if args.use_symmetry:
            value, perm = min_rmsd_over_aut(ref.coords, pred.coords, find_automorphisms(ref))
            print(json.dumps({"id": ref.id, "rmsd": value, "perm": cycle_notation(perm)}))
        else:
            transform, value = optimal_alignment(ref.coords, pred.coords)
            print(json.dumps({"id": ref.id, "rmsd": value, "Q": np.round(transform.Q, 12).tolist(),
                              "t": np.round(transform.t, 12).tolist()}))
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import TOLERANCE, run_grad_check

    report = run_grad_check(args.seed, args.molecules, args.max_atoms)
    for name, err in report.max_rel_error.items():
        print(f"{name}\tmax_rel_error={err:.3e}\tworst={report.worst_entry[name]}")
    if report.refined:
        print(f"re-measured at smaller steps (kink within the default step): {', '.join(report.refined)}")
    print(f"max relative error {report.overall:.3e} over {report.n_entries} entries "
          f"({report.seconds:.1f} s); {'PASS' if report.overall < TOLERANCE else 'FAIL'}")
    return 0 if report.overall < TOLERANCE else 1


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "predict": cmd_predict,
    "gen-conf": cmd_gen_conf, "eval-conf": cmd_eval_conf, "automorphisms": cmd_automorphisms,
    "align": cmd_align, "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"unimol: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("unimol: error: --threads must be >= 1", file=sys.stderr)
        return 2
    torch.set_num_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"unimol: error: {exc}", file=sys.stderr)
        return 2
    except (MoleculeFormatError, CheckpointError, ValueError, FloatingPointError, OSError) as exc:
        print(f"unimol: {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
