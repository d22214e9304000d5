import json
import subprocess
import sys

import pytest

from unimol.cli import main
from unimol.molgraph import read_jsonl_file


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset(workdir):
    path = workdir / "data.jsonl"
    assert main(["gen-data", "--out", str(path), "--count", "12", "--max-atoms", "7", "--labels", "--seed", "3"]) == 0
    return path


@pytest.fixture(scope="module")
def checkpoint(workdir, dataset):
    out = workdir / "model.ck"
    argv = ["pretrain", "--data", str(dataset), "--out", str(out), "--L", "2", "--d", "8", "--epochs", "2",
            "--batch", "4", "--lr", "1e-3"]
    assert main(argv) == 0
    return out


def test_help_and_version(capsys):
    assert main(["--help"]) == 0
    assert "pretrain" in capsys.readouterr().out
    assert main(["--version"]) == 0


def test_unknown_command_is_usage_error():
    assert main(["frobnicate"]) == 2
    assert main(["pretrain"]) == 2   # required flags missing


def test_gen_data(dataset):
    mols = read_jsonl_file(dataset)
    assert len(mols) == 12 and all(m.labels and "parity" in m.labels for m in mols)


def test_pretrain_outputs(checkpoint, capsys):
    for suffix in ("", ".last", ".metrics.jsonl", ".loss.png"):
        assert (checkpoint.parent / (checkpoint.name + suffix)).exists(), suffix
    lines = (checkpoint.parent / (checkpoint.name + ".metrics.jsonl")).read_text().splitlines()
    kinds = [json.loads(line)["kind"] for line in lines]
    assert kinds.count("epoch") == 2


def test_pretrain_resume(workdir, dataset, checkpoint, capsys):
    out = workdir / "resumed.ck"
    argv = ["pretrain", "--data", str(dataset), "--out", str(out), "--epochs", "3", "--batch", "4", "--lr", "1e-3",
            "--resume", f"{checkpoint}.last"]
    assert main(argv) == 0
    assert "epochs=3" in capsys.readouterr().out


def test_ablation_switch(workdir, dataset, capsys):
    out = workdir / "atom_only.ck"
    argv = ["pretrain", "--data", str(dataset), "--out", str(out), "--L", "2", "--d", "8", "--epochs", "1",
            "--losses", "atom"]
    assert main(argv) == 0
    rec = json.loads((workdir / "atom_only.ck.metrics.jsonl").read_text().splitlines()[0])
    assert rec["l_coord"] == rec["l_2d3d"] == rec["l_3d2d"] == 0.0
    assert main(argv[:-1] + ["atom,bogus"]) == 2


def test_config_file(workdir, dataset, capsys):
    cfg = workdir / "cfg.json"
    out = workdir / "cfg.ck"
    cfg.write_text(json.dumps({"data": str(dataset), "out": str(out), "L": 2, "d": 8, "epochs": 1, "lr": 0.5}))
    assert main(["pretrain", "--config", str(cfg), "--lr", "1e-3"]) == 0
    header = out.read_bytes()
    assert b'"lr": 0.001' in header
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert main(["pretrain", "--config", str(cfg)]) == 2


def test_finetune_and_predict(workdir, dataset, checkpoint, capsys):
    assert main(["finetune", "--ckpt", str(checkpoint), "--data", str(dataset), "--tasks", "parity",
                 "--epochs", "3"]) == 0
    metrics = json.loads(capsys.readouterr().out.splitlines()[0])
    assert metrics["task"] == "parity" and 0.0 <= metrics["roc_auc"] <= 1.0
    assert main(["predict", "--ckpt", f"{checkpoint}.ft", "--data", str(dataset)]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert len(rows) == 12 and all(0.0 <= r["parity"] <= 1.0 for r in rows)
    assert main(["finetune", "--ckpt", str(checkpoint), "--data", str(dataset), "--tasks", "size",
                 "--epochs", "1"]) == 1     # size is not a 0/1 label
    assert main(["finetune", "--ckpt", str(checkpoint), "--data", str(dataset), "--tasks", "size",
                 "--kind", "regression", "--epochs", "1", "--out", str(workdir / "r.ft")]) == 0


def test_gen_and_eval_conf(workdir, dataset, checkpoint, capsys):
    gen = workdir / "gen.jsonl"
    assert main(["gen-conf", "--ckpt", str(checkpoint), "--data", str(dataset), "--k", "2x", "--out", str(gen)]) == 0
    assert len(read_jsonl_file(gen)) == 24
    capsys.readouterr()
    assert main(["eval-conf", "--gen", str(gen), "--ref", str(dataset), "--delta", "drugs",
                 "--out", str(workdir / "eval.csv")]) == 0
    out = capsys.readouterr().out
    assert "COV mean=" in out and "MAT mean=" in out
    assert (workdir / "eval.png").exists()
    assert (workdir / "eval.csv").read_text().startswith("id,n_ref,n_gen,cov,mat")
    assert main(["eval-conf", "--gen", str(dataset), "--ref", str(dataset)]) == 0
    assert "COV mean=100.00" in capsys.readouterr().out
    assert main(["eval-conf", "--gen", str(gen), "--ref", str(dataset), "--delta", "wide"]) == 2


def test_automorphisms(workdir, capsys):
    path = workdir / "oco.jsonl"
    path.write_text(json.dumps({"id": "oco", "atoms": [{"z": 8}, {"z": 6}, {"z": 8}],
                                "bonds": [[0, 1, "double"], [1, 2, "double"]]}) + "\n")
    assert main(["automorphisms", "--data", str(path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "oco\t2" and "(0 2)" in out[2]


def test_align(dataset, capsys):
    assert main(["align", "--ref", str(dataset), "--pred", str(dataset)]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert all(r["rmsd"] < 1e-8 for r in rows)
    assert main(["align", "--ref", str(dataset), "--pred", str(dataset), "--use-symmetry"]) == 0


def test_bad_input_exit_code(workdir, capsys):
    bad = workdir / "bad.jsonl"
    bad.write_text("{not json\n")
    assert main(["automorphisms", "--data", str(bad)]) == 1
    assert main(["automorphisms", "--data", str(workdir / "missing.jsonl")]) == 1
    assert main(["finetune", "--ckpt", str(bad), "--data", str(bad), "--tasks", "x"]) == 1


def test_grad_check_small(capsys):
    assert main(["grad-check", "--molecules", "2", "--max-atoms", "3", "--seed", "1"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "unimol.cli", "gen-data", "--out", str(tmp_path / "x.jsonl"),
                           "--count", "2"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
