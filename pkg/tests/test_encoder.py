import numpy as np
import pytest
import torch

from unimol.encoder import (ModelConfig, check_params, forward, forward_batch, gradients, init_params,
                            make_batch, param_shapes, segment_softmax)
from unimol.masking import MaskPlan, make_step_plan
from unimol.molgraph import Atom, Molecule, synth_dataset


@pytest.fixture(scope="module")
def tiny():
    config = ModelConfig.tiny()
    return config, init_params(config, 3)


def test_param_shapes_table():
    config = ModelConfig(L=2, d=8, atom_vocab=17)
    shapes = param_shapes(config)
    assert shapes["atom_embed"] == (17, 8)
    assert shapes["block0.bond_ff.w1"] == (32, 8)
    assert shapes["block1.atom_mlp.w1"] == (24, 8)
    assert shapes["block1.disp_ff.w2"] == (8, 3)
    assert shapes["block0.attn_wk"] == (16, 8)
    assert shapes["atom_head.w2"] == (8, 17)
    assert not any(k.startswith("block2") for k in shapes)
    params = init_params(config, 0)
    check_params(params, config)
    assert all(t.dtype == torch.float64 for t in params.values())


def test_output_shapes(tiny):
    config, params = tiny
    mol = synth_dataset(1, 2, (5, 5))[0]
    out = forward(params, config, mol, mol.coords)
    assert out.atom_reprs.shape == (5, config.d)
    assert out.global_repr.shape == (config.d,)
    assert out.predicted_conformation.shape == (5, 3)
    assert out.atom_logits.shape == (5, config.atom_vocab)
    assert len(out.per_block_conformations) == config.L + 1


def test_init_deterministic():
    a, b = init_params(ModelConfig.tiny(), 9), init_params(ModelConfig.tiny(), 9)
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not torch.equal(a["atom_embed"], init_params(ModelConfig.tiny(), 10)["atom_embed"])


def test_forward_deterministic(tiny):
    config, params = tiny
    mol = synth_dataset(1, 4, (6, 6))[0]
    a, b = forward(params, config, mol, mol.coords), forward(params, config, mol, mol.coords)
    assert torch.equal(a.predicted_conformation, b.predicted_conformation)
    assert torch.equal(a.atom_logits, b.atom_logits)


def _permute_plan(plan: MaskPlan, perm):
    inv = {old: new for new, old in enumerate(perm)}
    return MaskPlan({inv[k] for k in plan.unmasked_atoms}, {inv[k] for k in plan.unmasked_coords},
                    plan.mask_ratio, {inv[k]: v for k, v in plan.replacements.items()})


def test_permutation_equivariance(rng):
    config = ModelConfig(L=2, d=16, atom_vocab=17)
    params = init_params(config, 1)
    for mol in synth_dataset(100, 31, (2, 10), symmetric_fraction=0.3):
        perm = rng.permutation(mol.n_atoms)
        other = mol.permuted(perm)
        plan = make_step_plan(mol, 0.3, 5, 0).masked
        a = forward(params, config, mol, mol.coords, plan)
        b = forward(params, config, other, other.coords, _permute_plan(plan, perm))
        for ta, tb in ((a.atom_reprs, b.atom_reprs), (a.predicted_conformation, b.predicted_conformation),
                       (a.atom_logits, b.atom_logits)):
            assert torch.allclose(ta[perm], tb, atol=1e-6, rtol=0)
        assert torch.allclose(a.global_repr, b.global_repr, atol=1e-6, rtol=0)


def test_displacements_centered(tiny):
    config, params = tiny
    for mol in synth_dataset(20, 5, (2, 12)):
        out = forward(params, config, mol, mol.coords)
        confs = out.per_block_conformations
        for before, after in zip(confs, confs[1:]):
            assert float((after - before).mean(dim=0).abs().max()) < 1e-10


def test_single_atom(tiny):
    config, params = tiny
    mol = Molecule("c", [Atom(6)], [], np.zeros((1, 3)))
    out = forward(params, config, mol, mol.coords)
    assert torch.isfinite(out.atom_logits).all()
    assert torch.allclose(out.predicted_conformation, torch.zeros(1, 3, dtype=torch.float64), atol=1e-12)


def test_attention_normalized(tiny):
    config, params = tiny
    mol = synth_dataset(1, 8, (9, 9))[0]
    out = forward_batch(params, config, make_batch([mol], [mol.coords], [None], config))
    src = out.batch.edge_src
    for alpha in out.attention:
        sums = torch.zeros(mol.n_atoms, dtype=torch.float64).index_add(0, src, alpha)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-12)
        assert (alpha >= 0).all()


def test_segment_softmax_large_scores():
    scores = torch.tensor([1000.0, 1001.0, -5.0], dtype=torch.float64)
    out = segment_softmax(scores, torch.tensor([0, 0, 1]), 2)
    assert torch.allclose(out, torch.tensor([1 / (1 + np.e), np.e / (1 + np.e), 1.0], dtype=torch.float64))


def test_batch_equals_separate(tiny):
    config, params = tiny
    mols = synth_dataset(4, 6, (3, 8))
    out = forward_batch(params, config, make_batch(mols, [m.coords for m in mols], [None] * 4, config))
    for k, mol in enumerate(mols):
        single = forward(params, config, mol, mol.coords)
        assert torch.allclose(out.molecule(k).predicted_conformation, single.predicted_conformation, atol=1e-12)


def test_zero_head_blocks_type_gradients(tiny):
    config, params = tiny
    params = dict(params)
    params["atom_head.w2"] = torch.zeros_like(params["atom_head.w2"])
    mols = synth_dataset(3, 2, (3, 6))
    items = [(m, m.coords, make_step_plan(m, 0.5, 0, 0)) for m in mols]
    grads = gradients(params, config, items, loss="3d2d")
    for name, g in grads.items():
        if name.startswith("block") or name.endswith("embed") or name.startswith("atom_head.w1"):
            assert float(g.abs().max()) == 0.0, name
    assert float(grads["atom_head.b2"].abs().max()) > 0


def test_gradient_linearity(tiny):
    config, params = tiny
    mols = synth_dataset(3, 2, (3, 6))
    items = [(m, m.coords, make_step_plan(m, 0.5, 0, 0)) for m in mols]
    total = gradients(params, config, items, loss="total", weights={"atom": 2.0, "coord": 0.5})
    parts = {name: gradients(params, config, items, loss=name) for name in ("atom", "coord", "2d3d", "3d2d")}
    for k in total:
        combo = 2.0 * parts["atom"][k] + 0.5 * parts["coord"][k] + parts["2d3d"][k] + parts["3d2d"][k]
        assert torch.allclose(total[k], combo, atol=1e-10)


def test_vocabulary_and_shape_errors(tiny):
    config, params = tiny
    heavy = Molecule("i", [Atom(53)], [], np.zeros((1, 3)))
    with pytest.raises(ValueError, match="vocabulary"):
        forward(params, config, heavy, heavy.coords)
    mol = synth_dataset(1, 0, (3, 3))[0]
    with pytest.raises(ValueError):
        forward(params, config, mol, np.zeros((4, 3)))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(L=0)
    assert (ModelConfig.large().L, ModelConfig.large().d) == (12, 256)
