import numpy as np
import pytest

from unimol.masking import MaskPlan, make_mask_plan, make_step_plan
from unimol.molgraph import synth_dataset


@pytest.fixture
def mol10():
    return synth_dataset(1, 8, (10, 10))[0]


def test_deterministic(mol10):
    assert make_mask_plan(mol10, 0.25, 3, 7) == make_mask_plan(mol10, 0.25, 3, 7)
    plans = {tuple(sorted(make_mask_plan(mol10, 0.25, 3, s).unmasked_atoms)) for s in range(20)}
    assert len(plans) > 1


def test_vanishing_probability(mol10):
    for step in range(10_000):
        plan = make_mask_plan(mol10, 1e-9, 0, step)
        assert not plan.masked_atoms(10) and not plan.masked_coords(10)


def test_mask_rate():
    mols = synth_dataset(200, 1, (2, 12))
    masked = total = 0
    step = 0
    while total < 100_000:
        for mol in mols:
            plan = make_mask_plan(mol, 0.25, 5, step)
            masked += len(plan.masked_atoms(mol.n_atoms))
            total += mol.n_atoms
        step += 1
    assert abs(masked / total - 0.25) < 0.01


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_ratio_bounds(mol10, p):
    with pytest.raises(ValueError):
        make_mask_plan(mol10, p, 0)


def test_replacements_cover_masked_rows(mol10):
    for step in range(30):
        plan = make_mask_plan(mol10, 0.4, 2, step)
        plan.validate(10)
        conf = plan.apply_coords(mol10.coords)
        for k in plan.masked_coords(10):
            assert np.all(np.abs(conf[k]) <= 1.0)
        for k in plan.unmasked_coords:
            assert np.array_equal(conf[k], mol10.coords[k])


def test_step_plan_passes(mol10):
    sp = make_step_plan(mol10, 0.25, 1, 4)
    assert sp.atoms_masked.masked_atoms(10) == list(range(10))
    assert not sp.atoms_masked.masked_coords(10)
    assert sp.coords_random.masked_coords(10) == list(range(10))
    assert not sp.coords_random.masked_atoms(10)


def test_validate_rejects_foreign_indices():
    with pytest.raises(ValueError):
        MaskPlan(frozenset({0, 5}), frozenset({0, 1})).validate(3)
