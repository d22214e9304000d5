import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from unimol.molgraph import Atom, Bond, BondOrder, Molecule, synth_dataset
from unimol.symmetry import (AutomorphismSet, apply_permutation, brute_force_automorphisms, compose,
                             cycle_notation, find_automorphisms, inverse, is_automorphism)

from conftest import path_molecule


def ring(n, z=6):
    return Molecule("ring", [Atom(z)] * n, [Bond(k, (k + 1) % n, BondOrder.AROMATIC) for k in range(n)])


def test_oco_vs_ocn():
    assert find_automorphisms(path_molecule([8, 6, 7])).perms == ((0, 1, 2),)
    auts = find_automorphisms(path_molecule([8, 6, 8]))
    assert auts.perms == ((0, 1, 2), (2, 1, 0))
    assert auts == brute_force_automorphisms(path_molecule([8, 6, 8]))


def test_bond_orders_break_symmetry():
    mol = path_molecule([8, 6, 8], [BondOrder.SINGLE, BondOrder.DOUBLE])
    assert len(find_automorphisms(mol)) == 1


def test_six_ring_dihedral():
    auts = find_automorphisms(ring(6))
    assert len(auts) == 12
    assert auts == brute_force_automorphisms(ring(6))


def test_two_independent_symmetric_substituents():
    # C1 carries two O, C2 carries two N, C1-C2 linked: the mappings are the 4 swaps
    atoms = [Atom(6), Atom(6), Atom(8), Atom(8), Atom(7), Atom(7)]
    bonds = [Bond(0, 1, BondOrder.SINGLE), Bond(0, 2, BondOrder.SINGLE), Bond(0, 3, BondOrder.SINGLE),
             Bond(1, 4, BondOrder.SINGLE), Bond(1, 5, BondOrder.SINGLE)]
    auts = find_automorphisms(Molecule("fig", atoms, bonds))
    assert set(auts) == {(0, 1, 2, 3, 4, 5), (0, 1, 3, 2, 4, 5), (0, 1, 2, 3, 5, 4), (0, 1, 3, 2, 5, 4)}


def test_brute_force_small_cases():
    assert brute_force_automorphisms(Molecule("a", [Atom(6)], [])).perms == ((0,),)
    two = Molecule("b", [Atom(6), Atom(6)], [Bond(0, 1, BondOrder.SINGLE)])
    assert len(brute_force_automorphisms(two)) == 2
    with pytest.raises(ValueError):
        brute_force_automorphisms(ring(9))


def test_equivalence_on_200_random_molecules():
    mols = synth_dataset(200, 17, (2, 7), symmetric_fraction=0.5)
    for mol in mols:
        assert find_automorphisms(mol) == brute_force_automorphisms(mol), mol.id


def _check_group(auts, mol):
    n = mol.n_atoms
    members = set(auts)
    assert tuple(range(n)) in members
    for a in auts:
        assert is_automorphism(mol, a)
        assert inverse(a) in members
    for a, b in itertools.product(auts, repeat=2):
        assert compose(a, b) in members


def test_group_axioms():
    for mol in synth_dataset(60, 23, (3, 10), symmetric_fraction=0.8):
        auts = find_automorphisms(mol)
        if len(auts) <= 48 and not auts.truncated:
            _check_group(auts, mol)
    _check_group(find_automorphisms(ring(6)), ring(6))


def test_truncation_falls_back_to_identity():
    star = Molecule("star", [Atom(6)] + [Atom(1)] * 4, [Bond(0, k, BondOrder.SINGLE) for k in range(1, 5)])
    assert len(find_automorphisms(star)) == 24
    capped = find_automorphisms(star, cap=10)
    assert capped.truncated and capped.perms == ((0, 1, 2, 3, 4),)


def test_enumeration_sorted():
    auts = find_automorphisms(ring(8))
    assert list(auts.perms) == sorted(auts.perms)


def test_apply_permutation(rng):
    R = rng.normal(size=(2, 3))
    assert np.array_equal(apply_permutation((0, 1), R), R)
    assert np.array_equal(apply_permutation((1, 0), R), R[::-1])
    t = torch.as_tensor(R)
    assert torch.equal(apply_permutation((1, 0), t), t.flip(0))
    with pytest.raises(ValueError):
        apply_permutation((0, 1, 2), R)


@settings(max_examples=50, deadline=None)
@given(st.permutations(range(6)), st.permutations(range(6)))
def test_composition_convention(s, t):
    R = np.arange(18.0).reshape(6, 3)
    lhs = apply_permutation(s, apply_permutation(t, R))
    explicit = np.array([R[t[s[j]]] for j in range(6)])
    assert np.array_equal(lhs, explicit)
    assert np.array_equal(lhs, apply_permutation(compose(t, s), R))


def test_cycle_notation():
    assert cycle_notation((0, 1, 2)) == "()"
    assert cycle_notation((2, 1, 0)) == "(0 2)"
    assert cycle_notation((1, 2, 0, 4, 3)) == "(0 1 2)(3 4)"


def test_contains_and_identity():
    auts = AutomorphismSet.identity(3)
    assert [0, 1, 2] in auts and (2, 1, 0) not in auts
