import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from unimol.molgraph import (Atom, Bond, BondOrder, Molecule, MoleculeFormatError, parse_jsonl,
                             random_coordinates, synth_dataset, write_jsonl)
from unimol.symmetry import find_automorphisms

WATER = ('{"id": "water", "atoms": [{"z": 8}, {"z": 1}, {"z": 1}], '
         '"bonds": [[0, 1, "single"], [0, 2, "single"]], '
         '"coords": [[0, 0, 0], [0.96, 0, 0], [-0.24, 0.93, 0]]}')


def test_empty_stream():
    assert parse_jsonl("") == []
    assert write_jsonl([]) == b""


def test_water_record():
    (mol,) = parse_jsonl(WATER)
    assert mol.n_atoms == 3 and len(mol.bonds) == 2
    assert mol.coords.shape == (3, 3)
    assert mol.labels is None
    assert list(mol.atomic_numbers) == [8, 1, 1]


def test_blank_lines_and_bytes():
    mols = parse_jsonl((WATER + "\n\n" + WATER.replace("water", "w2") + "\n").encode())
    assert [m.id for m in mols] == ["water", "w2"]


def test_bad_index_names_line_and_index():
    bad = '{"id": "x", "atoms": [{"z": 6}, {"z": 6}, {"z": 8}], "bonds": [[0, 5, "single"]]}'
    with pytest.raises(MoleculeFormatError) as err:
        parse_jsonl(WATER + "\n" + bad)
    assert err.value.line == 2
    assert "5" in str(err.value)
    with pytest.raises(MoleculeFormatError) as err:
        parse_jsonl(bad)
    assert err.value.line == 1 and "line 1" in str(err.value)


@pytest.mark.parametrize("line,fragment", [
    ("{not json", "malformed JSON"),
    ('{"id": "x", "atoms": [{"z": 6}, {"z": 6}], "bonds": [[0, 1, "single"], [1, 0, "double"]]}', "duplicate"),
    ('{"id": "x", "atoms": [{"z": 6}, {"z": 6}], "bonds": [], "coords": [[0, 0, 0]]}', "rows"),
    ('{"id": "x", "atoms": [{"z": 6}], "bonds": [[0, 0, "single"]]}', ""),
    ('{"id": "x", "atoms": [{"z": 6}, {"z": 6}], "bonds": [[0, 1, "quintuple"]]}', "bond order"),
    ('{"atoms": [], "bonds": []}', "id"),
])
def test_format_errors(line, fragment):
    with pytest.raises(MoleculeFormatError) as err:
        parse_jsonl(line)
    assert fragment in str(err.value)


def test_roundtrip_synthetic_50():
    mols = synth_dataset(50, 3)
    assert parse_jsonl(write_jsonl(mols)) == mols


def test_optional_fields_omitted():
    mol = Molecule("m", [Atom(6), Atom(8)], [Bond(0, 1, BondOrder.DOUBLE)])
    rec = json.loads(write_jsonl([mol]))
    assert "coords" not in rec and "labels" not in rec
    labeled = mol.with_labels({"a": 1.0, "b": None})
    back = parse_jsonl(write_jsonl([labeled]))[0]
    assert back.labels == {"a": 1.0, "b": None}
    assert back == labeled


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**40))
def test_roundtrip_property(count, seed):
    mols = synth_dataset(min(count, 5), seed, (2, 9))
    assert parse_jsonl(io.StringIO(write_jsonl(mols).decode())) == mols


def test_coords_are_read_only():
    (mol,) = parse_jsonl(WATER)
    with pytest.raises(ValueError):
        mol.coords[0, 0] = 1.0


def test_random_coordinates_contract():
    a = random_coordinates(5, 7)
    assert np.array_equal(a, random_coordinates(5, 7))
    assert not np.array_equal(a, random_coordinates(5, 8))
    with pytest.raises(ValueError):
        random_coordinates(0, 1)


def test_random_coordinates_distribution():
    x = random_coordinates(100_000 // 3 + 1, 99).ravel()[:100_000]
    assert abs(x.mean()) < 0.02
    assert np.abs(x).max() <= 1.0
    assert stats.kstest(x, stats.uniform(loc=-1, scale=2).cdf).pvalue > 0.01


def test_synth_smallest_case():
    (mol,) = synth_dataset(1, 0, (2, 2))
    assert mol.n_atoms == 2 and len(mol.bonds) == 1


def test_synth_deterministic_and_valid():
    a, b = synth_dataset(100, 11), synth_dataset(100, 11)
    assert a == b
    for mol in a:
        assert mol.is_connected()
        degrees = np.zeros(mol.n_atoms, dtype=int)
        for bond in mol.bonds:
            degrees[bond.i] += 1
            degrees[bond.j] += 1
        assert degrees.max() <= 4
        assert set(mol.atomic_numbers) <= {6, 7, 8, 9, 16}
        assert np.all(np.isfinite(mol.coords))


def test_synth_symmetric_share():
    mols = synth_dataset(1000, 5)
    assert sum(len(find_automorphisms(m)) >= 2 for m in mols) >= 100


@pytest.mark.parametrize("bad", [(1, 3), (5, 4), (2, 99)])
def test_synth_degenerate_range(bad):
    with pytest.raises(ValueError):
        synth_dataset(3, 0, bad)


def test_permuted_molecule():
    mol = synth_dataset(1, 2, (6, 6))[0]
    perm = [5, 3, 1, 0, 2, 4]
    p = mol.permuted(perm)
    assert np.array_equal(p.coords, mol.coords[perm])
    assert [a.atomic_number for a in p.atoms] == [mol.atoms[k].atomic_number for k in perm]
    assert len(p.bonds) == len(mol.bonds)
