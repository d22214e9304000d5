"""Molecular graph data model, JSONL dataset I/O and synthetic molecules."""

from __future__ import annotations

import io
import json
import zlib
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import IO, Iterable, Optional

import networkx as nx
import numpy as np

SYNTH_ELEMENTS = (6, 7, 8, 9, 16)
MAX_VALENCE = 4
BOND_LENGTH = 1.5


class MoleculeFormatError(ValueError):
    """Raised when a dataset line does not describe a valid molecule."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class BondOrder(IntEnum):
    SINGLE = 0
    DOUBLE = 1
    TRIPLE = 2
    AROMATIC = 3

    @classmethod
    def parse(cls, name: str) -> "BondOrder":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown bond order {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class Atom:
    atomic_number: int
    formal_charge: int = 0

    def __post_init__(self):
        if not 1 <= self.atomic_number <= 118:
            raise ValueError(f"atomic number {self.atomic_number} outside 1..118")


@dataclass(frozen=True)
class Bond:
    i: int
    j: int
    order: BondOrder = BondOrder.SINGLE

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError(f"self-bond on atom {self.i}")


def _freeze(coords) -> np.ndarray:
    arr = np.array(coords, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"coordinates must be an (n, 3) matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("coordinates contain non-finite entries")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Molecule:
    """A 2D molecular graph with an optional 3D conformation.

    ``coords`` is an ``(n_atoms, 3)`` float64 array in angstrom, stored
    read-only.
    """

    id: str
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    coords: Optional[np.ndarray] = None
    labels: Optional[dict[str, Optional[float]]] = None

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        object.__setattr__(self, "bonds", tuple(self.bonds))
        n = len(self.atoms)
        seen = set()
        for b in self.bonds:
            for k in (b.i, b.j):
                if not 0 <= k < n:
                    raise ValueError(f"bond ({b.i}, {b.j}) references atom index {k} outside 0..{n - 1}")
            key = (min(b.i, b.j), max(b.i, b.j))
            if key in seen:
                raise ValueError(f"duplicate bond between atoms {key[0]} and {key[1]}")
            seen.add(key)
        if self.coords is not None:
            coords = _freeze(self.coords)
            if coords.shape[0] != n:
                raise ValueError(f"coords has {coords.shape[0]} rows for {n} atoms")
            object.__setattr__(self, "coords", coords)
        if self.labels is not None:
            object.__setattr__(self, "labels", dict(self.labels))

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def atomic_numbers(self) -> np.ndarray:
        return np.array([a.atomic_number for a in self.atoms], dtype=np.int64)

    @property
    def formal_charges(self) -> np.ndarray:
        return np.array([a.formal_charge for a in self.atoms], dtype=np.int64)

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.atoms]
        for b in self.bonds:
            adj[b.i].append(b.j)
            adj[b.j].append(b.i)
        return adj

    def is_connected(self) -> bool:
        if self.n_atoms == 0:
            return True
        adj = self.neighbors()
        seen = {0}
        queue = deque([0])
        while queue:
            k = queue.popleft()
            for m in adj[k]:
                if m not in seen:
                    seen.add(m)
                    queue.append(m)
        return len(seen) == self.n_atoms

    def with_coords(self, coords: Optional[np.ndarray]) -> "Molecule":
        return Molecule(self.id, self.atoms, self.bonds, coords, self.labels)

    def with_labels(self, labels: Optional[dict]) -> "Molecule":
        return Molecule(self.id, self.atoms, self.bonds, self.coords, labels)

    def permuted(self, perm) -> "Molecule":
        """Relabel atoms so that new atom ``k`` is old atom ``perm[k]``."""
        perm = [int(p) for p in perm]
        inverse = {old: new for new, old in enumerate(perm)}
        atoms = [self.atoms[p] for p in perm]
        bonds = [Bond(inverse[b.i], inverse[b.j], b.order) for b in self.bonds]
        coords = None if self.coords is None else self.coords[perm]
        return Molecule(self.id, atoms, bonds, coords, self.labels)

    def __eq__(self, other):
        if not isinstance(other, Molecule):
            return NotImplemented
        if (self.id, self.atoms, self.bonds, self.labels) != (other.id, other.atoms, other.bonds, other.labels):
            return False
        if (self.coords is None) != (other.coords is None):
            return False
        return self.coords is None or np.array_equal(self.coords, other.coords)

    __hash__ = None


# -- JSONL ---------------------------------------------------------------------------


def _molecule_from_record(rec: dict) -> Molecule:
    if not isinstance(rec, dict):
        raise ValueError("record is not a JSON object")
    for key in ("id", "atoms", "bonds"):
        if key not in rec:
            raise ValueError(f"missing required key {key!r}")
    atoms = []
    for a in rec["atoms"]:
        if not isinstance(a, dict) or "z" not in a:
            raise ValueError(f"malformed atom entry {a!r}")
        atoms.append(Atom(int(a["z"]), int(a.get("q", 0))))
    bonds = []
    for b in rec["bonds"]:
        if not isinstance(b, (list, tuple)) or len(b) != 3:
            raise ValueError(f"malformed bond entry {b!r}")
        bonds.append(Bond(int(b[0]), int(b[1]), BondOrder.parse(b[2])))
    labels = rec.get("labels")
    if labels is not None:
        labels = {str(k): (None if v is None else float(v)) for k, v in labels.items()}
    return Molecule(str(rec["id"]), atoms, bonds, rec.get("coords"), labels)


def parse_jsonl(stream: IO | bytes | str | Iterable[str]) -> list[Molecule]:
    """Parse one molecule per line. Blank lines are skipped.

    Raises :class:`MoleculeFormatError` carrying the 1-based line number.
    """
    if isinstance(stream, bytes):
        stream = io.StringIO(stream.decode("utf-8"))
    elif isinstance(stream, str):
        stream = io.StringIO(stream)
    molecules = []
    for lineno, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MoleculeFormatError(f"malformed JSON ({exc.msg})", lineno) from None
        try:
            molecules.append(_molecule_from_record(rec))
        except (ValueError, TypeError) as exc:
            raise MoleculeFormatError(str(exc), lineno) from None
    return molecules


def molecule_to_record(mol: Molecule) -> dict:
    rec: dict = {
        "id": mol.id,
        "atoms": [{"z": a.atomic_number, "q": a.formal_charge} for a in mol.atoms],
        "bonds": [[b.i, b.j, b.order.label] for b in mol.bonds],
    }
    if mol.coords is not None:
        rec["coords"] = mol.coords.tolist()
    if mol.labels is not None:
        rec["labels"] = dict(mol.labels)
    return rec


def write_jsonl(molecules: Iterable[Molecule]) -> bytes:
    lines = [json.dumps(molecule_to_record(m), separators=(",", ":")) + "\n" for m in molecules]
    return "".join(lines).encode("utf-8")


def read_jsonl_file(path) -> list[Molecule]:
    with open(path, encoding="utf-8") as fh:
        return parse_jsonl(fh)


def write_jsonl_file(path, molecules: Iterable[Molecule]) -> None:
    with open(path, "wb") as fh:
        fh.write(write_jsonl(molecules))


# -- randomness ----------------------------------------------------------------------


def stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def random_coordinates(n_atoms: int, seed: int) -> np.ndarray:
    """Uniform [-1, 1] coordinates, deterministic per ``(n_atoms, seed)``."""
    if n_atoms < 1:
        raise ValueError("n_atoms must be >= 1")
    rng = np.random.default_rng(np.uint64(seed % 2**64))
    return rng.uniform(-1.0, 1.0, size=(n_atoms, 3))


# -- synthetic molecules -------------------------------------------------------------


def spring_embedding(n_atoms: int, bonds: Iterable[Bond], seed: int) -> np.ndarray:
    """Deterministic 3D force-directed layout scaled to a mean bond length of 1.5 A."""
    bonds = list(bonds)
    g = nx.Graph()
    g.add_nodes_from(range(n_atoms))
    g.add_edges_from((b.i, b.j) for b in bonds)
    pos = nx.spring_layout(g, dim=3, seed=seed % 2**32, iterations=200)
    xyz = np.array([pos[k] for k in range(n_atoms)], dtype=np.float64)
    xyz -= xyz.mean(axis=0)
    if bonds:
        mean_len = np.mean([np.linalg.norm(xyz[b.i] - xyz[b.j]) for b in bonds])
        if mean_len > 0:
            xyz *= BOND_LENGTH / mean_len
    return xyz


def _random_tree(n: int, rng: np.random.Generator, root_reserve: int = 0) -> list[tuple[int, int]]:
    """Random tree on ``n`` atoms; atom 0 keeps ``root_reserve`` valences free."""
    degree = [0] * n
    degree[0] = root_reserve
    edges = []
    for k in range(1, n):
        open_atoms = [m for m in range(k) if degree[m] < MAX_VALENCE]
        parent = int(rng.choice(open_atoms))
        edges.append((parent, k))
        degree[parent] += 1
        degree[k] += 1
    return edges


def _add_ring_closure(n: int, edges: list[tuple[int, int]], rng: np.random.Generator) -> None:
    degree = np.zeros(n, dtype=int)
    existing = set()
    for i, j in edges:
        degree[i] += 1
        degree[j] += 1
        existing.add((min(i, j), max(i, j)))
    candidates = [
        (i, j)
        for i in range(n)
        for j in range(i + 1, n)
        if (i, j) not in existing and degree[i] < MAX_VALENCE and degree[j] < MAX_VALENCE
    ]
    if candidates:
        edges.append(candidates[int(rng.integers(len(candidates)))])


def _symmetric_molecule(n: int, rng: np.random.Generator):
    """A core with two identical pendant branches hung off the same atom."""
    branch = int(rng.integers(1, max(2, (n - 1) // 2 + 1)))
    branch = min(branch, (n - 1) // 2)
    core_size = n - 2 * branch
    core = _random_tree(core_size, rng)
    degree = [0] * core_size
    for i, j in core:
        degree[i] += 1
        degree[j] += 1
    hubs = [k for k in range(core_size) if degree[k] <= MAX_VALENCE - 2]
    hub = int(rng.choice(hubs))
    branch_edges = _random_tree(branch, rng, root_reserve=1)
    branch_z = [int(rng.choice(SYNTH_ELEMENTS)) for _ in range(branch)]
    branch_orders = [BondOrder.SINGLE if rng.random() < 0.8 else BondOrder.DOUBLE for _ in branch_edges]
    z = [int(rng.choice(SYNTH_ELEMENTS)) for _ in range(core_size)]
    edges = [(i, j, BondOrder.SINGLE if rng.random() < 0.8 else BondOrder.DOUBLE) for i, j in core]
    for copy in range(2):
        offset = core_size + copy * branch
        z.extend(branch_z)
        edges.append((hub, offset, BondOrder.SINGLE))
        edges.extend((offset + i, offset + j, o) for (i, j), o in zip(branch_edges, branch_orders))
    return z, edges


def _plain_molecule(n: int, rng: np.random.Generator):
    tree = _random_tree(n, rng)
    if n >= 5 and rng.random() < 0.3:
        _add_ring_closure(n, tree, rng)
    z = [int(rng.choice(SYNTH_ELEMENTS)) for _ in range(n)]
    orders = list(BondOrder)
    weights = np.array([0.7, 0.15, 0.05, 0.1])
    edges = [(i, j, orders[int(rng.choice(4, p=weights))]) for i, j in tree]
    return z, edges


def synth_dataset(count: int, seed: int, size_range: tuple[int, int] = (2, 12),
                  symmetric_fraction: float = 0.25) -> list[Molecule]:
    """Deterministic connected random molecules with spring-layout coordinates.

    Roughly ``symmetric_fraction`` of the molecules are built with two identical
    pendant branches so that their automorphism group is nontrivial.
    """
    lo, hi = size_range
    if count < 1:
        raise ValueError("count must be >= 1")
    if not (2 <= lo <= hi <= 30):
        raise ValueError(f"size range {size_range} must satisfy 2 <= lo <= hi <= 30")
    rng = np.random.default_rng([seed, 0x5EED])
    molecules = []
    for k in range(count):
        n = int(rng.integers(lo, hi + 1))
        if n >= 3 and rng.random() < symmetric_fraction:
            z, edges = _symmetric_molecule(n, rng)
        else:
            z, edges = _plain_molecule(n, rng)
        atoms = [Atom(zz) for zz in z]
        bonds = [Bond(i, j, o) for i, j, o in edges]
        coords = spring_embedding(n, bonds, seed=int(rng.integers(2**31)))
        molecules.append(Molecule(f"synth-{seed}-{k}", atoms, bonds, coords))
    return molecules
