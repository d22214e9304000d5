"""Label-preserving graph automorphisms of molecules.

The automorphism group is found by backtracking over candidate images,
pruned by iterated color refinement. Atoms may only map onto atoms with the
same refined color, and every partial assignment must preserve adjacency and
bond order with all previously assigned atoms.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .molgraph import Molecule

Permutation = tuple[int, ...]

DEFAULT_CAP = 1000
BRUTE_FORCE_LIMIT = 8


@dataclass(frozen=True)
class AutomorphismSet:
    perms: tuple[Permutation, ...]
    truncated: bool = False

    def __len__(self):
        return len(self.perms)

    def __iter__(self):
        return iter(self.perms)

    def __contains__(self, perm):
        return tuple(int(k) for k in perm) in self.perms

    @classmethod
    def identity(cls, n_atoms: int, truncated: bool = False) -> "AutomorphismSet":
        return cls((tuple(range(n_atoms)),), truncated)


def _bond_table(mol: Molecule) -> dict[tuple[int, int], int]:
    table = {}
    for b in mol.bonds:
        table[(b.i, b.j)] = int(b.order)
        table[(b.j, b.i)] = int(b.order)
    return table


def refine_colors(mol: Molecule) -> list[int]:
    """Iterated color refinement seeded with atom attributes.

    Each round recolors an atom by its current color and the multiset of
    ``(neighbor color, bond order)`` pairs; stops when the partition is stable.
    Colors are canonical integers, so equal colors in two isomorphic graphs
    mean the same thing.
    """
    n = mol.n_atoms
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for b in mol.bonds:
        adj[b.i].append((b.j, int(b.order)))
        adj[b.j].append((b.i, int(b.order)))
    signatures = [(a.atomic_number, a.formal_charge) for a in mol.atoms]
    palette = {s: c for c, s in enumerate(sorted(set(signatures)))}
    colors = [palette[s] for s in signatures]
    while True:
        signatures = [
            (colors[k], tuple(sorted((colors[m], order) for m, order in adj[k])))
            for k in range(n)
        ]
        palette = {s: c for c, s in enumerate(sorted(set(signatures)))}
        refined = [palette[s] for s in signatures]
        if len(set(refined)) == len(set(colors)):
            return refined
        colors = refined


def _search_order(mol: Molecule, colors: list[int]) -> list[int]:
    """Visit atoms breadth-first, starting each component from its rarest color."""
    n = mol.n_atoms
    adj = mol.neighbors()
    counts = np.bincount(colors) if n else np.zeros(0, dtype=int)
    order: list[int] = []
    seen = [False] * n
    for start in sorted(range(n), key=lambda k: (counts[colors[k]], k)):
        if seen[start]:
            continue
        seen[start] = True
        queue = [start]
        while queue:
            k = queue.pop(0)
            order.append(k)
            for m in sorted(adj[k], key=lambda m: (counts[colors[m]], m)):
                if not seen[m]:
                    seen[m] = True
                    queue.append(m)
    return order


class _CapExceeded(Exception):
    pass


def find_automorphisms(mol: Molecule, cap: int = DEFAULT_CAP) -> AutomorphismSet:
    """All label-, adjacency- and bond-order-preserving atom permutations.

    If more than ``cap`` automorphisms exist, returns the identity alone with
    ``truncated=True``. Permutations are sorted lexicographically, so the
    identity always comes first.
    """
    if cap < 1:
        raise ValueError("cap must be positive")
    n = mol.n_atoms
    if n == 0:
        return AutomorphismSet(((),))
    colors = refine_colors(mol)
    bonds = _bond_table(mol)
    order = _search_order(mol, colors)
    by_color: dict[int, list[int]] = {}
    for k in range(n):
        by_color.setdefault(colors[k], []).append(k)

    image = [-1] * n
    used = [False] * n
    found: list[Permutation] = []

    def consistent(src: int, dst: int, depth: int) -> bool:
        for prev in order[:depth]:
            if bonds.get((src, prev)) != bonds.get((dst, image[prev])):
                return False
        return True

    def extend(depth: int) -> None:
        if depth == n:
            found.append(tuple(image))
            if len(found) > cap:
                raise _CapExceeded
            return
        src = order[depth]
        for dst in by_color[colors[src]]:
            if used[dst] or not consistent(src, dst, depth):
                continue
            image[src] = dst
            used[dst] = True
            extend(depth + 1)
            used[dst] = False
            image[src] = -1

    try:
        extend(0)
    except _CapExceeded:
        return AutomorphismSet.identity(n, truncated=True)
    return AutomorphismSet(tuple(sorted(found)))


def is_automorphism(mol: Molecule, perm) -> bool:
    n = mol.n_atoms
    if sorted(perm) != list(range(n)):
        return False
    for k in range(n):
        if mol.atoms[k] != mol.atoms[perm[k]]:
            return False
    bonds = _bond_table(mol)
    if any(bonds.get((perm[b.i], perm[b.j])) != int(b.order) for b in mol.bonds):
        return False
    return True


def brute_force_automorphisms(mol: Molecule) -> AutomorphismSet:
    """Exhaustive check of all n! permutations; only for n <= 8."""
    if mol.n_atoms > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_LIMIT} atoms, got {mol.n_atoms}")
    found = [p for p in itertools.permutations(range(mol.n_atoms)) if is_automorphism(mol, p)]
    return AutomorphismSet(tuple(found))


def apply_permutation(perm, conf):
    """Return the conformation whose row ``j`` is ``conf[perm[j]]``.

    Works for numpy arrays and torch tensors alike.
    """
    perm = list(perm)
    if len(perm) != conf.shape[0]:
        raise ValueError(f"permutation of length {len(perm)} applied to {conf.shape[0]} rows")
    return conf[perm]


def compose(outer, inner) -> Permutation:
    """Map ``k -> outer[inner[k]]``.

    With the row convention of :func:`apply_permutation`,
    ``apply_permutation(s, apply_permutation(t, R)) == apply_permutation(compose(t, s), R)``.
    """
    return tuple(outer[k] for k in inner)


def inverse(perm) -> Permutation:
    inv = [0] * len(perm)
    for k, p in enumerate(perm):
        inv[p] = k
    return tuple(inv)


def cycle_notation(perm) -> str:
    seen = set()
    cycles = []
    for start in range(len(perm)):
        if start in seen or perm[start] == start:
            seen.add(start)
            continue
        cycle = [start]
        seen.add(start)
        k = perm[start]
        while k != start:
            cycle.append(k)
            seen.add(k)
            k = perm[k]
        cycles.append("(" + " ".join(map(str, cycle)) + ")")
    return "".join(cycles) or "()"
