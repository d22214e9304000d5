"""Optimal rigid superposition via the quaternion eigenvalue method, and RMSD.

Transforms act on row-vector conformations: ``apply(R) = R @ Q + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .symmetry import AutomorphismSet, Permutation, apply_permutation

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 50


@dataclass(frozen=True)
class RigidTransform:
    Q: np.ndarray
    t: np.ndarray

    def apply(self, conf: np.ndarray) -> np.ndarray:
        return np.asarray(conf, dtype=np.float64) @ self.Q + self.t

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


def jacobi_eigh(matrix) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi sweeps.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending and the
    eigenvectors as columns.
    """
    a = [list(map(float, row)) for row in np.asarray(matrix, dtype=np.float64)]
    n = len(a)
    v = [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    scale = max(1.0, max(abs(x) for row in a for x in row))
    polish = False
    for _ in range(JACOBI_MAX_SWEEPS):
        off = math.sqrt(sum(a[i][j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off == 0.0 or polish:
            break
        # convergence is quadratic, so one sweep past the tolerance reaches roundoff
        polish = off <= JACOBI_TOL * scale
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p][q]
                if apq == 0.0:
                    continue
                theta = (a[q][q] - a[p][p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp, akq = a[k][p], a[k][q]
                    a[k][p] = c * akp - s * akq
                    a[k][q] = s * akp + c * akq
                for k in range(n):
                    apk, aqk = a[p][k], a[q][k]
                    a[p][k] = c * apk - s * aqk
                    a[q][k] = s * apk + c * aqk
                for k in range(n):
                    vkp, vkq = v[k][p], v[k][q]
                    v[k][p] = c * vkp - s * vkq
                    v[k][q] = s * vkp + c * vkq
    w = np.array([a[i][i] for i in range(n)])
    vecs = np.array(v)
    order = np.argsort(w, kind="stable")
    return w[order], vecs[:, order]


def _skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quaternion_residual_matrix(ref_centered: np.ndarray, pred_centered: np.ndarray) -> np.ndarray:
    """The 4x4 matrix B with ``q^T B q = sum_k |x_k - q y_k q*|^2`` for unit q.

    For pure quaternions x, y the residual ``x q - q y`` is linear in q with
    matrix ``[[0, -(x-y)^T], [x-y, [x+y]_x]]``; B sums the Gram matrices.
    """
    B = np.zeros((4, 4))
    for x, y in zip(ref_centered, pred_centered):
        A = np.zeros((4, 4))
        d = x - y
        A[0, 1:] = -d
        A[1:, 0] = d
        A[1:, 1:] = _skew(x + y)
        B += A.T @ A
    return B


def quaternion_to_matrix(q) -> np.ndarray:
    """Column-vector rotation matrix of the unit quaternion ``(w, x, y, z)``."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _check_pair(ref, pred) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if ref.ndim != 2 or ref.shape[1] != 3 or pred.shape != ref.shape:
        raise ValueError(f"conformation shapes differ or are not (n, 3): {ref.shape} vs {pred.shape}")
    if ref.shape[0] < 1:
        raise ValueError("conformations must have at least one row")
    if not (np.all(np.isfinite(ref)) and np.all(np.isfinite(pred))):
        raise ValueError("conformations contain non-finite entries")
    return ref, pred


def optimal_alignment(ref, pred) -> tuple[RigidTransform, float]:
    """Proper rigid transform moving ``pred`` onto ``ref`` in the least-squares sense.

    Returns the transform and the minimized RMSD.
    """
    ref, pred = _check_pair(ref, pred)
    ref_c = ref.mean(axis=0)
    pred_c = pred.mean(axis=0)
    x = ref - ref_c
    y = pred - pred_c
    _, vecs = jacobi_eigh(quaternion_residual_matrix(x, y))
    rot = quaternion_to_matrix(vecs[:, 0])
    Q = rot.T
    t = ref_c - pred_c @ Q
    transform = RigidTransform(Q, t)
    # the residual is evaluated directly; the eigenvalue loses precision near zero
    diff = ref - transform.apply(pred)
    value = math.sqrt(float(np.mean(np.sum(diff * diff, axis=1))))
    return transform, value


def rmsd(ref, pred) -> float:
    return optimal_alignment(ref, pred)[1]


def min_rmsd_over_aut(ref, pred, automorphisms: AutomorphismSet) -> tuple[float, Permutation]:
    """Smallest RMSD over all symmetry relabelings of ``pred``.

    Ties keep the earliest permutation in enumeration order.
    """
    best_value = math.inf
    best_perm = None
    for perm in automorphisms:
        value = rmsd(ref, apply_permutation(perm, np.asarray(pred, dtype=np.float64)))
        if value < best_value:
            best_value, best_perm = value, perm
    return best_value, best_perm
