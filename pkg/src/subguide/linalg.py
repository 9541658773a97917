"""Symmetric eigendecomposition via the cyclic Jacobi rotation method.

Self-contained on purpose: the basis construction needs eigenpairs of small
covariance matrices (64x64 here) and nothing heavier than repeated plane
rotations, which converge to machine precision in a handful of sweeps.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractViolation


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60):
    """Eigenvalues/eigenvectors of a real symmetric matrix.

    Returns (eigenvalues descending, eigenvectors) with eigenvectors[:, i]
    the unit eigenvector for eigenvalues[i].
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractViolation(f"jacobi_eigh expects a square matrix, got {a.shape}")
    if not np.allclose(a, a.T, atol=1e-10 * max(1.0, np.abs(a).max())):
        raise ContractViolation("jacobi_eigh expects a symmetric matrix")
    n = a.shape[0]
    A = 0.5 * (a + a.T)  # exact symmetry for the sweep updates
    V = np.eye(n)
    if n == 1:
        return A.diagonal().copy(), V

    scale = np.abs(A).max() or 1.0
    for _ in range(max_sweeps):
        off = math.sqrt(max(0.0, (A * A).sum() - (np.diagonal(A) ** 2).sum()))
        if off <= tol * scale * n:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= tol * scale:
                    continue
                theta = 0.5 * math.atan2(2.0 * apq, A[q, q] - A[p, p])
                c, s = math.cos(theta), math.sin(theta)
                # rotate rows/cols p and q of A
                col_p = A[:, p].copy()
                col_q = A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p = A[p, :].copy()
                row_q = A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                A[p, q] = 0.0
                A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    evals = np.diagonal(A).copy()
    order = np.argsort(-evals, kind="stable")
    return evals[order], np.ascontiguousarray(V[:, order])
