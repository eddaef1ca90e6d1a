"""Dense symmetric linear-algebra kernel.

Normalization with its Jacobian, a cyclic Jacobi eigensolver for symmetric
matrices, PCA, and PSD matrix square roots.  Matrices are plain row-major
``numpy`` arrays; every reduction runs in float64 regardless of the storage
dtype of the caller.  All functions are pure.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import BadConfig, DegenerateData, NotPSD, NotSymmetric, ZeroNorm

ZERO_NORM_EPS = 1e-12
_JACOBI_REL_TOL = 1e-12
_JACOBI_MAX_SWEEPS = 100


class EigResult(NamedTuple):
    """Eigenvalues in descending order; eigenvectors as orthonormal columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.sqrt(np.dot(v, v)))
    if norm < ZERO_NORM_EPS:
        raise ZeroNorm(f"vector norm {norm:.3e} below {ZERO_NORM_EPS:.0e}")
    return v / norm


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise unit normalization; returns (normalized, original norms)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    bad = np.flatnonzero(norms < ZERO_NORM_EPS)
    if bad.size:
        raise ZeroNorm(f"row {int(bad[0])} has norm {norms[bad[0]]:.3e}")
    return x / norms[:, None], norms


def normalize_rows_backward(
    grad_out: np.ndarray, normalized: np.ndarray, norms: np.ndarray
) -> np.ndarray:
    """Jacobian-transpose product of row normalization.

    For y = x/|x| the gradient pulled back to x is (g - (g.y) y) / |x|,
    i.e. the component of g orthogonal to y, rescaled.
    """
    inner = np.einsum("ij,ij->i", grad_out, normalized)
    return (grad_out - inner[:, None] * normalized) / norms[:, None]


def normalize_columns(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    normalized, norms = normalize_rows(np.asarray(x).T)
    return normalized.T, norms


def normalize_columns_backward(
    grad_out: np.ndarray, normalized: np.ndarray, norms: np.ndarray
) -> np.ndarray:
    return normalize_rows_backward(grad_out.T, normalized.T, norms).T


def _off_diag_norm(a: np.ndarray) -> float:
    upper = a[np.triu_indices_from(a, k=1)]
    return float(np.sqrt(2.0 * np.dot(upper, upper)))


def _tournament_rounds(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Round-robin pairings: each index pair meets exactly once per sweep,
    and the pairs inside one round are disjoint, so their rotations can be
    applied in a single vectorized pass."""
    slots = list(range(n)) + ([-1] if n % 2 else [])
    m = len(slots)
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            x, y = slots[i], slots[m - 1 - i]
            if x != -1 and y != -1:
                ps.append(min(x, y))
                qs.append(max(x, y))
        rounds.append((np.asarray(ps), np.asarray(qs)))
        slots = [slots[0], slots[-1]] + slots[1:-1]
    return rounds


def eigh_sym(a: np.ndarray) -> EigResult:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    One sweep visits every off-diagonal pair once, ordered round-robin so
    each round rotates disjoint pairs in one vectorized step; sweeps repeat
    until the off-diagonal Frobenius mass drops below 1e-12 * |A|_F.
    Robust for the PSD matrices this package produces (sample covariances,
    Gram matrices) up to a few thousand dimensions.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise BadConfig(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    norm = float(np.linalg.norm(a))
    if n == 1 or norm == 0.0:
        order = np.argsort(np.diag(a))[::-1]
        return EigResult(np.diag(a)[order].copy(), v[:, order].copy())
    thresh = _JACOBI_REL_TOL * norm
    rounds = _tournament_rounds(n)
    for _ in range(_JACOBI_MAX_SWEEPS):
        off = _off_diag_norm(a)
        if off < thresh:
            break
        # classical threshold: entries far below the current off-diagonal
        # mass wait for a later sweep (their total contribution is off/n)
        sweep_floor = off / (n * n)
        for ps, qs in rounds:
            apq = a[ps, qs]
            rotate = np.abs(apq) > sweep_floor
            if not rotate.any():
                continue
            # Stable tangent of the annihilating rotation angles; zero-entry
            # pairs degrade to the identity rotation (c=1, s=0).
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                theta = (a[qs, qs] - a[ps, ps]) / (2.0 * apq)
                t = np.where(
                    rotate,
                    np.copysign(1.0, theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0)),
                    0.0,
                )
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            col_p = a[:, ps].copy()
            col_q = a[:, qs].copy()
            a[:, ps] = c * col_p - s * col_q
            a[:, qs] = s * col_p + c * col_q
            row_p = a[ps, :].copy()
            row_q = a[qs, :].copy()
            a[ps, :] = c[:, None] * row_p - s[:, None] * row_q
            a[qs, :] = s[:, None] * row_p + c[:, None] * row_q
            a[ps[rotate], qs[rotate]] = 0.0
            a[qs[rotate], ps[rotate]] = 0.0
            vec_p = v[:, ps].copy()
            vec_q = v[:, qs].copy()
            v[:, ps] = c * vec_p - s * vec_q
            v[:, qs] = s * vec_p + c * vec_q
    else:
        raise DegenerateData("Jacobi eigensolver did not converge")
    values = np.diag(a).copy()
    order = np.argsort(values, kind="stable")[::-1]
    return EigResult(values[order], v[:, order].copy())


def pca_project(
    points: np.ndarray, target_dim: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project rows onto the top-variance principal directions.

    Returns (projected, basis, mean) where ``basis`` holds orthonormal
    columns and ``projected = (points - mean) @ basis``.  The covariance is
    the MLE (1/n) estimate.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2:
        raise BadConfig("pca_project needs a 2-D array with at least 2 rows")
    n, d = points.shape
    if not 1 <= target_dim <= min(n - 1, d):
        raise BadConfig(
            f"target_dim {target_dim} outside [1, min(rows-1, cols)] for shape {points.shape}"
        )
    mean = points.mean(axis=0)
    centered = points - mean
    cov = centered.T @ centered / n
    total_var = float(np.trace(cov))
    scale = max(1.0, float(np.mean(points * points)))
    if total_var <= 1e-20 * scale:
        raise DegenerateData("all rows identical: zero total variance")
    eig = eigh_sym(cov)
    basis = eig.eigenvectors[:, :target_dim].copy()
    return centered @ basis, basis, mean


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root: returns S with S @ S ~= A.

    Eigenvalues that are slightly negative (above -1e-6 * |A|_F, e.g. from
    roundoff in sample covariances) are clamped to zero before the sqrt.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise BadConfig(f"expected a square matrix, got shape {a.shape}")
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > 1e-10:
        raise NotSymmetric(f"max |A - A^T| = {asym:.3e} exceeds 1e-10")
    norm = float(np.linalg.norm(a))
    eig = eigh_sym(a)
    min_val = float(eig.eigenvalues[-1]) if eig.eigenvalues.size else 0.0
    if min_val < -1e-6 * max(norm, 1e-300):
        raise NotPSD(f"eigenvalue {min_val:.3e} below -1e-6 * |A|")
    clamped = np.maximum(eig.eigenvalues, 0.0)
    root = (eig.eigenvectors * np.sqrt(clamped)) @ eig.eigenvectors.T
    return 0.5 * (root + root.T)
