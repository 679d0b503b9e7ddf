"""Dense float64 arithmetic, stable softmax, seeded sampling and a small SVD.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Two-dimensional
matrices are the common case; leading batch/head extents broadcast through
``matmul`` and ``softmax_rows``.
"""

from __future__ import annotations

import io
import math

import numpy as np

from .errors import DimensionError, ParameterError

Tensor = np.ndarray
Rng = np.random.Generator

RANK_RTOL = 1e-10
SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 100


def make_rng(seed, *spawn_key: int) -> Rng:
    """PCG64 generator; extra integers derive an independent child stream."""
    if spawn_key:
        return np.random.default_rng([int(seed), *map(int, spawn_key)])
    return np.random.default_rng(int(seed))


def as_tensor(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        return np.matmul(a, b)
    except ValueError as exc:  # leading extents fail to broadcast
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc


def transpose(a: Tensor) -> Tensor:
    return np.swapaxes(a, -1, -2)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    x = as_tensor(x)
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def gaussian(rng: Rng, rows: int, cols: int, variance: float) -> Tensor:
    if not variance > 0:
        raise ParameterError(f"variance must be positive, got {variance}")
    return rng.normal(0.0, math.sqrt(variance), size=(rows, cols))


def jacobi_svd(m: Tensor, tol: float = SVD_TOL, max_sweeps: int = SVD_MAX_SWEEPS):
    """One-sided (Hestenes) Jacobi SVD.

    Returns ``(u, s, vt)`` with singular values sorted in descending order.
    Columns of ``u`` belonging to zero singular values are left as zeros.
    """
    m = as_tensor(m)
    rows, cols = m.shape
    if rows < cols:
        u, s, vt = jacobi_svd(m.T, tol, max_sweeps)
        return vt.T, s, u.T
    # Rotate columns of m, stored as contiguous rows of ``at``.
    at = np.array(m.T)
    vt = np.eye(cols)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                ap = at[p]
                aq = at[q]
                alpha = float(ap @ ap)
                beta = float(aq @ aq)
                gamma = float(ap @ aq)
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                at[p], at[q] = c * ap - s * aq, s * ap + c * aq
                vp = vt[p]
                vq = vt[q]
                vt[p], vt[q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    sigma = np.linalg.norm(at, axis=1)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    at = at[order]
    vt = vt[order]
    u = np.zeros((rows, cols))
    nz = sigma > 0
    u[:, nz] = (at[nz] / sigma[nz, None]).T
    return u, sigma, vt


def truncate(u: Tensor, s: Tensor, vt: Tensor, r: int):
    """Keep the leading ``r`` triplets as ``(U_r, diag(S_r), Vt_r)``."""
    return u[:, :r], np.diag(s[:r]), vt[:r, :]


def singular_values(m: Tensor) -> Tensor:
    return jacobi_svd(m)[1]


def numeric_rank(m: Tensor, rtol: float = RANK_RTOL) -> int:
    """Number of singular values above ``rtol * sigma_max``."""
    return rank_from_singular_values(singular_values(m), rtol)


def rank_from_singular_values(s: Tensor, rtol: float = RANK_RTOL) -> int:
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rtol * s[0]))


def svd_lowrank_factor(m: Tensor, r: int):
    """Best rank-``r`` factorization ``U_r @ S_r @ Vt_r`` of a square matrix."""
    m = as_tensor(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"svd_lowrank_factor needs a square matrix, got {m.shape}")
    n = m.shape[0]
    if not 1 <= r <= n:
        raise DimensionError(f"rank {r} outside [1, {n}]")
    return truncate(*jacobi_svd(m), r)


def relative_frobenius_error(m: Tensor, approx: Tensor) -> float:
    denom = np.linalg.norm(m)
    diff = np.linalg.norm(m - approx)
    return float(diff / denom) if denom > 0 else float(diff)


def dump_text(t: Tensor) -> str:
    """Shape line, then one line per row (leading extents flattened), %.17g."""
    t = as_tensor(t)
    buf = io.StringIO()
    buf.write(" ".join(str(e) for e in t.shape) + "\n")
    rows = t.reshape(-1, t.shape[-1]) if t.ndim >= 2 else t.reshape(1, -1)
    for row in rows:
        buf.write(" ".join(format(float(v), ".17g") for v in row) + "\n")
    return buf.getvalue()


def load_text(text: str) -> Tensor:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DimensionError("empty tensor dump")
    shape = tuple(int(e) for e in lines[0].split())
    data = [float(v) for ln in lines[1:] for v in ln.split()]
    if len(data) != math.prod(shape):
        raise DimensionError(f"dump has {len(data)} values for shape {shape}")
    return np.array(data, dtype=np.float64).reshape(shape)
