"""Dense tensor helpers and the small symmetric linear-algebra kernel.

Every matrix routine here accepts a stack of matrices with arbitrary
leading batch dimensions, ``(..., d, d)``, so callers can push all
samples and channel groups through a single call.
"""
from __future__ import annotations

from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .errors import InvalidInput, NumericalFailure, ShapeError

JACOBI_MAX_SWEEPS = 100
JACOBI_REL_TOL = 1e-12

DTYPES = {"f32": np.float32, "f64": np.float64}


class EigPair(NamedTuple):
    """Eigenvalues sorted descending, eigenvectors as matching columns."""

    values: np.ndarray
    vectors: np.ndarray


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str) and dtype in DTYPES:
        return np.dtype(DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise InvalidInput(f"unsupported dtype {dt}; use float32 or float64")
    return dt


def as_tensor4(x, dtype=None) -> np.ndarray:
    """Validate an (N, C, H, W) activation array and return it C-contiguous."""
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 (N, C, H, W) tensor, got shape {arr.shape}")
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
    arr = np.ascontiguousarray(arr, dtype=resolve_dtype(dtype))
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("tensor contains NaN or Inf entries")
    return arr


def symmetrize(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _check_square(a: np.ndarray) -> None:
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"expected square matrices, got shape {a.shape}")


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def frobenius_inner(a, b) -> np.ndarray:
    """Sum of elementwise products over the last two axes."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-2:] != b.shape[-2:] or a.ndim < 2:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return np.sum(a * b, axis=(-2, -1))


def trace(a) -> np.ndarray:
    a = np.asarray(a)
    _check_square(a)
    return np.trace(a, axis1=-2, axis2=-1)


@lru_cache(maxsize=None)
def _round_robin(d: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Disjoint (p, q) pair sets covering every off-diagonal pair once.

    Circle-method tournament schedule: d - 1 rounds (d even) of d/2
    pairs each, so rotations within a round commute and can be applied
    together.
    """
    players = list(range(d)) + ([-1] if d % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < 0 or b < 0:
                continue
            ps.append(min(a, b))
            qs.append(max(a, b))
        rounds.append((np.array(ps), np.array(qs)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _off_norm(a: np.ndarray) -> np.ndarray:
    d = a.shape[-1]
    off = a * (1.0 - np.eye(d, dtype=a.dtype))
    return np.sqrt(np.sum(off * off, axis=(-2, -1)))


def sym_eig(a) -> EigPair:
    """Eigendecomposition of symmetric matrices by cyclic Jacobi rotations.

    Eigenvalues come back sorted descending. Each eigenvector is signed so
    that its largest-magnitude component is positive (lowest index wins a
    tie), which makes the result a deterministic function of the input.
    """
    a = np.asarray(a)
    _check_square(a)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise InvalidInput("sym_eig input contains NaN or Inf")
    batch_shape = a.shape[:-2]
    d = a.shape[-1]
    if d < 1:
        raise ShapeError("sym_eig needs dim >= 1")
    work = symmetrize(a).reshape((-1, d, d)).copy()
    vecs = np.broadcast_to(np.eye(d, dtype=a.dtype), work.shape).copy()

    tol = max(JACOBI_REL_TOL, 10 * float(np.finfo(a.dtype).eps))
    fro = np.sqrt(np.sum(work * work, axis=(-2, -1)))
    rounds = _round_robin(d) if d > 1 else ()

    sweeps = 0
    while True:
        active = _off_norm(work) > tol * fro
        if not np.any(active):
            break
        if sweeps >= JACOBI_MAX_SWEEPS:
            raise NumericalFailure(
                f"Jacobi eigensolver did not converge within {JACOBI_MAX_SWEEPS} sweeps"
            )
        sweeps += 1
        idx = np.nonzero(active)[0]
        sub = work[idx]
        subv = vecs[idx]
        for p, q in rounds:
            app = sub[:, p, p]
            aqq = sub[:, q, q]
            apq = sub[:, p, q]
            rotate = apq != 0
            safe = np.where(rotate, apq, 1.0)
            with np.errstate(over="ignore"):  # huge theta -> t = 0, the right limit
                theta = (aqq - app) / (2.0 * safe)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(rotate, t, 0.0)
            c = (1.0 / np.sqrt(1.0 + t * t))[:, :, None]
            s = t[:, :, None] * c

            rp = sub[:, p, :]
            rq = sub[:, q, :]
            sub[:, p, :] = c * rp - s * rq
            sub[:, q, :] = s * rp + c * rq
            cs = np.swapaxes(c, 1, 2)
            ss = np.swapaxes(s, 1, 2)
            cp = sub[:, :, p]
            cq = sub[:, :, q]
            sub[:, :, p] = cs * cp - ss * cq
            sub[:, :, q] = ss * cp + cs * cq
            vp = subv[:, :, p]
            vq = subv[:, :, q]
            subv[:, :, p] = cs * vp - ss * vq
            subv[:, :, q] = ss * vp + cs * vq
        work[idx] = sub
        vecs[idx] = subv

    values = np.diagonal(work, axis1=-2, axis2=-1)
    order = np.argsort(-values, axis=-1, kind="stable")
    values = np.take_along_axis(values, order, axis=-1)
    vecs = np.take_along_axis(vecs, order[:, None, :], axis=-1)

    lead = np.argmax(np.abs(vecs), axis=-2)
    lead_val = np.take_along_axis(vecs, lead[:, None, :], axis=-2)
    vecs = vecs * np.where(lead_val < 0, -1.0, 1.0).astype(vecs.dtype)

    return EigPair(values.reshape(batch_shape + (d,)), vecs.reshape(batch_shape + (d, d)))
