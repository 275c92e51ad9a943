"""Inverse square roots of covariance matrices and their gradients.

Two routes are provided. The eigen route computes the exact ZCA matrix
``D diag(lam)^(-1/2) D^T``. The Newton route runs a fixed number of
coupled Newton-Schulz steps on the trace-normalized covariance; it is
cheaper and its gradient has no spectral-gap singularity.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateSpectrum, NumericalFailure, ShapeError
from .tensor_core import EigPair, sym_eig, symmetrize

DEFAULT_NEWTON_STEPS = 5
NEWTON_DIVERGENCE_NORM = 1e6
DEGENERACY_REL_GAP = 1e-8


class PathKind(str, enum.Enum):
    EIGEN = "eigen"
    NEWTON = "newton"


@dataclass(frozen=True)
class WhiteningPath:
    kind: PathKind = PathKind.EIGEN
    steps: int = DEFAULT_NEWTON_STEPS

    def __post_init__(self):
        object.__setattr__(self, "kind", PathKind(self.kind))
        if self.steps < 1:
            raise ConfigError("Newton iteration count must be >= 1")

    @classmethod
    def eigen(cls) -> "WhiteningPath":
        return cls(PathKind.EIGEN)

    @classmethod
    def newton(cls, steps: int = DEFAULT_NEWTON_STEPS) -> "WhiteningPath":
        return cls(PathKind.NEWTON, steps)


@dataclass
class NewtonStack:
    sigma_n: np.ndarray  # trace-normalized covariance
    trace_value: np.ndarray
    iterates: list  # P_0 .. P_T


def _eye_like(a: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.eye(a.shape[-1], dtype=a.dtype), a.shape)


def zca_inverse_sqrt(sigma: np.ndarray) -> tuple[np.ndarray, EigPair]:
    eig = sym_eig(sigma)
    smallest = eig.values[..., -1]
    if np.any(smallest <= 0):
        bad = float(np.min(smallest))
        raise NumericalFailure(f"covariance is not positive definite (eigenvalue {bad:.6g})")
    scaled = eig.vectors * (eig.values ** -0.5)[..., None, :]
    inv_sqrt = symmetrize(scaled @ np.swapaxes(eig.vectors, -1, -2))
    return inv_sqrt, eig


def newton_inverse_sqrt(sigma: np.ndarray, steps: int = DEFAULT_NEWTON_STEPS) -> tuple[np.ndarray, NewtonStack]:
    sigma = np.asarray(sigma)
    if sigma.ndim < 2 or sigma.shape[-1] != sigma.shape[-2]:
        raise ShapeError(f"expected square matrices, got {sigma.shape}")
    if steps < 1:
        raise ConfigError("Newton iteration count must be >= 1")
    tr = np.trace(sigma, axis1=-2, axis2=-1)
    if np.any(tr <= 0):
        raise NumericalFailure(f"covariance trace must be positive, got {float(np.min(tr)):.6g}")
    sigma_n = sigma / tr[..., None, None]
    p = _eye_like(sigma).copy()
    iterates = [p]
    for _ in range(steps):
        p = 0.5 * (3.0 * p - p @ p @ p @ sigma_n)
        norm = np.sqrt(np.sum(p * p, axis=(-2, -1)))
        if np.any(~np.isfinite(norm)) or np.any(norm > NEWTON_DIVERGENCE_NORM):
            raise NumericalFailure("Newton iteration diverged; covariance is too ill-conditioned")
        iterates.append(p)
    inv_sqrt = p / np.sqrt(tr)[..., None, None]
    return inv_sqrt, NewtonStack(sigma_n, tr, iterates)


def whiten_apply(x_n: np.ndarray, mean: np.ndarray, inv_sqrt: np.ndarray) -> np.ndarray:
    x_n = np.asarray(x_n)
    mean = np.asarray(mean)
    if mean.shape[-1] != x_n.shape[-2] or inv_sqrt.shape[-1] != x_n.shape[-2]:
        raise ShapeError(
            f"whitening shapes disagree: data {x_n.shape}, mean {mean.shape}, matrix {inv_sqrt.shape}"
        )
    return inv_sqrt @ (x_n - mean[..., None])


def check_spectral_gap(values: np.ndarray, rel_gap: float = DEGENERACY_REL_GAP) -> None:
    if values.shape[-1] < 2:
        return
    gaps = np.abs(np.diff(values, axis=-1))  # values are sorted descending
    min_gap = np.min(gaps, axis=-1)
    threshold = rel_gap * np.max(np.abs(values), axis=-1)
    bad = min_gap < threshold
    if np.any(bad):
        worst = float(np.min(min_gap[bad]))
        raise DegenerateSpectrum(
            f"repeated eigenvalues (gap {worst:.3g}) make the eigen-path gradient undefined; "
            "use the Newton path",
            gap=worst,
        )


def zca_backward(dxhat: np.ndarray, xc: np.ndarray, eig: EigPair):
    """Backpropagate through ``xhat = D diag(lam)^(-1/2) D^T xc``.

    Returns ``(dsigma, dmu, dxc)``: the gradient for the (symmetric)
    covariance, for the mean that was subtracted, and for the centered
    data through the whitening matrix alone.
    """
    check_spectral_gap(eig.values)
    d = eig.vectors
    dt = np.swapaxes(d, -1, -2)
    lam = eig.values
    inv_sqrt_lam = lam ** -0.5

    v = inv_sqrt_lam[..., :, None] * dt
    xtilde = v @ xc
    dxtilde = dt @ dxhat
    dv = dxtilde @ np.swapaxes(xc, -1, -2)
    dlam = -0.5 * lam ** -1.5 * np.einsum("...ij,...ji->...i", dv, d)
    dd = dxhat @ np.swapaxes(xtilde, -1, -2) + np.swapaxes(dv, -1, -2) * inv_sqrt_lam[..., None, :]

    diff = lam[..., None, :] - lam[..., :, None]  # lam_j - lam_i
    off = ~np.eye(lam.shape[-1], dtype=bool)
    kt = np.zeros_like(diff)
    np.divide(1.0, diff, out=kt, where=off)
    inner = kt * (dt @ dd)
    inner = inner + dlam[..., :, None] * np.eye(lam.shape[-1], dtype=lam.dtype)
    dsigma = symmetrize(d @ inner @ dt)

    dxc = np.swapaxes(v, -1, -2) @ dxtilde
    dmu = -dxc.sum(axis=-1)
    return dsigma, dmu, dxc


def newton_backward(dinv_sqrt: np.ndarray, sigma: np.ndarray, stack: NewtonStack) -> np.ndarray:
    """Reverse-mode pass through the unrolled Newton-Schulz iteration."""
    tr = stack.trace_value
    root = np.sqrt(tr)[..., None, None]
    s = stack.sigma_n
    st = np.swapaxes(s, -1, -2)
    p_last = stack.iterates[-1]

    dp = dinv_sqrt / root
    dtr = -0.5 * tr ** -1.5 * np.sum(dinv_sqrt * p_last, axis=(-2, -1))
    ds = np.zeros_like(s)
    for p in reversed(stack.iterates[:-1]):
        pt = np.swapaxes(p, -1, -2)
        p2 = p @ p
        dm = -0.5 * dp
        ds += np.swapaxes(p2 @ p, -1, -2) @ dm
        dp = (
            1.5 * dp
            + dm @ np.swapaxes(p2 @ s, -1, -2)
            + pt @ dm @ np.swapaxes(p @ s, -1, -2)
            + np.swapaxes(p2, -1, -2) @ dm @ st
        )
    dsigma = ds / tr[..., None, None]
    dtr = dtr - np.sum(ds * sigma, axis=(-2, -1)) / tr**2
    dsigma = dsigma + dtr[..., None, None] * np.eye(s.shape[-1], dtype=s.dtype)
    return symmetrize(dsigma)
