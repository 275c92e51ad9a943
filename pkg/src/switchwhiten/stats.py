"""Mean/covariance estimators for the five normalization methods.

All functions take data laid out as ``(..., C_g, P)``: channels of one
group by pixels, with any number of leading batch axes. The reduction
runs over the last axis, so the same estimator serves the batch case
(P = N*H*W) and the per-sample case (P = H*W).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


class MethodTag(str, enum.Enum):
    BW = "bw"
    IW = "iw"
    BN = "bn"
    IN = "in"
    LN = "ln"

    @classmethod
    def parse(cls, value) -> "MethodTag":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown normalization method {value!r}") from None


# Methods whose statistics are pooled over the whole mini-batch.
BATCH_METHODS = frozenset({MethodTag.BW, MethodTag.BN})
DIAGONAL_METHODS = frozenset({MethodTag.BN, MethodTag.IN, MethodTag.LN})


@dataclass(frozen=True)
class MomentPair:
    mean: np.ndarray  # (..., C_g)
    cov: np.ndarray  # (..., C_g, C_g), includes the +eps*I term
    pixel_count: int


def _moments(x: np.ndarray, eps: float) -> MomentPair:
    x = np.asarray(x)
    if x.ndim < 2:
        raise ShapeError(f"expected (..., C_g, P) data, got shape {x.shape}")
    count = x.shape[-1]
    if count < 1 or x.shape[-2] < 1:
        raise ShapeError("cannot compute moments of an empty batch")
    mean = x.mean(axis=-1)
    xc = x - mean[..., None]
    cov = (xc @ np.swapaxes(xc, -1, -2)) / count
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    cov = cov + eps * np.eye(x.shape[-2], dtype=x.dtype)
    return MomentPair(mean, cov, count)


def batch_moments(x: np.ndarray, eps: float) -> MomentPair:
    """Batch-whitening statistics of a (..., C_g, N*H*W) group slice."""
    return _moments(x, eps)


def instance_moments(x_n: np.ndarray, eps: float) -> MomentPair:
    """Instance-whitening statistics of per-sample (..., C_g, H*W) slices."""
    return _moments(x_n, eps)


def diagonalize(m: MomentPair) -> MomentPair:
    """Drop cross-channel terms: BW -> BN, IW -> IN."""
    diag = np.diagonal(m.cov, axis1=-2, axis2=-1)
    return MomentPair(m.mean, diag[..., None] * np.eye(diag.shape[-1], dtype=diag.dtype), m.pixel_count)


def layer_moments(instance: MomentPair, eps: float) -> MomentPair:
    """Layer statistics recovered from per-channel instance statistics.

    The all-pixel variance is the mean of the channel variances plus the
    variance of the channel means. ``eps`` must be the value that was
    added to ``instance.cov``; it is stripped and added back once.
    """
    means = instance.mean
    var = np.diagonal(instance.cov, axis1=-2, axis2=-1) - eps
    mu = means.mean(axis=-1)
    sigma = var.mean(axis=-1) + ((means - mu[..., None]) ** 2).mean(axis=-1)
    c = means.shape[-1]
    eye = np.eye(c, dtype=means.dtype)
    return MomentPair(
        np.broadcast_to(mu[..., None], means.shape).copy(),
        (sigma + eps)[..., None, None] * eye,
        instance.pixel_count * c,
    )
