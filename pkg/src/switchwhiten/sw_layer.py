"""The Switchable Whitening layer.

Per channel group, the layer estimates mean/covariance pairs for each
method in the configured set, mixes them with two independent softmax
weight vectors (one for means, one for covariances), whitens every
sample with the mixed statistics and applies a per-channel affine map.
The backward pass is written out by hand.

Arrays inside the layer use the grouped layout ``(N, n_groups, G, H*W)``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .stats import (
    MethodTag,
    MomentPair,
    batch_moments,
    diagonalize,
    instance_moments,
    layer_moments,
)
from .tensor_core import as_tensor4, resolve_dtype
from .whitening import (
    PathKind,
    WhiteningPath,
    newton_backward,
    newton_inverse_sqrt,
    zca_backward,
    zca_inverse_sqrt,
)

PRESETS = {
    "bw,iw": (MethodTag.BW, MethodTag.IW),
    "all": (MethodTag.BW, MethodTag.IW, MethodTag.BN, MethodTag.IN, MethodTag.LN),
}

DEFAULT_GROUP_SIZE = 16
DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1
LAMBDA_INIT = 1.0


def parse_omega(methods) -> tuple[MethodTag, ...]:
    if isinstance(methods, str):
        key = methods.strip().lower()
        if key in PRESETS:
            return PRESETS[key]
        methods = [s for s in key.split(",") if s]
    tags = tuple(MethodTag.parse(s) for s in methods)
    if not tags:
        raise ConfigError("method set must contain at least one method")
    if len(set(tags)) != len(tags):
        raise ConfigError(f"duplicate methods in {[t.value for t in tags]}")
    return tags


@dataclass(frozen=True)
class SwConfig:
    omega: tuple = PRESETS["bw,iw"]
    group_size: int = DEFAULT_GROUP_SIZE
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM
    path: WhiteningPath = field(default_factory=WhiteningPath.eigen)
    share_lambda_across_groups: bool = True

    def __post_init__(self):
        object.__setattr__(self, "omega", parse_omega(self.omega))
        if self.group_size < 1:
            raise ConfigError("group size must be positive")
        if not self.eps > 0:
            raise ConfigError("eps must be > 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum must lie in [0, 1]")
        if not self.share_lambda_across_groups:
            raise ConfigError("importance weights are always shared across the groups of a layer")

    def index(self, tag: MethodTag) -> int:
        return self.omega.index(tag)

    def to_dict(self) -> dict:
        return {
            "omega": [t.value for t in self.omega],
            "G": self.group_size,
            "eps": self.eps,
            "alpha": self.momentum,
            "T": self.path.steps,
            "path": self.path.kind.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SwConfig":
        return cls(
            omega=parse_omega(d.get("omega", "bw,iw")),
            group_size=int(d.get("G", DEFAULT_GROUP_SIZE)),
            eps=float(d.get("eps", DEFAULT_EPS)),
            momentum=float(d.get("alpha", DEFAULT_MOMENTUM)),
            path=WhiteningPath(d.get("path", "eigen"), int(d.get("T", 5))),
        )


@dataclass
class SwState:
    lambda_mean: np.ndarray
    lambda_cov: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray  # (n_groups, G)
    running_cov: np.ndarray  # (n_groups, G, G), eps not included
    step_count: int = 0

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.gamma.dtype

    def copy(self) -> "SwState":
        return copy.deepcopy(self)


def init_state(config: SwConfig, channels: int, dtype="f32") -> SwState:
    dt = resolve_dtype(dtype)
    g = config.group_size
    check_grouping(channels, g)
    ng = channels // g
    k = len(config.omega)
    return SwState(
        lambda_mean=np.full(k, LAMBDA_INIT, dtype=dt),
        lambda_cov=np.full(k, LAMBDA_INIT, dtype=dt),
        gamma=np.ones(channels, dtype=dt),
        beta=np.zeros(channels, dtype=dt),
        running_mean=np.zeros((ng, g), dtype=dt),
        running_cov=np.broadcast_to(np.eye(g, dtype=dt), (ng, g, g)).copy(),
    )


@dataclass
class ForwardCache:
    shape: tuple
    xg: np.ndarray
    moments: dict
    omega: np.ndarray
    omega_prime: np.ndarray
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    xc: np.ndarray
    inv_sqrt: np.ndarray
    decomposition: object  # EigPair or NewtonStack
    xhat: np.ndarray


def check_grouping(channels: int, group_size: int) -> None:
    if group_size > channels:
        raise ConfigError(f"group size {group_size} exceeds channel count {channels}")
    if channels % group_size:
        raise ConfigError(f"group size {group_size} does not divide channel count {channels}")


def split_groups(x: np.ndarray, group_size: int) -> list:
    check_grouping(x.shape[1], group_size)
    return [x[:, i : i + group_size] for i in range(0, x.shape[1], group_size)]


def merge_groups(slices: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(list(slices), axis=1)


def _to_grouped(x: np.ndarray, g: int) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c // g, g, h * w)


def importance_weights(lam) -> np.ndarray:
    lam = np.asarray(lam)
    z = np.exp(lam - np.max(lam))
    return z / z.sum()


def mix_moments(per_method: Sequence[MomentPair], omega, omega_prime):
    if len(per_method) != len(omega) or len(per_method) != len(omega_prime):
        raise ShapeError("need one weight per method")
    dims = {m.mean.shape[-1] for m in per_method}
    if len(dims) != 1:
        raise ShapeError(f"moment dimensions disagree: {sorted(dims)}")
    mu_hat = sum(w * m.mean for w, m in zip(omega, per_method))
    sigma_hat = sum(w * m.cov for w, m in zip(omega_prime, per_method))
    return mu_hat, sigma_hat


def _method_moments(xg, config: SwConfig, batch: Optional[MomentPair]) -> dict:
    """Moments for every method in the config, keyed by tag.

    ``batch`` carries the BW statistics: the mini-batch ones in training,
    the running buffers in evaluation.
    """
    eps = config.eps
    need_instance = any(t in config.omega for t in (MethodTag.IW, MethodTag.IN, MethodTag.LN))
    out = {}
    inst = instance_moments(xg, eps) if need_instance else None
    for tag in config.omega:
        if tag is MethodTag.BW:
            out[tag] = batch
        elif tag is MethodTag.BN:
            out[tag] = diagonalize(batch)
        elif tag is MethodTag.IW:
            out[tag] = inst
        elif tag is MethodTag.IN:
            out[tag] = diagonalize(inst)
        elif tag is MethodTag.LN:
            out[tag] = layer_moments(inst, eps)
    return out


def _prepare(x, state: SwState, config: SwConfig) -> np.ndarray:
    x = as_tensor4(x, dtype=state.dtype)
    if x.shape[1] != state.channels:
        raise ConfigError(f"input has {x.shape[1]} channels, state expects {state.channels}")
    check_grouping(x.shape[1], config.group_size)
    if state.running_mean.shape != (x.shape[1] // config.group_size, config.group_size):
        raise ConfigError("state buffers do not match the configured grouping")
    if len(state.lambda_mean) != len(config.omega) or len(state.lambda_cov) != len(config.omega):
        raise ConfigError("state has a different number of importance weights than the method set")
    return x


def _whiten(xg, moments, state: SwState, config: SwConfig):
    omega = importance_weights(state.lambda_mean)
    omega_prime = importance_weights(state.lambda_cov)
    pairs = [moments[t] for t in config.omega]
    mu_hat, sigma_hat = mix_moments(pairs, omega, omega_prime)
    mu_hat = np.broadcast_to(mu_hat, xg.shape[:-1])
    sigma_hat = np.broadcast_to(sigma_hat, xg.shape[:-1] + (xg.shape[-2],))
    if config.path.kind is PathKind.EIGEN:
        inv_sqrt, decomposition = zca_inverse_sqrt(sigma_hat)
    else:
        inv_sqrt, decomposition = newton_inverse_sqrt(sigma_hat, config.path.steps)
    xc = xg - mu_hat[..., None]
    xhat_g = inv_sqrt @ xc
    return omega, omega_prime, mu_hat, sigma_hat, xc, inv_sqrt, decomposition, xhat_g


def _affine(xhat, state: SwState):
    return state.gamma[None, :, None, None] * xhat + state.beta[None, :, None, None]


def forward_train(x, state: SwState, config: SwConfig):
    """Training-mode forward pass; updates the running buffers in place."""
    x = _prepare(x, state, config)
    n, c, h, w = x.shape
    g = config.group_size
    xg = _to_grouped(x, g)
    ng = c // g
    pooled = xg.transpose(1, 2, 0, 3).reshape(ng, g, n * h * w)
    batch = batch_moments(pooled, config.eps)

    alpha = config.momentum
    eye = np.eye(g, dtype=x.dtype)
    state.running_mean = (1 - alpha) * state.running_mean + alpha * batch.mean
    state.running_cov = (1 - alpha) * state.running_cov + alpha * (batch.cov - config.eps * eye)
    state.step_count += 1

    moments = _method_moments(xg, config, batch)
    omega, omega_prime, mu_hat, sigma_hat, xc, inv_sqrt, dec, xhat_g = _whiten(xg, moments, state, config)
    xhat = xhat_g.reshape(x.shape)
    y = _affine(xhat, state)
    cache = ForwardCache(
        shape=x.shape,
        xg=xg,
        moments=moments,
        omega=omega,
        omega_prime=omega_prime,
        mu_hat=mu_hat,
        sigma_hat=sigma_hat,
        xc=xc,
        inv_sqrt=inv_sqrt,
        decomposition=dec,
        xhat=xhat,
    )
    return y, cache


def forward_eval(x, state: SwState, config: SwConfig) -> np.ndarray:
    """Inference-mode forward pass using the running buffers for BW/BN."""
    x = _prepare(x, state, config)
    g = config.group_size
    xg = _to_grouped(x, g)
    eye = np.eye(g, dtype=x.dtype)
    running = MomentPair(state.running_mean, state.running_cov + config.eps * eye, 0)
    moments = _method_moments(xg, config, running)
    *_, xhat_g = _whiten(xg, moments, state, config)
    return _affine(xhat_g.reshape(x.shape), state)


def _diag_part(a: np.ndarray) -> np.ndarray:
    d = np.diagonal(a, axis1=-2, axis2=-1)
    return d[..., None] * np.eye(a.shape[-1], dtype=a.dtype)


def _softmax_backward(weights: np.ndarray, dweights: np.ndarray) -> np.ndarray:
    # sum_z w_k w_z (g_k - g_z): exactly zero when all g_k are equal
    return weights * ((dweights[:, None] - dweights[None, :]) @ weights)


@dataclass
class Gradients:
    dx: np.ndarray
    dlambda_mean: np.ndarray
    dlambda_cov: np.ndarray
    dgamma: np.ndarray
    dbeta: np.ndarray

    def __iter__(self):
        return iter((self.dx, self.dlambda_mean, self.dlambda_cov, self.dgamma, self.dbeta))


def backward(dy, cache: Optional[ForwardCache], state: SwState, config: SwConfig) -> Gradients:
    if cache is None:
        raise StateError("backward needs the cache from a matching forward_train call")
    dy = np.asarray(dy, dtype=cache.xhat.dtype)
    if dy.shape != cache.shape:
        raise ShapeError(f"upstream gradient has shape {dy.shape}, expected {cache.shape}")
    n, c, h, w = cache.shape
    hw = h * w
    g = config.group_size

    dgamma = np.sum(dy * cache.xhat, axis=(0, 2, 3))
    dbeta = np.sum(dy, axis=(0, 2, 3))
    dxhat = _to_grouped(dy * state.gamma[None, :, None, None], g)

    if config.path.kind is PathKind.EIGEN:
        dsigma, dmu, dxg = zca_backward(dxhat, cache.xc, cache.decomposition)
    else:
        dinv = dxhat @ np.swapaxes(cache.xc, -1, -2)
        dsigma = newton_backward(dinv, cache.sigma_hat, cache.decomposition)
        dxg = np.swapaxes(cache.inv_sqrt, -1, -2) @ dxhat
        dmu = -dxg.sum(axis=-1)
    dxg = dxg.copy()

    om = dict(zip(config.omega, cache.omega))
    omp = dict(zip(config.omega, cache.omega_prime))
    moments = cache.moments
    xg = cache.xg

    # Batch-pooled statistics: every sample feeds one shared moment pair.
    batch_mu = np.zeros(dmu.shape[1:], dtype=dmu.dtype)
    batch_sig = np.zeros(dsigma.shape[1:], dtype=dsigma.dtype)
    dmu_sum = dmu.sum(axis=0)
    dsig_sum = dsigma.sum(axis=0)
    if MethodTag.BW in om:
        batch_mu += om[MethodTag.BW] * dmu_sum
        batch_sig += omp[MethodTag.BW] * dsig_sum
    if MethodTag.BN in om:
        batch_mu += om[MethodTag.BN] * dmu_sum
        batch_sig += omp[MethodTag.BN] * _diag_part(dsig_sum)
    if MethodTag.BW in om or MethodTag.BN in om:
        pooled = moments.get(MethodTag.BW) or moments[MethodTag.BN]
        nhw = n * hw
        dxg += batch_mu[None, :, :, None] / nhw
        dxg += (2.0 / nhw) * (batch_sig[None] @ (xg - pooled.mean[None, :, :, None]))

    # Per-sample statistics.
    inst_mu = np.zeros_like(dmu)
    inst_sig = np.zeros_like(dsigma)
    if MethodTag.IW in om:
        inst_mu += om[MethodTag.IW] * dmu
        inst_sig += omp[MethodTag.IW] * dsigma
    if MethodTag.IN in om:
        inst_mu += om[MethodTag.IN] * dmu
        inst_sig += omp[MethodTag.IN] * _diag_part(dsigma)
    if MethodTag.IW in om or MethodTag.IN in om:
        inst = moments.get(MethodTag.IW) or moments[MethodTag.IN]
        dxg += inst_mu[..., None] / hw
        dxg += (2.0 / hw) * (inst_sig @ (xg - inst.mean[..., None]))
    if MethodTag.LN in om:
        ln = moments[MethodTag.LN]
        count = g * hw
        dm = om[MethodTag.LN] * dmu.sum(axis=-1)
        dv = omp[MethodTag.LN] * np.trace(dsigma, axis1=-2, axis2=-1)
        dxg += dm[..., None, None] / count
        dxg += (2.0 / count) * dv[..., None, None] * (xg - ln.mean[..., :1, None])

    domega = np.array([np.sum(dmu * moments[t].mean) for t in config.omega])
    domega_prime = np.array([np.sum(dsigma * moments[t].cov) for t in config.omega])
    dlambda_mean = _softmax_backward(cache.omega, domega)
    dlambda_cov = _softmax_backward(cache.omega_prime, domega_prime)

    return Gradients(dxg.reshape(cache.shape), dlambda_mean, dlambda_cov, dgamma, dbeta)


class SwitchWhitening:
    """Stateful wrapper bundling config, parameters and the last cache."""

    def __init__(self, channels: int, config: Optional[SwConfig] = None, dtype="f32"):
        self.config = config or SwConfig()
        self.state = init_state(self.config, channels, dtype)
        self.training = True
        self._cache = None

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        if self.training:
            y, self._cache = forward_train(x, self.state, self.config)
            return y
        self._cache = None
        return forward_eval(x, self.state, self.config)

    def backward(self, dy) -> Gradients:
        return backward(dy, self._cache, self.state, self.config)

    @property
    def omega(self) -> np.ndarray:
        return importance_weights(self.state.lambda_mean)

    @property
    def omega_prime(self) -> np.ndarray:
        return importance_weights(self.state.lambda_cov)
