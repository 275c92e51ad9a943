"""Central finite-difference checks for the layer's analytic gradients."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import DegenerateSpectrum, OracleFailure
from .sw_layer import PRESETS, SwConfig, SwState, backward, forward_train, init_state
from .whitening import WhiteningPath

DEFAULT_TOL = 1e-4
DEFAULT_STEP = 1e-5
DEFAULT_SHAPE = (4, 8, 3, 3)
DEFAULT_GROUP = 4
MAX_RESEEDS = 3
PARAMS = ("x", "lambda_mean", "lambda_cov", "gamma", "beta")


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    worst_index: Optional[int]
    passed: bool
    tol: float
    omega: str = ""
    path: str = ""
    seed: Optional[int] = None
    skipped: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def numeric_grad(f: Callable[[np.ndarray], float], x, h) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64).ravel()
    steps = np.broadcast_to(np.asarray(h, dtype=np.float64), x.shape)
    grad = np.empty_like(x)
    for i in range(x.size):
        hi = steps[i]
        if not hi > 0:
            raise OracleFailure("finite-difference step must be positive")
        orig = x[i]
        x[i] = orig + hi
        fp = f(x)
        x[i] = orig - hi
        fm = f(x)
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFailure(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2 * hi)
    return grad


def compare(name: str, analytic, numeric, tol: float) -> GradReport:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.abs(a - n)
    rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    worst = int(np.argmax(rel)) if rel.size else None
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradReport(
        name=name,
        max_rel_error=max_rel,
        max_abs_error=float(diff.max()) if diff.size else 0.0,
        worst_index=worst,
        passed=max_rel <= tol,
        tol=tol,
    )


def random_problem(config: SwConfig, shape, seed: int, zero_dy: bool = False):
    """Random input, upstream gradient and non-trivial parameters (float64)."""
    rng = np.random.default_rng(seed)
    n, c, h, w = shape
    k = len(config.omega)
    state = init_state(config, c, "f64")
    state.lambda_mean = 1.0 + 0.5 * rng.standard_normal(k)
    state.lambda_cov = 1.0 + 0.5 * rng.standard_normal(k)
    state.gamma = 1.0 + 0.2 * rng.standard_normal(c)
    state.beta = 0.1 * rng.standard_normal(c)
    x = rng.standard_normal(shape)
    dy = np.zeros(shape) if zero_dy else rng.standard_normal(shape)
    return x, dy, state


def _step(v: np.ndarray, rel: float) -> float:
    scale = float(np.sqrt(np.mean(np.square(v)))) if v.size else 1.0
    return rel * (scale if scale > 0 else 1.0)


def check_problem(config, x, dy, state: SwState, tol=DEFAULT_TOL, step_rel=DEFAULT_STEP) -> list:
    """Finite-difference reports for one fixed (x, dy, state) problem."""
    y, cache = forward_train(x, state.copy(), config)
    grads = backward(dy, cache, state, config)
    analytic = dict(zip(PARAMS, grads))

    def probe(xx, st):
        out, _ = forward_train(xx, st, config)
        return float(np.sum(dy * out))

    reports = []
    for name in PARAMS:
        if name == "x":
            f = lambda v: probe(v.reshape(x.shape), state.copy())  # noqa: E731
            base = x
        else:
            base = getattr(state, name)

            def f(v, name=name):
                st = state.copy()
                setattr(st, name, v.reshape(base.shape))
                return probe(x, st)

        num = numeric_grad(f, base, _step(base, step_rel))
        reports.append(compare(name, analytic[name], num, tol))
    return reports


def check_sw_layer(
    config: SwConfig,
    shape=DEFAULT_SHAPE,
    seed: int = 0,
    tol: float = DEFAULT_TOL,
    step_rel: float = DEFAULT_STEP,
    zero_dy: bool = False,
) -> list:
    """Compare every analytic gradient of the layer with central differences.

    A degenerate covariance spectrum on the eigen path triggers a reseed
    (up to three times); if it persists the reports are marked skipped.
    """
    tags = ",".join(t.value for t in config.omega)
    for attempt in range(MAX_RESEEDS + 1):
        s = seed + 7919 * attempt
        x, dy, state = random_problem(config, shape, s, zero_dy)
        try:
            reports = check_problem(config, x, dy, state, tol, step_rel)
        except DegenerateSpectrum:
            continue
        for r in reports:
            r.omega, r.path, r.seed = tags, config.path.kind.value, s
        return reports
    return [
        GradReport(name, float("nan"), float("nan"), None, False, tol, tags, config.path.kind.value, seed, True)
        for name in PARAMS
    ]


def suite_configs(omegas: Iterable = ("bw,iw", "all"), paths: Iterable = ("eigen", "newton"), group_size=DEFAULT_GROUP, steps=5):
    for om in omegas:
        for p in paths:
            path = WhiteningPath.eigen() if p == "eigen" else WhiteningPath.newton(steps)
            yield SwConfig(omega=PRESETS.get(om, om), group_size=group_size, path=path)


def run_suite(
    seeds: Iterable[int] = range(5),
    omegas: Iterable = ("bw,iw", "all"),
    paths: Iterable = ("eigen", "newton"),
    tol: float = DEFAULT_TOL,
    shape=DEFAULT_SHAPE,
    group_size: int = DEFAULT_GROUP,
    step_rel: float = DEFAULT_STEP,
) -> list:
    reports = []
    for config in suite_configs(omegas, paths, group_size):
        for seed in seeds:
            reports.extend(check_sw_layer(config, shape, seed, tol, step_rel))
    return reports
