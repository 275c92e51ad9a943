"""Wall-clock benchmarks of the training forward pass."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .sw_layer import SwConfig, forward_train, init_state
from .tensor_core import resolve_dtype
from .whitening import WhiteningPath

MIN_REPS = 10

CSV_FIELDS = ("kind", "path", "N", "C", "H", "W", "G", "reps", "mean_s", "std_s", "min_s", "cost")


@dataclass
class BenchResult:
    path: str
    shape: tuple
    G: int
    reps: int
    mean_s: float
    std_s: float
    min_s: float
    kind: str = "bench"

    @property
    def cost(self) -> int:
        n, c, h, w = self.shape
        return complexity(n, c, h, w, self.G)

    def csv_row(self) -> list:
        n, c, h, w = self.shape
        return [self.kind, self.path, n, c, h, w, self.G, self.reps,
                f"{self.mean_s:.6e}", f"{self.std_s:.6e}", f"{self.min_s:.6e}", self.cost]

    def to_dict(self) -> dict:
        return dict(asdict(self), cost=self.cost)


def complexity(n, c, h, w, g) -> int:
    """Operation-count model of group whitening: N*C*G*max(HW, G)."""
    return n * c * g * max(h * w, g)


def _path(name: str, steps: int = 5) -> WhiteningPath:
    if name == "eigen":
        return WhiteningPath.eigen()
    if name == "newton":
        return WhiteningPath.newton(steps)
    raise ConfigError(f"unknown whitening path {name!r}")


def time_forward(shape, group_size, path="newton", reps=MIN_REPS, warmup=2,
                 omega="bw,iw", dtype="f32", seed=0, kind="bench") -> BenchResult:
    if reps < MIN_REPS:
        raise ConfigError(f"need at least {MIN_REPS} repetitions, got {reps}")
    n, c, h, w = shape
    config = SwConfig(omega=omega, group_size=group_size, path=_path(path))
    state = init_state(config, c, dtype)
    x = np.random.default_rng(seed).standard_normal(shape).astype(resolve_dtype(dtype))
    for _ in range(warmup):
        forward_train(x, state, config)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        forward_train(x, state, config)
        times.append(time.perf_counter() - t0)
    times = np.array(times)
    return BenchResult(path, tuple(shape), group_size, reps, float(times.mean()), float(times.std()),
                       float(times.min()), kind)


def scaling_shapes(base):
    """Four points doubling N, then HW, then N again."""
    n, c, h, w = base
    return [(n, c, h, w), (2 * n, c, h, w), (2 * n, c, h, 2 * w), (4 * n, c, h, 2 * w)]


def scaling_sweep(base=(8, 64, 16, 16), group_size=16, path="newton", reps=MIN_REPS, **kw) -> list:
    return [time_forward(s, group_size, path, reps, kind="scaling", **kw) for s in scaling_shapes(base)]


def fit_ratio(results) -> float:
    """Worst-case factor between measured time and the fitted cost model.

    The model constant is the geometric mean of time/cost over all points;
    the returned value is max over points of max(r, 1/r) for
    r = time / (constant * cost).
    """
    t = np.array([r.min_s for r in results])
    cost = np.array([r.cost for r in results], dtype=float)
    k = np.exp(np.mean(np.log(t / cost)))
    r = t / (k * cost)
    return float(np.max(np.maximum(r, 1.0 / r)))
