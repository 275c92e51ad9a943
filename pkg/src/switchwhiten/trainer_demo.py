"""Toy training loop with Switchable Whitening layers.

A three-stage network (1x1 conv -> SW -> ReLU, 1x1 conv -> SW -> ReLU,
linear classifier over the flattened map) is trained with plain SGD on
synthetic images. Every sample is its class template plus pixel noise,
optionally passed through a random per-sample channel-wise affine
"style" distortion, so the amount of image-level appearance variation
is a single knob.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import TrainingDiverged
from .sw_layer import SwConfig, SwitchWhitening
from .whitening import WhiteningPath

log = logging.getLogger(__name__)

PIXEL_NOISE = 0.1


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 2
    samples_per_class: int = 256
    channels: int = 4
    height: int = 6
    width: int = 6
    style_strength: float = 1.0
    seed: int = 0


def generate_dataset(spec: SyntheticSpec):
    """Return ``(x, labels)`` with x shaped (N, C, H, W), float64."""
    rng = np.random.default_rng(spec.seed)
    c, h, w = spec.channels, spec.height, spec.width
    templates = rng.standard_normal((spec.classes, c, h, w))
    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    n = labels.size
    x = templates[labels] + PIXEL_NOISE * rng.standard_normal((n, c, h, w))
    scale = np.exp(0.5 * spec.style_strength * rng.standard_normal((n, c, 1, 1)))
    shift = spec.style_strength * rng.standard_normal((n, c, 1, 1))
    x = scale * x + shift
    order = rng.permutation(n)
    return x[order], labels[order]


class Conv1x1:
    def __init__(self, cin, cout, rng):
        self.w = rng.standard_normal((cout, cin)) * np.sqrt(2.0 / cin)
        self.b = np.zeros(cout)

    def forward(self, x):
        self.x = x
        return np.einsum("oc,nchw->nohw", self.w, x) + self.b[None, :, None, None]

    def backward(self, dy):
        self.dw = np.einsum("nohw,nchw->oc", dy, self.x)
        self.db = dy.sum(axis=(0, 2, 3))
        return np.einsum("oc,nohw->nchw", self.w, dy)

    def step(self, lr):
        self.w -= lr * self.dw
        self.b -= lr * self.db


class Linear:
    def __init__(self, fin, fout, rng):
        self.w = rng.standard_normal((fin, fout)) * np.sqrt(1.0 / fin)
        self.b = np.zeros(fout)

    def forward(self, x):
        self.x = x
        return x @ self.w + self.b

    def backward(self, dy):
        self.dw = self.x.T @ dy
        self.db = dy.sum(axis=0)
        return dy @ self.w.T

    def step(self, lr):
        self.w -= lr * self.dw
        self.b -= lr * self.db


def softmax_xent(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = labels.size
    loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-300))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


class ToyNet:
    def __init__(self, in_channels, height, width, classes, config: SwConfig, hidden=(8, 8), seed=0):
        rng = np.random.default_rng(seed)
        c1, c2 = hidden
        self.conv1 = Conv1x1(in_channels, c1, rng)
        self.sw1 = SwitchWhitening(c1, config, dtype="f64")
        self.conv2 = Conv1x1(c1, c2, rng)
        self.sw2 = SwitchWhitening(c2, config, dtype="f64")
        self.fc = Linear(c2 * height * width, classes, rng)
        self.sw_layers = [self.sw1, self.sw2]

    def train(self, mode=True):
        for sw in self.sw_layers:
            sw.training = mode

    def forward(self, x):
        h = self.sw1(self.conv1.forward(x))
        self.mask1 = h > 0
        h = self.sw2(self.conv2.forward(h * self.mask1))
        self.mask2 = h > 0
        h = h * self.mask2
        self.flat_shape = h.shape
        return self.fc.forward(h.reshape(h.shape[0], -1))

    def backward(self, dlogits):
        self.sw_grads = []
        d = self.fc.backward(dlogits).reshape(self.flat_shape) * self.mask2
        g2 = self.sw2.backward(d)
        d = self.conv2.backward(g2.dx) * self.mask1
        g1 = self.sw1.backward(d)
        self.conv1.backward(g1.dx)
        self.sw_grads = [g1, g2]

    def step(self, lr, lr_importance):
        for layer in (self.conv1, self.conv2, self.fc):
            layer.step(lr)
        for sw, g in zip(self.sw_layers, self.sw_grads):
            st = sw.state
            st.gamma = st.gamma - lr * g.dgamma
            st.beta = st.beta - lr * g.dbeta
            st.lambda_mean = st.lambda_mean - lr_importance * g.dlambda_mean
            st.lambda_cov = st.lambda_cov - lr_importance * g.dlambda_cov


@dataclass
class TrainLog:
    methods: tuple
    steps: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    omega: list = field(default_factory=list)  # per row: array (layers, |methods|)
    omega_prime: list = field(default_factory=list)
    final_accuracy: float = float("nan")

    def record(self, step, loss, net: ToyNet):
        self.steps.append(step)
        self.loss.append(float(loss))
        self.omega.append(np.stack([sw.omega for sw in net.sw_layers]))
        self.omega_prime.append(np.stack([sw.omega_prime for sw in net.sw_layers]))

    def final_mean_omega_prime(self, tag) -> float:
        k = [t.value for t in self.methods].index(getattr(tag, "value", tag))
        return float(self.omega_prime[-1][:, k].mean())

    def columns(self):
        cols = ["step", "loss"]
        layers = self.omega[0].shape[0] if self.omega else 0
        for layer in range(layers):
            cols += [f"sw{layer + 1}_omega_{t.value}" for t in self.methods]
            cols += [f"sw{layer + 1}_omegap_{t.value}" for t in self.methods]
        return cols

    def rows(self):
        for step, loss, om, omp in zip(self.steps, self.loss, self.omega, self.omega_prime):
            row = [step, repr(loss)]
            for layer in range(om.shape[0]):
                row += [repr(float(v)) for v in om[layer]]
                row += [repr(float(v)) for v in omp[layer]]
            yield row

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns())
            writer.writerows(self.rows())


def accuracy(net: ToyNet, x, labels) -> float:
    net.train(False)
    pred = np.argmax(net.forward(x), axis=1)
    net.train(True)
    return float(np.mean(pred == labels))


def train(
    data,
    config: Optional[SwConfig] = None,
    steps: int = 300,
    lr: float = 0.1,
    batch_size: int = 64,
    seed: int = 0,
    hidden=(8, 8),
    freeze_importance: bool = False,
    return_model: bool = False,
):
    """SGD on (x, labels); Θ and the importance weights share one rate.

    Row k of the log holds the weights after k updates together with the
    loss of the mini-batch forward pass made with them.
    """
    x, labels = data
    config = config or SwConfig(omega="bw,iw", group_size=4, path=WhiteningPath.newton(5))
    n, c, h, w = x.shape
    net = ToyNet(c, h, w, int(labels.max()) + 1, config, hidden=hidden, seed=seed)
    rng = np.random.default_rng(seed + 1)
    trace = TrainLog(methods=config.omega)
    order = rng.permutation(n)
    pos = 0
    for step in range(steps + 1):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos : pos + batch_size]
        pos += batch_size
        loss, dlogits = softmax_xent(net.forward(x[idx]), labels[idx])
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step}")
        trace.record(step, loss, net)
        if step == steps:
            break
        net.backward(dlogits)
        net.step(lr, 0.0 if freeze_importance else lr)
        if step % 50 == 0:
            log.debug("step %d loss %.4f", step, loss)
    trace.final_accuracy = accuracy(net, x, labels)
    if return_model:
        return trace, net
    return trace
