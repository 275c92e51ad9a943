import csv

import numpy as np
import pytest

import switchwhiten.trainer_demo as demo
from switchwhiten.errors import TrainingDiverged
from switchwhiten.gradcheck import numeric_grad
from switchwhiten.trainer_demo import (
    Conv1x1,
    Linear,
    SyntheticSpec,
    generate_dataset,
    softmax_xent,
    train,
)

SMALL = SyntheticSpec(samples_per_class=64, seed=3)


def probe_accuracy(x, labels):
    """Least-squares linear probe on raw pixels, scored on a held-out half."""
    feats = np.hstack([x.reshape(len(x), -1), np.ones((len(x), 1))])
    target = np.eye(labels.max() + 1)[labels]
    half = len(x) // 2
    w, *_ = np.linalg.lstsq(feats[:half], target[:half], rcond=None)
    return float(np.mean(np.argmax(feats[half:] @ w, axis=1) == labels[half:]))


def test_dataset_shapes_and_determinism():
    x, y = generate_dataset(SMALL)
    assert x.shape == (128, 4, 6, 6) and np.bincount(y).tolist() == [64, 64]
    x2, y2 = generate_dataset(SMALL)
    np.testing.assert_array_equal(x, x2)
    np.testing.assert_array_equal(y, y2)


def test_style_knob_hurts_raw_pixels():
    clean = probe_accuracy(*generate_dataset(SyntheticSpec(style_strength=0.0)))
    styled = probe_accuracy(*generate_dataset(SyntheticSpec(style_strength=3.0)))
    assert clean >= 0.99
    assert styled < clean


def test_softmax_xent_gradient(rng):
    logits = rng.standard_normal((5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    _, grad = softmax_xent(logits, labels)
    num = numeric_grad(lambda v: softmax_xent(v.reshape(5, 3), labels)[0], logits, 1e-6)
    np.testing.assert_allclose(grad.ravel(), num, atol=1e-9)


def test_layer_gradients(rng):
    conv = Conv1x1(3, 2, rng)
    x = rng.standard_normal((2, 3, 2, 2))
    dy = rng.standard_normal((2, 2, 2, 2))
    conv.forward(x)
    dx = conv.backward(dy)
    num = numeric_grad(lambda v: np.sum(dy * conv.forward(v.reshape(x.shape))), x, 1e-6)
    np.testing.assert_allclose(dx.ravel(), num, atol=1e-8)
    fc = Linear(4, 3, rng)
    v = rng.standard_normal((2, 4))
    g = rng.standard_normal((2, 3))
    fc.forward(v)
    fc.backward(g)
    np.testing.assert_allclose(fc.dw, v.T @ g)


def test_zero_learning_rate_keeps_uniform_weights():
    log = train(generate_dataset(SMALL), steps=5, lr=0.0)
    for om, omp in zip(log.omega, log.omega_prime):
        np.testing.assert_array_equal(om, 0.5)
        np.testing.assert_array_equal(omp, 0.5)


def test_deterministic_runs():
    a = train(generate_dataset(SMALL), steps=20)
    b = train(generate_dataset(SMALL), steps=20)
    assert a.loss == b.loss
    np.testing.assert_array_equal(a.omega_prime[-1], b.omega_prime[-1])


def test_frozen_importance_still_learns():
    log = train(generate_dataset(SMALL), steps=100, freeze_importance=True)
    np.testing.assert_array_equal(log.omega_prime[-1], 0.5)
    assert log.loss[-1] < log.loss[0]


def test_default_run_learns():
    log = train(generate_dataset(SyntheticSpec()))
    assert log.final_accuracy >= 0.95
    assert len(log.loss) == 301
    for om in log.omega + log.omega_prime:
        np.testing.assert_allclose(om.sum(axis=1), 1, atol=1e-12)


def test_csv_log(tmp_path):
    log = train(generate_dataset(SMALL), steps=3)
    path = tmp_path / "log.csv"
    log.write_csv(path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:4] == ["step", "loss", "sw1_omega_bw", "sw1_omega_iw"]
    assert rows[0][-1] == "sw2_omegap_iw"
    assert len(rows) == 5
    assert float(rows[-1][1]) == log.loss[-1]
    assert float(rows[-1][-1]) == log.omega_prime[-1][1, 1]


def test_divergence_raises(monkeypatch):
    monkeypatch.setattr(demo, "softmax_xent", lambda logits, labels: (np.nan, np.zeros_like(logits)))
    with pytest.raises(TrainingDiverged):
        train(generate_dataset(SMALL), steps=2)
