import numpy as np
import pytest

from switchwhiten.errors import ConfigError, DegenerateSpectrum, NumericalFailure, ShapeError
from switchwhiten.stats import instance_moments
from switchwhiten.whitening import (
    WhiteningPath,
    check_spectral_gap,
    newton_backward,
    newton_inverse_sqrt,
    whiten_apply,
    zca_backward,
    zca_inverse_sqrt,
)

from conftest import random_spd


def sym_fd(f, sigma, h=1e-6):
    """Gradient of f over symmetric matrices, reported as a symmetric matrix."""
    d = sigma.shape[0]
    g = np.zeros_like(sigma)
    for i in range(d):
        for j in range(i, d):
            e = np.zeros_like(sigma)
            e[i, j] = e[j, i] = h
            v = (f(sigma + e) - f(sigma - e)) / (2 * h)
            g[i, j] = g[j, i] = v if i == j else v / 2
    return g


def test_zca_identity_and_diagonal():
    m, _ = zca_inverse_sqrt(np.eye(3))
    np.testing.assert_allclose(m, np.eye(3), atol=1e-15)
    m, _ = zca_inverse_sqrt(np.diag([4.0, 1.0]))
    np.testing.assert_allclose(m, np.diag([0.5, 1.0]), atol=1e-15)


def test_zca_whitens(rng):
    s = random_spd(rng, 8, cond=50)
    m, _ = zca_inverse_sqrt(s)
    np.testing.assert_allclose(m @ s @ m, np.eye(8), atol=1e-9)
    np.testing.assert_allclose(m, m.T, atol=0)
    np.testing.assert_allclose(m @ s, s @ m, atol=1e-9)


def test_zca_scale_equivariance(rng):
    s = random_spd(rng, 5)
    a, _ = zca_inverse_sqrt(s)
    b, _ = zca_inverse_sqrt(9.0 * s)
    np.testing.assert_allclose(b, a / 3.0, atol=1e-12)


def test_zca_rejects_indefinite():
    with pytest.raises(NumericalFailure):
        zca_inverse_sqrt(np.diag([1.0, -0.5]))


def test_newton_scalar_exact():
    m, _ = newton_inverse_sqrt(np.array([[4.0]]), 3)
    np.testing.assert_allclose(m, [[0.5]], atol=1e-15)


def test_newton_diag_example():
    s = np.diag([4.0, 1.0])
    m, _ = newton_inverse_sqrt(s, 5)
    exact = np.diag([0.5, 1.0])
    assert np.linalg.norm(m - exact) / np.linalg.norm(exact) <= 1e-3


@pytest.mark.parametrize("d", [2, 4, 16])
def test_newton_identity_converges(d):
    # trace normalization starts I at I/d; more steps are needed as d grows
    m, _ = newton_inverse_sqrt(np.eye(d), 8)
    np.testing.assert_allclose(m, np.eye(d), atol=1e-9)


def test_newton_matches_zca_with_enough_steps(rng):
    s = random_spd(rng, 6, cond=20)
    exact, _ = zca_inverse_sqrt(s)
    approx, _ = newton_inverse_sqrt(s, 10)
    np.testing.assert_allclose(approx, exact, atol=1e-9)


def test_newton_long_run_instability_is_reported(rng):
    # past convergence, rounding errors grow geometrically in the uncoupled
    # iteration; the divergence guard must turn that into an error
    s = random_spd(rng, 6, cond=20)
    with pytest.raises(NumericalFailure):
        newton_inverse_sqrt(s, 60)


def test_newton_error_monotone_in_steps(rng):
    for _ in range(5):
        s = random_spd(rng, 16, cond=rng.uniform(1, 100))
        exact, _ = zca_inverse_sqrt(s)
        errs = [np.linalg.norm(newton_inverse_sqrt(s, t)[0] - exact) for t in range(1, 11)]
        assert all(b <= a * (1 + 1e-12) for a, b in zip(errs, errs[1:]))


def test_newton_divergence_detected():
    with pytest.raises(NumericalFailure):
        newton_inverse_sqrt(np.diag([1.0, -0.5]), 10)


def test_newton_bad_arguments():
    with pytest.raises(ConfigError):
        newton_inverse_sqrt(np.eye(2), 0)
    with pytest.raises(ShapeError):
        newton_inverse_sqrt(np.zeros((2, 3)))
    with pytest.raises(ConfigError):
        WhiteningPath.newton(0)


def test_whiten_apply_identity(rng):
    x = rng.standard_normal((3, 10))
    np.testing.assert_allclose(whiten_apply(x, np.zeros(3), np.eye(3)), x)
    with pytest.raises(ShapeError):
        whiten_apply(x, np.zeros(2), np.eye(3))


def test_self_whitening_shrinkage(rng):
    eps = 1e-2
    x = rng.standard_normal((4, 50)) * np.array([[0.1], [1], [2], [5]])
    m = instance_moments(x, eps)
    u, _ = zca_inverse_sqrt(m.cov)
    xhat = whiten_apply(x, m.mean, u)
    out = np.cov(xhat, bias=True)
    sigma = np.linalg.eigvalsh(m.cov - eps * np.eye(4))
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(out)), np.sort(sigma / (sigma + eps)), atol=1e-10)


def test_spectral_gap_check():
    check_spectral_gap(np.array([3.0, 2.0, 1.0]))
    with pytest.raises(DegenerateSpectrum) as info:
        check_spectral_gap(np.array([2.0, 2.0, 1.0]))
    assert info.value.gap == 0.0


def test_zca_backward_fd(rng):
    s = random_spd(rng, 4, cond=5)
    xc = rng.standard_normal((4, 7))
    g = rng.standard_normal((4, 7))
    _, eig = zca_inverse_sqrt(s)
    dsigma, dmu, dxc = zca_backward(g, xc, eig)
    num = sym_fd(lambda m: np.sum(g * (zca_inverse_sqrt(m)[0] @ xc)), s)
    np.testing.assert_allclose(dsigma, num, rtol=1e-6, atol=1e-8)
    u, _ = zca_inverse_sqrt(s)
    np.testing.assert_allclose(dxc, u.T @ g, atol=1e-12)
    np.testing.assert_allclose(dmu, -dxc.sum(axis=-1), atol=1e-12)


@pytest.mark.parametrize("steps", [1, 5])
def test_newton_backward_fd(rng, steps):
    s = random_spd(rng, 4, cond=5)
    g = rng.standard_normal((4, 4))
    _, stack = newton_inverse_sqrt(s, steps)
    dsigma = newton_backward(g, s, stack)
    num = sym_fd(lambda m: np.sum(g * newton_inverse_sqrt(m, steps)[0]), s)
    np.testing.assert_allclose(dsigma, num, rtol=1e-6, atol=1e-8)
