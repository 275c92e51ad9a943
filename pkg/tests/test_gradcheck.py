import json

import numpy as np
import pytest

from switchwhiten.errors import OracleFailure
from switchwhiten.gradcheck import check_sw_layer, compare, numeric_grad, run_suite
from switchwhiten.sw_layer import SwConfig
from switchwhiten.whitening import WhiteningPath


def test_numeric_grad_quadratic():
    a = np.array([[2.0, 1.0], [1.0, 3.0]])
    f = lambda v: 0.5 * v @ a @ v  # noqa: E731
    x = np.array([0.3, -0.7])
    np.testing.assert_allclose(numeric_grad(f, x, 1e-5), a @ x, atol=1e-9)


def test_numeric_grad_constant_and_failures():
    np.testing.assert_array_equal(numeric_grad(lambda v: 4.0, np.ones(3), 1e-3), 0)
    with pytest.raises(OracleFailure):
        numeric_grad(lambda v: np.inf if v[0] < 0 else v[0], np.array([0.0]), 1e-3)
    with pytest.raises(OracleFailure):
        numeric_grad(lambda v: 1.0, np.ones(2), 0.0)


def test_compare_relative_error():
    r = compare("t", [1.0, 2.0], [1.0, 2.002], 1e-3)
    assert r.max_rel_error == pytest.approx(0.002 / 2.002)
    assert r.worst_index == 1 and r.passed
    # tiny values compare on the 1e-8 floor, not relative to each other
    assert compare("t", [1e-12], [2e-12], 1e-3).passed
    report = json.loads(r.to_json())
    assert report["name"] == "t" and report["passed"] is True


def test_zero_upstream_gradient_reports():
    config = SwConfig(omega="all", group_size=4, path=WhiteningPath.newton())
    for r in check_sw_layer(config, seed=0, zero_dy=True):
        assert r.passed and r.max_abs_error == 0


@pytest.mark.parametrize("step", [1e-4, 1e-5, 1e-6])
def test_step_size_insensitivity(step):
    config = SwConfig(omega="bw,iw", group_size=4)
    for r in check_sw_layer(config, seed=3, step_rel=step):
        assert r.passed, r


def test_tight_tolerance_fails():
    config = SwConfig(omega="bw,iw", group_size=4)
    assert not all(r.passed for r in check_sw_layer(config, seed=0, tol=1e-12))


def test_suite_metadata():
    reports = run_suite(seeds=[0], omegas=["bw,iw"], paths=["newton"])
    assert len(reports) == 5
    assert {r.path for r in reports} == {"newton"}
    assert {r.omega for r in reports} == {"bw,iw"}
    assert all(r.passed for r in reports)
