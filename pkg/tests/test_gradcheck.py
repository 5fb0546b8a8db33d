import numpy as np
import pytest

from twostream.gradcheck import (NEGATIVE_CONTROL, SUITES, TOL, check_op, numeric_grad,
                                 rel_error, run_all, run_suite)


def test_numeric_grad_of_square():
    x = np.array([-1.5, 0.0, 2.0])
    g = numeric_grad(lambda: float((x ** 2).sum()), x)
    assert np.allclose(g, 2 * np.array([-1.5, 0.0, 2.0]), atol=1e-9)
    # x was perturbed in place and must be restored
    assert x.tolist() == [-1.5, 0.0, 2.0]


def test_rel_error_scale():
    assert rel_error(np.array([2.0, 0.0]), np.array([1.0, 0.0])) == 0.5
    assert rel_error(np.zeros(3), np.zeros(3)) == 0.0


@pytest.mark.parametrize("name", list(SUITES))
def test_suite_passes_on_five_shapes(name):
    r = run_suite(name, trials=5)
    assert r.shapes == 5
    assert r.max_rel_error <= TOL, r


def test_negative_control_is_caught():
    # analytic 4x against numeric 2x: relative error is exactly one half
    r = run_suite(NEGATIVE_CONTROL, trials=3)
    assert not r.passed
    assert r.max_rel_error == pytest.approx(0.5, abs=1e-8)


def test_unknown_suite():
    with pytest.raises(KeyError, match="unknown op"):
        run_suite("conv9d")


def test_run_all_subset_and_seed_determinism():
    a = run_all(["fc", "softmax"], trials=2, seed=7)
    b = run_all(["fc", "softmax"], trials=2, seed=7)
    assert [r.op for r in a] == ["fc", "softmax"]
    assert [r.max_rel_error for r in a] == [r.max_rel_error for r in b]


def test_check_op_reports_missing_gradient(rng):
    from twostream.tensor import Tensor

    def detached(x):
        return Tensor(x.data * 3.0)

    assert check_op(detached, [rng.normal(size=4)], rng) == pytest.approx(1.0)
