import numpy as np
import pytest

from patkit.core import tensor as T
from patkit.core.gradcheck import grad_check, rel_error
from patkit.core.nn import Linear


def test_quadratic_is_exact():
    # central differences have no truncation error on a quadratic
    rep = grad_check(lambda x: (x * x).sum(), [np.array([0.5, -1.25, 3.0])])
    for e in rep.entries:
        assert abs(e.analytic - e.numeric) < 1e-9
    assert [e.analytic for e in rep.entries] == pytest.approx([1.0, -2.5, 6.0], abs=1e-12)


def test_detects_wrong_gradient():
    def bad(x):
        out = T.Tensor(x.data * 3, requires_grad=True)  # graph cut: backward sees no dependence
        return (out + x).sum()

    rep = grad_check(bad, [np.ones(2)])
    assert not rep.passed and len(rep.failures) == 2
    assert "FAIL" in rep.summary()


def test_layer_parameters_checked():
    rng = np.random.default_rng(0)
    lin = Linear(3, 2, rng)
    w = T.Tensor(rng.normal(size=(4, 2)), dtype=np.float64)
    rep = grad_check(lambda x: (T.elu(lin(x)) * w).sum(), [rng.normal(size=(4, 3))], wrt=lin.parameters())
    assert rep.passed, rep.summary()
    assert len(rep.entries) == 12 + 6 + 2


def test_composite_softmax_log():
    rng = np.random.default_rng(1)
    w = T.Tensor(rng.normal(size=(3, 5)), dtype=np.float64)
    rep = grad_check(lambda x: (T.log(T.softmax(x)) * w).sum(), [rng.normal(size=(3, 5))])
    assert rep.max_rel_error < 1e-6


def test_rel_error_floor():
    assert rel_error(0.0, 1e-9) == pytest.approx(1e-3)
    assert rel_error(2.0, 1.0) == 0.5
