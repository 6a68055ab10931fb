import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sapo import autodiff as ad
from sapo.autodiff import Tensor, backward, grad_check
from sapo.errors import ContractError, NumericError, ShapeError


def param(x):
    return Tensor(np.array(x, dtype=float), requires_grad=True)


def test_log_softmax_symmetric():
    out = ad.log_softmax(Tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [-math.log(2)] * 2, rtol=0, atol=1e-15)


def test_log_sigmoid_values():
    assert ad.log_sigmoid(Tensor(0.0)).item() == pytest.approx(-0.6931471805599453, abs=1e-15)
    far = ad.log_sigmoid(Tensor(-1000.0)).item()
    assert math.isfinite(far) and far == pytest.approx(-1000.0)
    assert ad.log_sigmoid(Tensor(1000.0)).item() == 0.0


def test_log_softmax_dominant_logit_stays_negative():
    out = ad.log_softmax(Tensor([[50.0, 0.0, 0.0]]))
    assert out.data[0, 0] < 0


def test_product_rule():
    x, y = param(2.0), param(3.0)
    backward(x * y)
    assert x.grad == 3.0 and y.grad == 2.0


def test_log_sigmoid_grad_at_zero():
    x = param(0.0)
    backward(ad.log_sigmoid(x))
    assert x.grad == pytest.approx(0.5, abs=1e-15)


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        backward(param([1.0, 2.0]) * 2.0)


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(param(np.ones((2, 3))), param(np.ones((4, 5))))


def test_tape_cleared_after_backward():
    x = param([1.0, 2.0])
    y = ad.sum_(ad.tanh(x))
    backward(y)
    assert y._record is None


def test_grad_check_quadratic():
    theta = param([1.0, -2.0])
    rep = grad_check(lambda: ad.sum_(theta * theta), [theta], step=1e-6, tol=1e-9)
    np.testing.assert_allclose(theta.grad, [2.0, -4.0])
    assert rep.passed and rep.max_rel_error < 1e-9


def test_grad_check_rejects_nonfinite():
    x = param([1.0])
    with pytest.raises(NumericError):
        grad_check(lambda: ad.sum_(ad.log1mexp(x)), [x])


def test_two_layer_network_matches_finite_differences():
    rng = np.random.default_rng(3)
    w1, b1 = param(rng.normal(size=(4, 5))), param(rng.normal(size=5))
    w2 = param(rng.normal(size=(5, 3)))
    x = Tensor(rng.normal(size=(6, 4)))
    targets = rng.integers(0, 3, size=6)

    def f():
        h = ad.tanh(ad.matmul(x, w1) + b1)
        return ad.neg(ad.mean(ad.pick(ad.log_softmax(ad.matmul(h, w2)), targets)))

    rep = grad_check(f, [w1, b1, w2], step=1e-6, tol=1e-6)
    assert rep.passed, rep


# every primitive against central differences, on random shapes and values

shapes = st.tuples(st.integers(1, 4), st.integers(1, 4))


def _check(build, inputs, rtol=1e-6, atol=1e-8):
    # mixed tolerance: random shapes produce entries that cancel to ~0, where the
    # central-difference roundoff (~1e-10 here) swamps a purely relative measure
    for p in inputs:
        p.grad = None
    backward(build())
    for p in inputs:
        fd = np.zeros_like(p.data)
        for i in np.ndindex(p.data.shape):
            keep = p.data[i]
            p.data[i] = keep + 1e-6
            up = build().item()
            p.data[i] = keep - 1e-6
            down = build().item()
            p.data[i] = keep
            fd[i] = (up - down) / 2e-6
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        np.testing.assert_allclose(analytic, fd, rtol=rtol, atol=atol)


def _weights(rng, shape):
    # magnitudes in [0.5, 1.5]: keeps every gradient entry above the roundoff floor
    return Tensor(rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape))


@settings(max_examples=100, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**31 - 1))
def test_elementwise_adjoints(shape, seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng.normal(size=shape)), param(rng.normal(size=shape))
    bias = param(rng.normal(size=shape[1]))
    w = _weights(rng, shape)
    _check(lambda: ad.sum_((a + b) * w), [a, b])
    # each factor is the other's gradient, so keep both away from zero
    ma = param(_weights(rng, shape).data)
    mb = param(_weights(rng, shape).data)
    _check(lambda: ad.sum_(ad.mul(ma, mb) * w), [ma, mb])
    _check(lambda: ad.sum_((a + bias) * w), [a, bias])
    _check(lambda: ad.sum_(ad.scale(a, -1.7) * w - 3.0), [a])
    _check(lambda: ad.sum_(ad.tanh(a) * w), [a])
    _check(lambda: ad.sum_(ad.log_sigmoid(a * 2.0) * w), [a])
    _check(lambda: ad.mean(a * w), [a])
    _check(lambda: ad.sum_(ad.sum_(a, axis=0) * w[0]), [a])


@settings(max_examples=100, deadline=None)
@given(shape=shapes, inner=st.integers(1, 4), seed=st.integers(0, 2**31 - 1))
def test_matrix_adjoints(shape, inner, seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng.normal(size=(shape[0], inner))), param(rng.normal(size=(inner, shape[1])))
    w = _weights(rng, shape)
    _check(lambda: ad.sum_(ad.matmul(a, b) * w), [a, b])
    x = param(rng.normal(size=shape))
    _check(lambda: ad.sum_(ad.log_softmax(x) * w), [x])
    table = param(rng.normal(size=shape))
    idx = rng.integers(0, shape[0], size=(3, 2))
    wg = _weights(rng, (3, 2, shape[1]))
    _check(lambda: ad.sum_(ad.gather_rows(table, idx) * wg), [table])
    picks = rng.integers(0, shape[1], size=shape[0])
    wp = _weights(rng, (shape[0],))
    _check(lambda: ad.sum_(ad.pick(x, picks) * wp), [x])
    _check(lambda: ad.sum_(ad.reshape(x, (shape[0] * shape[1],)) * wp.data.sum()), [x])


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 2**31 - 1))
def test_log1mexp_adjoint(n, seed):
    rng = np.random.default_rng(seed)
    x = param(-rng.uniform(0.05, 6.0, size=n))
    w = _weights(rng, (n,))
    _check(lambda: ad.sum_(ad.log1mexp(x) * w), [x])


def test_backward_is_linear():
    rng = np.random.default_rng(0)
    x = param(rng.normal(size=(3, 3)))
    f1 = lambda: ad.sum_(ad.tanh(x))  # noqa: E731
    f2 = lambda: ad.sum_(ad.log_softmax(x * 2.0))  # noqa: E731
    backward(f1())
    g1 = x.grad.copy()
    x.grad = None
    backward(f2())
    g2 = x.grad.copy()
    x.grad = None
    backward(f1() + f2())
    np.testing.assert_allclose(x.grad, g1 + g2, rtol=1e-14, atol=1e-15)


def test_identical_forward_passes_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        w = param(rng.normal(size=(5, 4)))
        x = Tensor(rng.normal(size=(3, 5)))
        return ad.log_softmax(ad.tanh(ad.matmul(x, w))).data

    assert run().tobytes() == run().tobytes()
