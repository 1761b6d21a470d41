"""Engine tests: forward values against direct oracles, gradients against
central finite differences (h=1e-6, rel tol 1e-5, floor 1e-8)."""

import numpy as np
import pytest

from qfit import autodiff as ad
from qfit.errors import NonFiniteError, ShapeError

from oracles import conv2d_direct, instance_norm_direct

RTOL = 1e-5
H = 1e-6


def check(f, arrays, name, rng=None, max_coords=None):
    res = ad.gradcheck(f, arrays, h=H, rtol=RTOL, max_coords_per_input=max_coords,
                       rng=rng, name=name)
    assert res.passed, f"{name}: max rel err {res.max_rel_err:.3e}"
    return res


def away_from_zero(rng, shape, lo=0.2, hi=1.5):
    """Random values bounded away from 0 so kinked ops stay differentiable."""
    mag = rng.uniform(lo, hi, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


# ---------------------------------------------------------------------------
# forward agreement with oracles
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("shape,k,o", [((2, 3, 8, 7), 3, 4), ((1, 2, 5, 5), 5, 3), ((2, 1, 6, 6), 1, 2)])
def test_conv2d_forward_matches_direct(shape, k, o):
    rng = np.random.default_rng(7)
    x = rng.normal(size=shape)
    w = rng.normal(size=(o, shape[1], k, k))
    b = rng.normal(size=o)
    got = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b)).data
    want = conv2d_direct(x, w, b)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 6, 6))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    b = np.zeros(3)
    y = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b)).data
    np.testing.assert_allclose(y, x, atol=1e-14)


def test_instance_norm_forward_matches_direct():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 3, 8, 8)) * 10.0
    gamma = rng.normal(size=3)
    beta = rng.normal(size=3)
    got = ad.instance_norm(ad.Tensor(x), ad.Tensor(gamma), ad.Tensor(beta)).data
    want = instance_norm_direct(x, gamma, beta)
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)


def test_instance_norm_statistics():
    # variance ~100 makes the eps bias v/(v+eps) irrelevant at the 1e-6 level
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 8, 8)) * 10.0
    y = ad.instance_norm(ad.Tensor(x), ad.Tensor(np.ones(3)), ad.Tensor(np.zeros(3))).data
    for n in range(2):
        for c in range(3):
            plane = y[n, c]
            assert abs(plane.mean()) < 1e-12
            assert abs(plane.var() - 1.0) < 1e-6


def test_elementwise_forward_values():
    a = ad.Tensor([1.0, -2.0, 3.0])
    b = ad.Tensor([4.0, 5.0, -6.0])
    np.testing.assert_allclose((a + b).data, [5.0, 3.0, -3.0])
    np.testing.assert_allclose((a * b).data, [4.0, -10.0, -18.0])
    np.testing.assert_allclose((a - b).data, [-3.0, -7.0, 9.0])
    np.testing.assert_allclose((a / b).data, [0.25, -0.4, -0.5])
    np.testing.assert_allclose(ad.relu(a).data, [1.0, 0.0, 3.0])
    np.testing.assert_allclose(ad.exp(ad.Tensor([0.0, 1.0])).data, [1.0, np.e])
    np.testing.assert_allclose(ad.sigmoid(ad.Tensor([0.0])).data, [0.5])
    np.testing.assert_allclose(ad.softplus(ad.Tensor([0.0])).data, [np.log(2.0)])
    # softplus must not overflow for large inputs
    assert ad.softplus(ad.Tensor([800.0])).data[0] == pytest.approx(800.0)
    assert ad.softplus(ad.Tensor([-800.0])).data[0] == pytest.approx(0.0, abs=1e-300)


def test_reductions_forward():
    x = np.array([[1.0, -2.0], [3.0, -4.0]])
    assert ad.reduce_sum(ad.Tensor(x)).item() == pytest.approx(-2.0)
    assert ad.reduce_mean(ad.Tensor(x)).item() == pytest.approx(-0.5)
    assert ad.reduce_abs_mean(ad.Tensor(x)).item() == pytest.approx(2.5)


# ---------------------------------------------------------------------------
# gradient checks, 10 random configurations per op
# ---------------------------------------------------------------------------

def test_gradcheck_elementwise_ops():
    rng = np.random.default_rng(42)
    for trial in range(10):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        a = rng.normal(size=shape)
        b = away_from_zero(rng, shape, lo=0.5, hi=2.0)
        check(lambda x, y: ad.reduce_sum(ad.mul(ad.add(x, y), ad.sub(x, y))), [a, b], f"add-sub-mul[{trial}]")
        check(lambda x, y: ad.reduce_sum(ad.div(x, y)), [a, b], f"div[{trial}]")
        check(lambda x: ad.reduce_sum(ad.exp(x)), [a * 0.5], f"exp[{trial}]")
        check(lambda x: ad.reduce_sum(ad.sigmoid(x)), [a], f"sigmoid[{trial}]")
        check(lambda x: ad.reduce_sum(ad.softplus(x)), [a], f"softplus[{trial}]")
        check(lambda x: ad.reduce_sum(ad.relu(x)), [away_from_zero(rng, shape)], f"relu[{trial}]")
        check(lambda x: ad.reduce_abs_mean(x), [away_from_zero(rng, shape)], f"abs_mean[{trial}]")
        check(lambda x: ad.reduce_mean(ad.neg(x)), [a], f"neg-mean[{trial}]")


def test_gradcheck_matmul():
    rng = np.random.default_rng(1)
    for trial in range(10):
        m, k, n = rng.integers(1, 6, size=3)
        a = rng.normal(size=(m, k))
        b = rng.normal(size=(k, n))
        check(lambda x, y: ad.reduce_sum(ad.matmul(x, y)), [a, b], f"matmul[{trial}]")


def test_gradcheck_matmul_nonuniform_weighting():
    # weight the output so every input coordinate has a distinct gradient
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    wgt = rng.normal(size=(3, 2))
    check(lambda x, y: ad.reduce_sum(ad.mul(ad.matmul(x, y), ad.Tensor(wgt))), [a, b], "matmul-weighted")


def test_gradcheck_shape_ops():
    rng = np.random.default_rng(3)
    for trial in range(10):
        a = rng.normal(size=(2, 3, 4))
        wgt = rng.normal(size=(4, 6))
        check(lambda x: ad.reduce_sum(ad.mul(ad.reshape(x, (4, 6)), ad.Tensor(wgt))), [a], f"reshape[{trial}]")
        wgt2 = rng.normal(size=(4, 2, 3))
        check(lambda x: ad.reduce_sum(ad.mul(ad.transpose(x, (2, 0, 1)), ad.Tensor(wgt2))), [a], f"transpose[{trial}]")
        bpart = rng.normal(size=(2, 2, 4))
        wgt3 = rng.normal(size=(2, 5, 4))
        check(lambda x, y: ad.reduce_sum(ad.mul(ad.concat([x, y], axis=1), ad.Tensor(wgt3))),
              [a, bpart], f"concat[{trial}]")
        wgt4 = rng.normal(size=(2, 2, 4))
        check(lambda x: ad.reduce_sum(ad.mul(ad.narrow(x, 1, 1, 2), ad.Tensor(wgt4))), [a], f"narrow[{trial}]")


def test_gradcheck_conv2d():
    rng = np.random.default_rng(4)
    for trial in range(10):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        o = int(rng.integers(1, 4))
        k = int(rng.choice([1, 3]))
        h = int(rng.integers(k, 7))
        wd = int(rng.integers(k, 7))
        x = rng.normal(size=(n, c, h, wd))
        w = rng.normal(size=(o, c, k, k)) / (c * k * k) ** 0.5
        b = rng.normal(size=o)
        wgt = rng.normal(size=(n, o, h, wd))
        check(lambda xx, ww, bb: ad.reduce_sum(ad.mul(ad.conv2d(xx, ww, bb), ad.Tensor(wgt))),
              [x, w, b], f"conv2d[{trial}]")


def test_gradcheck_instance_norm():
    rng = np.random.default_rng(5)
    for trial in range(10):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        h = int(rng.integers(2, 6))
        wd = int(rng.integers(2, 6))
        x = rng.normal(size=(n, c, h, wd))
        gamma = rng.normal(size=c)
        beta = rng.normal(size=c)
        wgt = rng.normal(size=(n, c, h, wd))
        check(lambda xx, gg, bb: ad.reduce_sum(ad.mul(ad.instance_norm(xx, gg, bb), ad.Tensor(wgt))),
              [x, gamma, beta], f"instance_norm[{trial}]")


def test_gradcheck_broadcasting():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(3, 1))
    b = rng.normal(size=(1, 4))
    check(lambda x, y: ad.reduce_sum(ad.mul(x, y)), [a, b], "broadcast-mul")
    c = rng.normal(size=(2, 3, 4))
    d = rng.normal(size=(4,))
    check(lambda x, y: ad.reduce_sum(ad.add(x, y)), [c, d], "broadcast-add")
    s = np.array(1.3)
    check(lambda x, y: ad.reduce_sum(ad.mul(x, y)), [c, s], "broadcast-scalar")


# ---------------------------------------------------------------------------
# graph mechanics
# ---------------------------------------------------------------------------

def test_shared_subexpression_accumulates():
    x = ad.Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = ad.add(ad.mul(x, x), ad.mul(x, x))  # d/dx (2x^2) = 4x
    ad.backward(ad.reduce_sum(y))
    np.testing.assert_allclose(x.grad, [8.0, 12.0])


def test_backward_overwrites_grad():
    x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        loss = ad.reduce_sum(ad.mul(x, x))
        ad.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_unreachable_param_gets_zeros():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    orphan = ad.Tensor(np.ones(2), requires_grad=True)
    loss = ad.reduce_sum(x)
    ad.backward(loss, params=[x, orphan])
    np.testing.assert_allclose(orphan.grad, np.zeros(2))
    np.testing.assert_allclose(x.grad, np.ones(3))


def test_relu_subgradient_zero_at_kink():
    x = ad.Tensor(np.array([0.0, -1.0, 1.0]), requires_grad=True)
    ad.backward(ad.reduce_sum(ad.relu(x)))
    np.testing.assert_allclose(x.grad, [0.0, 0.0, 1.0])


def test_abs_mean_subgradient_zero_at_zero():
    x = ad.Tensor(np.array([0.0, -2.0, 2.0]), requires_grad=True)
    ad.backward(ad.reduce_abs_mean(x))
    np.testing.assert_allclose(x.grad, [0.0, -1.0 / 3.0, 1.0 / 3.0])


def test_deterministic_replay():
    def run():
        rng = np.random.default_rng(123)
        x = ad.Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
        w = ad.Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        b = ad.Tensor(rng.normal(size=4), requires_grad=True)
        y = ad.relu(ad.conv2d(x, w, b))
        loss = ad.reduce_mean(ad.mul(y, y))
        ad.backward(loss, params=[x, w, b])
        return loss.item(), x.grad.copy(), w.grad.copy(), b.grad.copy()

    l1, gx1, gw1, gb1 = run()
    l2, gx2, gw2, gb2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2) and np.array_equal(gb1, gb2)


# ---------------------------------------------------------------------------
# error behavior
# ---------------------------------------------------------------------------

def test_conv2d_shape_errors():
    x = ad.Tensor(np.zeros((1, 3, 5, 5)))
    with pytest.raises(ShapeError):
        ad.conv2d(x, ad.Tensor(np.zeros((2, 4, 3, 3))), ad.Tensor(np.zeros(2)))  # channel mismatch
    with pytest.raises(ShapeError):
        ad.conv2d(x, ad.Tensor(np.zeros((2, 3, 4, 4))), ad.Tensor(np.zeros(2)))  # even kernel
    with pytest.raises(ShapeError):
        ad.conv2d(x, ad.Tensor(np.zeros((2, 3, 3, 3))), ad.Tensor(np.zeros(3)))  # bad bias


def test_instance_norm_errors():
    with pytest.raises(ShapeError):
        ad.instance_norm(ad.Tensor(np.zeros((1, 2, 1, 1))), ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2)))
    with pytest.raises(ShapeError):
        ad.instance_norm(ad.Tensor(np.zeros((1, 2, 4, 4))), ad.Tensor(np.ones(3)), ad.Tensor(np.zeros(2)))


def test_matmul_errors():
    with pytest.raises(ShapeError):
        ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))))
    with pytest.raises(ShapeError):
        ad.matmul(ad.Tensor(np.zeros(3)), ad.Tensor(np.zeros((3, 2))))


def test_nonfinite_forward_raises():
    with pytest.raises(NonFiniteError):
        ad.exp(ad.Tensor([1000.0]))
    with pytest.raises(NonFiniteError):
        ad.div(ad.Tensor([1.0]), ad.Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        ad.Tensor([np.nan])


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ad.backward(ad.mul(x, x))


def test_narrow_bounds_error():
    x = ad.Tensor(np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        ad.narrow(x, 1, 3, 4)
