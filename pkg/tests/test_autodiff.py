import numpy as np
import pytest

from geowarp import autodiff as ad

from helpers import central_difference, max_relative_error


def grad_of(build, x0):
    """Analytic gradient of a scalar graph built from a single input array."""
    x = ad.parameter(x0.copy())
    out = build(x)
    ad.backward(out)
    return x.grad


@pytest.mark.parametrize(
    "build",
    [
        lambda x: ad.tsum(x * x * 3.0 + x),
        lambda x: ad.tsum(ad.exp(x) / (x * x + 2.0)),
        lambda x: ad.tsum(ad.sqrt(x * x + 1.0) * ad.tanh(x)),
        lambda x: ad.tsum(ad.log(x * x + 0.5) ** 2),
        lambda x: ad.tsum(ad.relu(x - 0.1) * x),
    ],
)
def test_elementwise_graphs_match_finite_differences(build):
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(7)
    g = grad_of(build, x0)

    def value(arr):
        t = ad.constant(arr)
        return float(build(t).data)

    fd = central_difference(value, x0)
    assert max_relative_error(g, fd) < 1e-6


def test_matmul_gradients_including_batch_broadcast():
    rng = np.random.default_rng(1)
    W0 = rng.standard_normal((3, 4))
    B0 = rng.standard_normal((5, 4, 2))

    W = ad.parameter(W0.copy())
    B = ad.parameter(B0.copy())
    out = ad.tsum(ad.matmul(W, B) ** 2)
    ad.backward(out)

    def value_w(arr):
        return float(np.sum((arr @ B0) ** 2))

    def value_b(arr):
        return float(np.sum((W0 @ arr) ** 2))

    assert max_relative_error(W.grad, central_difference(value_w, W0)) < 1e-6
    assert max_relative_error(B.grad, central_difference(value_b, B0)) < 1e-6


def test_sum_axis_and_mean_gradients():
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((4, 3))
    x = ad.parameter(x0.copy())
    out = ad.tsum(ad.tmean(x, axis=1) ** 2)
    ad.backward(out)
    fd = central_difference(
        lambda arr: float(np.sum(arr.mean(axis=1) ** 2)), x0
    )
    assert max_relative_error(x.grad, fd) < 1e-6


def test_gather_scatter_adds_duplicate_indices():
    x = ad.parameter(np.array([1.0, 2.0, 3.0]))
    idx = np.array([0, 0, 2])
    out = ad.tsum(x[idx] * np.array([1.0, 10.0, 100.0]))
    ad.backward(out)
    assert np.array_equal(x.grad, np.array([11.0, 0.0, 100.0]))


def test_segment_sum_forward_and_gradient():
    x = ad.parameter(np.array([1.0, 2.0, 3.0, 4.0]))
    seg = np.array([0, 1, 1, 3])
    out = ad.segment_sum(x, seg, 4)
    assert np.array_equal(out.data, np.array([1.0, 5.0, 0.0, 4.0]))
    ad.backward(ad.tsum(out * np.array([1.0, 2.0, 3.0, 4.0])))
    assert np.array_equal(x.grad, np.array([1.0, 2.0, 2.0, 4.0]))


def test_concat_gradient_splits():
    a = ad.parameter(np.ones(2))
    b = ad.parameter(np.ones(3))
    out = ad.tsum(ad.concat([a, b]) * np.arange(5.0))
    ad.backward(out)
    assert np.array_equal(a.grad, np.array([0.0, 1.0]))
    assert np.array_equal(b.grad, np.array([2.0, 3.0, 4.0]))


def test_reused_node_accumulates_gradient():
    x = ad.parameter(np.array([2.0]))
    y = x * x + x * 3.0  # dy/dx = 2x + 3 = 7
    ad.backward(ad.tsum(y))
    assert np.allclose(x.grad, [7.0])


def test_backward_never_mutates_data_and_constants_get_no_grad():
    x = ad.parameter(np.array([1.0, 2.0]))
    c = ad.constant(np.array([3.0, 4.0]))
    before = x.data.copy()
    out = ad.tsum(x * c)
    ad.backward(out)
    assert np.array_equal(x.data, before)
    assert c.grad is None


def test_upstream_shape_checked():
    x = ad.parameter(np.ones(3))
    y = x * 2.0
    with pytest.raises(ValueError):
        ad.backward(y, np.ones(4))


def test_broadcasting_add_unbroadcasts():
    a = ad.parameter(np.ones((2, 3)))
    b = ad.parameter(np.ones(3))
    out = ad.tsum((a + b) * 2.0)
    ad.backward(out)
    assert a.grad.shape == (2, 3)
    assert b.grad.shape == (3,)
    assert np.array_equal(b.grad, np.full(3, 4.0))
