import numpy as np
import pytest

from geowarp import nn
from geowarp import autodiff as ad

from helpers import max_relative_error, param_finite_differences


def make_net(sizes, activations, seed=0):
    return nn.MlpNetwork.from_sizes(sizes, activations, np.random.default_rng(seed))


def straight_line_forward(net, x):
    """Independent re-implementation of the affine/activation chain."""
    h = np.asarray(x, dtype=float)
    for layer in net.layers:
        h = nn.ACTIVATIONS[layer.activation].value(
            layer.weight.data @ h + layer.bias.data
        )
    return h


def test_identity_layer_passthrough():
    layer = nn.DenseLayer(ad.parameter(np.eye(2)), ad.parameter(np.zeros(2)), "Identity")
    net = nn.MlpNetwork([layer])
    y, _ = nn.forward(net, np.array([1.0, 2.0]))
    assert np.array_equal(y, np.array([1.0, 2.0]))


def test_softplus_zero_gives_ln2():
    layer = nn.DenseLayer(ad.parameter(np.eye(1)), ad.parameter(np.zeros(1)), "Softplus")
    net = nn.MlpNetwork([layer])
    y, _ = nn.forward(net, np.array([0.0]))
    assert abs(y[0] - np.log(2.0)) < 1e-12


def test_forward_matches_straight_line_oracle():
    net = make_net([3, 5, 2], ["ELU", "ELU"], seed=3)
    x = np.random.default_rng(4).standard_normal(3)
    y, _ = nn.forward(net, x)
    assert np.allclose(y, straight_line_forward(net, x), atol=1e-12)


def test_forward_rejects_dimension_mismatch():
    net = make_net([3, 2], ["Identity"])
    with pytest.raises(ValueError):
        nn.forward(net, np.zeros(4))


def test_dimension_chain_validated():
    rng = np.random.default_rng(0)
    l1 = nn.DenseLayer(ad.parameter(rng.standard_normal((4, 3))), ad.parameter(np.zeros(4)), "ELU")
    l2 = nn.DenseLayer(ad.parameter(rng.standard_normal((2, 5))), ad.parameter(np.zeros(2)), "Identity")
    with pytest.raises(ValueError):
        nn.MlpNetwork([l1, l2])


def test_backward_linear_row_selection():
    # y = Wx, upstream = e_k  ->  dL/dW has x^T in row k, zeros elsewhere
    rng = np.random.default_rng(5)
    W = rng.standard_normal((3, 4))
    net = nn.MlpNetwork(
        [nn.DenseLayer(ad.parameter(W.copy()), ad.parameter(np.zeros(3)), "Identity")]
    )
    x = rng.standard_normal(4)
    _, tape = nn.forward(net, x)
    for k in range(3):
        upstream = np.zeros(3)
        upstream[k] = 1.0
        grads = nn.backward(tape, upstream)
        gw = grads["layers.0.weight"]
        assert np.allclose(gw[k], x)
        others = np.delete(gw, k, axis=0)
        assert np.all(others == 0.0)


def test_backward_zero_upstream_gives_zero_gradients():
    net = make_net([3, 4, 2], ["ELU", "Identity"], seed=6)
    _, tape = nn.forward(net, np.random.default_rng(7).standard_normal(3))
    grads = nn.backward(tape, np.zeros(2))
    assert all(np.all(g == 0.0) for g in grads.values())


def test_backward_rejects_wrong_network():
    net1 = make_net([2, 2], ["ELU"])
    net2 = make_net([2, 2], ["ELU"], seed=1)
    _, tape = nn.forward(net1, np.zeros(2))
    with pytest.raises(ValueError):
        nn.backward(tape, np.zeros(2), net=net2)


@pytest.mark.parametrize("acts", [["ELU", "Identity"], ["Softplus", "Tanh"]])
def test_backward_matches_finite_differences(acts):
    rng = np.random.default_rng(8)
    net = make_net([4, 5, 3], acts, seed=9)
    x = rng.standard_normal(4)
    upstream = rng.standard_normal(3)
    _, tape = nn.forward(net, x)
    grads = nn.backward(tape, upstream)

    def loss():
        return float(upstream @ straight_line_forward(net, x))

    fd = param_finite_differences(net.parameters(), loss)
    for name in grads:
        assert max_relative_error(grads[name], fd[name], floor=1e-6) < 1e-4


def test_input_jacobian_linear_net_is_weight_matrix():
    rng = np.random.default_rng(10)
    W = rng.standard_normal((3, 4))
    net = nn.MlpNetwork(
        [nn.DenseLayer(ad.parameter(W.copy()), ad.parameter(np.zeros(3)), "Identity")]
    )
    J = nn.input_jacobian(net, rng.standard_normal(4))
    assert np.allclose(J, W, atol=1e-14)


def test_input_jacobian_matches_finite_differences():
    rng = np.random.default_rng(11)
    net = make_net([3, 6, 4], ["ELU", "Tanh"], seed=12)
    x = rng.standard_normal(3)
    J = nn.input_jacobian(net, x)
    step = 1e-6
    for j in range(3):
        dx = np.zeros(3)
        dx[j] = step
        col = (straight_line_forward(net, x + dx) - straight_line_forward(net, x - dx)) / (
            2 * step
        )
        assert max_relative_error(J[:, j], col, floor=1e-6) < 1e-4


def test_relu_jacobian_is_masked_weight_product():
    rng = np.random.default_rng(13)
    net = make_net([3, 5, 2], ["ReLU", "ReLU"], seed=14)
    x = rng.standard_normal(3)
    # brute-force masked product
    W1, b1 = net.layers[0].weight.data, net.layers[0].bias.data
    W2, b2 = net.layers[1].weight.data, net.layers[1].bias.data
    a1 = W1 @ x + b1
    assert np.all(np.abs(a1) > 1e-9)  # away from the kink
    m1 = np.diag((a1 > 0).astype(float))
    a2 = W2 @ np.maximum(a1, 0) + b2
    assert np.all(np.abs(a2) > 1e-9)
    m2 = np.diag((a2 > 0).astype(float))
    expected = m2 @ W2 @ m1 @ W1
    assert np.allclose(nn.input_jacobian(net, x), expected, atol=1e-12)


def test_jacobian_on_tape_matches_plain_jacobian():
    net = make_net([2, 6, 4], ["ELU", "Identity"], seed=15)
    Z = np.random.default_rng(16).standard_normal((7, 2))
    taped = net.jacobian_on_tape(Z)
    assert np.allclose(taped.data, net.jacobian_batch(Z), atol=1e-13)


def test_jacobian_on_tape_parameter_gradients_match_fd():
    # gradients THROUGH the Jacobian entries (second-order in the network)
    rng = np.random.default_rng(17)
    net = make_net([2, 4, 3], ["ELU", "Identity"], seed=18)
    Z = rng.standard_normal((3, 2))
    weights = rng.standard_normal((3, 3, 2))

    ad.zero_grad(net.parameters().values())
    out = ad.tsum(net.jacobian_on_tape(Z) * ad.constant(weights))
    ad.backward(out)
    grads = {n: t.grad.copy() for n, t in net.parameters().items() if t.grad is not None}

    def loss():
        return float(np.sum(net.jacobian_batch(Z) * weights))

    fd = param_finite_differences(net.parameters(), loss)
    for name, g in grads.items():
        assert max_relative_error(g, fd[name], floor=1e-6) < 1e-4
    ad.zero_grad(net.parameters().values())


# Adam ----------------------------------------------------------------------

def test_adam_zero_gradient_keeps_parameters_and_decays_moments():
    net = make_net([2, 2], ["Identity"], seed=19)
    params = net.parameters()
    state = nn.AdamState.init(params, learning_rate=0.1)
    state.m["layers.0.weight"][:] = 1.0  # pretend prior momentum
    before = {n: p.data.copy() for n, p in params.items()}
    zero = {n: np.zeros_like(p.data) for n, p in params.items()}
    # zero gradient with zero moments: parameters must not move
    state2 = nn.AdamState.init(params, learning_rate=0.1)
    nn.adam_step(params, zero, state2)
    for n in params:
        assert np.array_equal(params[n].data, before[n])
    # decayed moments under zero gradient
    nn.adam_step(params, zero, state)
    assert np.allclose(state.m["layers.0.weight"], 0.9)


def test_adam_first_step_moves_by_learning_rate():
    p = ad.parameter(np.array([1.0]))
    params = {"p": p}
    state = nn.AdamState.init(params, learning_rate=0.01)
    nn.adam_step(params, {"p": np.array([0.37])}, state)
    assert state.t == 1
    assert abs(p.data[0] - (1.0 - 0.01)) < 1e-7  # |delta| = lr (eps-small error)


def test_adam_three_steps_match_scalar_recurrence():
    p = ad.parameter(np.array([0.5]))
    params = {"p": p}
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    state = nn.AdamState.init(params, learning_rate=lr, beta1=b1, beta2=b2, eps=eps)
    g = 2.0
    x, m, v = 0.5, 0.0, 0.0
    for t in range(1, 4):
        nn.adam_step(params, {"p": np.array([g])}, state)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        assert abs(p.data[0] - x) < 1e-15
    assert state.t == 3


def test_adam_rejects_non_finite_gradient_without_mutation():
    p = ad.parameter(np.array([1.0, 2.0]))
    params = {"p": p}
    state = nn.AdamState.init(params, learning_rate=0.1)
    with pytest.raises(nn.NonFiniteGradientError) as err:
        nn.adam_step(params, {"p": np.array([np.nan, 0.0])}, state)
    assert err.value.parameter == "p"
    assert np.array_equal(p.data, np.array([1.0, 2.0]))
    assert state.t == 0


def test_finite_difference_agreement_over_many_random_nets():
    rng = np.random.default_rng(20)
    worst = 0.0
    for trial in range(100):
        sizes = [int(rng.integers(2, 5)) for _ in range(3)]
        acts = [str(rng.choice(["ELU", "Tanh", "Softplus"])), "Identity"]
        net = make_net(sizes, acts, seed=trial)
        x = rng.standard_normal(sizes[0])
        upstream = rng.standard_normal(sizes[-1])
        _, tape = nn.forward(net, x)
        grads = nn.backward(tape, upstream)

        def loss():
            return float(upstream @ straight_line_forward(net, x))

        fd = param_finite_differences(net.parameters(), loss)
        for name in grads:
            worst = max(worst, max_relative_error(grads[name], fd[name], floor=1e-6))
    assert worst < 1e-4


def test_determinism_identical_seeds_identical_parameters():
    def train_once():
        net = make_net([3, 4, 1], ["ELU", "Identity"], seed=21)
        params = net.parameters()
        state = nn.AdamState.init(params, learning_rate=1e-2)
        rng = np.random.default_rng(22)
        for _ in range(20):
            x = rng.standard_normal(3)
            _, tape = nn.forward(net, x)
            grads = nn.backward(tape, np.ones(1))
            nn.adam_step(params, grads, state)
        return {n: p.data.copy() for n, p in params.items()}

    a, b = train_once(), train_once()
    for n in a:
        assert np.array_equal(a[n], b[n])


def test_elu_is_c1_at_kink():
    act = nn.ACTIVATIONS["ELU"]
    eps = 1e-9
    assert abs(act.prime(np.array([eps]))[0] - act.prime(np.array([-eps]))[0]) < 1e-8
    assert abs(act.value(np.array([0.0]))[0]) == 0.0


def test_checkpoint_roundtrip_bitwise_and_deterministic_bytes(tmp_path):
    net = make_net([3, 5, 2], ["ELU", "Identity"], seed=23)
    path1 = tmp_path / "a.npz"
    path2 = tmp_path / "b.npz"
    nn.save_checkpoint(path1, {"net": net}, seed=23, step=7, extra={"note": "x"})
    nn.save_checkpoint(path2, {"net": net}, seed=23, step=7, extra={"note": "x"})
    assert path1.read_bytes() == path2.read_bytes()

    loaded, meta = nn.load_checkpoint(path1)
    assert meta["seed"] == 23 and meta["step"] == 7
    for l0, l1 in zip(net.layers, loaded["net"].layers):
        assert np.array_equal(l0.weight.data, l1.weight.data)
        assert np.array_equal(l0.bias.data, l1.bias.data)
        assert l0.activation == l1.activation


def test_parameter_digest_detects_any_change():
    net = make_net([2, 2], ["ELU"], seed=24)
    d0 = nn.parameter_digest(net.parameters())
    net.layers[0].weight.data[0, 0] = np.nextafter(net.layers[0].weight.data[0, 0], 1.0)
    assert nn.parameter_digest(net.parameters()) != d0
