import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neural_npv import diff_engine as de


def random_net(rng, dims=None, out_act="identity"):
    if dims is None:
        depth = rng.integers(1, 4)
        dims = [int(rng.integers(1, 6)) for _ in range(depth + 1)]
    return de.init_network(dims, rng, output_activation=out_act)


def jacobian_loss_value(net, x, tangents):
    out = de.forward_dual(net, de.DualBatch(x, tangents))
    return float(np.sum(out.tangents**2) + np.sum(np.sin(out.primal)))


def jacobian_loss_taped(net, x, tangents):
    tape = de.GradTape()
    pp = net.on_tape(tape)
    out = de.forward_dual(net, de.DualBatch(x, tangents), pp)
    loss = de.reduce_sum(out.tangents * out.tangents) + de.reduce_sum(de.sin(out.primal))
    return tape, loss, pp


def mixed_gradient_error(net, rng, h=1e-4):
    """Relative error of the taped weight gradient of a Jacobian-containing loss."""
    x = rng.normal(size=(3, net.in_width))
    tangents = rng.normal(size=(2, 3, net.in_width))
    tape, loss, pp = jacobian_loss_taped(net, x, tangents)
    analytic = de.weight_gradient(tape, loss, pp).flat()
    fd = de.numeric_gradient(lambda w: jacobian_loss_value(net.from_flat(w), x, tangents), net.flat(), h)
    return np.max(np.abs(analytic - fd)) / max(np.max(np.abs(fd)), 1e-8)


# -- forward ---------------------------------------------------------------


def test_zero_network_gives_zero_output(rng):
    net = de.init_network([3, 5, 2], rng, zero=True)
    assert np.array_equal(de.forward(net, rng.normal(size=(4, 3))), np.zeros((4, 2)))


def test_identity_layer_passes_input_through():
    net = de.NetworkParams([3, 3], [np.eye(3)], [np.zeros(3)])
    v = np.array([[0.2, -1.5, 3.0]])
    assert np.array_equal(de.forward(net, v), v)


def test_one_hidden_unit_hand_value():
    net = de.NetworkParams([1, 1, 1], [np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)])
    assert de.forward(net, np.array([[0.5]]))[0, 0] == pytest.approx(np.tanh(0.5), abs=1e-15)
    assert np.tanh(0.5) == pytest.approx(0.462117, abs=1e-6)


def test_width_mismatch_is_a_shape_error(rng):
    net = de.init_network([3, 4, 1], rng)
    with pytest.raises(de.ShapeError):
        de.forward(net, np.zeros((2, 4)))


def test_bad_parameter_shapes_rejected():
    with pytest.raises(de.ShapeError):
        de.NetworkParams([2, 3], [np.zeros((2, 3))], [np.zeros(3)])
    with pytest.raises(de.NumericError):
        de.NetworkParams([1, 1], [np.array([[np.nan]])], [np.zeros(1)])


def test_nonfinite_activation_reports_layer():
    net = de.NetworkParams([1, 1, 1], [np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)])
    with pytest.raises(de.NumericError) as err:
        de.forward(net, np.array([[np.nan]]))
    assert err.value.layer == 0


def test_forward_is_deterministic(rng):
    net = random_net(rng, [4, 8, 8, 2])
    x = rng.normal(size=(50, 4))
    assert np.array_equal(de.forward(net, x), de.forward(net, x.copy()))


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(-100, 100, allow_nan=False), seed=st.integers(0, 2**32 - 1))
def test_linear_network_scales_exactly(alpha, seed):
    rng = np.random.default_rng(seed)
    w = rng.integers(-3, 4, size=(2, 3)).astype(float)
    net = de.NetworkParams([3, 2], [w], [np.zeros(2)])
    v = rng.integers(-4, 5, size=(1, 3)).astype(float)
    # integer weights and inputs keep every product exact in float64
    alpha = float(np.round(alpha))
    assert np.array_equal(de.forward(net, alpha * v), alpha * de.forward(net, v))


def test_tape_replay_matches_numpy_path(rng):
    net = random_net(rng, [3, 6, 2], "tanh")
    x = rng.normal(size=(5, 3))
    tape = de.GradTape()
    out = de.forward(net, x, net.on_tape(tape))
    assert np.array_equal(out.value, de.forward(net, x))


# -- input jacobian --------------------------------------------------------


def test_jacobian_of_linear_layer_is_weight(rng):
    w = rng.normal(size=(2, 3))
    net = de.NetworkParams([3, 2], [w], [rng.normal(size=2)])
    assert np.array_equal(de.input_jacobian(net, rng.normal(size=3)), w)


def test_jacobian_of_zero_network_is_zero(rng):
    net = de.init_network([3, 4, 2], rng, zero=True)
    assert np.array_equal(de.input_jacobian(net, rng.normal(size=3)), np.zeros((2, 3)))


def test_batched_jacobian_matches_pointwise(rng):
    net = random_net(rng, [3, 5, 2])
    x = rng.normal(size=(4, 3))
    batch = de.input_jacobian(net, x)
    for i in range(4):
        np.testing.assert_allclose(batch[i], de.input_jacobian(net, x[i]), rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, [3, 8, 8, 2], "tanh")
    assert de.finite_diff_check(net, rng.normal(size=3), 1e-5) <= 1e-6


def test_finite_diff_check_on_linear_net_is_exact(rng):
    net = de.NetworkParams([3, 2], [rng.normal(size=(2, 3))], [np.zeros(2)])
    assert de.finite_diff_check(net, rng.normal(size=3), 1e-5) <= 1e-10


def test_central_difference_error_shrinks_quadratically():
    rng = np.random.default_rng(3)
    net = random_net(rng, [2, 6, 6, 1])
    x = rng.normal(size=2)
    jac = de.input_jacobian(net, x)[0]

    def fd_error(h):
        fd = [(de.forward(net, x + h * e) - de.forward(net, x - h * e))[0] / (2 * h) for e in np.eye(2)]
        return np.max(np.abs(np.array(fd) - jac))

    ratio = fd_error(1e-2) / fd_error(5e-3)
    assert 3.5 < ratio < 4.5


def test_finite_diff_check_rejects_nonpositive_step(rng):
    with pytest.raises(ValueError):
        de.finite_diff_check(random_net(rng, [2, 2]), np.zeros(2), 0.0)


def test_dual_batch_rejects_mismatched_tangents():
    with pytest.raises(de.ShapeError):
        de.DualBatch(np.zeros((3, 2)), np.zeros((1, 3, 4)))


# -- weight gradients ----------------------------------------------------


def test_bias_gradient_of_output_sum_is_one(rng):
    net = de.NetworkParams([3, 2], [np.zeros((2, 3))], [rng.normal(size=2)])
    tape = de.GradTape()
    pp = net.on_tape(tape)
    loss = de.reduce_sum(de.forward(net, rng.normal(size=(1, 3)), pp))
    g = de.weight_gradient(tape, loss, pp)
    assert np.array_equal(g.biases[0], np.ones(2))


def test_unused_parameter_has_exactly_zero_gradient(rng):
    net = random_net(rng, [2, 3, 1])
    tape = de.GradTape()
    pp = net.on_tape(tape)
    loss = de.reduce_sum(de.forward(net, np.zeros((1, 2)), pp))
    g = de.weight_gradient(tape, loss, pp)
    # zero input: the first weight matrix cannot influence the output
    assert np.array_equal(g.weights[0], np.zeros((3, 2)))


def test_gradient_without_parameters_on_tape_raises(rng):
    net = random_net(rng, [2, 3, 1])
    tape, other = de.GradTape(), de.GradTape()
    pp = net.on_tape(other)
    loss = de.reduce_sum(de.forward(net, np.zeros((1, 2)), net.on_tape(tape)))
    with pytest.raises(de.EmptyGradientError):
        tape.gradient(loss, pp.leaves)
    with pytest.raises(de.EmptyGradientError):
        tape.gradient(np.float64(1.0), [])


def test_nonscalar_loss_rejected(rng):
    tape = de.GradTape()
    v = tape.var(np.ones(3))
    with pytest.raises(de.ShapeError):
        tape.gradient(v * 2.0, [v])


@pytest.mark.parametrize("seed", range(5))
def test_mixed_derivatives_match_weight_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    net = random_net(rng, [3, 5, 4, 2])
    assert mixed_gradient_error(net, rng) <= 1e-4


# -- elementwise ops -----------------------------------------------------


UNARY = [
    (de.tanh, lambda x: x),
    (de.sin, lambda x: x),
    (de.cos, lambda x: x),
    (de.sqrt, lambda x: np.abs(x) + 0.5),
    (de.arcsin, lambda x: 0.9 * np.tanh(x)),
    (de.arctan, lambda x: x),
    (de.arctanh, lambda x: 0.9 * np.tanh(x)),
    (de.square, lambda x: x),
]


@pytest.mark.parametrize("op,domain", UNARY)
def test_unary_op_gradients(op, domain, rng):
    x0 = domain(rng.normal(size=(4,)))
    tape = de.GradTape()
    xv = tape.var(x0)
    (g,) = tape.gradient(de.reduce_sum(op(xv) * op(xv)), [xv])
    fd = de.numeric_gradient(lambda x: float(np.sum(op(x) ** 2)), x0, 1e-6)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_broadcast_binary_ops_reduce_gradients(rng):
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4,)) + 3.0
    tape = de.GradTape()
    a, b = tape.var(a0), tape.var(b0)
    loss = de.reduce_sum(a * b + a / b - b)
    ga, gb = tape.gradient(loss, [a, b])
    fa = de.numeric_gradient(lambda x: float(np.sum(x * b0 + x / b0 - b0)), a0, 1e-6)
    fb = de.numeric_gradient(lambda y: float(np.sum(a0 * y + a0 / y - y)), b0, 1e-6)
    np.testing.assert_allclose(ga, fa, rtol=1e-6)
    np.testing.assert_allclose(gb, fb, rtol=1e-6)


def test_max_min_relu_clip_route_gradients():
    tape = de.GradTape()
    x = tape.var(np.array([[1.0, 3.0, 3.0], [-2.0, 0.5, -1.0]]))
    loss = (
        de.reduce_sum(de.reduce_max(x, axis=-1))
        + de.reduce_sum(de.relu(x))
        + de.reduce_sum(de.clip(x, -1.5, 2.0))
        + de.reduce_sum(de.minimum(x, 0.0))
    )
    (g,) = tape.gradient(loss, [x])
    expected = np.array(
        [[0 + 1 + 1 + 0, 1 + 1 + 0 + 0, 0 + 1 + 0 + 0], [0 + 0 + 0 + 1, 1 + 1 + 1 + 0, 0 + 0 + 1 + 1]],
        dtype=float,
    )
    assert np.array_equal(g, expected)


def test_concat_stack_getitem_gradients(rng):
    a0, b0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 1))
    tape = de.GradTape()
    a, b = tape.var(a0), tape.var(b0)
    c = de.concat([a, b], axis=-1)
    s = de.stack([c, 2.0 * c], axis=0)
    loss = de.reduce_sum(s[1, :, 1:] * s[0, :, :3])
    ga, gb = tape.gradient(loss, [a, b])

    def f(a_, b_):
        c_ = np.concatenate([a_, b_], axis=-1)
        return float(np.sum(2 * c_[:, 1:] * c_[:, :3]))

    np.testing.assert_allclose(ga, de.numeric_gradient(lambda x: f(x, b0), a0, 1e-6), rtol=1e-6)
    np.testing.assert_allclose(gb, de.numeric_gradient(lambda y: f(a0, y), b0, 1e-6), rtol=1e-6, atol=1e-9)


def test_flat_round_trip(rng):
    net = random_net(rng, [3, 4, 2])
    again = net.from_flat(net.flat())
    assert all(np.array_equal(a, b) for a, b in zip(net.arrays(), again.arrays()))
    with pytest.raises(de.ShapeError):
        net.from_flat(np.zeros(net.n_params + 1))
