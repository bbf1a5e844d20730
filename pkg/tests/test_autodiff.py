import numpy as np
import pytest

from bridgenet import autodiff as ad
from bridgenet.autodiff import BatchNormState, Tape, Tensor, backward, no_grad
from bridgenet.errors import ContractError, DegenerateBatchError, DimensionError, GraphError, ParameterError
from bridgenet.gradcheck import check_gradients
from bridgenet.gradsuite import CASES, case_error


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def scatter_oracle(x, k, stride, output_padding):
    B, C, H, W = x.shape
    _, F, kh, kw = k.shape
    out = np.zeros((B, F, (H - 1) * stride + kh + output_padding, (W - 1) * stride + kw + output_padding))
    for b in range(B):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    out[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw] += x[b, c, i, j] * k[c]
    return out


def correlate_oracle(x, k):
    B, C, H, W = x.shape
    F, _, kh, kw = k.shape
    out = np.zeros((B, F, H - kh + 1, W - kw + 1))
    for i in range(H - kh + 1):
        for j in range(W - kw + 1):
            out[:, :, i, j] = np.einsum("bcuv,fcuv->bf", x[:, :, i : i + kh, j : j + kw], k)
    return out


# ---------------------------------------------------------------- conv2d


def test_conv2d_sum_of_ones():
    out = ad.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv2d_shapes_through_tower_stack():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 1, 28, 14)))
    h = ad.conv2d(x, rng.standard_normal((10, 1, 3, 3)))
    assert h.shape == (1, 10, 26, 12)
    for _ in range(2):
        h = ad.conv2d(h, rng.standard_normal((10, 10, 3, 3)))
    assert h.shape == (1, 10, 22, 8)


def test_conv2d_matches_direct_correlation():
    rng = np.random.default_rng(1)
    x, k, b = rng.standard_normal((2, 3, 6, 5)), rng.standard_normal((4, 3, 3, 2)), rng.standard_normal(4)
    expected = correlate_oracle(x, k) + b[None, :, None, None]
    np.testing.assert_allclose(ad.conv2d(x, k, b).data, expected, rtol=1e-12, atol=1e-12)


def test_conv2d_gradient_of_sum():
    rng = np.random.default_rng(2)
    x, k, b = leaf(rng.standard_normal((2, 3, 5, 5))), leaf(rng.standard_normal((4, 3, 3, 3))), leaf(rng.standard_normal(4))
    assert check_gradients(lambda: ad.conv2d(x, k, b).sum(), [x, k, b]) < 1e-6


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        ad.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))


# ---------------------------------------------------------------- conv_transpose2d


def test_conv_transpose_delta_reproduces_kernel():
    K = np.arange(9.0).reshape(1, 1, 3, 3)
    out = ad.conv_transpose2d(np.ones((1, 1, 1, 1)), K, stride=1)
    np.testing.assert_array_equal(out.data, K)


def test_conv_transpose_shape_formula():
    out = ad.conv_transpose2d(np.ones((1, 1, 4, 2)), np.ones((1, 1, 3, 3)), stride=2, output_padding=1)
    assert out.shape == (1, 1, 10, 6)


@pytest.mark.parametrize("seed", range(5))
def test_conv_transpose_matches_scatter_add(seed):
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 4))
    pad = int(rng.integers(0, stride))
    x, k, b = rng.standard_normal((2, 3, 4, 3)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(2)
    got = ad.conv_transpose2d(x, k, b, stride=stride, output_padding=pad).data
    np.testing.assert_allclose(got, scatter_oracle(x, k, stride, pad) + b[None, :, None, None], atol=1e-12)


def test_conv_transpose_output_padding_must_be_below_stride():
    with pytest.raises(ParameterError):
        ad.conv_transpose2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)), stride=2, output_padding=2)


# ---------------------------------------------------------------- affine


def test_affine_identity_and_bias():
    x = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(ad.affine(x, np.eye(2), np.zeros(2)).data, x)
    np.testing.assert_array_equal(ad.affine(x, np.eye(2), np.array([3.0, 4.0])).data, [[4.0, 6.0]])


def test_affine_gradient():
    rng = np.random.default_rng(4)
    x, w, b = leaf(rng.standard_normal((3, 7))), leaf(rng.standard_normal((7, 5))), leaf(rng.standard_normal(5))
    proj = rng.standard_normal((3, 5))
    assert check_gradients(lambda: (ad.affine(x, w, b) * proj).sum(), [x, w, b]) < 1e-6


def test_affine_dimension_mismatch():
    with pytest.raises(DimensionError):
        ad.affine(np.ones((2, 3)), np.ones((4, 2)), np.zeros(2))


# ---------------------------------------------------------------- batch norm


def test_batch_norm_constant_channel_is_zero():
    out = ad.batch_norm(np.full((4, 2, 3, 3), 7.5), BatchNormState(2))
    np.testing.assert_array_equal(out.data, 0.0)


def test_batch_norm_standardizes_per_channel():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((8, 3, 4, 4)) * [[[[2.0]], [[5.0]], [[0.1]]]] + 3.0
    state = BatchNormState(3, eps=1e-12)
    out = ad.batch_norm(x, state).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-6)


def test_batch_norm_running_statistics_update():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((5, 2, 3, 3)) + 2.0
    state = BatchNormState(2, momentum=0.9)
    ad.batch_norm(x, state)
    m = 5 * 9
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    assert np.all(state.running_var > 0)


def test_batch_norm_inference_ignores_batch_composition():
    rng = np.random.default_rng(7)
    state = BatchNormState(2, training=False)
    state.running_mean = np.array([0.5, -1.0])
    state.running_var = np.array([2.0, 0.5])
    x = rng.standard_normal((6, 2, 3, 3))
    full = ad.batch_norm(x, state).data
    single = ad.batch_norm(x[2:3], state).data
    np.testing.assert_array_equal(full[2:3], single)


def test_batch_norm_gradient_of_sum():
    rng = np.random.default_rng(8)
    x = leaf(rng.standard_normal((3, 2, 3, 3)))
    state = BatchNormState(2)
    state.scale = leaf(rng.uniform(0.5, 2.0, 2))
    state.shift = leaf(rng.standard_normal(2))
    proj = rng.standard_normal(x.shape)
    assert check_gradients(lambda: (ad.batch_norm(x, state) * proj).sum(), [x, state.scale, state.shift]) < 1e-5


def test_batch_norm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        ad.batch_norm(np.ones((1, 2, 1, 1)), BatchNormState(2))


# ---------------------------------------------------------------- activations


def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(ad.activation(np.array([-1.0, 0.0, 2.0]), "relu").data, [0.0, 0.0, 2.0])
    assert ad.activation(np.array([0.0]), "sigmoid").data[0] == 0.5


def test_sigmoid_stays_open_interval():
    out = ad.sigmoid(np.array([-1000.0, -40.0, 40.0, 1000.0])).data
    assert np.all(out > 0.0) and np.all(out < 1.0)
    assert np.all(np.isfinite(out))


def test_activation_gradients_away_from_kink():
    rng = np.random.default_rng(9)
    x = rng.standard_normal(50)
    x = x[np.abs(x) > 1e-4]
    a = leaf(x)
    proj = rng.standard_normal(a.shape)
    assert check_gradients(lambda: (ad.relu(a) * proj).sum(), [a]) < 1e-6
    assert check_gradients(lambda: (ad.sigmoid(a) * proj).sum(), [a]) < 1e-6


def test_unknown_activation():
    with pytest.raises(ParameterError):
        ad.activation(np.zeros(2), "tanh")


# ---------------------------------------------------------------- backward and tape


def test_grad_of_sum_is_ones():
    x = leaf(np.random.default_rng(0).standard_normal((2, 3, 4)))
    with Tape() as tape:
        loss = x.sum()
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_grad_of_half_square_is_identity():
    x = leaf(np.random.default_rng(1).standard_normal(7))
    with Tape():
        loss = (x ** 2).sum() * 0.5
    loss.backward()
    np.testing.assert_allclose(x.grad, x.data, rtol=1e-15)


def test_repeated_backward_accumulates():
    x = leaf([1.0, 2.0])
    for _ in range(2):
        with Tape():
            loss = (x * 3.0).sum()
        loss.backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_shared_input_accumulates_within_one_graph():
    x = leaf([2.0])
    with Tape():
        loss = (x * x + x).sum()
    loss.backward()
    assert x.grad[0] == 5.0


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with Tape():
        y = x * 2.0
    with pytest.raises(ContractError):
        backward(y)


def test_backward_off_tape():
    x = leaf([1.0])
    with pytest.raises(GraphError):
        backward((x * 2.0).sum())
    with Tape():
        loss = (x * 2.0).sum()
    with pytest.raises(GraphError):
        backward(loss, Tape())


def test_no_grad_suspends_recording():
    x = leaf([1.0])
    with Tape() as tape:
        with no_grad():
            y = x * 2.0
        z = x * 3.0
    assert y.is_leaf and not y.requires_grad
    assert len(tape.nodes) == 1 and z.requires_grad


def test_tape_replays_each_node_once_in_reverse():
    seen = []
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        a = x * 2.0
        b = a + 1.0
        loss = b.sum()
    for nd in tape.nodes:
        original = nd.backward

        def spy(g, nd=nd, original=original):
            seen.append(nd.op)
            return original(g)

        nd.backward = spy
    backward(loss, tape)
    assert seen == [nd.op for nd in reversed(tape.nodes)]


def test_forward_backward_bit_identical_across_runs():
    def run():
        rng = np.random.default_rng(42)
        x, k = leaf(rng.standard_normal((2, 1, 6, 5))), leaf(rng.standard_normal((3, 1, 3, 3)))
        with Tape():
            loss = ad.sigmoid(ad.conv2d(x, k)).sum()
        loss.backward()
        return loss.data.copy(), x.grad.copy(), k.grad.copy()

    for a, b in zip(run(), run()):
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- gradient suite


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_suite(name):
    worst = max(case_error(name, seed) for seed in range(20))
    assert worst < 1e-4
