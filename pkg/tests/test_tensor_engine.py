import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lamarckneat.tensor_engine import (AdamState, LayerSpec, ShapeError, adam_step, backward_layer,
                                       forward_layer, glorot_init, init_params,
                                       softmax_cross_entropy)

from .gradcheck import check_layer_gradients


def test_identity_1x1_conv():
    spec = LayerSpec("conv2d", kernel_size=1, out_channels=1, activation="linear")
    x = np.random.default_rng(0).normal(size=(2, 5, 5, 1))
    w = np.ones((1, 1, 1, 1))
    out, _ = forward_layer(spec, [x], [w, np.zeros(1)])
    np.testing.assert_array_equal(out, x)


def test_conv_same_padding_28x28_to_32_channels():
    spec = LayerSpec("conv2d", kernel_size=3, out_channels=32)
    x = np.zeros((2, 28, 28, 1), np.float32)
    params = init_params(spec, (28, 28, 1), np.random.default_rng(0))
    out, _ = forward_layer(spec, [x], params)
    assert out.shape == (2, 28, 28, 32)


@pytest.mark.parametrize("k", range(2, 8))
def test_same_conv_preserves_spatial_dims(k):
    spec = LayerSpec("conv2d", kernel_size=k, out_channels=3)
    x = np.random.default_rng(k).random((1, 9, 11, 2))
    params = init_params(spec, (9, 11, 2), np.random.default_rng(0), dtype=np.float64)
    out, _ = forward_layer(spec, [x], params)
    assert out.shape == (1, 9, 11, 3)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    for k in (2, 3, 4):
        spec = LayerSpec("conv2d", kernel_size=k, out_channels=3, activation="linear")
        x = rng.normal(size=(2, 6, 5, 2))
        w = rng.normal(size=(k, k, 2, 3))
        b = rng.normal(size=3)
        out, _ = forward_layer(spec, [x], [w, b])
        before = (k - 1) // 2
        xp = np.pad(x, ((0, 0), (before, k - 1 - before), (before, k - 1 - before), (0, 0)))
        ref = np.zeros_like(out)
        for n in range(2):
            for i in range(6):
                for j in range(5):
                    patch = xp[n, i:i + k, j:j + k, :]
                    ref[n, i, j] = np.tensordot(patch, w, axes=([0, 1, 2], [0, 1, 2])) + b
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_maxpool_matches_window_scan():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 28, 28, 8))
    out, _ = forward_layer(LayerSpec("maxpool2d"), [x])
    assert out.shape == (2, 14, 14, 8)
    for n in range(2):
        for i in range(14):
            for j in range(14):
                for c in range(8):
                    assert out[n, i, j, c] == x[n, 2 * i:2 * i + 2, 2 * j:2 * j + 2, c].max()


def test_maxpool_odd_input_uses_ceiling():
    x = np.arange(2 * 7 * 7 * 1, dtype=float).reshape(2, 7, 7, 1)
    out, _ = forward_layer(LayerSpec("maxpool2d"), [x])
    assert out.shape == (2, 4, 4, 1)
    assert out[0, 3, 3, 0] == x[0, 6, 6, 0]


def test_shape_mismatch_names_layer():
    spec = LayerSpec("dense", units=4)
    with pytest.raises(ShapeError, match="dense"):
        forward_layer(spec, [np.zeros((2, 5))], [np.zeros((6, 4)), np.zeros(4)])
    with pytest.raises(ShapeError, match="conv2d"):
        forward_layer(LayerSpec("conv2d", kernel_size=3, out_channels=2), [np.zeros((2, 5))],
                      [np.zeros((3, 3, 1, 2)), np.zeros(2)])


def test_concat_crops_and_joins_channels():
    a = np.ones((1, 5, 5, 2))
    b = np.zeros((1, 4, 4, 3))
    out, cache = forward_layer(LayerSpec("concat"), [a, b])
    assert out.shape == (1, 4, 4, 5)
    ga, gb = backward_layer(LayerSpec("concat"), cache, np.ones_like(out))[0]
    assert ga.shape == a.shape and gb.shape == b.shape
    assert ga[0, 4, :, :].sum() == 0 and ga[0, :4, :4, :].sum() == 32


def test_dropout_off_in_infer_mode():
    x = np.random.default_rng(0).random((3, 4))
    out, _ = forward_layer(LayerSpec("dropout", rate=0.5), [x], mode="infer")
    np.testing.assert_array_equal(out, x)


def test_inverted_dropout_preserves_expectation():
    rng = np.random.default_rng(0)
    x = np.full((20000, 1), 2.0)
    out, _ = forward_layer(LayerSpec("dropout", rate=0.3), [x], mode="train", rng=rng)
    # std of one draw is 2*sqrt(0.3/0.7) ~ 1.31; 4 sigma over 2e4 draws
    assert abs(out.mean() - 2.0) < 4 * 1.31 / math.sqrt(20000)


# -- gradients ----------------------------------------------------------------

def test_dense_gradcheck():
    rng = np.random.default_rng(0)
    spec = LayerSpec("dense", units=4)
    x = rng.normal(size=(3, 5))
    params = [rng.normal(size=(5, 4)), rng.normal(size=4)]
    assert check_layer_gradients(spec, [x], params, rng) < 1e-6


def test_conv_gradcheck_6x6x2_k3_f4():
    rng = np.random.default_rng(1)
    spec = LayerSpec("conv2d", kernel_size=3, out_channels=4)
    x = rng.normal(size=(2, 6, 6, 2))
    params = [rng.normal(size=(3, 3, 2, 4)) * 0.5, rng.normal(size=4) * 0.1]
    assert check_layer_gradients(spec, [x], params, rng) < 1e-6


@pytest.mark.parametrize("k", [2, 4, 5])
def test_conv_gradcheck_even_and_odd_kernels(k):
    rng = np.random.default_rng(k)
    spec = LayerSpec("conv2d", kernel_size=k, out_channels=3)
    x = rng.normal(size=(2, 5, 7, 2))
    params = [rng.normal(size=(k, k, 2, 3)) * 0.5, rng.normal(size=3) * 0.1]
    assert check_layer_gradients(spec, [x], params, rng) < 1e-6


def test_pool_gradcheck():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 5, 6, 3))
    assert check_layer_gradients(LayerSpec("maxpool2d"), [x], [], rng) < 1e-6


def test_concat_and_flatten_gradcheck():
    rng = np.random.default_rng(3)
    xs = [rng.normal(size=(2, 4, 4, 2)), rng.normal(size=(2, 3, 3, 1))]
    assert check_layer_gradients(LayerSpec("concat"), xs, [], rng) < 1e-6
    assert check_layer_gradients(LayerSpec("flatten"), [rng.normal(size=(2, 3, 3, 2))], [], rng) < 1e-6


def test_dropout_gradcheck_with_fixed_mask():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 6))
    assert check_layer_gradients(LayerSpec("dropout", rate=0.4), [x], [], rng, mode="train") < 1e-6


def test_zero_grad_output_gives_zero_grads():
    rng = np.random.default_rng(5)
    spec = LayerSpec("conv2d", kernel_size=3, out_channels=2)
    x = rng.normal(size=(1, 4, 4, 2))
    params = [rng.normal(size=(3, 3, 2, 2)), rng.normal(size=2)]
    out, cache = forward_layer(spec, [x], params)
    gin, gp = backward_layer(spec, cache, np.zeros_like(out))
    assert not np.any(gin[0]) and not any(np.any(g) for g in gp)


def test_backward_rejects_foreign_cache():
    _, cache = forward_layer(LayerSpec("flatten"), [np.zeros((1, 2, 2, 1))])
    with pytest.raises(ValueError):
        backward_layer(LayerSpec("dense", units=2), cache, np.zeros((1, 2)))


# -- loss -------------------------------------------------------------------

def test_uniform_logits_loss_is_log_classes():
    loss, _ = softmax_cross_entropy(np.zeros((4, 10)), np.array([0, 3, 5, 9]))
    assert loss == pytest.approx(math.log(10), abs=1e-12)


def test_confident_correct_loss_near_zero():
    logits = np.full((2, 3), -50.0)
    logits[[0, 1], [1, 2]] = 50.0
    loss, _ = softmax_cross_entropy(logits, np.array([1, 2]))
    assert loss < 1e-30


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 5))
    labels = np.array([0, 4, 2, 2])
    _, grad = softmax_cross_entropy(logits, labels)
    h = 1e-6
    num = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += h
        down[idx] -= h
        num[idx] = (softmax_cross_entropy(up, labels)[0] - softmax_cross_entropy(down, labels)[0]) / (2 * h)
    np.testing.assert_allclose(grad, num, atol=1e-5)


def test_label_out_of_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_loss_nonnegative_and_grad_rows_sum_to_zero(n, c, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=5, size=(n, c))
    labels = rng.integers(0, c, size=n)
    loss, grad = softmax_cross_entropy(logits, labels)
    assert loss >= 0
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-12)


# -- adam -------------------------------------------------------------------

def test_adam_zero_grad_fixed_point():
    p = np.array([0.3, -1.2])
    new, state = adam_step(p, np.zeros(2), AdamState.zeros_like(p), 0.001)
    np.testing.assert_array_equal(new, p)
    assert state.step_count == 1


def test_adam_first_step_hand_computed():
    # m_hat = 1, v_hat = 1 -> step = lr * 1 / (1 + 1e-8)
    p = np.array([0.0])
    new, _ = adam_step(p, np.array([1.0]), AdamState.zeros_like(p), 0.001)
    assert new[0] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-15)


def _scalar_adam(p, g, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(p)
    return out


def test_adam_trajectory_matches_scalar_reference():
    grads = np.array([0.5, -2.0, 1e-3])
    p = np.array([1.0, 0.0, -3.0])
    state = AdamState.zeros_like(p)
    traj = []
    for _ in range(100):
        p, state = adam_step(p, grads, state, 0.01)
        traj.append(p.copy())
    for col, (p0, g) in enumerate([(1.0, 0.5), (0.0, -2.0), (-3.0, 1e-3)]):
        ref = _scalar_adam(p0, g, 100, 0.01)
        np.testing.assert_allclose([t[col] for t in traj], ref, rtol=0, atol=1e-10)
    assert state.step_count == 100


def test_adam_shape_mismatch():
    p = np.zeros(3)
    with pytest.raises(ShapeError):
        adam_step(p, np.zeros(2), AdamState.zeros_like(p), 0.001)


# -- init -------------------------------------------------------------------

def test_glorot_deterministic_and_shaped():
    a = glorot_init(3, 4, (3,), np.random.default_rng(7))
    b = glorot_init(3, 4, (3,), np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
    assert a.shape == (3,)


def test_glorot_bounds_and_mean():
    vals = glorot_init(300, 300, (100_000,), np.random.default_rng(0))
    limit = math.sqrt(6 / 600)
    assert np.all(np.abs(vals) <= limit)
    assert abs(vals.mean()) < 0.005
