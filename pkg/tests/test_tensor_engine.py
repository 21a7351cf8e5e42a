import numpy as np
import pytest

from shared.gradcheck import numerical_gradient, relative_error
from shared.tensor_engine import (SGD, Adam, GraphConsumed, InvalidGeometry, Node, ParamStore,
                                  ShapeMismatch, Tape, affine, backward, conv2d, conv_output_extent,
                                  flatten, make_optimizer, maxpool2d, mse_loss, optimizer_step, relu,
                                  sigmoid)


def naive_conv2d(x, k, b, stride, padding):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, out_h, out_w))
    for s in range(n):
        for o in range(f):
            for i in range(out_h):
                for j in range(out_w):
                    total = b[o]
                    for ch in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                total += xp[s, ch, i * stride + di, j * stride + dj] * k[o, ch, di, dj]
                    out[s, o, i, j] = total
    return out


def naive_maxpool(x, window, stride):
    n, c, h, w = x.shape
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1
    out = np.zeros((n, c, out_h, out_w))
    for s in range(n):
        for ch in range(c):
            for i in range(out_h):
                for j in range(out_w):
                    out[s, ch, i, j] = x[s, ch, i * stride:i * stride + window,
                                         j * stride:j * stride + window].max()
    return out


# ---- oracles ----

@pytest.mark.parametrize("seed", range(100))
def test_conv2d_matches_nested_loops(seed):
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    kernel = int(rng.integers(1, 4))
    # choose a size giving a whole output extent
    size = kernel + stride * int(rng.integers(0, 4)) - 2 * padding
    size = max(size, 1)
    while (size + 2 * padding - kernel) % stride or size + 2 * padding < kernel:
        size += 1
    x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 4)), size, size + stride))
    k = rng.normal(size=(int(rng.integers(1, 4)), x.shape[1], kernel, kernel))
    b = rng.normal(size=k.shape[0])
    got = conv2d(x, k, b, stride, padding).value
    np.testing.assert_allclose(got, naive_conv2d(x, k, b, stride, padding), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_maxpool_matches_nested_loops(seed):
    rng = np.random.default_rng(seed)
    window = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    h = window + stride * int(rng.integers(0, 4))
    w = window + stride * int(rng.integers(0, 4))
    x = rng.normal(size=(2, 3, h, w))
    got = maxpool2d(x, window, stride).value
    np.testing.assert_allclose(got, naive_maxpool(x, window, stride), rtol=0, atol=1e-12)


def test_conv2d_three_by_three_example():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    k = np.ones((1, 1, 3, 3))
    out = conv2d(x, k, np.zeros(1)).value
    np.testing.assert_array_equal(out[0, 0], [[45, 54], [81, 90]])


def test_maxpool_ties_route_to_first_cell():
    x = Tape().leaf(np.ones((1, 1, 2, 2)))
    tape = x.tape
    out = maxpool2d(x, 2)
    backward(tape, mse_loss(out, np.zeros((1, 1, 1, 1))))
    np.testing.assert_array_equal(x.grad[0, 0], [[2.0, 0.0], [0.0, 0.0]])


def test_conv2d_identity_kernel_with_padding():
    x = np.random.default_rng(0).normal(size=(2, 1, 4, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(conv2d(x, k, np.zeros(1), padding=1).value, x)


def test_conv2d_all_ones_window():
    out = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1)).value
    np.testing.assert_array_equal(out, [[[[9.0]]]])


def test_maxpool_two_by_two_example():
    out = maxpool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2).value
    np.testing.assert_array_equal(out, [[[[4.0]]]])


def test_affine_examples():
    np.testing.assert_array_equal(affine([[1.0, 2.0]], np.eye(2), np.zeros(2)).value, [[1.0, 2.0]])
    np.testing.assert_array_equal(affine([[1.0, 1.0]], [[2.0], [3.0]], [1.0]).value, [[6.0]])


def test_relu_and_sigmoid_examples():
    np.testing.assert_array_equal(relu([[-1.0, 0.0, 2.0]]).value, [[0.0, 0.0, 2.0]])
    assert sigmoid([[0.0]]).value[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_relu_gradient_at_zero_is_zero():
    x = Tape().leaf(np.array([[-1.0, 0.0, 2.0]]))
    tape = x.tape
    backward(tape, mse_loss(relu(x), np.ones((1, 3))))
    np.testing.assert_allclose(x.grad, [[0.0, 0.0, 2.0 / 3.0]])


def test_mse_examples():
    assert mse_loss([[1.0, 2.0]], [[1.0, 2.0]]).value == 0.0
    assert mse_loss([[2.0]], [[0.0]]).value == 4.0


# ---- geometry / shapes ----

def test_invalid_geometry():
    with pytest.raises(InvalidGeometry):
        conv_output_extent(6, 3, 2, 0)
    with pytest.raises(InvalidGeometry):
        conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(InvalidGeometry):
        maxpool2d(np.zeros((1, 1, 5, 5)), 2)


def test_shape_mismatches():
    with pytest.raises(ShapeMismatch):
        affine(np.zeros((2, 3)), np.zeros((4, 1)), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        mse_loss(np.zeros((2, 1)), np.zeros((1, 2)))


# ---- backward ----

def _gradcheck(build_loss, arrays):
    tape = Tape()
    nodes = {k: tape.leaf(v) for k, v in arrays.items()}
    backward(tape, build_loss(nodes))
    for key, value in arrays.items():
        numeric = numerical_gradient(lambda: float(build_loss({k: Node(v) for k, v in arrays.items()}).value),
                                     value)
        assert relative_error(nodes[key].grad, numeric).max() < 1e-4, key


def test_affine_relu_sigmoid_chain_gradients():
    rng = np.random.default_rng(1)
    target = rng.uniform(size=(4, 2))
    _gradcheck(lambda v: mse_loss(sigmoid(affine(relu(v["x"]), v["w"], v["b"])), target), {
        "x": rng.normal(size=(4, 3)) + np.sign(rng.normal(size=(4, 3))) * 0.2,
        "w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)})


def test_strided_padded_conv_gradients():
    rng = np.random.default_rng(2)
    target = rng.normal(size=(1, 2, 3, 3))
    _gradcheck(lambda v: mse_loss(conv2d(v["x"], v["k"], v["b"], stride=2, padding=1), target), {
        "x": rng.normal(size=(1, 2, 5, 5)), "k": rng.normal(size=(2, 2, 3, 3)), "b": rng.normal(size=2)})


def test_flatten_gradient_shape():
    tape = Tape()
    x = tape.leaf(np.ones((2, 3, 2, 2)))
    backward(tape, mse_loss(flatten(x), np.zeros((2, 12))))
    assert x.grad.shape == (2, 3, 2, 2)


def test_sigmoid_is_stable_for_large_inputs():
    out = sigmoid(np.array([-1000.0, 0.0, 1000.0])).value
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_backward_runs_once_per_tape():
    tape = Tape()
    x = tape.leaf(np.ones((1, 1)))
    loss = mse_loss(x, np.zeros((1, 1)))
    backward(tape, loss)
    with pytest.raises(GraphConsumed):
        backward(tape, loss)


def test_backward_needs_scalar():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    with pytest.raises(ShapeMismatch):
        backward(tape, relu(x))


def test_gradients_accumulate_into_params():
    store = ParamStore()
    store.add("w", np.ones((2, 1)), "backbone")
    store.add("b", np.zeros(1), "backbone")
    x = np.array([[1.0, 2.0]])
    for _ in range(2):
        tape = Tape()
        out = affine(tape.constant(x), tape.param(store["w"]), tape.param(store["b"]))
        backward(tape, mse_loss(out, np.zeros((1, 1))))
    # d/dw (x.w)^2 = 2 * 3 * x, twice
    np.testing.assert_allclose(store["w"].grad[:, 0], [12.0, 24.0])


def test_frozen_params_receive_no_gradient():
    store = ParamStore()
    store.add("w", np.ones((2, 1)), "backbone", trainable=False)
    store.add("v", np.ones((1, 1)), "tc_head")
    tape = Tape()
    h = affine(tape.constant(np.ones((1, 2))), tape.param(store["w"]), np.zeros(1))
    out = affine(h, tape.param(store["v"]), np.zeros(1))
    backward(tape, mse_loss(out, np.zeros((1, 1))))
    assert not store["w"].grad.any()
    assert store["v"].grad.any()


def test_forward_without_tape_records_nothing():
    tape = Tape()
    out = relu(tape.constant(np.ones((1, 2))))
    assert not out.requires_grad
    assert tape.ops == []


# ---- params / optimizers ----

def test_param_store_checksum_by_group():
    store = ParamStore()
    store.add("a", np.ones(3), "backbone")
    store.add("c", np.ones(2), "cls_head")
    before = store.checksum(["backbone"])
    store["c"].value += 1
    assert store.checksum(["backbone"]) == before
    assert store.checksum() != ParamStore().checksum()
    assert store.size() == 5


def test_param_store_rejects_duplicates_and_unknown_groups():
    store = ParamStore()
    store.add("a", np.ones(1), "backbone")
    with pytest.raises(ValueError):
        store.add("a", np.ones(1), "backbone")
    with pytest.raises(ValueError):
        store.add("b", np.ones(1), "decoder")


def test_param_value_is_copied():
    source = np.ones(2)
    store = ParamStore()
    store.add("a", source, "backbone")
    store["a"].value += 1
    np.testing.assert_array_equal(source, [1.0, 1.0])


def test_adam_first_step_moves_by_lr():
    store = ParamStore()
    store.add("w", np.array([1.0, -1.0]), "backbone")
    store["w"].grad[:] = [0.3, -5.0]
    Adam().step(store, lr=1e-3)
    # bias-corrected first step is lr * sign(g)
    np.testing.assert_allclose(store["w"].value, [1.0 - 1e-3, -1.0 + 1e-3], rtol=1e-6)
    assert not store["w"].grad.any()


def test_adam_zero_gradient_changes_nothing():
    store = ParamStore()
    store.add("w", np.array([0.5, -2.0]), "backbone")
    optimizer = Adam()
    for _ in range(3):
        optimizer.step(store, lr=1e-2)
    np.testing.assert_array_equal(store["w"].value, [0.5, -2.0])


def test_adam_constant_positive_gradient_decreases_monotonically():
    store = ParamStore()
    store.add("w", np.array([1.0]), "tc_head")
    optimizer = Adam()
    values = [1.0]
    for _ in range(50):
        store["w"].grad[:] = 0.7
        optimizer.step(store, lr=1e-3)
        values.append(float(store["w"].value[0]))
    assert all(b < a for a, b in zip(values, values[1:]))


def test_optimizers_skip_frozen_params():
    for optimizer in (Adam(), SGD()):
        store = ParamStore()
        store.add("w", np.ones(2), "backbone", trainable=False)
        store["w"].grad[:] = 1.0
        optimizer.step(store, lr=0.1)
        np.testing.assert_array_equal(store["w"].value, [1.0, 1.0])
        assert not store["w"].grad.any()


def test_sgd_step():
    store = ParamStore()
    store.add("w", np.ones(2), "tc_head")
    store["w"].grad[:] = [1.0, 2.0]
    make_optimizer("sgd").step(store, lr=0.5)
    np.testing.assert_array_equal(store["w"].value, [0.5, 0.0])


def test_optimizer_step_validates_lr():
    store = ParamStore()
    with pytest.raises(ValueError):
        optimizer_step(store, 0.0)
    with pytest.raises(ValueError):
        make_optimizer("rmsprop")
