import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gialab.exceptions import DomainError, NumericError, ShapeError
from gialab.nn import (
    Activation,
    DenseLayer,
    LabeledDataset,
    ModelParams,
    batch_gradient,
    desk_model,
    dumps,
    forward,
    init_model,
    load_checkpoint,
    loads,
    local_train,
    per_sample_grad_norms,
    per_sample_losses,
    save_checkpoint,
)

from conftest import random_data


def single(W, b, act):
    return ModelParams((DenseLayer(W, b, act),))


# ---------------------------------------------------------------- oracles


def loop_forward(model, x):
    """Straight-line matrix arithmetic with Python loops."""
    a = [float(v) for v in x]
    for layer in model.layers:
        out = []
        for i in range(layer.n_out):
            s = float(layer.bias[i])
            for j in range(layer.n_in):
                s += float(layer.weights[i, j]) * a[j]
            out.append(max(s, 0.0) if layer.activation == Activation.RELU else s)
        a = out
    return np.array(a)


def lse_loss(logits, y):
    m = max(logits)
    return m + math.log(sum(math.exp(v - m) for v in logits)) - logits[y]


def finite_difference(model, data, h=1e-5):
    def total(m):
        return float(np.sum(per_sample_losses(m, data)))

    grads_w, grads_b = [], []
    for li, layer in enumerate(model.layers):
        gw = np.zeros_like(layer.weights)
        for idx in np.ndindex(*layer.weights.shape):
            wp = layer.weights.copy(); wp[idx] += h
            wm = layer.weights.copy(); wm[idx] -= h
            gw[idx] = (total(model.with_layer(li, layer.replace(wp))) - total(model.with_layer(li, layer.replace(wm)))) / (2 * h)
        gb = np.zeros_like(layer.bias)
        for i in range(layer.n_out):
            bp = layer.bias.copy(); bp[i] += h
            bm = layer.bias.copy(); bm[i] -= h
            gb[i] = (total(model.with_layer(li, layer.replace(bias=bp))) - total(model.with_layer(li, layer.replace(bias=bm)))) / (2 * h)
        grads_w.append(gw)
        grads_b.append(gb)
    return grads_w, grads_b


def min_relu_margin(model, data):
    a = data.features
    margin = np.inf
    for layer in model.layers:
        z = a @ layer.weights.T + layer.bias
        if layer.activation == Activation.RELU:
            margin = min(margin, np.abs(z).min())
            a = np.maximum(z, 0)
        else:
            a = z
    return margin


# ---------------------------------------------------------------- types


def test_layer_rejects_bad_bias_length():
    with pytest.raises(ShapeError):
        DenseLayer(np.eye(2), np.zeros(3))


def test_layer_rejects_nan():
    with pytest.raises(NumericError):
        DenseLayer(np.array([[np.nan]]), np.zeros(1))


def test_model_rejects_broken_chain():
    l1 = DenseLayer(np.zeros((3, 2)), np.zeros(3))
    l2 = DenseLayer(np.zeros((2, 4)), np.zeros(2), Activation.IDENTITY)
    with pytest.raises(ShapeError):
        ModelParams((l1, l2), 1)


def test_model_split_index_range():
    m = init_model([2, 3, 2], split_index=1)
    with pytest.raises(ShapeError):
        ModelParams(m.layers, 2)


def test_desk_model_shape():
    m = desk_model(16, 4, 16)
    assert m.shapes() == ((32, 16, 1), (16, 32, 1), (16, 16, 1), (4, 16, 0))
    assert m.split_index == 2


# ---------------------------------------------------------------- forward


def test_forward_identity_layer():
    m = single(np.eye(2), np.zeros(2), Activation.IDENTITY)
    np.testing.assert_array_equal(forward(m, [1.0, 2.0]), [1.0, 2.0])


def test_forward_relu_clamps():
    m = single(np.eye(2), np.zeros(2), Activation.RELU)
    np.testing.assert_array_equal(forward(m, [-1.0, 3.0]), [0.0, 3.0])


def test_forward_matches_loop_oracle(seed42_model):
    x = np.eye(4)[0]
    np.testing.assert_allclose(forward(seed42_model, x), loop_forward(seed42_model, x), rtol=1e-14, atol=1e-15)


def test_forward_shape_error(seed42_model):
    with pytest.raises(ShapeError):
        forward(seed42_model, np.ones(5))


# ---------------------------------------------------------------- losses


def test_uniform_logits_give_log_c():
    m = single(np.zeros((5, 3)), np.zeros(5), Activation.IDENTITY)
    data = random_data(7, 3, 5, seed=0)
    np.testing.assert_allclose(per_sample_losses(m, data), math.log(5), rtol=1e-14)


def test_saturated_logit_loss_vanishes():
    m = single(np.zeros((3, 2)), np.array([50.0, 0.0, 0.0]), Activation.IDENTITY)
    data = LabeledDataset(np.zeros((1, 2)), [0])
    assert per_sample_losses(m, data)[0] < 1e-8


def test_losses_match_logsumexp_oracle(seed42_model):
    data = random_data(8, 4, 3, seed=42)
    expected = [lse_loss(loop_forward(seed42_model, x).tolist(), int(y)) for x, y in zip(data.features, data.labels)]
    np.testing.assert_allclose(per_sample_losses(seed42_model, data), expected, rtol=1e-12)


def test_losses_empty_dataset(seed42_model):
    with pytest.raises(DomainError):
        per_sample_losses(seed42_model, LabeledDataset(np.zeros((0, 4)), []))


# ---------------------------------------------------------------- gradients


def test_zero_loss_sample_has_zero_gradient():
    m = single(np.zeros((3, 2)), np.array([60.0, 0.0, 0.0]), Activation.IDENTITY)
    data = LabeledDataset(np.ones((1, 2)), [0])
    assert batch_gradient(m, data).norm() < 1e-8
    assert per_sample_grad_norms(m, data)[0] < 1e-8


def test_gradient_of_union_is_sum(seed42_model):
    a = random_data(5, 4, 3, seed=1)
    b = random_data(3, 4, 3, seed=2)
    ga, gb, gab = batch_gradient(seed42_model, a), batch_gradient(seed42_model, b), batch_gradient(seed42_model, a.concat(b))
    np.testing.assert_allclose(gab.flat(), (ga + gb).flat(), rtol=1e-10, atol=1e-14)


def test_gradient_matches_finite_differences(seed42_model):
    data = random_data(4, 4, 3, seed=42)
    assert min_relu_margin(seed42_model, data) > 1e-6
    fw, fb = finite_difference(seed42_model, data)
    g = batch_gradient(seed42_model, data)
    for gw, ow, gb, ob in zip(g.weights, fw, g.biases, fb):
        np.testing.assert_allclose(gw, ow, rtol=1e-4, atol=1e-7)
        np.testing.assert_allclose(gb, ob, rtol=1e-4, atol=1e-7)


def test_per_sample_norms_match_singleton_batches(seed42_model):
    data = random_data(6, 4, 3, seed=7)
    norms = per_sample_grad_norms(seed42_model, data)
    expected = [batch_gradient(seed42_model, data.subset([i])).norm() for i in range(len(data))]
    np.testing.assert_allclose(norms, expected, rtol=1e-12)


def test_duplicated_sample_same_norm(seed42_model):
    data = random_data(1, 4, 3, seed=9)
    norms = per_sample_grad_norms(seed42_model, data.concat(data))
    assert norms[0] == norms[1]


def test_sample_weights_scale_contributions(seed42_model):
    data = random_data(3, 4, 3, seed=5)
    w = np.array([2.0, -1.0, 0.5])
    g = batch_gradient(seed42_model, data, w)
    parts = [batch_gradient(seed42_model, data.subset([i])).scale(w[i]) for i in range(3)]
    np.testing.assert_allclose(g.flat(), (parts[0] + parts[1] + parts[2]).flat(), rtol=1e-12, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_linearity_property(seed, n):
    model = init_model([3, 5, 4, 2], split_index=1, seed=seed)
    a = random_data(n, 3, 2, seed=seed + 1)
    b = random_data(n, 3, 2, seed=seed + 2)
    lhs = batch_gradient(model, a.concat(b)).flat()
    rhs = (batch_gradient(model, a) + batch_gradient(model, b)).flat()
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-13)


def test_first_order_taylor_consistency(seed42_model):
    """A tiny step along the gradient lowers the summed loss by lr*|g|^2
    up to O(lr^2)."""
    data = random_data(8, 4, 3, seed=11)
    g = batch_gradient(seed42_model, data)
    before = per_sample_losses(seed42_model, data).sum()
    for lr in (1e-4, 1e-5):
        after = per_sample_losses(seed42_model.apply_update(g, lr), data).sum()
        assert abs((before - after) - lr * g.norm() ** 2) < 10 * lr**2 * g.norm() ** 2 * 10


# ---------------------------------------------------------------- training


def test_local_train_zero_lr_is_identity(seed42_model):
    data = random_data(10, 4, 3, seed=0)
    out = local_train(seed42_model, data, steps=5, batch_size=4, lr=0.0, seed=0)
    np.testing.assert_array_equal(out.flat(), seed42_model.flat())


def test_local_train_one_full_batch_step(seed42_model):
    data = random_data(10, 4, 3, seed=0)
    out = local_train(seed42_model, data, steps=1, batch_size=10, lr=0.3, seed=0)
    g = batch_gradient(seed42_model, data)
    expected = seed42_model.flat() - 0.3 * g.flat() / 10
    np.testing.assert_allclose(out.flat(), expected, rtol=1e-12, atol=1e-14)


def test_local_train_leaves_input_untouched(seed42_model):
    before = seed42_model.flat().copy()
    local_train(seed42_model, random_data(10, 4, 3, seed=0), 3, 4, 0.5, 0)
    np.testing.assert_array_equal(seed42_model.flat(), before)


def test_local_train_loss_decreases():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(-2, 0.5, (30, 2)), rng.normal(2, 0.5, (30, 2))])
    data = LabeledDataset(x, np.repeat([0, 1], 30))
    model = init_model([2, 8, 2], seed=0)
    first = per_sample_losses(model, data).mean()
    trained = local_train(model, data, steps=50, batch_size=60, lr=0.1, seed=0)
    assert per_sample_losses(trained, data).mean() < first


def test_local_train_deterministic(seed42_model):
    data = random_data(20, 4, 3, seed=0)
    a = local_train(seed42_model, data, 7, 3, 0.2, seed=5)
    b = local_train(seed42_model, data, 7, 3, 0.2, seed=5)
    assert a.flat().tobytes() == b.flat().tobytes()


def test_local_train_reports_overflow_layer():
    m = single(np.full((2, 2), 1e300), np.zeros(2), Activation.IDENTITY)
    data = LabeledDataset([[1e10, 1e10]], [0])
    with pytest.raises(NumericError) as info:
        local_train(m, data, 1, 1, 1e300, 0)
    assert info.value.layer == 0


def test_local_train_preconditions(seed42_model):
    data = random_data(4, 4, 3, seed=0)
    with pytest.raises(DomainError):
        local_train(seed42_model, data, 0, 1, 0.1)
    with pytest.raises(DomainError):
        local_train(seed42_model, data, 1, 0, 0.1)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_layout(seed42_model):
    buf = dumps(seed42_model)
    assert buf[:4] == b"GIA1"
    assert struct.unpack_from("<II", buf, 4) == (2, 1)
    rows, cols, act = struct.unpack_from("<IIB", buf, 12)
    assert (rows, cols, act) == (6, 4, 1)
    first_weight = struct.unpack_from("<d", buf, 21)[0]
    assert first_weight == seed42_model.layers[0].weights[0, 0]
    assert len(buf) == 12 + 2 * 9 + 8 * (6 * 4 + 6 + 3 * 6 + 3)


def test_checkpoint_roundtrip(tmp_path, seed42_model):
    path = tmp_path / "m.gia"
    save_checkpoint(seed42_model, path)
    back = load_checkpoint(path)
    assert back.shapes() == seed42_model.shapes()
    assert back.flat().tobytes() == seed42_model.flat().tobytes()
    assert back.split_index == seed42_model.split_index


def test_checkpoint_rejects_garbage(seed42_model):
    with pytest.raises(ShapeError):
        loads(b"NOPE" + bytes(8))
    with pytest.raises(ShapeError):
        loads(dumps(seed42_model)[:-3])
