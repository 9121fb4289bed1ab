import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flsim.errors import ArchitectureError, ContractError, NumericError, PrecisionError, ShapeError
from flsim.tensor_nn import (Batch, backward, conv2d, dense, flatten, forward, frame_diff, frame_diff_layer,
                             grad_check, init_params, loss_and_grad, loss_softmax_ce, relu, sgd_step,
                             validate_specs)
from oracles import ce_logsumexp, frame_diff_loops, reference_forward


# frame_diff

def test_frame_diff_constant_chunk_is_zero():
    out = frame_diff(np.full((2, 16, 4, 4), 0.7))
    assert out.shape == (2, 15, 4, 4)
    assert not out.any()


def test_frame_diff_unit_ramp():
    chunk = np.broadcast_to(np.arange(16.0)[None, :, None, None], (1, 16, 3, 5)).copy()
    np.testing.assert_array_equal(frame_diff(chunk), np.ones((1, 15, 3, 5)))


def test_frame_diff_matches_loop_oracle():
    x = np.random.default_rng(3).random((3, 6, 4, 5))
    np.testing.assert_array_equal(frame_diff(x), frame_diff_loops(x))


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2 ** 32 - 1))
def test_frame_diff_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 2, 5, 3, 3))
    np.testing.assert_allclose(frame_diff(a * x + b * y), a * frame_diff(x) + b * frame_diff(y), atol=1e-12)


def test_frame_diff_needs_two_frames():
    with pytest.raises(ArchitectureError):
        frame_diff(np.zeros((1, 1, 4, 4)))
    with pytest.raises(ArchitectureError):
        validate_specs([frame_diff_layer(), flatten(), dense(16, 2)], (1, 4, 4))


# forward

def _batch(rng, n, dims, dtype=np.float64):
    return Batch(rng.random((n,) + tuple(dims)).astype(dtype), rng.integers(0, 2, n))


def test_forward_zero_params_gives_zero_logits(mini64, mini_batch):
    zeros = {k: np.zeros_like(v) for k, v in mini64.params.items()}
    logits, _ = forward(zeros, mini64.specs, mini_batch)
    assert logits.shape == (len(mini_batch), 2)
    assert not logits.any()


def test_forward_dense_identity():
    specs, _ = validate_specs([flatten(), dense(2, 2)], (1, 1, 2))
    params = {"1.weight": np.eye(2), "1.bias": np.zeros(2)}
    x = np.array([[[[1.5, -2.0]]], [[[0.25, 3.0]]]])
    logits, _ = forward(params, specs, Batch(x, [0, 1]))
    np.testing.assert_array_equal(logits, x.reshape(2, 2))


def test_forward_matches_reference_oracle(mini64, mini_batch):
    logits, _ = forward(mini64.params, mini64.specs, mini_batch)
    ref = reference_forward(mini64.params, mini64.specs, mini_batch.inputs)
    np.testing.assert_allclose(logits, ref, rtol=1e-10, atol=1e-12)


def test_forward_shape_error_names_layer(mini64, mini_batch):
    params = dict(mini64.params)
    params["6.weight"] = np.zeros((32, 100))
    with pytest.raises(ShapeError, match="layer 6"):
        forward(params, mini64.specs, mini_batch)
    bad = Batch(np.zeros((2, 16, 6, 6)), [0, 1])
    with pytest.raises(ShapeError, match="layer 6"):
        forward(mini64.params, mini64.specs, bad)


def test_validate_specs_rejects_bad_stacks():
    with pytest.raises(ArchitectureError, match="layer 1"):
        validate_specs([flatten(), frame_diff_layer(), dense(4, 2)], (2, 2, 2))
    with pytest.raises(ArchitectureError, match="layer 1"):
        validate_specs([frame_diff_layer(), conv2d(1, 1, 5), flatten(), dense(1, 2)], (2, 3, 3))


def test_same_padding_resolved():
    specs, shapes = validate_specs([conv2d(1, 2, 3, padding="same"), flatten(), dense(2 * 5 * 5, 2)], (1, 5, 5))
    assert specs[0].padding == (1, 1, 1, 1)
    assert shapes[0] == (2, 5, 5)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(3, 9), st.integers(3, 9), st.integers(1, 3), st.integers(1, 4),
       st.integers(1, 4), st.integers(1, 2), st.integers(1, 2), st.lists(st.integers(0, 2), min_size=4, max_size=4))
def test_shape_algebra(c, h, w, o, kh, kw, sh, sw, pad):
    conv = conv2d(c, o, (kh, kw), (sh, sw), tuple(pad))
    ho = (h + pad[0] + pad[1] - kh) // sh + 1
    wo = (w + pad[2] + pad[3] - kw) // sw + 1
    if ho < 1 or wo < 1:
        with pytest.raises(ArchitectureError):
            validate_specs([conv, flatten(), dense(1, 2)], (c, h, w))
        return
    specs, shapes = validate_specs([conv, relu(), flatten(), dense(o * ho * wo, 2)], (c, h, w))
    assert shapes[0] == (o, ho, wo)
    rng = np.random.default_rng(0)
    params = init_params(specs, rng, np.float64)
    out, cache = forward(params, specs, _batch(rng, 2, (c, h, w)))
    assert cache.inputs[1].shape == (2, o, ho, wo)
    assert out.shape == (2, 2)


# losses

def test_ce_uniform_is_ln2():
    assert abs(loss_softmax_ce(np.zeros((3, 2)), [0, 1, 1]) - math.log(2)) < 1e-12


def test_ce_saturated():
    assert loss_softmax_ce(np.array([[30.0, -30.0]]), [0]) <= 1e-12


def test_ce_matches_logsumexp_oracle():
    rng = np.random.default_rng(4)
    logits = rng.normal(scale=5, size=(50, 2))
    labels = rng.integers(0, 2, 50)
    assert loss_softmax_ce(logits, labels) == pytest.approx(ce_logsumexp(logits, labels), rel=1e-13)


def test_ce_nonfinite_raises():
    with pytest.raises(NumericError):
        loss_softmax_ce(np.array([[np.nan, 0.0]]), [0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=2), st.integers(0, 1))
def test_ce_nonnegative(row, y):
    assert loss_softmax_ce(np.array([row]), [y]) >= 0


# backward

def test_zero_input_bias_free_gives_zero_weight_grads():
    specs, _ = validate_specs([frame_diff_layer(), conv2d(3, 2, 3, padding=1), relu(), flatten(),
                               dense(2 * 4 * 4, 3), relu(), dense(3, 2)], (4, 4, 4))
    params = init_params(specs, np.random.default_rng(0), np.float64)
    batch = Batch(np.zeros((3, 4, 4, 4)), [0, 1, 1])
    _, grads = loss_and_grad(params, specs, batch)
    for k, g in grads.items():
        if k.endswith("weight"):
            assert not g.any(), k


def test_duplicated_sample_same_gradient(mini64, mini_batch):
    one = Batch(mini_batch.inputs[:1], mini_batch.labels[:1])
    two = Batch(np.concatenate([one.inputs, one.inputs]), np.concatenate([one.labels, one.labels]))
    _, g1 = loss_and_grad(mini64.params, mini64.specs, one)
    _, g2 = loss_and_grad(mini64.params, mini64.specs, two)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15)


def test_permutation_invariance(mini64, mini_batch):
    perm = np.random.default_rng(9).permutation(len(mini_batch))
    shuffled = Batch(mini_batch.inputs[perm], mini_batch.labels[perm])
    l1, g1 = loss_and_grad(mini64.params, mini64.specs, mini_batch)
    l2, g2 = loss_and_grad(mini64.params, mini64.specs, shuffled)
    assert l1 == pytest.approx(l2, rel=1e-13)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-11, atol=1e-15)


def test_backward_stale_cache(mini64, mini_batch):
    _, cache = forward(mini64.params, mini64.specs, mini_batch)
    changed = dict(mini64.params)
    changed["1.weight"] = changed["1.weight"] + 1.0
    with pytest.raises(ContractError):
        backward(cache, mini_batch.labels, params=changed)
    cache.params["1.weight"] = changed["1.weight"]
    with pytest.raises(ContractError):
        backward(cache, mini_batch.labels)


# grad_check

def test_grad_check_mini(mini64, mini_batch):
    report = grad_check(mini64.specs, mini64.params, mini_batch, eps=1e-5)
    assert report.max_rel_err < 1e-4
    assert report.coords_checked > 0


def test_grad_check_linear_square_loss():
    specs, _ = validate_specs([flatten(), dense(6, 2)], (1, 2, 3))
    rng = np.random.default_rng(2)
    params = init_params(specs, rng, np.float64)
    params["1.bias"] = rng.normal(size=2)
    batch = _batch(rng, 5, (1, 2, 3))
    report = grad_check(specs, params, batch, eps=1e-5, loss="square")
    assert report.max_rel_err < 1e-9
    # closed form: dL/dW = (XW^T + b - Y)^T X / n
    x = batch.inputs.reshape(5, -1)
    resid = x @ params["1.weight"].T + params["1.bias"] - np.eye(2)[batch.labels]
    _, grads = loss_and_grad(params, specs, batch, loss="square")
    np.testing.assert_allclose(grads["1.weight"], resid.T @ x / 5, rtol=1e-12)


def test_grad_check_degenerate_zero():
    specs, _ = validate_specs([flatten(), dense(4, 2)], (1, 2, 2))
    params = {"1.weight": np.zeros((2, 4)), "1.bias": np.zeros(2)}
    report = grad_check(specs, params, Batch(np.zeros((2, 1, 2, 2)), [0, 1]))
    assert report.max_rel_err == 0


def test_grad_check_requires_f64(mini_batch):
    from flsim.model import build_model
    m = build_model("mini", 0, np.float32)
    with pytest.raises(PrecisionError):
        grad_check(m.specs, m.params, mini_batch)


# sgd_step

def test_sgd_zero_lr_copies():
    p = {"0.weight": np.array([1.0, 2.0])}
    out = sgd_step(p, {"0.weight": np.array([5.0, 5.0])}, 0.0)
    np.testing.assert_array_equal(out["0.weight"], p["0.weight"])


def test_sgd_arithmetic():
    out = sgd_step({"0.weight": np.array([1.0])}, {"0.weight": np.array([2.0])}, 0.5)
    assert out["0.weight"].tolist() == [0.0]


def test_sgd_two_steps_equal_summed():
    rng = np.random.default_rng(1)
    p = {"0.weight": rng.normal(size=(3, 4))}
    g1, g2 = {"0.weight": rng.normal(size=(3, 4))}, {"0.weight": rng.normal(size=(3, 4))}
    two = sgd_step(sgd_step(p, g1, 0.1), g2, 0.1)
    one = sgd_step(p, {"0.weight": g1["0.weight"] + g2["0.weight"]}, 0.1)
    np.testing.assert_allclose(two["0.weight"], one["0.weight"], atol=1e-14)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step({"0.weight": np.zeros(3)}, {"0.weight": np.zeros(4)}, 0.1)


def test_batch_validation():
    with pytest.raises(ShapeError):
        Batch(np.zeros((0, 2, 2, 2)), [])
    with pytest.raises(ShapeError):
        Batch(np.zeros((1, 2, 2, 2)), [2])
