import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from krisplite import tensorcore as tc
from conftest import assert_grad_close, numeric_grad


def loss_through(out: tc.Tensor, weights: np.ndarray) -> tc.Tensor:
    """Random linear functional of ``out`` so every output element carries gradient."""
    return tc.sum_all(tc.mul(out, weights))


# ---------------------------------------------------------------- linear

def test_linear_identity():
    x = tc.Tensor(np.arange(12.0).reshape(3, 4))
    y = tc.linear(x, tc.Tensor(np.eye(4)), tc.Tensor(np.zeros(4)))
    np.testing.assert_array_equal(y.data, x.data)


def test_linear_zero_input_gives_bias():
    b = np.array([1.5, -2.0, 0.25])
    y = tc.linear(tc.Tensor(np.zeros((4, 2))), tc.Tensor(np.ones((2, 3))), tc.Tensor(b))
    np.testing.assert_array_equal(y.data, np.tile(b, (4, 1)))


def test_linear_matches_triple_loop_and_finite_differences(rng):
    x = tc.parameter(rng.normal(size=(4, 8)))
    W = tc.parameter(rng.normal(size=(8, 3)))
    b = tc.parameter(rng.normal(size=3))
    y = tc.linear(x, W, b)
    naive = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            acc = b.data[j]
            for k in range(8):
                acc += x.data[i, k] * W.data[k, j]
            naive[i, j] = acc
    np.testing.assert_allclose(y.data, naive, rtol=1e-12)

    w = rng.normal(size=(4, 3))
    f = lambda: loss_through(tc.linear(x, W, b), w).data
    loss_through(tc.linear(x, W, b), w).backward()
    for p in (x, W, b):
        assert_grad_close(p.grad, numeric_grad(f, p.data))


def test_linear_shape_error_names_shapes():
    with pytest.raises(tc.ShapeError, match=r"\(2, 5\).*\(4, 3\)"):
        tc.linear(tc.Tensor(np.zeros((2, 5))), tc.Tensor(np.zeros((4, 3))), tc.Tensor(np.zeros(3)))


# ---------------------------------------------------------------- softmax

def test_softmax_uniform_row():
    y = tc.softmax_rows(tc.Tensor(np.full((2, 5), 3.7)))
    np.testing.assert_allclose(y.data, 0.2)


def test_softmax_large_logits_stable():
    y = tc.softmax_rows(tc.Tensor(np.array([[1000.0, 0.0]])))
    assert np.all(np.isfinite(y.data))
    np.testing.assert_allclose(y.data, [[1.0, 0.0]], atol=1e-12)


def test_softmax_jvp_matches_finite_differences(rng):
    x = tc.parameter(rng.normal(size=(5, 7)))
    w = rng.normal(size=(5, 7))
    y = tc.softmax_rows(x)
    np.testing.assert_allclose(y.data.sum(axis=1), 1.0, atol=1e-6)
    loss_through(y, w).backward()
    assert_grad_close(x.grad, numeric_grad(lambda: loss_through(tc.softmax_rows(x), w).data, x.data))


def test_softmax_mask_zeroes_hidden_entries():
    y = tc.softmax_rows(tc.Tensor(np.array([[1.0, 2.0, 50.0]])), mask=np.array([[True, True, False]]))
    assert y.data[0, 2] == 0.0
    np.testing.assert_allclose(y.data.sum(), 1.0)
    with pytest.raises(ValueError):
        tc.softmax_rows(tc.Tensor(np.zeros((1, 2))), mask=np.array([[False, False]]))


# ---------------------------------------------------------------- attention

def make_attention_params(rng, d, scale=0.4):
    return {n: tc.parameter(rng.normal(size=(d, d) if n[0] == "w" else (d,)) * scale, n)
            for n in tc.ATTENTION_PARAMS}


def reference_attention(q_in, kv_in, p, heads):
    """Per-head, per-query loop written independently of the vectorized op."""
    d = q_in.shape[1]
    hd = d // heads
    P = {k: v.data for k, v in p.items()}
    Q = q_in @ P["wq"] + P["bq"]
    K = kv_in @ P["wk"] + P["bk"]
    V = kv_in @ P["wv"] + P["bv"]
    ctx = np.zeros((q_in.shape[0], d))
    all_w = np.zeros((heads, q_in.shape[0], kv_in.shape[0]))
    for h in range(heads):
        cols = slice(h * hd, (h + 1) * hd)
        for i in range(q_in.shape[0]):
            scores = np.array([Q[i, cols] @ K[j, cols] / math.sqrt(hd) for j in range(kv_in.shape[0])])
            e = np.exp(scores - scores.max())
            w = e / e.sum()
            all_w[h, i] = w
            ctx[i, cols] = sum(w[j] * V[j, cols] for j in range(kv_in.shape[0]))
    return ctx @ P["wo"] + P["bo"], all_w


def test_attention_single_key_weights_are_one(rng):
    cfg = tc.AttentionConfig(16, 8)
    p = make_attention_params(rng, 16)
    kv = rng.normal(size=(1, 16))
    expected = (kv @ p["wv"].data + p["bv"].data) @ p["wo"].data + p["bo"].data
    for _ in range(3):
        q = tc.Tensor(rng.normal(size=(2, 16)) * 10)
        out, w = tc.multi_head_attention(q, tc.Tensor(kv), p, cfg)
        assert np.all(w.data == 1.0)
        np.testing.assert_allclose(out.data, np.repeat(expected, 2, axis=0), rtol=1e-12)


def test_attention_identity_projections_single_row():
    d = 8
    cfg = tc.AttentionConfig(d, 2)
    p = {n: tc.parameter(np.eye(d) if n[0] == "w" else np.zeros(d)) for n in tc.ATTENTION_PARAMS}
    row = tc.Tensor(np.arange(1.0, d + 1)[None])
    out, _ = tc.multi_head_attention(row, row, p, cfg)
    np.testing.assert_allclose(out.data, row.data)


def test_attention_matches_reference_and_gradients(rng):
    cfg = tc.AttentionConfig(16, 8)
    p = make_attention_params(rng, 16)
    q = tc.parameter(rng.normal(size=(3, 16)))
    kv = tc.parameter(rng.normal(size=(4, 16)))
    out, w = tc.multi_head_attention(q, kv, p, cfg)
    ref_out, ref_w = reference_attention(q.data, kv.data, p, 8)
    np.testing.assert_allclose(out.data, ref_out, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(w.data, ref_w, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)

    probe = rng.normal(size=(3, 16))
    f = lambda: loss_through(tc.multi_head_attention(q, kv, p, cfg)[0], probe).data
    loss_through(out, probe).backward()
    for t in [q, kv, *p.values()]:
        assert_grad_close(t.grad if t.grad is not None else np.zeros_like(t.data), numeric_grad(f, t.data))


def test_attention_batched_mask_matches_unpadded(rng):
    cfg = tc.AttentionConfig(8, 2)
    p = make_attention_params(rng, 8)
    q = rng.normal(size=(1, 8))
    kv = rng.normal(size=(3, 8))
    padded = np.concatenate([kv, rng.normal(size=(2, 8))])[None]
    out_b, _ = tc.multi_head_attention(tc.Tensor(q[None]), tc.Tensor(padded), p, cfg,
                                       mask=np.array([[True, True, True, False, False]]))
    out_u, _ = tc.multi_head_attention(tc.Tensor(q), tc.Tensor(kv), p, cfg)
    np.testing.assert_allclose(out_b.data[0], out_u.data, rtol=1e-12)


def test_attention_config_rejects_non_divisible_heads():
    with pytest.raises(ValueError):
        tc.AttentionConfig(10, 3)


def test_attention_dimension_mismatch(rng):
    p = make_attention_params(rng, 8)
    with pytest.raises(tc.ShapeError):
        tc.multi_head_attention(tc.Tensor(np.zeros((1, 8))), tc.Tensor(np.zeros((2, 6))), p,
                                tc.AttentionConfig(8, 2))


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_is_zero():
    y = tc.layer_norm(tc.Tensor(np.full((1, 6), 4.2)), tc.Tensor(np.ones(6)), tc.Tensor(np.zeros(6)))
    np.testing.assert_allclose(y.data, 0.0, atol=1e-12)


def test_layer_norm_moments(rng):
    y = tc.layer_norm(tc.Tensor(rng.normal(3.0, 5.0, size=(4, 64))), tc.Tensor(np.ones(64)),
                      tc.Tensor(np.zeros(64)))
    np.testing.assert_allclose(y.data.mean(axis=1), 0.0, atol=1e-5)
    # eps = 1e-5 sits inside the denominator, so the variance is var/(var+eps)
    np.testing.assert_allclose(y.data.var(axis=1), 1.0, atol=1e-5)


def test_layer_norm_gradients(rng):
    x = tc.parameter(rng.normal(size=(3, 5)))
    g = tc.parameter(rng.normal(size=5))
    b = tc.parameter(rng.normal(size=5))
    w = rng.normal(size=(3, 5))
    f = lambda: loss_through(tc.layer_norm(x, g, b), w).data
    loss_through(tc.layer_norm(x, g, b), w).backward()
    for p in (x, g, b):
        assert_grad_close(p.grad, numeric_grad(f, p.data))


# ---------------------------------------------------------------- cross entropy

@pytest.mark.parametrize("classes", [2, 7, 26])
def test_cross_entropy_uniform_is_log_c(classes):
    loss = tc.cross_entropy(tc.Tensor(np.zeros((3, classes))), [0, 1, classes - 1])
    assert loss.data == pytest.approx(math.log(classes), rel=1e-12)


def test_cross_entropy_large_margin_is_near_zero():
    logits = np.zeros((2, 5))
    logits[0, 3] = logits[1, 1] = 50.0
    assert float(tc.cross_entropy(tc.Tensor(logits), [3, 1]).data) < 1e-20


def test_cross_entropy_gradient(rng):
    logits = tc.parameter(rng.normal(size=(6, 26)))
    targets = rng.integers(0, 26, size=6)
    tc.cross_entropy(logits, targets).backward()
    expected = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
    expected[np.arange(6), targets] -= 1
    np.testing.assert_allclose(logits.grad, expected / 6, rtol=1e-10)
    assert_grad_close(logits.grad, numeric_grad(lambda: tc.cross_entropy(logits, targets).data, logits.data))


def test_cross_entropy_rejects_bad_target():
    with pytest.raises(IndexError):
        tc.cross_entropy(tc.Tensor(np.zeros((2, 3))), [0, 3])


# ---------------------------------------------------------------- other ops

def test_small_ops_gradients(rng):
    a = tc.parameter(rng.normal(size=(2, 3, 4)))
    b = tc.parameter(rng.normal(size=(4,)))
    c = tc.parameter(rng.normal(size=(2, 4, 2)))
    mask = np.array([[True, False, True], [False, False, False]])
    cond = np.array([[[True]], [[False]]])
    w = rng.normal(size=(2, 10))

    def build():
        h = tc.relu(tc.sub(tc.mul(a, b), tc.scale(a, 0.3)))
        pooled = tc.masked_mean(h, mask)                                    # [2, 4]
        mixed = tc.where(cond[:, 0], pooled, tc.mean(h, axis=1))            # [2, 4]
        prod = tc.reshape(tc.transpose(tc.matmul(h, c), (0, 2, 1)), (2, 6))  # [2, 6]
        return loss_through(tc.concat([mixed, prod], axis=-1), w)

    build().backward()
    for p in (a, b, c):
        assert_grad_close(p.grad, numeric_grad(lambda: build().data, p.data))


def test_masked_mean_empty_row_is_zero():
    x = tc.Tensor(np.ones((1, 3, 2)))
    np.testing.assert_array_equal(tc.masked_mean(x, np.zeros((1, 3), bool)).data, 0.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_result_raises():
    with pytest.raises(tc.NumericalError):
        tc.mul(tc.Tensor(np.array([1e200])), tc.Tensor(np.array([1e200])))


# ---------------------------------------------------------------- grad_check harness

def test_grad_check_linear_passes(rng):
    x = tc.parameter(rng.normal(size=(4, 8)), "x")
    W = tc.parameter(rng.normal(size=(8, 3)), "W")
    b = tc.parameter(rng.normal(size=3), "b")
    w = rng.normal(size=(4, 3))
    result = tc.grad_check(lambda: loss_through(tc.linear(x, W, b), w), [x, W, b], eps=1e-4)
    assert result.ok and result.max_rel_error < 1e-4


def _flipped_square(x: tc.Tensor) -> tc.Tensor:
    # deliberately wrong backward: sign flipped
    return tc._result(x.data ** 2, (x,), lambda g: (-2 * x.data * g,), "bad_square")


def test_grad_check_catches_sign_flip(rng):
    x = tc.parameter(rng.normal(size=5) + 2.0, "x")
    result = tc.grad_check(lambda: tc.sum_all(_flipped_square(x)), [x])
    assert result.max_rel_error > 0.1
    assert not result.ok


def test_backward_accumulates_shared_parents(rng):
    x = tc.parameter(rng.normal(size=(2, 2)))
    y = tc.add(x, x)
    tc.sum_all(tc.mul(y, x)).backward()   # d/dx sum(2x*x) = 4x
    np.testing.assert_allclose(x.grad, 4 * x.data)


# ---------------------------------------------------------------- properties

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 8), elements=finite), arrays(np.float64, (4, 8), elements=finite))
def test_ops_stay_finite_on_large_inputs(q, kv):
    rng = np.random.default_rng(0)
    cfg = tc.AttentionConfig(8, 2)
    p = make_attention_params(rng, 8)
    out, w = tc.multi_head_attention(tc.Tensor(q), tc.Tensor(kv), p, cfg)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)
    h = tc.layer_norm(tc.add(out, tc.Tensor(q)), tc.Tensor(np.ones(8)), tc.Tensor(np.zeros(8)))
    loss = tc.cross_entropy(tc.softmax_rows(tc.relu(h)), [0, 1, 2])
    assert np.isfinite(loss.data)


def test_forward_backward_deterministic(rng):
    def run():
        r = np.random.default_rng(7)
        p = make_attention_params(r, 16)
        q = tc.parameter(r.normal(size=(3, 16)))
        kv = tc.parameter(r.normal(size=(4, 16)))
        out, _ = tc.multi_head_attention(q, kv, p, tc.AttentionConfig(16, 8))
        loss = tc.cross_entropy(out, [1, 2, 3])
        loss.backward()
        return loss.data.tobytes() + b"".join(t.grad.tobytes() for t in [q, kv, *p.values()])
    assert run() == run()
