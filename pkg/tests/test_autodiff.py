import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pld import autodiff as ad
from pld.autodiff import (ContractError, DimensionError, NoMaskedTokensError, Tape, Tensor,
                          backward)
from pld.gradcheck import check_function, op_cases, relative_error, run_op_checks


def T(x, name=None, grad=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, name=name)


# -- forward values -------------------------------------------------------

def test_matmul_identity_and_hand_arithmetic(gen):
    A = gen.standard_normal((2, 2))
    np.testing.assert_array_equal(ad.matmul(T(np.eye(2)), T(A)).data, A)
    out = ad.matmul(T([[1, 2], [3, 4]]), T([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_layer_norm_constant_row_is_zero():
    out = ad.layer_norm(T(np.full((1, 5), 3.7)), T(np.ones(5)), T(np.zeros(5)), 1e-12)
    np.testing.assert_array_equal(out.data, np.zeros((1, 5)))


def test_layer_norm_already_normalized():
    out = ad.layer_norm(T([[1.0, -1.0]]), T([1.0, 1.0]), T([0.0, 0.0]), 1e-12)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], rtol=1e-11)


def test_layer_norm_dimension_error():
    with pytest.raises(DimensionError):
        ad.layer_norm(T(np.ones((2, 4))), T(np.ones(3)), T(np.zeros(3)), 1e-5)


def test_softmax_examples():
    np.testing.assert_array_equal(ad.softmax(T([0.0, 0.0])).data, [0.5, 0.5])
    y = ad.softmax(T([1000.0, 0.0])).data
    assert np.all(np.isfinite(y))
    assert y[0] == pytest.approx(1.0) and y[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_bad_axis():
    with pytest.raises(DimensionError):
        ad.softmax(T(np.ones((2, 3))), axis=2)


def test_gelu_zero_and_asymptotes():
    assert ad.gelu(T([0.0])).data[0] == 0.0
    big = ad.gelu(T([30.0, -30.0])).data
    assert big[0] == pytest.approx(30.0)
    assert big[1] == pytest.approx(0.0, abs=1e-12)


def test_gelu_constants_documented():
    assert ad.GELU_C == math.sqrt(2 / math.pi)
    assert ad.GELU_A == 0.044715
    x = 0.7
    ref = 0.5 * x * (1 + math.tanh(ad.GELU_C * (x + ad.GELU_A * x ** 3)))
    assert ad.gelu(T([x])).data[0] == pytest.approx(ref, rel=1e-15)


def test_cross_entropy_uniform_logits_is_log_v():
    V = 13
    loss = ad.cross_entropy_with_mask(T(np.zeros((2, 3, V))), np.zeros((2, 3), int), np.ones((2, 3), bool))
    assert loss.data == pytest.approx(math.log(V), rel=1e-14)


def test_cross_entropy_averages_masked_positions_only(gen):
    z = gen.standard_normal((1, 4, 5))
    labels = np.array([[0, 1, 2, 3]])
    mask = np.array([[True, False, True, False]])
    full = ad.cross_entropy_with_mask(T(z), labels, np.ones_like(mask))
    part = ad.cross_entropy_with_mask(T(z), labels, mask)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    assert part.data == pytest.approx(-(logp[0, 0, 0] + logp[0, 2, 2]) / 2, rel=1e-13)
    assert full.data != part.data


def test_cross_entropy_errors():
    with pytest.raises(NoMaskedTokensError):
        ad.cross_entropy_with_mask(T(np.zeros((2, 5))), [0, 1], [False, False])
    with pytest.raises(IndexError):
        ad.cross_entropy_with_mask(T(np.zeros((2, 5))), [0, 7], [True, True])


def test_embedding_lookup(gen):
    table = gen.standard_normal((6, 3))
    np.testing.assert_array_equal(ad.embedding_lookup(T(table), [0]).data, table[[0]])
    with pytest.raises(IndexError):
        ad.embedding_lookup(T(table), [6])
    with pytest.raises(IndexError):
        ad.embedding_lookup(T(table), [-1])


def test_dropout_rate_zero_is_identity_and_scaling(gen):
    x = T(gen.standard_normal((50, 40)))
    assert ad.dropout(x, 0.0, None) is x
    y = ad.dropout(x, 0.25, np.random.default_rng(0)).data
    kept = y != 0
    np.testing.assert_allclose(y[kept], x.data[kept] / 0.75, rtol=1e-15)


# -- backward contract ----------------------------------------------------

def test_backward_sum_gives_ones():
    w = T(np.arange(6.0).reshape(2, 3), "w")
    with Tape():
        loss = ad.sum_(w)
    grads = backward(loss)
    np.testing.assert_array_equal(grads["w"], np.ones((2, 3)))


def test_backward_half_square_gives_w(gen):
    w = T(gen.standard_normal(5), "w")
    with Tape():
        loss = ad.scale(ad.sum_(ad.mul(w, w)), 0.5)
    np.testing.assert_allclose(backward(loss)["w"], w.data, rtol=1e-15)


def test_backward_rejects_non_scalar_loss():
    w = T(np.ones(3))
    with Tape():
        y = ad.scale(w, 2.0)
    with pytest.raises(ContractError):
        backward(y)


def test_backward_consumes_tape():
    w = T(np.ones(3))
    with Tape() as tape:
        loss = ad.sum_(w)
    tape.backward(loss)
    assert len(tape) == 0
    with pytest.raises(ContractError):
        tape.backward(loss)


def test_backward_off_tape_is_an_error():
    loss = ad.sum_(T(np.ones(3)))
    with pytest.raises(ContractError):
        backward(loss)


def test_ops_outside_a_tape_record_nothing():
    w = T(np.ones(3))
    y = ad.sum_(ad.mul(w, w))
    assert y._tape is None


def test_tape_is_topologically_ordered(gen):
    a, b = T(gen.standard_normal(3)), T(gen.standard_normal(3))
    with Tape() as tape:
        c = ad.mul(a, b)
        d = ad.add(c, a)
        ad.sum_(d)
    seen = set()
    for _, inputs, out, _ in tape.nodes:
        for t in inputs:
            if t._tape is tape:
                assert id(t) in seen
        seen.add(id(out))


def test_linearity_of_two_paths(gen):
    x = T(gen.standard_normal(4), "x")
    with Tape():
        l1 = ad.sum_(ad.gelu(x))
    g1 = backward(l1)["x"]
    with Tape():
        l2 = ad.sum_(ad.mul(x, x))
    g2 = backward(l2)["x"]
    with Tape():
        both = ad.add(ad.sum_(ad.gelu(x)), ad.sum_(ad.mul(x, x)))
    np.testing.assert_allclose(backward(both)["x"], g1 + g2, rtol=1e-14)


def test_retain_grad_on_intermediate(gen):
    x = T(gen.standard_normal(3), "x")
    with Tape():
        h = ad.scale(x, 3.0)
        h.retain_grad = True
        loss = ad.sum_(ad.mul(h, h))
    backward(loss)
    np.testing.assert_allclose(h.grad, 2 * h.data)


def test_forward_bitwise_deterministic(gen):
    x = gen.standard_normal((2, 5, 8)).astype(np.float32)
    w = gen.standard_normal((8, 8)).astype(np.float32)
    run = lambda: ad.layer_norm(ad.gelu(ad.linear(Tensor(x), Tensor(w))), Tensor(np.ones(8, np.float32)),
                                Tensor(np.zeros(8, np.float32)), 1e-5).data
    assert run().tobytes() == run().tobytes()


# -- finite differences ---------------------------------------------------

@pytest.mark.parametrize("case", op_cases(0), ids=lambda c: c[0])
def test_op_gradient_matches_finite_differences(case):
    name, fn, inputs = case
    res = check_function(name, fn, inputs)
    tol = 1e-6 if name in {"matmul_2d", "layer_norm", "softmax", "gelu", "sum", "mean"} else 1e-5
    assert res.max_error < tol, res.errors


def test_op_checks_cover_every_public_op():
    names = {r.name for r in run_op_checks(1)}
    for op in ("add", "sub", "mul", "scale", "reshape", "transpose", "sum", "mean", "layer_norm",
               "softmax", "gelu", "dropout", "linear", "attention_core", "multi_head_attention",
               "embedding_lookup", "cross_entropy_with_mask"):
        assert op in names
    assert any(n.startswith("matmul") for n in names)


def test_relative_error_definition():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([0.0]), np.array([0.0])) == 0.0
    assert relative_error(np.array([1.0, 4.0]), np.array([1.1, 4.0])) == pytest.approx(0.1 / 4.0)


# -- fused ops against their unfused definitions --------------------------

def _unfused_attention(q, k, v):
    s = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(q.shape[-1]))
    return ad.matmul(ad.softmax(s, -1), v)


def test_attention_core_matches_unfused_chain(gen):
    q, k, v = (T(gen.standard_normal((2, 3, 5, 4)), n) for n in "qkv")
    with Tape():
        a = ad.attention_core(q, k, v)
        la = ad.sum_(ad.mul(a, T(gen.standard_normal(a.shape), grad=False)))
    ga = backward(la)
    gen2 = np.random.default_rng(1234)
    gen2.standard_normal((2, 3, 5, 4)), gen2.standard_normal((2, 3, 5, 4)), gen2.standard_normal((2, 3, 5, 4))
    R = gen2.standard_normal(a.shape)
    with Tape():
        b = _unfused_attention(q, k, v)
        lb = ad.sum_(ad.mul(b, T(R, grad=False)))
    np.testing.assert_allclose(a.data, b.data, rtol=1e-12, atol=1e-14)
    gb = backward(lb)
    for n in "qkv":
        np.testing.assert_allclose(ga[n], gb[n], rtol=1e-10, atol=1e-13)


def test_attention_probabilities_fall_back_to_row_max():
    # one row sits far below the block maximum, so a block-wide shift would underflow it
    s = np.array([[[0.0, 0.0], [-2000.0, -2001.0]]])
    q = s
    kt = np.eye(2)[None]
    p = ad._attention_probs(q, kt)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-15)
    np.testing.assert_allclose(p[0, 1], [1 / (1 + math.exp(-1)), math.exp(-1) / (1 + math.exp(-1))], rtol=1e-12)


def test_multi_head_attention_matches_per_head_reference(gen):
    B, S, d, H = 2, 5, 8, 2
    x = gen.standard_normal((B, S, d))
    wq, wk, wv = (gen.standard_normal((d, d)) for _ in range(3))
    out = ad.multi_head_attention(T(x), T(wq), T(wk), T(wv), H).data
    dh = d // H
    ref = np.empty_like(out)
    for b in range(B):
        for h in range(H):
            sl = slice(h * dh, (h + 1) * dh)
            q, k, v = x[b] @ wq[:, sl], x[b] @ wk[:, sl], x[b] @ wv[:, sl]
            s = q @ k.T / math.sqrt(dh)
            p = np.exp(s - s.max(-1, keepdims=True))
            p /= p.sum(-1, keepdims=True)
            ref[b, :, sl] = p @ v
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-13)


def test_multi_head_attention_rejects_bad_shapes():
    with pytest.raises(DimensionError):
        ad.multi_head_attention(T(np.ones((5, 8))), T(np.ones((8, 8))), T(np.ones((8, 8))), T(np.ones((8, 8))), 2)
    with pytest.raises(DimensionError):
        ad.multi_head_attention(T(np.ones((1, 5, 8))), T(np.ones((8, 8))), T(np.ones((8, 8))), T(np.ones((8, 8))), 3)


def test_complex_step_passes_through_block_ops(gen):
    # the identity-decomposition check relies on these ops being analytic in x
    x = gen.standard_normal((1, 3, 4))
    w = gen.standard_normal((4, 4))
    h = 1e-30

    def f(z):
        t = ad.layer_norm(Tensor(z), Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5)
        t = ad.multi_head_attention(t, Tensor(w), Tensor(w.T), Tensor(w), 2)
        return ad.gelu(t).data

    base = f(x)
    with Tape():
        xt = T(x, "x")
        R = gen.standard_normal(base.shape)
        t = ad.layer_norm(xt, Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5)
        t = ad.multi_head_attention(t, Tensor(w), Tensor(w.T), Tensor(w), 2)
        loss = ad.sum_(ad.mul(ad.gelu(t), Tensor(R)))
    g = backward(loss)["x"]
    dirn = gen.standard_normal(x.shape)
    jvp = f(x + 1j * h * dirn).imag / h
    assert np.sum(jvp * R) == pytest.approx(np.sum(g * dirn), rel=1e-12)


# -- properties -----------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False, width=64)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    y = ad.softmax(Tensor(x), -1).data
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)
    assert np.all(y >= 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=finite))
def test_layer_norm_rows_standardized(x):
    d = x.shape[-1]
    spread = x.max(-1) - x.min(-1)
    y = ad.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)), 1e-12).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-9)
    ok = spread > 1e-3
    np.testing.assert_allclose(y[ok].var(-1), 1.0, rtol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)), st.data())
def test_broadcast_gradients_match_operand_shapes(shape, data):
    axes = data.draw(st.lists(st.booleans(), min_size=3, max_size=3))
    bshape = tuple(1 if keep else n for keep, n in zip(axes, shape))
    a = T(np.random.default_rng(0).standard_normal(shape), "a")
    b = T(np.random.default_rng(1).standard_normal(bshape), "b")
    with Tape():
        loss = ad.sum_(ad.mul(ad.add(a, b), ad.sub(a, b)))
    g = backward(loss)
    assert g["a"].shape == shape and g["b"].shape == bshape
    # d/db sum(a^2 - b^2) = -2b summed over broadcast axes
    expect = (-2 * np.broadcast_to(b.data, shape)).sum(axis=tuple(i for i, n in enumerate(bshape) if n == 1 and shape[i] != 1), keepdims=True)
    np.testing.assert_allclose(g["b"], expect.reshape(bshape), rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-8, 8, allow_nan=False)))
def test_gelu_between_relu_bounds(x):
    y = ad.gelu(Tensor(x)).data
    assert np.all(y >= np.minimum(x, 0) - 0.2)
    assert np.all(y <= np.maximum(x, 0) + 1e-12)
