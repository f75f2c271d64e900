"""Gradient engine checked op-by-op against central finite differences."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecss import autodiff as ad
from ecss.autodiff import backward, check_gradients, no_grad, param, tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def fd_check(loss_fn, tensors, seed=0, rel_tol=1e-4):
    worst = check_gradients(loss_fn, tensors, rel_tol=rel_tol, rng=rng(seed))
    assert all(np.isfinite(v) for v in worst.values())


# ---------------------------------------------------------------- basics

def test_closed_form_linear_regression_gradient():
    r = rng(1)
    x = r.normal(size=(5, 3))
    w = param(r.normal(size=(3, 2)), "w")
    y = r.normal(size=(5, 2))
    resid = ad.sub(ad.matmul(tensor(x), w), tensor(y))
    loss = ad.scale(ad.asum(ad.mul(resid, resid)), 0.5)
    backward(loss)
    want = x.T @ (x @ w.data - y)
    np.testing.assert_allclose(w.grad, want, rtol=1e-12)


def test_diamond_graph_accumulates_both_paths():
    a = param(np.array([2.0]), "a")
    b = ad.scale(a, 3.0)
    c = ad.mul(a, a)
    loss = ad.asum(ad.add(b, c))        # 3a + a^2, d/da = 3 + 2a = 7
    backward(loss)
    np.testing.assert_allclose(a.grad, [7.0])


def test_no_grad_builds_no_graph():
    a = param(np.ones(3), "a")
    with no_grad():
        out = ad.mul(a, a)
    assert out._parents == ()
    assert not out.requires_grad


def test_detach_shares_buffer_and_blocks_grad():
    a = param(np.ones(3), "a")
    d = a.detach()
    assert d.data is a.data
    loss = ad.asum(ad.mul(d, d))
    backward(loss)
    assert a.grad is None or not a.grad.any()


def test_backward_requires_scalar():
    a = param(np.ones(3), "a")
    with pytest.raises(ValueError):
        backward(ad.mul(a, a))


# ---------------------------------------------------------- elementwise

@pytest.mark.parametrize("op", [ad.relu, ad.gelu, ad.tanh_op, ad.sigmoid_op])
def test_unary_ops_match_fd(op):
    x = param(rng(2).normal(size=(4, 5)) * 2.0, "x")
    fd_check(lambda: ad.asum(op(x)), {"x": x})


def test_broadcast_add_mul_match_fd():
    a = param(rng(3).normal(size=(4, 5)), "a")
    b = param(rng(4).normal(size=(5,)), "b")
    fd_check(lambda: ad.asum(ad.mul(ad.add(a, b), b)), {"a": a, "b": b})


def test_sub_scale_shift_match_fd():
    a = param(rng(5).normal(size=(3, 4)), "a")
    b = param(rng(6).normal(size=(3, 4)), "b")
    fd_check(lambda: ad.asum(ad.scale(ad.shift(ad.sub(a, b), 0.3), -1.7)),
             {"a": a, "b": b})


def test_add_n_matches_fd():
    ts = {f"t{i}": param(rng(7 + i).normal(size=(2, 3)), f"t{i}") for i in range(4)}
    fd_check(lambda: ad.asum(ad.add_n(list(ts.values()))), ts)


# ------------------------------------------------------- shape plumbing

def test_reshape_transpose_match_fd():
    x = param(rng(8).normal(size=(2, 3, 4)), "x")
    w = param(rng(9).normal(size=(4, 6)), "w")

    def loss():
        flat = ad.reshape(x, (6, 4))
        return ad.asum(ad.matmul(ad.transpose(ad.matmul(flat, w)), flat))
    fd_check(loss, {"x": x, "w": w})


def test_rows_slice_matches_fd():
    x = param(rng(10).normal(size=(6, 3)), "x")
    fd_check(lambda: ad.asum(ad.mul(ad.rows(x, 1, 4), ad.rows(x, 2, 5))), {"x": x})


def test_concat_and_stack_rows_match_fd():
    a = param(rng(11).normal(size=(2, 3)), "a")
    b = param(rng(12).normal(size=(4, 3)), "b")
    v = param(rng(13).normal(size=(3,)), "v")

    def loss():
        cat = ad.concat([a, b], axis=0)
        first = ad.reshape(ad.rows(cat, 0, 1), (3,))
        stk = ad.stack_rows([v, first])
        return ad.add(ad.asum(ad.mul(cat, cat)), ad.asum(ad.mul(stk, stk)))
    fd_check(loss, {"a": a, "b": b, "v": v})


def test_gather_rows_with_plan_matches_fd():
    x = param(rng(14).normal(size=(5, 3)), "x")
    idx = np.array([0, 2, 2, 4, 1, 2])
    plan = ad.make_scatter_plan(idx, 5)

    def loss():
        g = ad.gather_rows(x, idx, plan)
        return ad.asum(ad.mul(g, g))
    fd_check(loss, {"x": x})
    # row 3 untouched
    out = loss()
    backward(out)
    assert not x.grad[3].any()
    assert x.grad[2].any()


def test_gather_rows_without_plan_matches_plan_path():
    x1 = param(rng(15).normal(size=(4, 2)), "x")
    x2 = param(x1.data.copy(), "x")
    idx = np.array([3, 1, 3, 0])
    plan = ad.make_scatter_plan(idx, 4)
    l1 = ad.asum(ad.mul(ad.gather_rows(x1, idx, plan), ad.gather_rows(x1, idx, plan)))
    l2 = ad.asum(ad.mul(ad.gather_rows(x2, idx), ad.gather_rows(x2, idx)))
    backward(l1)
    backward(l2)
    np.testing.assert_allclose(x1.grad, x2.grad, rtol=1e-14)


# ------------------------------------------------------------ reductions

@pytest.mark.parametrize("axis", [None, 0, 1])
def test_sum_and_mean_match_fd(axis):
    x = param(rng(16).normal(size=(3, 4)), "x")
    fd_check(lambda: ad.asum(ad.mul(ad.amean(x, axis), ad.amean(x, axis)))
             if axis is not None else ad.mul(ad.amean(x), ad.asum(x)),
             {"x": x})


# ---------------------------------------------------------------- linear

def test_matmul_vector_cases_match_fd():
    m = param(rng(17).normal(size=(3, 4)), "m")
    v = param(rng(18).normal(size=(4,)), "v")
    u = param(rng(19).normal(size=(3,)), "u")
    fd_check(lambda: ad.asum(ad.matmul(m, v)), {"m": m, "v": v})
    fd_check(lambda: ad.asum(ad.matmul(u, m)), {"m": m, "u": u})
    fd_check(lambda: ad.matmul(ad.matmul(u, m), v), {"m": m, "u": u, "v": v})


def test_linear_with_bias_matches_fd():
    x = param(rng(20).normal(size=(5, 3)), "x")
    w = param(rng(21).normal(size=(3, 4)), "w")
    b = param(rng(22).normal(size=(4,)), "b")
    fd_check(lambda: ad.asum(ad.gelu(ad.linear(x, w, b))), {"x": x, "w": w, "b": b})


def test_bmm_matches_fd():
    a = param(rng(23).normal(size=(2, 3, 4)), "a")
    b = param(rng(24).normal(size=(2, 4, 5)), "b")
    fd_check(lambda: ad.asum(ad.bmm(a, b)), {"a": a, "b": b})


def test_softmax_rows_sum_to_one_and_match_fd():
    x = param(rng(25).normal(size=(4, 6)) * 3.0, "x")
    s = ad.softmax_last(x)
    np.testing.assert_allclose(s.data.sum(axis=-1), np.ones(4), rtol=1e-12)
    w = rng(26).normal(size=(4, 6))
    fd_check(lambda: ad.asum(ad.mul(ad.softmax_last(x), tensor(w))), {"x": x})


def test_layer_norm_matches_fd():
    x = param(rng(27).normal(size=(3, 8)), "x")
    g = param(rng(28).normal(size=(8,)), "g")
    b = param(rng(29).normal(size=(8,)), "b")
    fd_check(lambda: ad.asum(ad.mul(ad.layer_norm(x, g, b),
                                    tensor(rng(30).normal(size=(3, 8))))),
             {"x": x, "g": g, "b": b}, rel_tol=3e-4)


def test_dropout_train_and_eval():
    x = param(np.ones((1000,)), "x")
    out = ad.dropout(x, 0.4, rng(31))
    kept = out.data != 0
    assert 0.5 < kept.mean() < 0.7
    np.testing.assert_allclose(out.data[kept], 1.0 / 0.6, rtol=1e-12)
    loss = ad.asum(out)
    backward(loss)
    np.testing.assert_allclose(x.grad[kept], 1.0 / 0.6)
    assert not x.grad[~kept].any()
    assert ad.dropout(x, 0.0, rng(32)).data is x.data


# ------------------------------------------------------------- sequence

def test_conv1d_same_matches_fd():
    x = param(rng(33).normal(size=(7, 3)), "x")
    w = param(rng(34).normal(size=(3, 3, 4)), "w")
    b = param(rng(35).normal(size=(4,)), "b")
    fd_check(lambda: ad.asum(ad.mul(ad.conv1d_same(x, w, b),
                                    tensor(rng(36).normal(size=(7, 4))))),
             {"x": x, "w": w, "b": b})


def test_conv1d_same_matches_naive_loop():
    r = rng(37)
    x, w, b = r.normal(size=(6, 2)), r.normal(size=(3, 2, 5)), r.normal(size=(5,))
    out = ad.conv1d_same(tensor(x), tensor(w), tensor(b)).data
    T, K = 6, 3
    pad = K // 2
    xp = np.vstack([np.zeros((pad, 2)), x, np.zeros((pad, 2))])
    want = np.zeros((T, 5))
    for t in range(T):
        for k in range(K):
            want[t] += xp[t + k] @ w[k]
        want[t] += b
    np.testing.assert_allclose(out, want, rtol=1e-12)


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_outputs_match_fd(reverse):
    T, D, H = 5, 3, 4
    r = rng(38)
    x = param(r.normal(size=(T, D)), "x")
    wx = param(r.normal(size=(D, 4 * H)) * 0.5, "wx")
    wh = param(r.normal(size=(H, 4 * H)) * 0.5, "wh")
    b = param(r.normal(size=(4 * H,)) * 0.1, "b")
    probe = rng(39).normal(size=(T, H))

    def loss_outputs():
        outs, _ = ad.lstm_seq(x, wx, wh, b, reverse=reverse)
        return ad.asum(ad.mul(outs, tensor(probe)))
    fd_check(loss_outputs, {"x": x, "wx": wx, "wh": wh, "b": b}, rel_tol=3e-4)


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_last_state_matches_fd(reverse):
    T, D, H = 4, 2, 3
    r = rng(40)
    x = param(r.normal(size=(T, D)), "x")
    wx = param(r.normal(size=(D, 4 * H)) * 0.5, "wx")
    wh = param(r.normal(size=(H, 4 * H)) * 0.5, "wh")
    b = param(r.normal(size=(4 * H,)) * 0.1, "b")

    def loss_last():
        _, last = ad.lstm_seq(x, wx, wh, b, reverse=reverse)
        return ad.asum(ad.mul(last, last))
    fd_check(loss_last, {"x": x, "wx": wx, "wh": wh, "b": b}, rel_tol=3e-4)


def test_lstm_last_equals_final_output_row():
    T, D, H = 6, 3, 4
    r = rng(41)
    x = tensor(r.normal(size=(T, D)))
    wx, wh, b = (tensor(r.normal(size=s)) for s in [(D, 4 * H), (H, 4 * H), (4 * H,)])
    outs, last = ad.lstm_seq(x, wx, wh, b, reverse=False)
    np.testing.assert_allclose(outs.data[-1], last.data, rtol=1e-12)
    outs_r, last_r = ad.lstm_seq(x, wx, wh, b, reverse=True)
    np.testing.assert_allclose(outs_r.data[0], last_r.data, rtol=1e-12)


def test_avgpool_pairs_values_and_fd():
    x = param(np.arange(10.0).reshape(5, 2), "x")
    out = ad.avgpool_pairs(x)
    np.testing.assert_allclose(out.data, [[1.0, 2.0], [5.0, 6.0], [8.0, 9.0]])
    fd_check(lambda: ad.asum(ad.mul(ad.avgpool_pairs(x), ad.avgpool_pairs(x))),
             {"x": x})
    even = param(rng(42).normal(size=(4, 3)), "even")
    assert ad.avgpool_pairs(even).data.shape == (2, 3)


# ------------------------------------------------------------- segments

def test_segment_softmax_and_sum_match_fd():
    dst = np.array([0, 0, 0, 2, 2, 4])          # rows 1 and 3 empty
    spec = ad.make_segment_spec(dst, 5)
    x = param(rng(43).normal(size=(6, 3)), "x")
    s = param(rng(44).normal(size=(6, 2)) * 2.0, "s")

    def loss():
        w = ad.segment_softmax(s, spec)
        pooled = ad.segment_sum(ad.mul(x, x), spec)
        return ad.add(ad.asum(ad.mul(pooled, pooled)), ad.asum(ad.mul(w, w)))
    fd_check(loss, {"x": x, "s": s}, rel_tol=3e-4)


def test_segment_softmax_normalizes_per_segment():
    dst = np.array([0, 0, 1, 1, 1])
    spec = ad.make_segment_spec(dst, 3)
    s = tensor(rng(45).normal(size=(5, 2)))
    w = ad.segment_softmax(s, spec).data
    np.testing.assert_allclose(w[:2].sum(axis=0), [1.0, 1.0], rtol=1e-12)
    np.testing.assert_allclose(w[2:].sum(axis=0), [1.0, 1.0], rtol=1e-12)


def test_segment_sum_empty_rows_are_zero():
    dst = np.array([1, 1])
    spec = ad.make_segment_spec(dst, 4)
    x = tensor(np.ones((2, 3)))
    out = ad.segment_sum(x, spec).data
    np.testing.assert_allclose(out[[0, 2, 3]], 0.0)
    np.testing.assert_allclose(out[1], 2.0)


def test_head_scale_matches_fd():
    E, H, d = 4, 2, 3
    msg = param(rng(46).normal(size=(E, H * d)), "msg")
    w = param(rng(47).normal(size=(E, H)), "w")
    fd_check(lambda: ad.asum(ad.mul(ad.head_scale(msg, w, H),
                                    tensor(rng(48).normal(size=(E, H * d))))),
             {"msg": msg, "w": w})


def test_edge_scores_and_messages_match_fd():
    # two relations, kind-contiguous edge blocks: edges 0..2 kind 0, 3..4 kind 1
    E, H, d = 5, 2, 3
    kind_ids = np.array([0, 0, 0, 1, 1])
    kind_starts = np.array([0, 3])      # block starts, one per present relation
    kind_rows = np.array([0, 1])
    r = rng(49)
    k_src = param(r.normal(size=(E, H * d)), "k_src")
    q_dst = param(r.normal(size=(E, H * d)), "q_dst")
    v_src = param(r.normal(size=(E, H * d)), "v_src")
    w_att = param(r.normal(size=(2, H, d, d)), "w_att")
    w_msg = param(r.normal(size=(2, H, d, d)), "w_msg")

    def loss():
        sc = ad.edge_scores(k_src, q_dst, w_att, kind_ids, kind_starts, kind_rows)
        ms = ad.edge_messages(v_src, w_msg, kind_ids, kind_starts, kind_rows)
        return ad.add(ad.asum(ad.mul(sc, sc)), ad.asum(ad.mul(ms, ms)))
    fd_check(loss, {"k_src": k_src, "q_dst": q_dst, "v_src": v_src,
                    "w_att": w_att, "w_msg": w_msg}, rel_tol=3e-4)


def test_edge_scores_match_naive_loop():
    E, H, d = 4, 2, 2
    kind_ids = np.array([0, 0, 1, 1])
    kind_starts = np.array([0, 2])
    kind_rows = np.array([0, 1])
    r = rng(50)
    k = r.normal(size=(E, H * d))
    q = r.normal(size=(E, H * d))
    w = r.normal(size=(2, H, d, d))
    got = ad.edge_scores(tensor(k), tensor(q), tensor(w),
                         kind_ids, kind_starts, kind_rows).data
    want = np.zeros((E, H))
    for e in range(E):
        for h in range(H):
            kh = k[e].reshape(H, d)[h]
            qh = q[e].reshape(H, d)[h]
            want[e, h] = kh @ w[kind_ids[e], h] @ qh
    np.testing.assert_allclose(got, want, rtol=1e-12)


# --------------------------------------------------------------- losses

def test_l2_normalize_rows_matches_fd_and_zero_row():
    x = param(rng(51).normal(size=(4, 3)), "x")
    out = ad.l2_normalize_rows(x)
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), np.ones(4),
                               rtol=1e-12)
    fd_check(lambda: ad.asum(ad.mul(ad.l2_normalize_rows(x),
                                    tensor(rng(52).normal(size=(4, 3))))),
             {"x": x}, rel_tol=3e-4)
    z = param(np.zeros((2, 3)), "z")
    nz = ad.l2_normalize_rows(z)
    assert not nz.data.any()
    backward(ad.asum(nz))
    assert not z.grad.any()


def test_supcon_reference_value():
    # two anchors per class on a line: worked example with cosine sims
    feats = tensor(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]))
    labels = np.array([0, 0, 1, 1])
    loss, info = ad.supcon_loss(feats, labels, tau=1.0)
    # each anchor: -log(e^1 / (e^1 + 2 e^0)) = log(1 + 2/e)
    want = np.log(1.0 + 2.0 / np.e)
    np.testing.assert_allclose(loss.data, want, rtol=1e-12)
    assert info["anchors"] == 4


def test_supcon_three_vector_worked_example():
    feats = tensor(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    labels = np.array([0, 0, 1])
    loss, info = ad.supcon_loss(feats, labels, tau=1.0)
    # anchors 1 and 2 each contribute log(1 + e^-1); anchor 3 has no positive
    np.testing.assert_allclose(loss.data, np.log(1.0 + np.exp(-1.0)), atol=1e-12)
    assert info["anchors"] == 2
    assert info["skipped"] == 1


def test_supcon_identical_pair_is_zero():
    feats = tensor(np.tile(np.array([0.6, 0.8]), (2, 1)))
    loss, _ = ad.supcon_loss(feats, np.zeros(2, dtype=int), tau=0.5)
    np.testing.assert_allclose(loss.data, 0.0, atol=1e-12)
    # with more identical members the denominator gains other positives:
    # each of the 4 positive terms is -log(1/4)
    feats5 = tensor(np.tile(np.array([0.6, 0.8]), (5, 1)))
    loss5, _ = ad.supcon_loss(feats5, np.zeros(5, dtype=int), tau=0.5)
    np.testing.assert_allclose(loss5.data, np.log(4.0), rtol=1e-12)


def test_supcon_skips_anchor_without_positives():
    feats = tensor(rng(53).normal(size=(3, 4)))
    labels = np.array([0, 0, 1])
    _, info = ad.supcon_loss(feats, labels, tau=0.3)
    assert info["anchors"] == 2
    assert info["skipped"] == 1


def test_supcon_scale_invariance_of_features():
    r = rng(54)
    base = r.normal(size=(6, 5))
    labels = np.array([0, 1, 2, 0, 1, 2])
    l1, _ = ad.supcon_loss(tensor(base), labels, tau=0.7)
    l2, _ = ad.supcon_loss(tensor(base * 37.5), labels, tau=0.7)
    np.testing.assert_allclose(l1.data, l2.data, rtol=1e-12)


def test_supcon_matches_fd():
    x = param(rng(55).normal(size=(6, 4)), "x")
    labels = np.array([0, 0, 1, 1, 2, 2])

    def loss():
        val, _ = ad.supcon_loss(x, labels, tau=0.5)
        return val
    fd_check(loss, {"x": x}, rel_tol=3e-4)


def test_supcon_rejects_bad_tau_and_tiny_batch():
    x = tensor(rng(56).normal(size=(4, 3)))
    with pytest.raises(ValueError):
        ad.supcon_loss(x, np.zeros(4, dtype=int), tau=0.0)
    loss, info = ad.supcon_loss(tensor(rng(57).normal(size=(1, 3))),
                                np.zeros(1, dtype=int), tau=0.5)
    assert loss.data == 0.0
    assert info.get("batch_too_small")


def test_cross_entropy_matches_closed_form_and_fd():
    logits = param(rng(58).normal(size=(5, 3)), "logits")
    labels = np.array([0, 2, 1, 1, 0])
    loss = ad.cross_entropy_loss(logits, labels)
    p = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    want = -np.mean(np.log(p[np.arange(5), labels]))
    np.testing.assert_allclose(loss.data, want, rtol=1e-12)
    fd_check(lambda: ad.cross_entropy_loss(logits, labels), {"logits": logits})


def test_mse_and_mae_match_fd():
    a = param(rng(59).normal(size=(4, 3)), "a")
    t = rng(60).normal(size=(4, 3))
    fd_check(lambda: ad.mse_loss(a, tensor(t)), {"a": a})
    fd_check(lambda: ad.mae_loss(a, tensor(t)), {"a": a}, rel_tol=3e-4)


def test_check_gradients_detects_wrong_gradient():
    # at x=0.8 the broken rule below gives 1.0 where the truth is 1.6
    x = param(np.ones(3) * 0.8, "x")

    def bad_square(t):
        # deliberately wrong backward: should be 2x*g
        out = ad.Tensor(t.data * t.data, requires_grad=True)
        out._parents = (t,)
        out._backward = lambda g: ad._acc(t, g)
        return out

    with pytest.raises(AssertionError):
        check_gradients(lambda: ad.asum(bad_square(x)), {"x": x}, rng=rng(61))


# ------------------------------------------------------------ properties

@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=2, max_value=12), st.integers(min_value=0, max_value=2 ** 31))
def test_softmax_last_is_shift_invariant(n, seed):
    x = np.random.default_rng(seed).normal(size=(2, n)) * 4.0
    a = ad.softmax_last(tensor(x)).data
    b = ad.softmax_last(tensor(x + 11.3)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=8), st.integers(min_value=1, max_value=8),
       st.integers(min_value=0, max_value=2 ** 31))
def test_matmul_grad_shapes_match_inputs(n, m, seed):
    r = np.random.default_rng(seed)
    a = param(r.normal(size=(n, m)), "a")
    b = param(r.normal(size=(m, n)), "b")
    backward(ad.asum(ad.matmul(a, b)))
    assert a.grad.shape == a.data.shape
    assert b.grad.shape == b.data.shape
