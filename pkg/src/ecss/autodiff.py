"""Reverse-mode automatic differentiation over numpy arrays.

The engine is deliberately small: a Tensor wraps a float64 ndarray and the
closure that pushes its output gradient into its parents. Ops are fused at
the level this package actually needs (a whole LSTM pass, a segment softmax,
a bilinear edge score), because per-op Python overhead, not arithmetic,
dominates on CPU. Everything is float64 so central finite differences at
step 1e-5 are a meaningful oracle; `check_gradients` runs that oracle.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (inference fast path)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        # Shares the buffer; gradient flow stops here.
        return Tensor(self.data)

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data) -> Tensor:
    return Tensor(data)


def param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: tuple[Tensor, ...], backward: Callable[[np.ndarray], None]) -> Tensor:
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad:
                out = Tensor(data, requires_grad=True)
                out._parents = parents
                out._backward = backward
                return out
    return Tensor(data)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is not None:
        t.grad += g
    elif isinstance(g, np.ndarray) and g.shape == t.data.shape and g.dtype == np.float64:
        # Own the buffer: g may alias an upstream gradient or a view.
        t.grad = g.copy()
    else:
        t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Collapse gradient of a broadcast operand back to its shape.
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(node) through the recorded graph."""
    if loss.data.shape != ():
        raise ValueError("backward expects a scalar loss")
    # Structure-driven post-order: the walk follows _parents tuples from the
    # loss, so the visit order depends only on the recorded graph, never on
    # which thread allocated a node. Accumulation order, and therefore the
    # low-order float bits, stay identical across thread counts.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in order:
        node.grad = None
    loss.grad = np.ones(())
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def bwd(g):
        _acc(a, g * c)

    return _make(out, (a,), bwd)


def shift(a: Tensor, c: float) -> Tensor:
    out = a.data + c

    def bwd(g):
        _acc(a, g)

    return _make(out, (a,), bwd)


def add_n(ts: Sequence[Tensor]) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    out = ts[0].data.copy()
    for t in ts[1:]:
        out += t.data

    def bwd(g):
        for t in ts:
            _acc(t, g)

    return _make(out, tuple(ts), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = a.data.reshape(shape)

    def bwd(g):
        _acc(a, g.reshape(old))

    return _make(out, (a,), bwd)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.data.ndim))[::-1]
    inv = tuple(int(i) for i in np.argsort(axes))
    out = a.data.transpose(axes)

    def bwd(g):
        _acc(a, g.transpose(inv))

    return _make(out, (a,), bwd)


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[start:stop]

    def bwd(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[start:stop] += g

    return _make(out, (a,), bwd)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(t, g[tuple(idx)])

    return _make(out, tuple(ts), bwd)


def stack_rows(ts: Sequence[Tensor]) -> Tensor:
    """Stack vectors [d] into a matrix [n, d]."""
    ts = [_as_tensor(t) for t in ts]
    out = np.stack([t.data for t in ts], axis=0)

    def bwd(g):
        for i, t in enumerate(ts):
            _acc(t, g[i])

    return _make(out, tuple(ts), bwd)


@dataclass(frozen=True)
class ScatterPlan:
    """Precomputed adjoint of a static row gather (sorted reduceat plan)."""

    order: np.ndarray       # argsort of the gather index
    starts: np.ndarray      # segment starts in sorted order
    unique_rows: np.ndarray  # target rows receiving gradient
    n_rows: int


def make_scatter_plan(idx: np.ndarray, n_rows: int) -> ScatterPlan:
    idx = np.asarray(idx, dtype=np.int64)
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    unique_rows, starts = np.unique(sorted_idx, return_index=True)
    return ScatterPlan(order=order, starts=starts, unique_rows=unique_rows, n_rows=n_rows)


def gather_rows(a: Tensor, idx, plan: ScatterPlan | None = None) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def bwd(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        if plan is not None:
            contrib = np.add.reduceat(g[plan.order], plan.starts, axis=0)
            a.grad[plan.unique_rows] += contrib
        else:
            np.add.at(a.grad, idx, g)

    return _make(out, (a,), bwd)


def asum(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum(axis=axis)
    shp = a.data.shape

    def bwd(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, shp).copy())
        else:
            _acc(a, np.broadcast_to(np.expand_dims(g, axis), shp).copy())

    return _make(out, (a,), bwd)


def amean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(asum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# matrix products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data @ b.data

    def bwd(g):
        an, bn = a.data.ndim, b.data.ndim
        if an == 1 and bn == 1:          # dot product, g scalar
            _acc(a, g * b.data)
            _acc(b, g * a.data)
        elif an == 1:                    # [k] @ [k, m] -> [m]
            _acc(a, b.data @ g)
            _acc(b, np.outer(a.data, g))
        elif bn == 1:                    # [n, k] @ [k] -> [n]
            _acc(a, np.outer(g, b.data))
            _acc(b, a.data.T @ g)
        else:
            _acc(a, g @ b.data.swapaxes(-1, -2))
            _acc(b, a.data.swapaxes(-1, -2) @ g)

    return _make(out, (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul on stacked matrices [..., m, k] @ [..., k, n]."""
    out = np.matmul(a.data, b.data)

    def bwd(g):
        _acc(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        _acc(b, np.matmul(a.data.swapaxes(-1, -2), g))

    return _make(out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x [n, k] @ w [k, m] (+ b [m])."""
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def bwd(g):
        _acc(x, g @ w.data.T)
        _acc(w, x.data.T @ g)
        if b is not None:
            _acc(b, g.sum(axis=0) if g.ndim > 1 else g)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = a.data * mask

    def bwd(g):
        _acc(a, g * mask)

    return _make(out, (a,), bwd)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation; differentiated exactly as written.
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        _acc(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du))

    return _make(out, (a,), bwd)


def tanh_op(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def bwd(g):
        _acc(a, g * (1.0 - t ** 2))

    return _make(t, (a,), bwd)


def sigmoid_op(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _acc(a, g * s * (1.0 - s))

    return _make(s, (a,), bwd)


def softmax_last(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        _acc(a, s * (g - dot))

    return _make(s, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply trainable gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gain.data * xhat + bias.data

    def bwd(g):
        d = x.data.shape[-1]
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _acc(x, (dxhat - m1 - xhat * m2) * inv)
        lead = tuple(range(g.ndim - 1))
        _acc(gain, (g * xhat).sum(axis=lead))
        _acc(bias, g.sum(axis=lead))

    return _make(out, (x, gain, bias), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    out = x.data * mask

    def bwd(g):
        _acc(x, g * mask)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# sequence ops


def conv1d_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded 1-d convolution: x [T, Cin], w [K, Cin, Cout], b [Cout]."""
    k = w.data.shape[0]
    pad = k // 2
    t_len = x.data.shape[0]
    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    # Sum of k shifted matmuls; cheaper than materialising an im2col buffer.
    out = xp[0:t_len] @ w.data[0] + b.data
    for kk in range(1, k):
        out += xp[kk:kk + t_len] @ w.data[kk]

    def bwd(g):
        if w.requires_grad:
            _acc(w, np.stack([xp[kk:kk + t_len].T @ g for kk in range(k)]))
        _acc(b, g.sum(axis=0))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for kk in range(k):
                dxp[kk:kk + t_len] += g @ w.data[kk].T
            _acc(x, dxp[pad:pad + t_len])

    return _make(out, (x, w, b), bwd)


def lstm_seq(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor, reverse: bool = False) -> tuple[Tensor, Tensor]:
    """Single-direction LSTM over x [T, D] -> (outputs [T, H], last state [H]).

    Gate layout along the 4H axis is (input, forget, cell, output). Outputs
    are returned in input time order regardless of direction; the last state
    is the state after the final processed step.
    """
    t_len, _ = x.data.shape
    h_dim = wh.data.shape[0]
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    order = list(order)

    zx = x.data @ wx.data + b.data
    hs = np.zeros((t_len, h_dim))
    hp = np.zeros((t_len, h_dim))        # state entering the step at time t
    gates = np.empty((t_len, 4, h_dim))  # (i, f, g, o) post-activation
    cp = np.empty((t_len, h_dim))
    tc_all = np.empty((t_len, h_dim))
    h = np.zeros(h_dim)
    c = np.zeros(h_dim)
    for t in order:
        z = zx[t] + h @ wh.data
        i = 1.0 / (1.0 + np.exp(-z[:h_dim]))
        f = 1.0 / (1.0 + np.exp(-z[h_dim:2 * h_dim]))
        g_ = np.tanh(z[2 * h_dim:3 * h_dim])
        o = 1.0 / (1.0 + np.exp(-z[3 * h_dim:]))
        hp[t] = h
        cp[t] = c
        c = f * c + i * g_
        tc = np.tanh(c)
        h = o * tc
        hs[t] = h
        gates[t, 0] = i
        gates[t, 1] = f
        gates[t, 2] = g_
        gates[t, 3] = o
        tc_all[t] = tc
    last = h.copy()

    def bwd_shared(g_out, g_last):
        # The recurrence forces a step loop for dh/dc; weight and input
        # gradients batch into single matmuls over the stacked dz rows.
        dz_all = np.empty((t_len, 4 * h_dim))
        dh_next = g_last
        dc_next = np.zeros(h_dim)
        for t in reversed(order):
            i, f, g_, o = gates[t]
            tc = tc_all[t]
            dh = g_out[t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc ** 2) + dc_next
            dc_next = dc * f
            dz = dz_all[t]
            dz[:h_dim] = dc * g_ * i * (1.0 - i)
            dz[h_dim:2 * h_dim] = dc * cp[t] * f * (1.0 - f)
            dz[2 * h_dim:3 * h_dim] = dc * i * (1.0 - g_ ** 2)
            dz[3 * h_dim:] = do * o * (1.0 - o)
            dh_next = dz @ wh.data.T
        _acc(x, dz_all @ wx.data.T)
        _acc(wx, x.data.T @ dz_all)
        _acc(wh, hp.T @ dz_all)
        _acc(b, dz_all.sum(axis=0))

    # Each output replays the recurrence backward on its own; a loss rarely
    # consumes both, and T is small enough that the duplication is cheap.
    out_t = _make(hs, (x, wx, wh, b), lambda g: bwd_shared(g, np.zeros(h_dim)))
    last_t = _make(last, (x, wx, wh, b), lambda g: bwd_shared(np.zeros_like(hs), g))
    return out_t, last_t


def avgpool_pairs(x: Tensor) -> Tensor:
    """Mean over consecutive row pairs; an odd trailing row passes through."""
    t_len = x.data.shape[0]
    half = t_len // 2
    pooled = 0.5 * (x.data[0:2 * half:2] + x.data[1:2 * half:2])
    if t_len % 2:
        pooled = np.concatenate([pooled, x.data[-1:]], axis=0)

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[0:2 * half:2] = 0.5 * g[:half]
        dx[1:2 * half:2] = 0.5 * g[:half]
        if t_len % 2:
            dx[-1] += g[-1]
        _acc(x, dx)

    return _make(pooled, (x,), bwd)


# ---------------------------------------------------------------------------
# segment ops (edge lists sorted by destination)


@dataclass(frozen=True)
class SegmentSpec:
    """Contiguous segments of a sorted edge array, one per destination row."""

    starts: np.ndarray   # segment starts into the edge axis (non-empty only)
    seg_rows: np.ndarray  # destination row of each segment
    counts: np.ndarray   # edges per segment
    n_rows: int          # total destination rows (empty ones get zeros)


def make_segment_spec(sorted_dst: np.ndarray, n_rows: int) -> SegmentSpec:
    sorted_dst = np.asarray(sorted_dst, dtype=np.int64)
    seg_rows, starts, counts = np.unique(sorted_dst, return_index=True, return_counts=True)
    return SegmentSpec(starts=starts, seg_rows=seg_rows, counts=counts, n_rows=n_rows)


def segment_softmax(scores: Tensor, spec: SegmentSpec) -> Tensor:
    """Softmax within each destination segment; scores [E, heads]."""
    s = scores.data
    mx = np.maximum.reduceat(s, spec.starts, axis=0)
    e = np.exp(s - np.repeat(mx, spec.counts, axis=0))
    tot = np.add.reduceat(e, spec.starts, axis=0)
    a = e / np.repeat(tot, spec.counts, axis=0)

    def bwd(g):
        dot = np.add.reduceat(a * g, spec.starts, axis=0)
        _acc(scores, a * (g - np.repeat(dot, spec.counts, axis=0)))

    return _make(a, (scores,), bwd)


def segment_sum(x: Tensor, spec: SegmentSpec) -> Tensor:
    """Sum edge values [E, d] into destination rows [n_rows, d]."""
    out = np.zeros((spec.n_rows, x.data.shape[1]))
    out[spec.seg_rows] = np.add.reduceat(x.data, spec.starts, axis=0)

    def bwd(g):
        _acc(x, np.repeat(g[spec.seg_rows], spec.counts, axis=0))

    return _make(out, (x,), bwd)


def head_scale(msg: Tensor, w: Tensor, heads: int) -> Tensor:
    """Multiply per-head blocks of msg [E, heads*d] by weights w [E, heads]."""
    e_n, dim = msg.data.shape
    d = dim // heads
    wr = np.repeat(w.data, d, axis=1)
    out = msg.data * wr

    def bwd(g):
        _acc(msg, g * wr)
        _acc(w, (g * msg.data).reshape(e_n, heads, d).sum(axis=2))

    return _make(out, (msg, w), bwd)


def edge_scores(k_src: Tensor, q_dst: Tensor, w_att: Tensor, kind_ids: np.ndarray,
                kind_starts: np.ndarray, kind_rows: np.ndarray) -> Tensor:
    """Bilinear attention logits per edge and head.

    k_src, q_dst: [E, heads*d] flat head-major; w_att: [R, heads, d, d]
    indexed by the edge's relation. Edges must be sorted by relation so the
    weight gradient reduces over contiguous segments (kind_starts/kind_rows
    describe them).
    """
    _, heads, d, _ = w_att.data.shape
    e = k_src.data.shape[0]
    k3 = k_src.data.reshape(e, heads, d)
    q3 = q_dst.data.reshape(e, heads, d)
    ends = np.append(kind_starts[1:], e)
    tmp = np.empty_like(k3)
    for s, t, r in zip(kind_starts, ends, kind_rows):
        # [heads, n, d] @ [heads, d, d]; blocked so the per-edge weight
        # gather never materialises.
        tmp[s:t] = np.matmul(k3[s:t].transpose(1, 0, 2), w_att.data[r]).transpose(1, 0, 2)
    out = (tmp * q3).sum(axis=2)                    # [E, heads]

    def bwd(g):
        gq = tmp * g[:, :, None]
        _acc(q_dst, gq.reshape(e, heads * d))
        qg = q3 * g[:, :, None]
        dk = np.empty_like(k3)
        dw = np.zeros_like(w_att.data) if w_att.requires_grad else None
        for s, t, r in zip(kind_starts, ends, kind_rows):
            block = qg[s:t].transpose(1, 0, 2)
            dk[s:t] = np.matmul(block, w_att.data[r].transpose(0, 2, 1)).transpose(1, 0, 2)
            if dw is not None:
                dw[r] += np.matmul(k3[s:t].transpose(1, 2, 0), block)
        _acc(k_src, dk.reshape(e, heads * d))
        if dw is not None:
            _acc(w_att, dw)

    return _make(out, (k_src, q_dst, w_att), bwd)


def edge_messages(v_src: Tensor, w_msg: Tensor, kind_ids: np.ndarray,
                  kind_starts: np.ndarray, kind_rows: np.ndarray) -> Tensor:
    """Per-edge message vectors: v_src [E, heads*d] through w_msg[relation]."""
    _, heads, d, _ = w_msg.data.shape
    e = v_src.data.shape[0]
    v3 = v_src.data.reshape(e, heads, d)
    ends = np.append(kind_starts[1:], e)
    out = np.empty_like(v3)
    for s, t, r in zip(kind_starts, ends, kind_rows):
        out[s:t] = np.matmul(v3[s:t].transpose(1, 0, 2), w_msg.data[r]).transpose(1, 0, 2)

    def bwd(g):
        g3 = g.reshape(e, heads, d)
        dv = np.empty_like(v3)
        dw = np.zeros_like(w_msg.data) if w_msg.requires_grad else None
        for s, t, r in zip(kind_starts, ends, kind_rows):
            block = g3[s:t].transpose(1, 0, 2)
            dv[s:t] = np.matmul(block, w_msg.data[r].transpose(0, 2, 1)).transpose(1, 0, 2)
            if dw is not None:
                dw[r] += np.matmul(v3[s:t].transpose(1, 2, 0), block)
        _acc(v_src, dv.reshape(e, heads * d))
        if dw is not None:
            _acc(w_msg, dw)

    return _make(out.reshape(e, heads * d), (v_src, w_msg), bwd)


# ---------------------------------------------------------------------------
# losses


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Rows scaled to unit norm; all-zero rows stay zero."""
    n = np.linalg.norm(x.data, axis=1, keepdims=True)
    safe = np.where(n > 0, n, 1.0)
    y = x.data / safe

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _acc(x, np.where(n > 0, (g - y * dot) / safe, 0.0))

    return _make(y, (x,), bwd)


def supcon_from_sims(sims: Tensor, labels: np.ndarray, tau: float) -> tuple[Tensor, dict]:
    """Supervised contrastive loss over a precomputed similarity matrix.

    For each anchor k with at least one same-label partner, averages
    -log(exp(s_kq / tau) / sum_{d != k} exp(s_kd / tau)) over partners q,
    then averages over contributing anchors. Returns the scalar loss and an
    info dict with the number of contributing anchors.
    """
    labels = np.asarray(labels)
    b = sims.data.shape[0]
    if b < 2:
        return Tensor(0.0), {"anchors": 0, "skipped": b}
    pos = labels[:, None] == labels[None, :]
    np.fill_diagonal(pos, False)
    pos_counts = pos.sum(axis=1)
    active = pos_counts > 0

    z = sims.data / tau
    np.fill_diagonal(z, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    denom = e.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(denom)            # log softmax rows, self excluded

    n_active = int(active.sum())
    if n_active == 0:
        return Tensor(0.0), {"anchors": 0, "skipped": b}
    per_anchor = -np.where(pos, logp, 0.0).sum(axis=1) / np.maximum(pos_counts, 1)
    loss = per_anchor[active].mean()

    p = e / denom

    def bwd(g):
        ds = np.zeros_like(sims.data)
        w = active / (n_active * tau)
        ds += (p * w[:, None])                  # from the log-denominator
        ds -= pos * (w / np.maximum(pos_counts, 1))[:, None]
        np.fill_diagonal(ds, 0.0)
        _acc(sims, ds * g)

    out = _make(np.float64(loss), (sims,), bwd)
    return out, {"anchors": n_active, "skipped": b - n_active}


def supcon_loss(features: Tensor, labels: np.ndarray, tau: float) -> tuple[Tensor, dict]:
    """Cosine-similarity supervised contrastive loss over a feature batch."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if features.data.shape[0] < 2:
        return Tensor(0.0), {"anchors": 0, "skipped": features.data.shape[0], "batch_too_small": True}
    normed = l2_normalize_rows(features)
    sims = matmul(normed, transpose(normed, (1, 0)))
    loss, info = supcon_from_sims(sims, labels, tau)
    return loss, info


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log likelihood of integer labels; logits [B, C]."""
    labels = np.asarray(labels, dtype=np.int64)
    b = logits.data.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(b), labels] - np.log(e.sum(axis=1)))
    loss = nll.mean()

    def bwd(g):
        d = p.copy()
        d[np.arange(b), labels] -= 1.0
        _acc(logits, d * (g / b))

    return _make(np.float64(loss), (logits,), bwd)


def mae_loss(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    diff = a.data - b.data
    loss = np.abs(diff).mean()
    n = diff.size

    def bwd(g):
        s = np.sign(diff) * (g / n)
        _acc(a, s)
        _acc(b, -s)

    return _make(np.float64(loss), (a, b), bwd)


def mse_loss(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    diff = a.data - b.data
    loss = (diff ** 2).mean()
    n = diff.size

    def bwd(g):
        s = diff * (2.0 * g / n)
        _acc(a, s)
        _acc(b, -s)

    return _make(np.float64(loss), (a, b), bwd)


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference(f: Callable[[], float], t: Tensor, flat_index: int, step: float = 1e-5) -> float:
    """Central difference of f with respect to one entry of t."""
    flat = t.data.reshape(-1)
    keep = flat[flat_index]
    flat[flat_index] = keep + step
    up = f()
    flat[flat_index] = keep - step
    down = f()
    flat[flat_index] = keep
    return (up - down) / (2.0 * step)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor],
                    rel_tol: float = 1e-4, abs_floor: float = 1e-8,
                    step: float = 1e-5, max_entries: int = 8,
                    rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare analytic gradients with central differences.

    Runs loss_fn once with recording, backpropagates, then probes up to
    max_entries coordinates per tensor. Raises AssertionError on the first
    coordinate whose error exceeds max(rel_tol * magnitude, abs_floor);
    returns the worst relative error seen per tensor.
    """
    rng = rng or np.random.default_rng(0)
    loss = loss_fn()
    backward(loss)
    analytic = {name: (None if t.grad is None else t.grad.copy()) for name, t in tensors.items()}

    def value() -> float:
        with no_grad():
            return float(loss_fn().data)

    worst: dict[str, float] = {}
    for name, t in tensors.items():
        size = t.data.size
        if size <= max_entries:
            picks = np.arange(size)
        else:
            picks = rng.choice(size, size=max_entries, replace=False)
        a_full = analytic[name]
        worst_err = 0.0
        for ix in picks:
            fd = finite_difference(value, t, int(ix), step=step)
            an = 0.0 if a_full is None else float(a_full.reshape(-1)[ix])
            err = abs(an - fd)
            bound = max(rel_tol * max(abs(an), abs(fd)), abs_floor)
            if err > bound:
                raise AssertionError(
                    f"gradient mismatch for {name}[{ix}]: analytic {an:.10g}, "
                    f"finite difference {fd:.10g}, error {err:.3g}")
            denom = max(abs(an), abs(fd), 1e-12)
            worst_err = max(worst_err, err / denom)
        worst[name] = worst_err
    return worst
