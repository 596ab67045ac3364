"""Dense fp64 tensors with tape-based reverse-mode differentiation.

Everything runs in float64. A ``Tape`` is created per forward pass
(define-by-run) and records operations in execution order; ``Tape.backward``
replays them once in reverse. Tensors are immutable values; gradients are
returned as a separate map keyed by the leaf tensors that requested them.

Only the shapes the model needs are supported: scalars, vectors and
matrices, with limited numpy-style broadcasting in the elementwise ops.
"""

from __future__ import annotations

import math
import threading

import numpy as np

from .errors import ShapeError

_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class Tensor:
    """Immutable fp64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def tolist(self):
        return self.data.tolist()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # convenience operators; all defer to the module-level ops
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


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Single-threaded record of operations for one forward pass.

    Use as a context manager; ops executed inside record themselves when any
    input requires gradient. ``backward`` consumes the tape.
    """

    def __init__(self):
        self._records = []  # (output, inputs, backward_fn)

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("nested tapes are not supported")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False

    def _record(self, out, inputs, backward):
        out.node_id = len(self._records)
        self._records.append((out, inputs, backward))

    def backward(self, loss):
        """Gradients of a scalar loss w.r.t. every requires_grad leaf.

        Returns a dict keyed by leaf Tensor (identity). The tape is cleared
        afterward; a second backward on the same tape is an error.
        """
        if not isinstance(loss, Tensor) or loss.shape != ():
            got = getattr(loss, "shape", None)
            raise ShapeError(f"backward requires a scalar tensor, got shape {got}")
        if not self._records:
            # constant loss: nothing on the tape
            return {}
        produced = {id(out) for out, _, _ in self._records}
        grads = {id(loss): np.ones((), dtype=np.float64)}
        leaf_grads = {}
        for out, inputs, backward_fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, ig in zip(inputs, backward_fn(g)):
                if ig is None:
                    continue
                if id(t) in produced:
                    acc = grads.get(id(t))
                    grads[id(t)] = ig if acc is None else acc + ig
                elif t.requires_grad:
                    acc = leaf_grads.get(t)
                    leaf_grads[t] = ig if acc is None else acc + ig
        self._records.clear()
        return leaf_grads


def _make(data, inputs, backward):
    """Build the output tensor, recording on the active tape if needed."""
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, inputs, backward)
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    a = _as_tensor(a)
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                 np.exp(a.data) / (1.0 + np.exp(a.data)))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = _as_tensor(a)
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward)


def stack_scalars(tensors):
    """Assemble shape-() tensors into a vector."""
    tensors = [_as_tensor(t) for t in tensors]
    out = np.array([t.data for t in tensors], dtype=np.float64)

    def backward(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _make(out, tuple(tensors), backward)


def slice_cols(a, start, stop):
    a = _as_tensor(a)
    out = a.data[:, start:stop]

    def backward(g):
        ga = np.zeros(a.shape)
        ga[:, start:stop] = g
        return (ga,)

    return _make(out, (a,), backward)


def take_rows(table, indices):
    """Row gather (embedding lookup); backward scatter-adds into the table."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    out = table.data[idx]

    def backward(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(out, (table,), backward)


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / n,)

    return _make(out, (a,), backward)


def segment_max(a, bounds):
    """Columnwise max over row segments [start, stop) of a matrix.

    Ties route the gradient to the lowest-index maximal row only.
    """
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"segment_max expects a matrix, got shape {a.shape}")
    rows = []
    argrows = []
    for start, stop in bounds:
        if stop <= start:
            raise ShapeError("segment_max over an empty segment")
        block = a.data[start:stop]
        am = start + np.argmax(block, axis=0)
        argrows.append(am)
        rows.append(block.max(axis=0))
    out = np.stack(rows, axis=0)
    cols = np.arange(a.shape[1])

    def backward(g):
        ga = np.zeros(a.shape)
        for i, am in enumerate(argrows):
            np.add.at(ga, (am, cols), g[i])
        return (ga,)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# softmax family


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), backward)


def softmax_neglogprob(scores, target):
    """-log softmax(scores)[target] for a score vector, max-shifted."""
    scores = _as_tensor(scores)
    if scores.ndim != 1 or scores.size < 1:
        raise ShapeError(f"score vector expected, got shape {scores.shape}")
    n = scores.size
    if not 0 <= int(target) < n:
        raise IndexError(f"target {target} out of range for {n} scores")
    target = int(target)
    m = scores.data.max()
    e = np.exp(scores.data - m)
    p = e / e.sum()
    out = math.log(e.sum()) + m - scores.data[target]

    def backward(g):
        gs = p * g
        gs[target] -= g
        return (gs,)

    return _make(np.float64(out), (scores,), backward)


def cross_entropy_rows(scores, targets):
    """Per-row -log softmax(scores)[target]; returns a vector of losses."""
    scores = _as_tensor(scores)
    if scores.ndim != 2:
        raise ShapeError(f"score matrix expected, got shape {scores.shape}")
    targets = np.asarray(targets, dtype=np.intp)
    m, n = scores.shape
    if targets.shape != (m,):
        raise ShapeError(f"targets shape {targets.shape} does not match {m} rows")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= n:
        raise IndexError("target class index out of range")
    mx = scores.data.max(axis=1, keepdims=True)
    e = np.exp(scores.data - mx)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    rows = np.arange(m)
    out = np.log(z[:, 0]) + mx[:, 0] - scores.data[rows, targets]

    def backward(g):
        gs = p * g[:, None]
        gs[rows, targets] -= g
        return (gs,)

    return _make(out, (scores,), backward)


# ---------------------------------------------------------------------------
# distances and attention scores


def squared_euclidean(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.float64((diff * diff).sum())
    return _make(out, (a, b), lambda g: (2.0 * g * diff, -2.0 * g * diff))


def cosine_similarity(a, b):
    """cos(a, b); defined as 0 when either vector is zero (no exception)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"vectors of equal length expected: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a.data)
    nb = np.linalg.norm(b.data)
    if na == 0.0 or nb == 0.0:
        return _make(np.float64(0.0), (a, b), lambda g: (np.zeros(a.shape), np.zeros(b.shape)))
    cos = float(a.data @ b.data) / (na * nb)

    def backward(g):
        ga = g * (b.data / (na * nb) - cos * a.data / (na * na))
        gb = g * (a.data / (na * nb) - cos * b.data / (nb * nb))
        return (ga, gb)

    return _make(np.float64(cos), (a, b), backward)


def pairwise_sqdist(q, p):
    """Squared Euclidean distances between all rows of q and p."""
    q, p = _as_tensor(q), _as_tensor(p)
    if q.ndim != 2 or p.ndim != 2 or q.shape[1] != p.shape[1]:
        raise ShapeError(f"row dims must agree: {q.shape} vs {p.shape}")
    diff = q.data[:, None, :] - p.data[None, :, :]
    out = (diff * diff).sum(axis=2)

    def backward(g):
        gd = 2.0 * diff * g[:, :, None]
        return (gd.sum(axis=1), -gd.sum(axis=0))

    return _make(out, (q, p), backward)


def pairwise_cosine(q, p):
    """Cosine similarity between all rows of q and p; zero rows give 0."""
    q, p = _as_tensor(q), _as_tensor(p)
    if q.ndim != 2 or p.ndim != 2 or q.shape[1] != p.shape[1]:
        raise ShapeError(f"row dims must agree: {q.shape} vs {p.shape}")
    nq = np.linalg.norm(q.data, axis=1)
    np_ = np.linalg.norm(p.data, axis=1)
    nq_safe = np.where(nq == 0.0, 1.0, nq)
    np_safe = np.where(np_ == 0.0, 1.0, np_)
    cos = (q.data @ p.data.T) / (nq_safe[:, None] * np_safe[None, :])
    cos = np.where((nq[:, None] == 0.0) | (np_[None, :] == 0.0), 0.0, cos)

    def backward(g):
        g = np.where((nq[:, None] == 0.0) | (np_[None, :] == 0.0), 0.0, g)
        gq = (g / np_safe[None, :]) @ p.data / nq_safe[:, None] \
            - (g * cos).sum(axis=1)[:, None] * q.data / (nq_safe ** 2)[:, None]
        gp = (g / nq_safe[:, None]).T @ q.data / np_safe[:, None] \
            - (g * cos).sum(axis=0)[:, None] * p.data / (np_safe ** 2)[:, None]
        return (gq, gp)

    return _make(cos, (q, p), backward)


def rowwise_cosine(a, b):
    """Cosine similarity between matching rows; returns a column vector."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"matching matrices expected: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    na_safe = np.where(na == 0.0, 1.0, na)
    nb_safe = np.where(nb == 0.0, 1.0, nb)
    cos = (a.data * b.data).sum(axis=1) / (na_safe * nb_safe)
    cos = np.where((na == 0.0) | (nb == 0.0), 0.0, cos)

    def backward(g):
        g = np.where((na == 0.0) | (nb == 0.0), 0.0, g[:, 0])
        ga = g[:, None] * (b.data / (na_safe * nb_safe)[:, None]
                           - cos[:, None] * a.data / (na_safe ** 2)[:, None])
        gb = g[:, None] * (a.data / (na_safe * nb_safe)[:, None]
                           - cos[:, None] * b.data / (nb_safe ** 2)[:, None])
        return (ga, gb)

    return _make(cos[:, None], (a, b), backward)


def elementwise_match_scores(q, s, squash="tanh"):
    """Pairwise sum over dimensions of squash(q_row * s_row).

    Used by the query-conditioned attention prototype: entry (i, j) scores
    how well support row j matches query row i.
    """
    q, s = _as_tensor(q), _as_tensor(s)
    if q.ndim != 2 or s.ndim != 2 or q.shape[1] != s.shape[1]:
        raise ShapeError(f"row dims must agree: {q.shape} vs {s.shape}")
    prod = q.data[:, None, :] * s.data[None, :, :]
    if squash == "tanh":
        t = np.tanh(prod)
        out = t.sum(axis=2)

        def backward(g):
            dprod = g[:, :, None] * (1.0 - t * t)
            return ((dprod * s.data[None, :, :]).sum(axis=1),
                    (dprod * q.data[:, None, :]).sum(axis=0))

    elif squash == "identity":
        out = prod.sum(axis=2)

        def backward(g):
            dprod = np.broadcast_to(g[:, :, None], prod.shape)
            return ((dprod * s.data[None, :, :]).sum(axis=1),
                    (dprod * q.data[:, None, :]).sum(axis=0))

    else:
        raise ShapeError(f"unknown squash {squash!r}")
    return _make(out, (q, s), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Row-wise layer normalization with learned gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm shapes incompatible: {x.shape}, {gain.shape}, {bias.shape}")
    d = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = istd / d * (d * dxhat - dxhat.sum(axis=1, keepdims=True)
                         - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return (dx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _make(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# convolution + max-over-time pooling


def conv_window_indices(length, window, pad_row):
    """Row indices into a zero-padded sequence for each sliding window."""
    half = window // 2
    idx = np.empty((length, window), dtype=np.intp)
    for i in range(length):
        for w in range(window):
            j = i - half + w
            idx[i, w] = j if 0 <= j < length else pad_row
    return idx


def conv1d_maxpool(seq, filters, bias, window):
    """Tanh temporal convolution followed by max-over-time pooling.

    seq is l x d_in; filters is (window*d_in) x d_f. The sequence is
    zero-padded so every position produces an output; the result is the
    columnwise max over positions (d_f vector).
    """
    seq = _as_tensor(seq)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ShapeError(f"non-empty sequence matrix required, got shape {seq.shape}")
    out = conv1d_maxpool_stacked(seq, [(0, seq.shape[0])], filters, bias, window)
    return reshape(out, (out.shape[1],))


def conv1d_maxpool_stacked(stacked, bounds, filters, bias, window):
    """Batched conv1d_maxpool over row-stacked sequences.

    stacked holds the token rows of several sequences concatenated; bounds
    gives each sequence's [start, stop) row range. Returns one pooled row
    per sequence.
    """
    stacked = _as_tensor(stacked)
    filters, bias = _as_tensor(filters), _as_tensor(bias)
    if window < 1 or window % 2 == 0:
        raise ShapeError(f"window must be odd and positive, got {window}")
    d_in = stacked.shape[1]
    if filters.shape[0] != window * d_in:
        raise ShapeError(
            f"filters shape {filters.shape} does not match window {window} x d_in {d_in}")
    total = stacked.shape[0]
    padded = concat([stacked, Tensor(np.zeros((1, d_in)))], axis=0)
    win_idx = np.empty((total, window), dtype=np.intp)
    for start, stop in bounds:
        if stop <= start:
            raise ShapeError("empty sequence in conv1d_maxpool batch")
        local = conv_window_indices(stop - start, window, pad_row=total - start)
        win_idx[start:stop] = local + start
    windows = take_rows(padded, win_idx.ravel())
    windows = reshape(windows, (total, window * d_in))
    z = tanh(add(matmul(windows, filters), bias))
    return segment_max(z, bounds)


# ---------------------------------------------------------------------------
# multi-head self-attention


def multi_head_self_attention(seq, wq, wk, wv, wo, heads):
    """Standard scaled dot-product self-attention over sequence rows."""
    seq = _as_tensor(seq)
    d = seq.shape[1]
    if d % heads != 0:
        raise ShapeError(f"model dim {d} not divisible by {heads} heads")
    dk = d // heads
    inv_scale = 1.0 / math.sqrt(dk)
    q = matmul(seq, wq)
    k = matmul(seq, wk)
    v = matmul(seq, wv)
    ctx = []
    for h in range(heads):
        lo, hi = h * dk, (h + 1) * dk
        qh, kh, vh = slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi)
        scores = scale(matmul(qh, transpose(kh)), inv_scale)
        attn = softmax(scores, axis=-1)
        ctx.append(matmul(attn, vh))
    return matmul(concat(ctx, axis=1), wo)


def attention_weights(seq_data, wq_data, wk_data, heads):
    """Forward-only attention weight matrices per head (for inspection)."""
    d = seq_data.shape[1]
    dk = d // heads
    q = seq_data @ wq_data
    k = seq_data @ wk_data
    weights = []
    for h in range(heads):
        lo, hi = h * dk, (h + 1) * dk
        s = (q[:, lo:hi] @ k[:, lo:hi].T) / math.sqrt(dk)
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        weights.append(e / e.sum(axis=1, keepdims=True))
    return weights
