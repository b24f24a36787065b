"""Dense float64 tensors with taped reverse-mode differentiation.

Every differentiable value in the package is a :class:`Tensor` wrapping a
row-major ``numpy`` float64 array.  Operations executed while a
:class:`Tape` is active append one node each; :func:`backward` replays the
tape in reverse and accumulates exact adjoints into ``Tensor.grad``.
Operations executed with no active tape compute forward values only, which
is how decoding stays gradient-free by construction.

Gradients accumulate: ``backward`` never zeroes ``grad`` fields, so two
losses replayed on one tape sum their adjoints.  Training code is expected
to call :func:`zero_grad` before each optimizer step.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, DomainError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "zero_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "concat",
    "slice_",
    "reshape",
    "transpose",
    "reduce_sum",
    "reduce_mean",
    "embedding_lookup",
    "time_reverse",
    "affine",
    "concat_affine",
    "rnn_tanh_cell",
    "attend",
    "cross_entropy_loss",
    "nll_of_probs_loss",
    "mse_loss",
    "bce_with_logits_loss",
]

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


class _Node:
    __slots__ = ("op", "inputs", "out", "bwd")

    def __init__(self, op, inputs, out, bwd):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Tape:
    """Ordered record of operations for one reverse sweep.

    Use as a context manager; ops executed inside record themselves when
    any input requires grad.  Nested tapes record to the innermost one.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad and _TAPE_STACK:
        _TAPE_STACK[-1].nodes.append(_Node(op, inputs, out, bwd))
    return out


class _BackwardContext:
    """Per-sweep adjoint storage for tape-internal outputs.

    Intermediates accumulate here and are dropped when the sweep ends; only
    leaf tensors keep persistent ``grad`` fields, so repeated backward calls
    on one tape sum leaf adjoints without replaying stale seeds.
    """

    __slots__ = ("out_ids", "local")

    def __init__(self, out_ids):
        self.out_ids = out_ids
        self.local: dict[int, np.ndarray] = {}


_BWD_STACK: list[_BackwardContext] = []


def _accum(t: Tensor, g: np.ndarray) -> None:
    # adjoints only matter for tensors that require grad (leaves and the
    # intermediates above them); skipping the rest keeps backward cheap
    if not t.requires_grad:
        return
    if _BWD_STACK and id(t) in _BWD_STACK[-1].out_ids:
        local = _BWD_STACK[-1].local
        cur = local.get(id(t))
        if cur is None:
            local[id(t)] = np.array(g, dtype=np.float64)
        else:
            cur += g
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(tensor) for every tensor recorded on ``tape``.

    ``loss`` must be a scalar.  Leaves that require grad but are unreachable
    from the loss end the sweep holding exact zeros.
    """
    if loss.data.shape != ():
        raise ContractViolation(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    ctx = _BackwardContext({id(n.out) for n in tape.nodes})
    ctx.local[id(loss)] = np.ones(())
    _BWD_STACK.append(ctx)
    try:
        for node in reversed(tape.nodes):
            g = ctx.local.get(id(node.out))
            if g is None:
                continue
            node.bwd(g)
    finally:
        _BWD_STACK.pop()
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t.grad is None and id(t) not in ctx.out_ids:
                t.grad = np.zeros_like(t.data)


def zero_grad(tensors) -> None:
    """Reset grads to None for an iterable (or dict) of tensors."""
    if isinstance(tensors, dict):
        tensors = tensors.values()
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ContractViolation(f"add: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make("add", data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ContractViolation(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make("sub", data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ContractViolation(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make("mul", data, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accum(a, -g)

    return _make("neg", -a.data, (a,), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch semantics (2-D or leading-batch 3-D)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractViolation(
            f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ContractViolation(
            f"matmul: inner dimensions differ, {a.shape} @ {b.shape}"
        )
    data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _make("matmul", data, (a, b), bwd)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - y * y))

    return _make("tanh", y, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = _sigmoid_np(a.data)

    def bwd(g):
        _accum(a, g * y * (1.0 - y))

    return _make("sigmoid", y, (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    y = np.maximum(a.data, 0.0)

    def bwd(g):
        _accum(a, g * (a.data > 0.0))

    return _make("relu", y, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    if not np.all(np.isfinite(y)):
        raise NumericError("exp overflowed to non-finite values")

    def bwd(g):
        _accum(a, g * y)

    return _make("exp", y, (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    y = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make("log", y, (a,), bwd)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(a) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    a = _as_tensor(a)
    y = _softmax_np(a.data)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, (g - dot) * y)

    return _make("softmax", y, (a,), bwd)


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - logz

    def bwd(g):
        p = np.exp(y)
        _accum(a, g - p * g.sum(axis=-1, keepdims=True))

    return _make("log_softmax", y, (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ContractViolation("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make("concat", data, tensors, bwd)


def slice_(a, key) -> Tensor:
    """Basic numpy indexing (slices / ints); adjoint scatters back."""
    a = _as_tensor(a)
    data = a.data[key]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] += g
        _accum(a, full)

    return _make("slice", np.ascontiguousarray(data), (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make("reshape", data, (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    data = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(a, np.transpose(g, inv))

    return _make("transpose", data, (a,), bwd)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make("reduce_sum", np.asarray(data), (a,), bwd)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / count, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg / count, a.data.shape).copy())

    return _make("reduce_mean", np.asarray(data), (a,), bwd)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of ``table`` (V x E) by integer ``ids`` (any shape)."""
    table = _as_tensor(table)
    idx = np.asarray(ids)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ContractViolation(
            f"embedding_lookup: id out of range for table with {table.data.shape[0]} rows"
        )
    data = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accum(table, gt)

    return _make("embedding_lookup", data, (table,), bwd)


def time_reverse(a, lengths) -> Tensor:
    """Reverse axis 1 of a (B, T, ...) tensor within per-row valid lengths.

    Positions at and beyond ``lengths[b]`` stay where they are; the op is an
    involution over the valid prefix, which makes the adjoint the same gather.
    """
    a = _as_tensor(a)
    B, T = a.data.shape[0], a.data.shape[1]
    lengths = np.asarray(lengths, dtype=np.int64)
    idx = np.tile(np.arange(T), (B, 1))
    for b in range(B):
        n = int(lengths[b])
        idx[b, :n] = np.arange(n - 1, -1, -1)
    rows = np.arange(B)[:, None]
    data = a.data[rows, idx]

    def bwd(g):
        _accum(a, g[rows, idx])

    return _make("time_reverse", data, (a,), bwd)


# ---------------------------------------------------------------------------
# fused model-layer ops (fewer tape nodes on hot paths)


def affine(x, w, b) -> Tensor:
    """x @ w + b for 2-D or batched 3-D x."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ContractViolation(f"affine: {x.shape} @ {w.shape} mismatch")
    data = np.matmul(x.data, w.data) + b.data

    def bwd(g):
        if x.requires_grad:
            _accum(x, np.matmul(g, w.data.T))
        gw = np.matmul(np.swapaxes(x.data, -1, -2), g)
        _accum(w, _unbroadcast(gw, w.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make("affine", data, (x, w, b), bwd)


def concat_affine(a, b, w, bias) -> Tensor:
    """[a ; b] @ w + bias without materializing the concatenation."""
    a, b, w, bias = _as_tensor(a), _as_tensor(b), _as_tensor(w), _as_tensor(bias)
    na = a.data.shape[-1]
    if na + b.data.shape[-1] != w.data.shape[0]:
        raise ContractViolation(
            f"concat_affine: concat width {na}+{b.data.shape[-1]} != {w.data.shape[0]}"
        )
    w1 = w.data[:na]
    w2 = w.data[na:]
    data = np.matmul(a.data, w1) + np.matmul(b.data, w2) + bias.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, w1.T))
        if b.requires_grad:
            _accum(b, np.matmul(g, w2.T))
        gw = np.empty_like(w.data)
        gw[:na] = np.matmul(np.swapaxes(a.data, -1, -2), g)
        gw[na:] = np.matmul(np.swapaxes(b.data, -1, -2), g)
        _accum(w, gw)
        _accum(bias, _unbroadcast(g, bias.data.shape))

    return _make("concat_affine", data, (a, b, w, bias), bwd)


def rnn_tanh_cell(x, h, wx, wh, b) -> Tensor:
    """One step h' = tanh(x @ wx + h @ wh + b) as a single tape node."""
    x, h, wx, wh, b = (_as_tensor(t) for t in (x, h, wx, wh, b))
    y = np.tanh(np.matmul(x.data, wx.data) + np.matmul(h.data, wh.data) + b.data)

    def bwd(g):
        gz = g * (1.0 - y * y)
        if x.requires_grad:
            _accum(x, np.matmul(gz, wx.data.T))
        if h.requires_grad:
            _accum(h, np.matmul(gz, wh.data.T))
        _accum(wx, np.matmul(x.data.T, gz))
        _accum(wh, np.matmul(h.data.T, gz))
        _accum(b, _unbroadcast(gz, b.data.shape))

    return _make("rnn_tanh_cell", y, (x, h, wx, wh, b), bwd)


def attend(states, query, mask_bias=None) -> Tensor:
    """Dot-product attention pooling as one node.

    states: (B, T, H); query: (B, H); optional mask_bias: (B, T) added to the
    scores (use large negatives to exclude padded positions).  Returns the
    context vector (B, H).
    """
    states, query = _as_tensor(states), _as_tensor(query)
    if states.data.shape[-1] != query.data.shape[-1]:
        raise ContractViolation(
            f"attend: state dim {states.shape} vs query dim {query.shape}"
        )
    scores = np.matmul(states.data, query.data[:, :, None])[:, :, 0]
    if mask_bias is not None:
        scores = scores + np.asarray(mask_bias, dtype=np.float64)
    alpha = _softmax_np(scores)
    ctx = np.matmul(alpha[:, None, :], states.data)[:, 0, :]

    def bwd(g):
        galpha = np.matmul(states.data, g[:, :, None])[:, :, 0]
        dot = (galpha * alpha).sum(axis=-1, keepdims=True)
        gscores = (galpha - dot) * alpha
        if states.requires_grad:
            gstates = alpha[:, :, None] * g[:, None, :] + gscores[:, :, None] * query.data[:, None, :]
            _accum(states, gstates)
        if query.requires_grad:
            gquery = np.matmul(gscores[:, None, :], states.data)[:, 0, :]
            _accum(query, gquery)

    return _make("attend", ctx, (states, query), bwd)


# ---------------------------------------------------------------------------
# losses


def _check_mask(mask, shape) -> np.ndarray:
    m = np.ones(shape, dtype=np.float64) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != shape:
        raise ContractViolation(f"mask shape {m.shape} does not match {shape}")
    return m


def cross_entropy_loss(logits, targets, mask=None) -> Tensor:
    """Mean -log softmax(logits)[target] over unmasked positions.

    logits: (..., V); targets: integer ids broadcastable to logits[...,0];
    mask: optional booleans matching targets (False = excluded).
    """
    logits = _as_tensor(logits)
    tgt = np.asarray(targets)
    if tgt.shape != logits.data.shape[:-1]:
        raise ContractViolation(
            f"cross_entropy: targets {tgt.shape} vs logits {logits.shape}"
        )
    V = logits.data.shape[-1]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= V):
        raise ContractViolation(f"cross_entropy: target id out of range [0, {V})")
    m = _check_mask(mask, tgt.shape)
    count = m.sum()
    if count == 0:
        raise ContractViolation("cross_entropy: all positions masked, loss undefined")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    value = -(picked * m).sum() / count

    def bwd(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
        _accum(logits, g * (p - onehot) * m[..., None] / count)

    return _make("cross_entropy", np.asarray(value), (logits,), bwd)


def nll_of_probs_loss(probs, targets, mask=None) -> Tensor:
    """Mean -log(probs[target]) for already-normalized probabilities.

    Used for the averaged dual-decoder distribution, where the loss is the
    log of the mixture rather than a log-softmax of logits.
    """
    probs = _as_tensor(probs)
    tgt = np.asarray(targets)
    if tgt.shape != probs.data.shape[:-1]:
        raise ContractViolation(f"nll_of_probs: targets {tgt.shape} vs probs {probs.shape}")
    m = _check_mask(mask, tgt.shape)
    count = m.sum()
    if count == 0:
        raise ContractViolation("nll_of_probs: all positions masked, loss undefined")
    picked = np.take_along_axis(probs.data, tgt[..., None], axis=-1)[..., 0]
    if np.any(picked[m > 0] <= 0.0):
        raise DomainError("nll_of_probs: zero probability at a target position")
    value = -(np.log(picked) * m).sum() / count

    def bwd(g):
        gp = np.zeros_like(probs.data)
        np.put_along_axis(gp, tgt[..., None], (-m / (picked * count))[..., None], axis=-1)
        _accum(probs, g * gp)

    return _make("nll_of_probs", np.asarray(value), (probs,), bwd)


def mse_loss(pred, target, mask=None) -> Tensor:
    """Mean squared difference over unmasked elements.

    mask, when given, marks positions along the leading axes (broadcast over
    trailing feature dims).
    """
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ContractViolation(
            f"mse_loss: shape mismatch {pred.shape} vs {target.shape}"
        )
    if mask is None:
        m = np.ones(pred.data.shape, dtype=np.float64)
    else:
        m = np.asarray(mask, dtype=np.float64)
        while m.ndim < pred.data.ndim:
            m = m[..., None]
        m = np.broadcast_to(m, pred.data.shape).copy()
    count = m.sum()
    if count == 0:
        raise ContractViolation("mse_loss: all positions masked")
    diff = pred.data - target.data
    value = (diff * diff * m).sum() / count

    def bwd(g):
        gd = g * 2.0 * diff * m / count
        _accum(pred, gd)
        if target.requires_grad:
            _accum(target, -gd)

    return _make("mse_loss", np.asarray(value), (pred, target), bwd)


def bce_with_logits_loss(logits, targets, mask=None, pos_weight: float = 1.0) -> Tensor:
    """Mean binary cross-entropy on logits with a positive-class weight.

    mask, when given, excludes positions from the mean (same shape as logits).
    """
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.data.shape:
        raise ContractViolation(
            f"bce_with_logits: shape mismatch {t.shape} vs {logits.shape}"
        )
    m = _check_mask(mask, t.shape)
    n = m.sum()
    if n == 0:
        raise ContractViolation("bce_with_logits: all positions masked")
    z = logits.data
    softplus_neg = np.log1p(np.exp(-np.abs(z))) + np.maximum(-z, 0.0)  # log(1+e^-z)
    softplus_pos = np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)  # log(1+e^z)
    per = pos_weight * t * softplus_neg + (1.0 - t) * softplus_pos
    value = (per * m).sum() / n

    def bwd(g):
        s = _sigmoid_np(z)
        _accum(logits, g * m * (pos_weight * t * (s - 1.0) + (1.0 - t) * s) / n)

    return _make("bce_with_logits", np.asarray(value), (logits,), bwd)
