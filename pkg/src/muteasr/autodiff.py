"""Reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Tape` records every differentiable operation executed while it is
active (see :func:`record`).  Operations run eagerly on numpy arrays, so the
append order of the tape is already a topological order; :func:`backward`
replays it in reverse, visiting each node exactly once.

Conventions kept deliberately narrow:

* all data is float64, stored row-major;
* broadcasting is limited to adding a (row) vector across the rows of a
  matrix -- every other shape mismatch is a :class:`DimensionError`;
* gradients of leaf (parameter) tensors accumulate additively in ``.grad``
  until explicitly zeroed; intermediate gradients live only for the duration
  of one backward pass.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "record",
    "active_tape",
    "backward",
    "matmul",
    "linear",
    "add",
    "add_n",
    "mul",
    "mul_scalar",
    "sigmoid",
    "tanh",
    "relu",
    "softmax_row",
    "log_softmax_row",
    "cross_entropy",
    "token_nll",
    "concat_cols",
    "concat_rows",
    "slice_cols",
    "slice_rows",
    "reshape",
    "tile_rows",
    "embed_rows",
    "time_windows",
    "lstm_gates",
    "additive_attention",
    "batchnorm_train",
    "channel_affine",
    "sum_all",
]


class Tensor:
    """Dense float64 array together with an optional gradient.

    ``node_id`` is a handle into the active tape while the tensor is the
    output of a recorded operation; it is ``None`` for leaves and for tensors
    produced outside any recording context.  A tensor that is detached from
    every tape never receives a gradient.
    """

    __slots__ = ("data", "grad", "node_id", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64, order="C")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.requires_grad = requires_grad

    @classmethod
    def param(cls, data) -> "Tensor":
        return cls(data, requires_grad=True)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "inputs", "outputs", "backward_fn")

    def __init__(self, op, inputs, outputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of operations; inputs always precede their node."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._n_slots = 0

    def alloc_slot(self) -> int:
        slot = self._n_slots
        self._n_slots += 1
        return slot

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: contextvars.ContextVar[Optional[Tape]] = contextvars.ContextVar(
    "muteasr_active_tape", default=None
)


def active_tape() -> Optional[Tape]:
    return _ACTIVE.get()


@contextlib.contextmanager
def record(tape: Optional[Tape] = None):
    """Make ``tape`` (or a fresh one) the active computation record."""
    tape = tape if tape is not None else Tape()
    token = _ACTIVE.set(tape)
    try:
        yield tape
    finally:
        _ACTIVE.reset(token)


def _push(
    op: str,
    inputs: Sequence[Tensor],
    outputs: Sequence[Tensor],
    backward_fn: Callable,
) -> None:
    """Record a node if a tape is active and any input needs a gradient."""
    tape = _ACTIVE.get()
    if tape is None or not any(t.requires_grad for t in inputs):
        return
    for out in outputs:
        out.requires_grad = True
        out.node_id = tape.alloc_slot()
    tape.nodes.append(_Node(op, tuple(inputs), tuple(outputs), backward_fn))


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every parameter reachable from ``loss``.

    Gradients accumulate additively across calls until explicitly zeroed.
    """
    if loss.shape not in ((), (1,), (1, 1)):
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = _ACTIVE.get()
    if tape is None or loss.node_id is None:
        raise ContractError("loss is not attached to the active computation record")

    buf: list[Optional[np.ndarray]] = [None] * tape._n_slots
    buf[loss.node_id] = np.ones_like(loss.data)
    # Leaf contributions collect here first and fold into .grad once at the
    # end, so repeated backward calls add bitwise-identical increments.
    leaf_buf: dict[int, tuple[Tensor, np.ndarray]] = {}

    def accum(t: Tensor, g: np.ndarray) -> None:
        if t.node_id is not None:
            if buf[t.node_id] is None:
                buf[t.node_id] = np.array(g, dtype=np.float64, copy=True)
            else:
                buf[t.node_id] += g
        elif t.requires_grad:
            entry = leaf_buf.get(id(t))
            if entry is None:
                leaf_buf[id(t)] = (t, np.array(g, dtype=np.float64, copy=True))
            else:
                np.add(entry[1], g, out=entry[1])

    for node in reversed(tape.nodes):
        gouts = tuple(
            buf[o.node_id] if o.node_id is not None else None for o in node.outputs
        )
        if all(g is None for g in gouts):
            continue
        node.backward_fn(gouts, accum)

    for t, g in leaf_buf.values():
        t.accumulate_grad(g)


# ---------------------------------------------------------------------------
# shape helpers


def _as2d(t: Tensor, op: str) -> np.ndarray:
    if t.data.ndim != 2:
        raise DimensionError(f"{op} expects a 2-D tensor, got shape {t.shape}")
    return t.data


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# core operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a`` [m x k] and ``b`` [k x n]."""
    ad, bd = _as2d(a, "matmul"), _as2d(b, "matmul")
    if ad.shape[1] != bd.shape[0]:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")
    out = Tensor(ad @ bd)

    def bwd(gouts, accum):
        (g,) = gouts
        if a.requires_grad:
            accum(a, g @ bd.T)
        if b.requires_grad:
            accum(b, ad.T @ g)

    _push("matmul", (a, b), (out,), bwd)
    return out


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ w.T + b`` with ``x`` [m x d], ``w`` [o x d], ``b`` [o]."""
    xd, wd = _as2d(x, "linear"), _as2d(w, "linear")
    if xd.shape[1] != wd.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    y = xd @ wd.T
    if b is not None:
        if b.data.shape != (wd.shape[0],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
        y = y + b.data
    out = Tensor(y)

    def bwd(gouts, accum):
        (g,) = gouts
        if x.requires_grad:
            accum(x, g @ wd)
        if w.requires_grad:
            accum(w, g.T @ xd)
        if b is not None and b.requires_grad:
            accum(b, g.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    _push("linear", inputs, (out,), bwd)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a vector (or 1-row matrix) added across rows."""
    broadcast = False
    if a.shape != b.shape:
        if (
            a.data.ndim == 2
            and (b.data.shape == (a.data.shape[1],) or b.data.shape == (1, a.data.shape[1]))
        ):
            broadcast = True
        else:
            raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data + b.data)

    def bwd(gouts, accum):
        (g,) = gouts
        if a.requires_grad:
            accum(a, g)
        if b.requires_grad:
            accum(b, g.sum(axis=0).reshape(b.shape) if broadcast else g)

    _push("add", (a, b), (out,), bwd)
    return out


def add_n(parts: Sequence[Tensor]) -> Tensor:
    """Sum of identically shaped tensors."""
    parts = list(parts)
    if not parts:
        raise ContractError("add_n of an empty sequence")
    for p in parts[1:]:
        _same_shape(parts[0], p, "add_n")
    out = Tensor(sum(p.data for p in parts))

    def bwd(gouts, accum):
        (g,) = gouts
        for p in parts:
            if p.requires_grad:
                accum(p, g)

    _push("add_n", tuple(parts), (out,), bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of identically shaped tensors."""
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def bwd(gouts, accum):
        (g,) = gouts
        if a.requires_grad:
            accum(a, g * bd)
        if b.requires_grad:
            accum(b, g * ad)

    _push("mul", (a, b), (out,), bwd)
    return out


def mul_scalar(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data * s)

    def bwd(gouts, accum):
        (g,) = gouts
        if x.requires_grad:
            accum(x, g * s)

    _push("mul_scalar", (x,), (out,), bwd)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y)

    def bwd(gouts, accum):
        (g,) = gouts
        if x.requires_grad:
            accum(x, g * y * (1.0 - y))

    _push("sigmoid", (x,), (out,), bwd)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)

    def bwd(gouts, accum):
        (g,) = gouts
        if x.requires_grad:
            accum(x, g * (1.0 - y * y))

    _push("tanh", (x,), (out,), bwd)
    return out


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    out = Tensor(y)
    mask = x.data > 0.0

    def bwd(gouts, accum):
        (g,) = gouts
        if x.requires_grad:
            accum(x, g * mask)

    _push("relu", (x,), (out,), bwd)
    return out


def _check_finite(x: Tensor, op: str) -> None:
    if np.isnan(x.data).any():
        raise NumericError(f"{op}: input contains NaN")


def softmax_row(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; accepts 1-D or 2-D input."""
    _check_finite(x, "softmax_row")
    xd = x.data if x.data.ndim == 2 else x.data.reshape(1, -1)
    shifted = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y2 = e / e.sum(axis=1, keepdims=True)
    y = y2.reshape(x.shape)
    out = Tensor(y)

    def bwd(gouts, accum):
        (g,) = gouts
        if x.requires_grad:
            g2 = g.reshape(y2.shape)
            dot = (g2 * y2).sum(axis=1, keepdims=True)
            accum(x, (y2 * (g2 - dot)).reshape(x.shape))

    _push("softmax_row", (x,), (out,), bwd)
    return out


def log_softmax_row(x: Tensor) -> Tensor:
    """Row-wise log-softmax; exp of the output sums to one per row."""
    _check_finite(x, "log_softmax_row")
    xd = x.data if x.data.ndim == 2 else x.data.reshape(1, -1)
    shifted = xd - xd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y2 = shifted - lse
    out = Tensor(y2.reshape(x.shape))
    soft = np.exp(y2)

    def bwd(gouts, accum):
        (g,) = gouts
        if x.requires_grad:
            g2 = g.reshape(y2.shape)
            accum(x, (g2 - soft * g2.sum(axis=1, keepdims=True)).reshape(x.shape))

    _push("log_softmax_row", (x,), (out,), bwd)
    return out


def token_nll(logits: Tensor, targets: Sequence[int], weights: np.ndarray) -> Tensor:
    """Weighted sum of per-row negative log-probabilities.

    ``logits`` is [n x v], ``targets`` holds one class index per row and
    ``weights`` one nonnegative weight per row.  The backward rule is the
    classic ``weight * (softmax - onehot)`` per row.
    """
    ld = _as2d(logits, "token_nll")
    tg = np.asarray(targets, dtype=np.int64)
    if tg.shape != (ld.shape[0],):
        raise DimensionError(
            f"token_nll: {len(tg)} targets for {ld.shape[0]} logit rows"
        )
    if tg.size and (tg.min() < 0 or tg.max() >= ld.shape[1]):
        bad = tg[(tg < 0) | (tg >= ld.shape[1])][0]
        raise IndexError(f"token_nll: target index {bad} out of range for vocab {ld.shape[1]}")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (ld.shape[0],):
        raise DimensionError("token_nll: weights length does not match logit rows")

    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(ld.shape[0])
    nll = lse - shifted[rows, tg]
    out = Tensor(np.asarray((nll * w).sum()))
    soft = np.exp(shifted - lse[:, None])

    def bwd(gouts, accum):
        (g,) = gouts
        if logits.requires_grad:
            grad = soft * w[:, None]
            grad[rows, tg] -= w
            accum(logits, grad * float(g))

    _push("token_nll", (logits,), (out,), bwd)
    return out


def cross_entropy(
    logits: Tensor, targets: Sequence[int], mask: Optional[Sequence[bool]] = None
) -> Tensor:
    """Mean negative log-probability over unmasked target positions."""
    n = _as2d(logits, "cross_entropy").shape[0]
    if mask is None:
        m = np.ones(n, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != (n,):
            raise DimensionError("cross_entropy: mask length does not match logit rows")
    total = int(m.sum())
    if total == 0:
        raise ContractError("cross_entropy: mask excludes every position")
    return token_nll(logits, targets, m.astype(np.float64) / total)


# ---------------------------------------------------------------------------
# structural operations


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    rows = _as2d(parts[0], "concat_cols").shape[0]
    for p in parts[1:]:
        if _as2d(p, "concat_cols").shape[0] != rows:
            raise DimensionError("concat_cols: row counts differ")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.data.shape[1] for p in parts]

    def bwd(gouts, accum):
        (g,) = gouts
        ofs = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                accum(p, g[:, ofs : ofs + w])
            ofs += w

    _push("concat_cols", tuple(parts), (out,), bwd)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    cols = _as2d(parts[0], "concat_rows").shape[1]
    for p in parts[1:]:
        if _as2d(p, "concat_rows").shape[1] != cols:
            raise DimensionError("concat_rows: column counts differ")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    heights = [p.data.shape[0] for p in parts]

    def bwd(gouts, accum):
        (g,) = gouts
        ofs = 0
        for p, h in zip(parts, heights):
            if p.requires_grad:
                accum(p, g[ofs : ofs + h])
            ofs += h

    _push("concat_rows", tuple(parts), (out,), bwd)
    return out


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    xd = _as2d(x, "slice_cols")
    out = Tensor(xd[:, lo:hi].copy())

    def bwd(gouts, accum):
        (g,) = gouts
        if x.requires_grad:
            full = np.zeros_like(xd)
            full[:, lo:hi] = g
            accum(x, full)

    _push("slice_cols", (x,), (out,), bwd)
    return out


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    xd = _as2d(x, "slice_rows")
    out = Tensor(xd[lo:hi].copy())

    def bwd(gouts, accum):
        (g,) = gouts
        if x.requires_grad:
            full = np.zeros_like(xd)
            full[lo:hi] = g
            accum(x, full)

    _push("slice_rows", (x,), (out,), bwd)
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape).copy())

    def bwd(gouts, accum):
        (g,) = gouts
        if x.requires_grad:
            accum(x, g.reshape(x.shape))

    _push("reshape", (x,), (out,), bwd)
    return out


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a vector as ``n`` rows; backward sums over rows."""
    if v.data.ndim != 1:
        raise DimensionError(f"tile_rows expects a vector, got shape {v.shape}")
    out = Tensor(np.tile(v.data, (n, 1)))

    def bwd(gouts, accum):
        (g,) = gouts
        if v.requires_grad:
            accum(v, g.sum(axis=0))

    _push("tile_rows", (v,), (out,), bwd)
    return out


def embed_rows(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Row lookup; the gradient is nonzero only on looked-up rows."""
    td = _as2d(table, "embed_rows")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= td.shape[0]):
        bad = idx[(idx < 0) | (idx >= td.shape[0])][0]
        raise IndexError(f"embed_rows: index {bad} out of range for table with {td.shape[0]} rows")
    out = Tensor(td[idx])

    def bwd(gouts, accum):
        (g,) = gouts
        if table.requires_grad:
            full = np.zeros_like(td)
            np.add.at(full, idx, g)
            accum(table, full)

    _push("embed_rows", (table,), (out,), bwd)
    return out


def time_windows(x: Tensor, width: int, stride: int, pad: int) -> Tensor:
    """Unfold [t x f] into [t' x (width*f)] windows over the (zero padded) time axis."""
    xd = _as2d(x, "time_windows")
    t, f = xd.shape
    if t + 2 * pad < width:
        raise ContractError(
            f"time_windows: sequence of {t} frames shorter than kernel width {width}"
        )
    padded = np.zeros((t + 2 * pad, f)) if pad else xd
    if pad:
        padded[pad : pad + t] = xd
    t_out = (padded.shape[0] - width) // stride + 1
    win = np.empty((t_out, width * f))
    for i in range(t_out):
        win[i] = padded[i * stride : i * stride + width].reshape(-1)
    out = Tensor(win)

    def bwd(gouts, accum):
        (g,) = gouts
        if x.requires_grad:
            gp = np.zeros((t + 2 * pad, f))
            for i in range(t_out):
                gp[i * stride : i * stride + width] += g[i].reshape(width, f)
            accum(x, gp[pad : pad + t] if pad else gp)

    _push("time_windows", (x,), (out,), bwd)
    return out


def lstm_gates(z: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """Fused LSTM gate nonlinearity.

    ``z`` is [b x 4h] pre-activation in gate order (input, forget, candidate,
    output); ``c`` is the previous cell state [b x h].  Returns (h', c').
    """
    zd, cd = _as2d(z, "lstm_gates"), _as2d(c, "lstm_gates")
    if zd.shape != (cd.shape[0], 4 * cd.shape[1]):
        raise DimensionError(f"lstm_gates: z {z.shape} does not match c {c.shape}")
    h = cd.shape[1]
    i = 1.0 / (1.0 + np.exp(-zd[:, :h]))
    f = 1.0 / (1.0 + np.exp(-zd[:, h : 2 * h]))
    g = np.tanh(zd[:, 2 * h : 3 * h])
    o = 1.0 / (1.0 + np.exp(-zd[:, 3 * h :]))
    c_new = f * cd + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    out_h, out_c = Tensor(h_new), Tensor(c_new)

    def bwd(gouts, accum):
        gh, gc = gouts
        gc_total = np.zeros_like(c_new) if gc is None else np.array(gc, copy=True)
        go = None
        if gh is not None:
            go = gh * tc * o * (1.0 - o)
            gc_total += gh * o * (1.0 - tc * tc)
        gz = np.empty_like(zd)
        gz[:, :h] = gc_total * g * i * (1.0 - i)
        gz[:, h : 2 * h] = gc_total * cd * f * (1.0 - f)
        gz[:, 2 * h : 3 * h] = gc_total * i * (1.0 - g * g)
        gz[:, 3 * h :] = 0.0 if go is None else go
        if z.requires_grad:
            accum(z, gz)
        if c.requires_grad:
            accum(c, gc_total * f)

    _push("lstm_gates", (z, c), (out_h, out_c), bwd)
    return out_h, out_c


def batchnorm_train(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel batch normalization over the rows of ``x`` [n x c].

    Returns the normalized tensor plus the (plain-array) batch mean and biased
    batch variance so the caller can update running statistics.
    """
    xd = _as2d(x, "batchnorm_train")
    n = xd.shape[0]
    mean = xd.mean(axis=0)
    var = xd.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def bwd(gouts, accum):
        (g,) = gouts
        if gamma.requires_grad:
            accum(gamma, (g * xhat).sum(axis=0))
        if beta.requires_grad:
            accum(beta, g.sum(axis=0))
        if x.requires_grad:
            gxhat = g * gamma.data
            accum(
                x,
                inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0)),
            )

    _push("batchnorm_train", (x, gamma, beta), (out,), bwd)
    return out, mean, var


def channel_affine(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = 1e-5,
) -> Tensor:
    """Normalization with fixed statistics: ``(x - mean) / sqrt(var + eps) * gamma + beta``."""
    xd = _as2d(x, "channel_affine")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def bwd(gouts, accum):
        (g,) = gouts
        if gamma.requires_grad:
            accum(gamma, (g * xhat).sum(axis=0))
        if beta.requires_grad:
            accum(beta, g.sum(axis=0))
        if x.requires_grad:
            accum(x, g * gamma.data * inv)

    _push("channel_affine", (x, gamma, beta), (out,), bwd)
    return out


def additive_attention(
    q_proj: Tensor,
    v: Tensor,
    keys_all: Tensor,
    keys_proj_all: Tensor,
    offsets: Sequence[int],
) -> tuple[Tensor, Tensor]:
    """Fused content-based attention for a batch of variable-length key sets.

    ``q_proj`` is [b x a] (queries already projected), ``keys_all`` [n x h]
    and ``keys_proj_all`` [n x a] are the row-wise concatenation of every
    utterance's keys, and ``offsets`` (length b+1) delimits each utterance's
    row block.  Per block: e = tanh(keys_proj + q) . v, w = softmax(e),
    context = w . keys.  Returns (context [b x h], weights [n]).
    """
    qd = _as2d(q_proj, "additive_attention")
    kd = _as2d(keys_all, "additive_attention")
    kpd = _as2d(keys_proj_all, "additive_attention")
    vd = v.data
    b = qd.shape[0]
    if len(offsets) != b + 1 or offsets[-1] != kd.shape[0]:
        raise DimensionError("additive_attention: offsets do not partition the key rows")
    ctx = np.empty((b, kd.shape[1]))
    weights = np.empty(kd.shape[0])
    tanh_blocks = []
    for i in range(b):
        lo, hi = offsets[i], offsets[i + 1]
        if hi <= lo:
            raise ContractError("additive_attention: empty key block")
        e_block = np.tanh(kpd[lo:hi] + qd[i])
        scores = e_block @ vd
        scores = scores - scores.max()
        w = np.exp(scores)
        w /= w.sum()
        ctx[i] = w @ kd[lo:hi]
        weights[lo:hi] = w
        tanh_blocks.append(e_block)
    out_ctx, out_w = Tensor(ctx), Tensor(weights)

    def bwd(gouts, accum):
        gctx, gw_ext = gouts
        gq = np.zeros_like(qd) if q_proj.requires_grad else None
        gv = np.zeros_like(vd) if v.requires_grad else None
        gk = np.zeros_like(kd) if keys_all.requires_grad else None
        gkp = np.zeros_like(kpd) if keys_proj_all.requires_grad else None
        for i in range(b):
            lo, hi = offsets[i], offsets[i + 1]
            w = weights[lo:hi]
            e_block = tanh_blocks[i]
            gw = np.zeros(hi - lo)
            if gctx is not None:
                gw += kd[lo:hi] @ gctx[i]
                if gk is not None:
                    gk[lo:hi] += np.outer(w, gctx[i])
            if gw_ext is not None:
                gw += gw_ext[lo:hi]
            ge = w * (gw - float(np.dot(gw, w)))
            gs = np.outer(ge, vd) * (1.0 - e_block * e_block)
            if gkp is not None:
                gkp[lo:hi] += gs
            if gq is not None:
                gq[i] += gs.sum(axis=0)
            if gv is not None:
                gv += e_block.T @ ge
        if gq is not None:
            accum(q_proj, gq)
        if gv is not None:
            accum(v, gv)
        if gk is not None:
            accum(keys_all, gk)
        if gkp is not None:
            accum(keys_proj_all, gkp)

    _push(
        "additive_attention",
        (q_proj, v, keys_all, keys_proj_all),
        (out_ctx, out_w),
        bwd,
    )
    return out_ctx, out_w


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum()))

    def bwd(gouts, accum):
        (g,) = gouts
        if x.requires_grad:
            accum(x, np.full_like(x.data, float(g)))

    _push("sum_all", (x,), (out,), bwd)
    return out


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
