"""Reverse-mode automatic differentiation over dense numpy arrays.

The engine is deliberately small: it provides exactly the forward
operations the knowledge-tracing model needs, records them on an explicit
tape, and replays the tape once per backward pass. Virtual gate
parameters (all-ones vectors multiplied into a layer's output) ride the
same machinery, so their gradients can be read off without ever being
applied as an update.

Float32 is the working precision; float64 exists for verification
(finite-difference checks are unreliable at 32-bit).
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5
PROB_CLAMP = 1e-7
MASK_FILL = -1e9  # additive pre-softmax fill; underflows to exactly 0 after exp


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NumericalError(ArithmeticError):
    """A forward operation produced non-finite values."""


class GraphError(RuntimeError):
    """Backward was requested for a loss the tape never produced."""


class Tensor:
    """Dense row-major array with optional gradient tracking.

    ``grad`` is populated by :meth:`Tape.backward` for leaf tensors
    (parameters and gates) and accumulates across repeated backward calls
    until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(op, arr):
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op}: non-finite values in output")


def _reduce_to(grad, shape):
    """Sum a gradient down to ``shape`` (undo numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed operations for one reverse pass.

    Operations executed inside a ``with tape:`` block are appended in
    execution order, which is by construction a topological order; a
    backward pass walks the list once in reverse. Tapes are confined to a
    single worker; tensor values may be shared read-only once the tape is
    dropped.
    """

    def __init__(self):
        self._nodes = []
        self._produced = set()
        self._leaves = []
        self._leaf_ids = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def _register_leaf(self, t):
        if id(t) not in self._leaf_ids:
            self._leaf_ids.add(id(t))
            self._leaves.append(t)

    def backward(self, loss):
        """Run one reverse pass from a scalar loss.

        Returns a map ``{leaf tensor -> gradient array}`` covering every
        parameter and gate that appeared on the tape; leaves off the path
        to the loss get exact zeros. Repeated calls accumulate into
        ``Tensor.grad``.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            shape = getattr(loss, "shape", None)
            raise GraphError(f"backward requires a scalar loss, got shape {shape}")
        if id(loss) not in self._produced:
            raise GraphError("loss was not produced on this tape (detached graph)")
        flow = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = flow.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.bwd(g)):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    prev = flow.get(id(inp))
                    flow[id(inp)] = gi if prev is None else prev + gi
        grads = {}
        for leaf in self._leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            grads[leaf] = leaf.grad
        return grads


def backward(loss, tape=None):
    """Module-level convenience wrapper around :meth:`Tape.backward`."""
    if tape is None:
        if not _TAPES:
            raise GraphError("no active tape (detached graph)")
        tape = _TAPES[-1]
    return tape.backward(loss)


def _record(out, inputs, bwd):
    if not _TAPES:
        return out
    tensors = [t for t in inputs if isinstance(t, Tensor)]
    if not any(t.requires_grad for t in tensors):
        return out
    tape = _TAPES[-1]
    out.requires_grad = True
    out.is_leaf = False
    tape._nodes.append(_Node(out, tuple(inputs), bwd))
    tape._produced.add(id(out))
    for t in tensors:
        if t.requires_grad and t.is_leaf:
            tape._register_leaf(t)
    return out


# ---------------------------------------------------------------------------
# forward operations


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    _check_finite("add", data)
    out = Tensor(data)

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    _check_finite("mul", data)
    out = Tensor(data)

    def bwd(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _record(out, (a, b), bwd)


def matmul(a, b, transpose_b=False):
    """``a @ b``, or ``a @ b.T`` over the last two axes when ``transpose_b``.

    ``b`` may be 2-D (a weight shared across leading batch axes of ``a``)
    or match ``a``'s rank for a batched product.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    b_eff = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    if a.shape[-1] != b_eff.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} do not match"
                         + (" (transpose_b)" if transpose_b else ""))
    with np.errstate(over="ignore", invalid="ignore"):
        data = np.matmul(a.data, b_eff)
    _check_finite("matmul", data)
    out = Tensor(data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b_eff, -1, -2))
        if b.ndim == 2:
            g2 = g.reshape(-1, g.shape[-1])
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = g2.T @ a2 if transpose_b else a2.T @ g2
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if transpose_b:
                gb = np.swapaxes(gb, -1, -2)
            gb = _reduce_to(gb, b.shape)
        return _reduce_to(ga, a.shape), gb

    return _record(out, (a, b), bwd)


def embedding_lookup(table, ids):
    """Gather rows of a 2-D table by an integer index array."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: index out of range [0, {table.shape[0]}), "
            f"got min={ids.min()} max={ids.max()}")
    out = Tensor(table.data[ids])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(out, (table,), bwd)


def sigmoid(x):
    x = _as_tensor(x)
    d = x.data
    data = np.empty_like(d)
    pos = d >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    data[~pos] = ex / (1.0 + ex)
    _check_finite("sigmoid", data)
    out = Tensor(data)

    def bwd(g):
        return (g * data * (1.0 - data),)

    return _record(out, (x,), bwd)


def softmax(x):
    """Softmax over the last axis."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)
    _check_finite("softmax", data)
    out = Tensor(data)

    def bwd(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - inner),)

    return _record(out, (x,), bwd)


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalize the last axis to zero mean / unit variance, then affine.

    A constant row has zero variance; with the epsilon inside the square
    root its normalized output is exactly zero rather than a blow-up.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} "
                         f"must match feature width {width}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data
    _check_finite("layer_norm", data)
    out = Tensor(data)

    def bwd(g):
        dxhat = g * gain.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgain = _reduce_to(g * xhat, gain.shape)
        dbias = _reduce_to(g, bias.shape)
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), bwd)


def dropout(x, p, rng, train):
    """Inverted dropout: scale kept units by 1/(1-p) at train time.

    Identity in eval mode, so no correction is applied at inference.
    ``rng`` must be a seeded numpy Generator; the drawn mask is what makes
    two same-seed runs bit-identical.
    """
    x = _as_tensor(x)
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    out = Tensor(x.data * keep)

    def bwd(g):
        return (g * keep,)

    return _record(out, (x,), bwd)


def concatenate(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concatenate: need at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concatenate: shapes "
                         + ", ".join(str(t.shape) for t in tensors)
                         + f" do not align on axis {axis}") from None
    _check_finite("concatenate", data)
    out = Tensor(data)
    ax = axis if axis >= 0 else data.ndim + axis
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record(out, tuple(tensors), bwd)


def mean_over_axis(x, axis):
    x = _as_tensor(x)
    n = x.shape[axis]
    data = x.data.mean(axis=axis)
    _check_finite("mean_over_axis", data)
    out = Tensor(data)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / n,)

    return _record(out, (x,), bwd)


def causal_attention(q, k, v, n_head):
    """Multi-head scaled dot-product attention with a strict causal mask.

    Inputs are [batch, time, d_model]; position j attends to positions
    <= j only. The mask adds a large negative constant before softmax,
    which underflows to exactly zero probability, so gradients through
    future positions are exactly zero as well.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise ShapeError(f"causal_attention: q/k/v must share a [B,T,D] shape, "
                         f"got {q.shape}, {k.shape}, {v.shape}")
    B, T, D = q.shape
    if D % n_head != 0:
        raise ShapeError(f"causal_attention: d_model {D} not divisible by n_head {n_head}")
    dh = D // n_head
    scale = 1.0 / np.sqrt(dh)

    def split(x):
        return x.reshape(B, T, n_head, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    with np.errstate(over="ignore", invalid="ignore"):
        scores = np.matmul(qh, np.swapaxes(kh, -1, -2)) * scale
        causal = np.triu(np.full((T, T), MASK_FILL, dtype=scores.dtype), k=1)
        scores = scores + causal
        shifted = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        attn = e / e.sum(axis=-1, keepdims=True)
        ctx = np.matmul(attn, vh)
    data = ctx.transpose(0, 2, 1, 3).reshape(B, T, D)
    _check_finite("causal_attention", data)
    out = Tensor(data)

    def bwd(g):
        go = g.reshape(B, T, n_head, dh).transpose(0, 2, 1, 3)
        g_attn = np.matmul(go, np.swapaxes(vh, -1, -2))
        gv = np.matmul(np.swapaxes(attn, -1, -2), go)
        inner = (g_attn * attn).sum(axis=-1, keepdims=True)
        gs = attn * (g_attn - inner)
        gq = np.matmul(gs, kh) * scale
        gk = np.matmul(np.swapaxes(gs, -1, -2), qh) * scale

        def merge(x):
            return x.transpose(0, 2, 1, 3).reshape(B, T, D)

        return merge(gq), merge(gk), merge(gv)

    return _record(out, (q, k, v), bwd)


class GateParam:
    """Virtual all-ones parameter multiplied into a layer's output.

    The values stay at 1 for the lifetime of an importance run; only the
    gradient captured on backward is consumed, never an update.
    """

    def __init__(self, width, dtype=np.float32, name=None):
        self.values = Tensor(np.ones(width, dtype=dtype), requires_grad=True, name=name)

    @property
    def width(self):
        return self.values.shape[0]

    @property
    def captured_grad(self):
        if self.values.grad is None:
            return np.zeros_like(self.values.data)
        return self.values.grad

    def reset_grad(self):
        self.values.grad = None


def gate_apply(layer_output, gate):
    """Multiply a [*, width] layer output by an all-ones gate vector.

    Numerically the identity; its purpose is putting the gate on the tape
    so backward captures d(loss)/d(gate) per output unit.
    """
    x = _as_tensor(layer_output)
    if gate.width != x.shape[-1]:
        raise ShapeError(f"gate_apply: gate width {gate.width} does not match "
                         f"output feature width {x.shape[-1]}")
    if not np.all(gate.values.data == 1.0):
        raise ValueError("gate_apply: gate values must all be 1")
    return mul(x, gate.values)


def bce_loss(probs, targets, mask):
    """Masked mean binary cross-entropy over probabilities.

    Probabilities are clamped to [1e-7, 1-1e-7] before the logs; the
    loss averages over unmasked elements only.
    """
    probs = _as_tensor(probs)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets,
                   dtype=probs.dtype)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=probs.dtype)
    if t.shape != probs.shape or m.shape != probs.shape:
        raise ShapeError(f"bce_loss: probs {probs.shape}, targets {t.shape}, "
                         f"mask {m.shape} must share one shape")
    total = m.sum()
    if total == 0:
        raise ValueError("bce_loss: all elements masked out")
    lo, hi = PROB_CLAMP, 1.0 - PROB_CLAMP
    pc = np.clip(probs.data, lo, hi)
    per = t * np.log(pc) + (1.0 - t) * np.log1p(-pc)
    data = np.asarray(-(m * per).sum() / total, dtype=probs.dtype)
    _check_finite("bce_loss", data)
    out = Tensor(data)

    def bwd(g):
        inside = ((probs.data >= lo) & (probs.data <= hi)).astype(probs.dtype)
        dp = m * (pc - t) / (pc * (1.0 - pc)) / total * inside
        return (g * dp,)

    return _record(out, (probs,), bwd)
