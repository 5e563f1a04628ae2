"""Dense tensors with reverse-mode automatic differentiation.

A ``Tape`` records operations for one forward pass.  Entries are appended
in execution order, so the list is already topologically sorted and the
backward pass is a single reverse sweep.  Gradients of leaf tensors
(``requires_grad=True``) accumulate additively into ``.grad`` across
backward calls until ``zero_grad`` clears them; intermediate gradients are
transient.  A fresh tape is built for every training step.

Broadcasting in elementwise ops is restricted to (a) identical shapes,
(b) Python scalars, and (c) one shape being a trailing suffix of the
other.  Anything else must go through an explicit ``broadcast_to``.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float64


def set_default_dtype(name: str) -> None:
    """Select the float width for newly created tensors ('float32'|'float64')."""
    global _default_dtype
    if name not in _DTYPES:
        raise ContractError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype():
    return _default_dtype


class Tensor:
    """A dense n-d float array, optionally tracked on the active tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values that no tape will ever track."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    # arithmetic sugar; the real work lives in the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not provided; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, ax0=-2, ax1=-1):
        return transpose(self, ax0, ax1)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


class Tape:
    """Ordered record of one forward pass plus its backward rules."""

    def __init__(self):
        self._entries = []  # (input_node_ids, inputs, output_node_id, backward_fn)
        self._node_of = {}  # id(tensor) -> node id
        self._keep = []  # keeps tensors alive so id() stays unambiguous
        self._leaves = {}  # node id -> leaf tensor
        self._n_nodes = 0

    def node_id(self, t: Tensor):
        """The tensor's identifier on this tape, or None if untracked."""
        return self._node_of.get(id(t))

    def _ensure_node(self, t: Tensor) -> int:
        nid = self._node_of.get(id(t))
        if nid is None:
            nid = self._n_nodes
            self._n_nodes += 1
            self._node_of[id(t)] = nid
            self._keep.append(t)
            if t.requires_grad:
                self._leaves[nid] = t
        return nid

    def _live(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._node_of

    def record(self, inputs, output: Tensor, backward) -> None:
        in_ids = tuple(self._ensure_node(t) if self._live(t) else None for t in inputs)
        out_id = self._ensure_node(output)
        self._entries.append((in_ids, tuple(inputs), out_id, backward))

    def __len__(self):
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every leaf parameter with d(loss)/d(leaf).

        Visits each recorded op exactly once, in reverse execution order.
        Repeated calls re-accumulate (two calls double leaf gradients).
        """
        if loss.shape != ():
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        seed = self._node_of.get(id(loss))
        if seed is None:
            raise ContractError("loss is not tracked on this tape")
        grads = {seed: np.ones((), dtype=loss.data.dtype)}
        for in_ids, inputs, out_id, backward_fn in reversed(self._entries):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for nid, gi in zip(in_ids, backward_fn(g)):
                if nid is None or gi is None:
                    continue
                acc = grads.get(nid)
                grads[nid] = gi if acc is None else acc + gi
        for nid, leaf in self._leaves.items():
            g = grads.get(nid)
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            leaf.grad += np.asarray(g, dtype=leaf.data.dtype)


_tape_stack: list[Tape] = []


class trace:
    """Context manager activating a fresh tape: ``with trace() as tape: ...``."""

    def __enter__(self) -> Tape:
        t = Tape()
        _tape_stack.append(t)
        return t

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _recording(*tensors) -> Tape | None:
    """The active tape, if any input warrants recording this op."""
    tape = active_tape()
    if tape is None:
        return None
    for t in tensors:
        if isinstance(t, Tensor) and tape._live(t):
            return tape
    return None


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    tape = tape or active_tape()
    if tape is None:
        raise ContractError("no tape supplied and none active")
    tape.backward(loss)


# ---------------------------------------------------------------------------
# elementwise ops


def _suffix_ok(sa, sb) -> bool:
    if sa == sb:
        return True
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    return long_[len(long_) - len(short):] == short


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum g over the leading axes a suffix-broadcast introduced."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _binary(a, b, fwd, bwd_a, bwd_b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractError("at least one operand must be a Tensor")
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if not _suffix_ok(a.shape, b.shape):
            raise DimensionError(f"shapes {a.shape} and {b.shape} are not suffix-broadcastable")
        out = Tensor(fwd(a.data, b.data))
        tape = _recording(a, b)
        if tape is not None:
            def backward_fn(g, a=a, b=b):
                return (_reduce_to(bwd_a(g, a.data, b.data), a.shape),
                        _reduce_to(bwd_b(g, a.data, b.data), b.shape))
            tape.record((a, b), out, backward_fn)
        return out
    # scalar operand
    if isinstance(a, Tensor):
        s = float(b)
        out = Tensor(fwd(a.data, s))
        tape = _recording(a)
        if tape is not None:
            tape.record((a,), out, lambda g, a=a, s=s: (bwd_a(g, a.data, s),))
        return out
    s = float(a)
    out = Tensor(fwd(s, b.data))
    tape = _recording(b)
    if tape is not None:
        tape.record((b,), out, lambda g, b=b, s=s: (bwd_b(g, s, b.data),))
    return out


def add(a, b):
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g,
                   lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g,
                   lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y,
                   lambda g, x, y: g * x)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    tape = _recording(a)
    if tape is not None:
        tape.record((a,), out, lambda g, a=a: (g / a.data,))
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    tape = _recording(a)
    if tape is not None:
        tape.record((a,), out, lambda g, out=out: (g * out.data,))
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    tape = _recording(a)
    if tape is not None:
        mask = a.data > 0
        tape.record((a,), out, lambda g, mask=mask: (g * mask,))
    return out


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2] or sa[:-2] != sb[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {sa} x {sb}")
    out = Tensor(np.matmul(a.data, b.data))
    tape = _recording(a, b)
    if tape is not None:
        def backward_fn(g, a=a, b=b):
            return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                    np.matmul(np.swapaxes(a.data, -1, -2), g))
        tape.record((a, b), out, backward_fn)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    tape = _recording(a)
    if tape is not None:
        tape.record((a,), out, lambda g, s=a.shape: (g.reshape(s),))
    return out


def transpose(a: Tensor, ax0=-2, ax1=-1) -> Tensor:
    out = Tensor(np.swapaxes(a.data, ax0, ax1))
    tape = _recording(a)
    if tape is not None:
        tape.record((a,), out, lambda g, ax0=ax0, ax1=ax1: (np.swapaxes(g, ax0, ax1),))
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    tape = _recording(*tensors)
    if tape is not None:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        tape.record(tuple(tensors), out,
                    lambda g, splits=splits, axis=axis: tuple(np.split(g, splits, axis=axis)))
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(np.broadcast_to(a.data, shape).copy())
    tape = _recording(a)
    if tape is not None:
        src = a.shape

        def backward_fn(g, src=src, shape=shape):
            extra = len(shape) - len(src)
            if extra:
                g = g.sum(axis=tuple(range(extra)))
            axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
            if axes:
                g = g.sum(axis=axes, keepdims=True)
            return (g,)

        tape.record((a,), out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# reductions


def _expand_like(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    tape = _recording(a)
    if tape is not None:
        tape.record((a,), out,
                    lambda g, s=a.shape: (_expand_like(g, s, axis, keepdims),))
    return out


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    tape = _recording(a)
    if tape is not None:
        tape.record((a,), out,
                    lambda g, s=a.shape, c=count: (_expand_like(g, s, axis, keepdims) / c,))
    return out


def masked_sum(a: Tensor, mask: np.ndarray) -> Tensor:
    """Sum of a over positions where mask is truthy; mask is a constant."""
    m = np.asarray(mask, dtype=a.data.dtype)
    if not _suffix_ok(m.shape, a.shape):
        raise DimensionError(f"mask shape {m.shape} does not fit tensor shape {a.shape}")
    out = Tensor((a.data * m).sum())
    tape = _recording(a)
    if tape is not None:
        tape.record((a,), out, lambda g, m=m, s=a.shape: (np.broadcast_to(g * m, s),))
    return out


def masked_mean(a: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of a over positions where mask is truthy (mask constant)."""
    m = np.asarray(mask, dtype=a.data.dtype)
    n = m.sum()
    if n == 0:
        raise ContractError("masked_mean over an empty mask")
    return masked_sum(a, m) * (1.0 / float(n))


# ---------------------------------------------------------------------------
# fused neural-net primitives


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    tape = _recording(a)
    if tape is not None:
        def backward_fn(g, y=y, axis=axis):
            return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
        tape.record((a,), out, backward_fn)
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - logz
    out = Tensor(y)
    tape = _recording(a)
    if tape is not None:
        def backward_fn(g, y=y, axis=axis):
            return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)
        tape.record((a,), out, backward_fn)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    tape = _recording(x, gamma, beta)
    if tape is not None:
        def backward_fn(g, xhat=xhat, inv=inv, gamma=gamma, d=d):
            sum_axes = tuple(range(g.ndim - 1))
            gbeta = g.sum(axis=sum_axes)
            ggamma = (g * xhat).sum(axis=sum_axes)
            gx_hat = g * gamma.data
            gx = inv * (gx_hat
                        - gx_hat.mean(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
            return gx, ggamma, gbeta
        tape.record((x, gamma, beta), out, backward_fn)
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; backward scatter-adds into the table gradient."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise ContractError(f"embedding ids out of range [0, {table.shape[0]})")
    out = Tensor(table.data[ids])
    tape = _recording(table)
    if tape is not None:
        def backward_fn(g, table=table, ids=ids):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            return (gt,)
        tape.record((table,), out, backward_fn)
    return out


def gather_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """out[...] = x[..., ids[...]]: select one entry along the last axis."""
    ids = np.asarray(ids)
    if ids.shape != x.shape[:-1]:
        raise DimensionError(f"ids shape {ids.shape} must equal {x.shape[:-1]}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[-1]):
        raise ContractError(f"gather ids out of range [0, {x.shape[-1]})")
    out = Tensor(np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0])
    tape = _recording(x)
    if tape is not None:
        def backward_fn(g, shape=x.shape, ids=ids):
            gx = np.zeros(shape, dtype=g.dtype)
            flat = gx.reshape(-1, shape[-1])
            np.add.at(flat, (np.arange(flat.shape[0]), ids.reshape(-1)), g.reshape(-1))
            return (gx,)
        tape.record((x,), out, backward_fn)
    return out


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0."""
    idx = np.asarray(idx)
    out = Tensor(x.data[idx])
    tape = _recording(x)
    if tape is not None:
        def backward_fn(g, shape=x.shape, idx=idx):
            gx = np.zeros(shape, dtype=g.dtype)
            np.add.at(gx, idx, g)
            return (gx,)
        tape.record((x,), out, backward_fn)
    return out


def put_rows(rows: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Scatter rows into a zero matrix of n_rows rows (add on collisions)."""
    idx = np.asarray(idx)
    data = np.zeros((n_rows,) + rows.shape[1:], dtype=rows.data.dtype)
    np.add.at(data, idx, rows.data)
    out = Tensor(data)
    tape = _recording(rows)
    if tape is not None:
        tape.record((rows,), out, lambda g, idx=idx: (g[idx],))
    return out


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True by value; mask is a constant bool array."""
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError:
        raise DimensionError(f"mask shape {mask.shape} does not broadcast to {x.shape}") from None
    out = Tensor(np.where(mask, np.asarray(value, dtype=x.data.dtype), x.data))
    tape = _recording(x)
    if tape is not None:
        tape.record((x,), out, lambda g, mask=mask: (np.where(mask, 0.0, g),))
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0. Requires an rng when active."""
    if rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout with rate > 0 requires an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


def argmax(x: Tensor, axis: int = -1) -> np.ndarray:
    """Index of the maximum along axis; ties break to the lowest index. No gradient."""
    return np.argmax(x.data, axis=axis)
