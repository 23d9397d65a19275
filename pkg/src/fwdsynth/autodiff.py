"""Dense tensors with taped reverse-mode differentiation.

A ``Tape`` records every differentiable op in execution order. ``backward``
replays the list once in reverse, accumulating vector-Jacobian products into
a per-tensor adjoint table; leaf tensors (those not produced by a recorded
op) receive the result in their ``grad`` field. Ops executed while no tape
is active (or under ``no_grad``) behave as plain numpy calls.

Gradients follow the convention that subgradients at kinks are 0: ``relu``
at 0, ``clamp`` at either boundary, ``abs`` at 0.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError

_DEFAULT_DTYPE = np.float64

# Stack of active tapes; None entries mark no_grad scopes.
_TAPE_STACK: list = []


def set_default_dtype(dtype) -> None:
    """Set the dtype used when tensors are built from untyped data."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise DomainError(f"unsupported default dtype {dt}")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    @property
    def num_ops(self) -> int:
        return len(self._nodes)

    def clear(self) -> None:
        self._nodes.clear()


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    # -- bookkeeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 0:
            axes = None
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self, tape: Tape | None = None) -> None:
        backward(self, tape=tape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def constant(x, dtype=None) -> Tensor:
    return Tensor(x, requires_grad=False, dtype=dtype)


# -- recording core ---------------------------------------------------


def _record(out: Tensor, vjps) -> None:
    """Attach one op to the active tape. vjps: list of (input, fn(g)->array)."""
    tape = _active_tape()
    if tape is not None and vjps:
        tape._nodes.append((out, vjps))


def _wants_grad(*tensors) -> bool:
    if _active_tape() is None:
        return False
    return any(t.requires_grad for t in tensors)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient g of a broadcast result back to an operand shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"operands not broadcastable: {a.shape} vs {b.shape}") from exc


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate dLoss/dLeaf into every requires_grad leaf on the tape.

    Repeated calls without zeroing grads accumulate, which makes gradient
    linearity checks direct. ``loss`` must be scalar.
    """
    if tape is None:
        tape = _active_tape()
    if tape is None:
        raise ShapeError("backward() needs an active or explicit Tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward() requires a scalar loss, got shape {loss.data.shape}")

    adj = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for out, vjps in reversed(tape._nodes):
        g = adj.pop(id(out), None)
        holders.pop(id(out), None)
        if g is None:
            continue
        for inp, fn in vjps:
            contrib = fn(g)
            key = id(inp)
            if key in adj:
                adj[key] = adj[key] + contrib
            else:
                adj[key] = contrib
                holders[key] = inp

    for key, t in holders.items():
        if not t.requires_grad:
            continue
        g = adj[key]
        if t.grad is None:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
        else:
            t.grad = t.grad + g.astype(t.data.dtype, copy=False)


# -- elementwise ops ---------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a.data, b.data)
    out = Tensor(a.data + b.data, requires_grad=_wants_grad(a, b), dtype=a.data.dtype)
    if out.requires_grad:
        vjps = []
        if a.requires_grad:
            vjps.append((a, lambda g, sh=a.data.shape: _unbroadcast(g, sh)))
        if b.requires_grad:
            vjps.append((b, lambda g, sh=b.data.shape: _unbroadcast(g, sh)))
        _record(out, vjps)
    return out


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a.data, b.data)
    out = Tensor(a.data - b.data, requires_grad=_wants_grad(a, b), dtype=a.data.dtype)
    if out.requires_grad:
        vjps = []
        if a.requires_grad:
            vjps.append((a, lambda g, sh=a.data.shape: _unbroadcast(g, sh)))
        if b.requires_grad:
            vjps.append((b, lambda g, sh=b.data.shape: _unbroadcast(-g, sh)))
        _record(out, vjps)
    return out


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a.data, b.data)
    out = Tensor(a.data * b.data, requires_grad=_wants_grad(a, b), dtype=a.data.dtype)
    if out.requires_grad:
        vjps = []
        if a.requires_grad:
            vjps.append((a, lambda g, bd=b.data, sh=a.data.shape: _unbroadcast(g * bd, sh)))
        if b.requires_grad:
            vjps.append((b, lambda g, ad=a.data, sh=b.data.shape: _unbroadcast(g * ad, sh)))
        _record(out, vjps)
    return out


def div(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a.data, b.data)
    out = Tensor(a.data / b.data, requires_grad=_wants_grad(a, b), dtype=a.data.dtype)
    if out.requires_grad:
        vjps = []
        if a.requires_grad:
            vjps.append((a, lambda g, bd=b.data, sh=a.data.shape: _unbroadcast(g / bd, sh)))
        if b.requires_grad:
            vjps.append(
                (b, lambda g, ad=a.data, bd=b.data, sh=b.data.shape: _unbroadcast(-g * ad / (bd * bd), sh))
            )
        _record(out, vjps)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data, requires_grad=_wants_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        _record(out, [(a, lambda g: -g)])
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0), requires_grad=_wants_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        mask = a.data > 0
        _record(out, [(a, lambda g, m=mask: g * m)])
    return out


def tabs(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data), requires_grad=_wants_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        s = np.sign(a.data)
        _record(out, [(a, lambda g, s=s: g * s)])
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    val = np.exp(a.data)
    out = Tensor(val, requires_grad=_wants_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        _record(out, [(a, lambda g, v=val: g * v)])
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive input")
    out = Tensor(np.log(a.data), requires_grad=_wants_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        _record(out, [(a, lambda g, ad=a.data: g / ad)])
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt requires non-negative input")
    val = np.sqrt(a.data)
    out = Tensor(val, requires_grad=_wants_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        _record(out, [(a, lambda g, v=val: g / (2.0 * v))])
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    # Numerically stable: log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    val = np.maximum(a.data, 0) + np.log1p(np.exp(-np.abs(a.data)))
    out = Tensor(val, requires_grad=_wants_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        sig = 1.0 / (1.0 + np.exp(-a.data))
        _record(out, [(a, lambda g, s=sig: g * s)])
    return out


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; the subgradient at either boundary is 0."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi), requires_grad=_wants_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        mask = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            mask &= a.data > lo
        if hi is not None:
            mask &= a.data < hi
        _record(out, [(a, lambda g, m=mask: g * m)])
    return out


# -- reductions --------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), requires_grad=_wants_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        shape = a.data.shape

        def vjp(g, axis=axis, keepdims=keepdims, shape=shape):
            if axis is None:
                return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        _record(out, [(a, vjp)])
    return out


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    out = Tensor(out_data, requires_grad=_wants_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        shape = a.data.shape
        count = a.data.size / max(out_data.size, 1)

        def vjp(g, axis=axis, keepdims=keepdims, shape=shape, count=count):
            if axis is None:
                return np.full(shape, g / count)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g / count, shape).copy()

        _record(out, [(a, vjp)])
    return out


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise DomainError("softmax input contains NaN")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(val, requires_grad=_wants_grad(a), dtype=a.data.dtype)
    if out.requires_grad:

        def vjp(g, v=val, axis=axis):
            dot = (g * v).sum(axis=axis, keepdims=True)
            return v * (g - dot)

        _record(out, [(a, vjp)])
    return out


# -- linear algebra / structure ----------------------------------------


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_wants_grad(a, b), dtype=a.data.dtype)
    if out.requires_grad:
        vjps = []
        if a.requires_grad:
            vjps.append((a, lambda g, bd=b.data: g @ bd.T))
        if b.requires_grad:
            vjps.append((b, lambda g, ad=a.data: ad.T @ g))
        _record(out, vjps)
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), requires_grad=_wants_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        _record(out, [(a, lambda g, sh=a.data.shape: g.reshape(sh))])
    return out


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.transpose(a.data, axes), requires_grad=_wants_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        if axes is None:
            inv = None
        else:
            inv = np.argsort(np.asarray(axes))
        _record(out, [(a, lambda g, inv=inv: np.transpose(g, inv))])
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(data, requires_grad=_wants_grad(*tensors), dtype=tensors[0].data.dtype)
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        vjps = []
        for i, t in enumerate(tensors):
            if not t.requires_grad:
                continue

            def vjp(g, lo=offsets[i], hi=offsets[i + 1], axis=axis):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                return g[tuple(sl)]

            vjps.append((t, vjp))
        _record(out, vjps)
    return out


def take_rows(a, idx) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds into the source."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ShapeError("take_rows indices must be integers")
    out = Tensor(a.data[idx], requires_grad=_wants_grad(a), dtype=a.data.dtype)
    if out.requires_grad:

        def vjp(g, idx=idx, shape=a.data.shape, dtype=a.data.dtype):
            acc = np.zeros(shape, dtype=dtype)
            np.add.at(acc, idx, g)
            return acc

        _record(out, [(a, vjp)])
    return out


def custom_op(output_data, vjps, dtype=None) -> Tensor:
    """Wrap an externally computed forward result as a taped op.

    ``vjps`` is a list of (input_tensor, fn(g) -> grad_array) pairs. Used by
    code whose forward pass runs outside the op vocabulary (the rasterizer).
    """
    inputs = [t for t, _ in vjps]
    req = _wants_grad(*inputs)
    out = Tensor(output_data, requires_grad=req, dtype=dtype)
    if req:
        _record(out, [(t, fn) for t, fn in vjps if t.requires_grad])
    return out


# -- optimizer ---------------------------------------------------------


class AdamState:
    """First/second moment accumulators for a fixed parameter list."""

    __slots__ = ("m", "v", "t")

    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params, grads, state: AdamState, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One in-place Adam update with bias correction."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("parameter/gradient/state lengths differ")
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.data.shape}")
        m = state.m[i]
        v = state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
