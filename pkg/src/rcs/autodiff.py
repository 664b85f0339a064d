"""Dense tensors with reverse-mode differentiation on a dynamic tape.

The engine is deliberately small: float64 values, a per-pass Tape holding
primitive applications in execution order, and backward closures replayed
in reverse. Reverse execution order is a valid reverse topological order
because every operand must already exist when an op records itself.

Tensors are treated as immutable once produced. A Tape is single-owner;
independent passes on disjoint tapes may run concurrently.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "relu",
    "exp",
    "log",
    "l2_normalize",
    "softmax",
    "log_softmax",
    "logsumexp",
    "sign",
    "clamp",
    "reshape",
    "matmul",
    "gather_rows",
    "cosine_similarity",
    "finite_difference_gradient",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class DomainError(ValueError):
    """A primitive produced non-finite values from an invalid input domain."""


def _shape_err(op: str, *shapes) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


class Tensor:
    """Dense float64 array with an optional same-shape gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, axis, keepdims, np.sum, scale=None)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return _reduce(self, axis, keepdims, np.mean, scale=1.0 / n)

    def transpose(self) -> "Tensor":
        return transpose(self)

    # ---- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; multiply by a reciprocal")
        return mul(self, _as_tensor(1.0 / float(other)))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.data.shape)}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager; ops executed inside record themselves when any
    input requires a gradient. ``backward`` may be called repeatedly and
    accumulates into ``.grad`` until ``reset`` is called.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def reset(self) -> None:
        self._nodes.clear()

    def backward(self, loss: Tensor, wrt=None) -> dict:
        """Propagate adjoints from a scalar ``loss`` back to leaves.

        Returns a map from leaf Tensor to its gradient array and accumulates
        the same values into each leaf's ``.grad``. When ``wrt`` is given only
        those tensors receive/report gradients; a leaf the loss does not reach
        gets a zero gradient rather than an error.
        """
        if not isinstance(loss, Tensor):
            raise TypeError("backward expects a Tensor loss")
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {tuple(loss.data.shape)}")

        buffers: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self._nodes):
            g = buffers.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None:
                    continue
                prev = buffers.get(id(inp))
                buffers[id(inp)] = gi if prev is None else prev + gi

        if wrt is None:
            produced = {id(out) for out, _, _ in self._nodes}
            seen: set[int] = set()
            targets = []
            for _, inputs, _ in self._nodes:
                for inp in inputs:
                    if inp.requires_grad and id(inp) not in produced and id(inp) not in seen:
                        seen.add(id(inp))
                        targets.append(inp)
        else:
            targets = list(wrt)

        grads: dict = {}
        for t in targets:
            g = buffers.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            else:
                g = np.asarray(g, dtype=np.float64)
                if g.shape != t.data.shape:
                    g = g.reshape(t.data.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g
            grads[t] = g
        return grads


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _STACK and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _STACK[-1]._nodes.append((out, inputs, backward_fn))
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise _shape_err(op, a.data.shape, b.data.shape) from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data)
    ash, bsh = a.data.shape, b.data.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data)
    ash, bsh = a.data.shape, b.data.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise _shape_err("matmul", a.data.shape, b.data.shape)
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise _shape_err("transpose", a.data.shape)
    out = Tensor(a.data.T.copy())
    return _record(out, (a,), lambda g: (g.T,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    pos = a.data > 0.0
    return _record(out, (a,), lambda g: (g * pos,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))
    od = out.data
    return _record(out, (a,), lambda g: (g * od,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.log(a.data) if np.all(a.data > 0.0) else None
    if out_data is None or not np.all(np.isfinite(out_data)):
        raise DomainError("log: input outside (0, inf) produced non-finite values")
    out = Tensor(out_data)
    ad = a.data
    return _record(out, (a,), lambda g: (g / ad,))


def _reduce(a: Tensor, axis, keepdims: bool, fn, scale) -> Tensor:
    out = Tensor(fn(a.data, axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def backward(g):
        if axis is None:
            gexp = np.broadcast_to(g, shape)
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
            gexp = np.broadcast_to(gk, shape)
        if scale is None:
            return (np.ascontiguousarray(gexp),)
        return (gexp * scale,)

    return _record(out, (a,), backward)


def l2_normalize(a) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm.

    Rows with norm <= 1e-12 map to zero with zero gradient (the continuous
    extension a zero-bias model needs at initialization).
    """
    a = _as_tensor(a)
    norms = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    live = norms > 1e-12
    safe = np.where(live, norms, 1.0)
    with np.errstate(invalid="ignore"):  # non-finite inputs propagate as nan
        y = (a.data / safe) * live
    out = Tensor(y)

    def backward(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return (((g - y * dot) / safe) * live,)

    return _record(out, (a,), backward)


def softmax(a) -> Tensor:
    """Softmax along the last axis with max-subtraction for stability."""
    a = _as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise DomainError("softmax: non-finite input")
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), backward)


def logsumexp(a) -> Tensor:
    """log(sum(exp(x))) along the last axis, reducing it."""
    a = _as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise DomainError("logsumexp: non-finite input")
    m = np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = np.sum(e, axis=-1, keepdims=True)
    out = Tensor((np.log(s) + m).squeeze(-1))
    soft = e / s

    def backward(g):
        return (np.expand_dims(g, -1) * soft,)

    return _record(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError:
        raise _shape_err("reshape", a.data.shape, shape) from None
    orig = a.data.shape
    return _record(out, (a,), lambda g: (g.reshape(orig),))


def log_softmax(a) -> Tensor:
    """Stable log of the softmax along the last axis (never underflows)."""
    a = _as_tensor(a)
    lse = logsumexp(a)
    return sub(a, reshape(lse, lse.data.shape + (1,)))


def sign(a) -> Tensor:
    """Elementwise sign with sign(0) = 0; gradient is zero a.e."""
    a = _as_tensor(a)
    out = Tensor(np.sign(a.data))
    zeros = np.zeros_like(a.data)
    return _record(out, (a,), lambda g: (zeros,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes only strictly inside the interval."""
    if not lo <= hi:
        raise ValueError(f"clamp: empty interval [{lo}, {hi}]")
    a = _as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data > lo) & (a.data < hi)
    return _record(out, (a,), lambda g: (g * inside,))


def gather_rows(a, index) -> Tensor:
    """Select rows (axis 0) by an integer index array; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if a.data.ndim < 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0])):
        raise _shape_err("gather_rows", a.data.shape, idx.shape)
    out = Tensor(a.data[idx])
    shape = a.data.shape

    def backward(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return _record(out, (a,), backward)


def cosine_similarity(a, b) -> Tensor:
    """Rowwise cosine similarity p.q / (|p||q|) along the last axis."""
    return mul(l2_normalize(a), l2_normalize(b)).sum(axis=-1)


# ---------------------------------------------------------------------------
# numerical oracle
# ---------------------------------------------------------------------------


def finite_difference_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, coordinate-wise.

    ``f`` receives a plain ndarray and must return a float. Used as the
    independent oracle for backward-pass checks.
    """
    if h <= 0:
        raise ValueError("finite_difference_gradient: h must be positive")
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = h
        fp = float(f((flat + step).reshape(x.shape)))
        fm = float(f((flat - step).reshape(x.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"finite_difference_gradient: non-finite evaluation at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)
