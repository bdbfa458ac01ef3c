"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are appended to it in
forward order; :meth:`Tape.gradient` walks the records in exact reverse order
and accumulates vector-Jacobian products. Outside a tape every op is a plain
numpy computation with no bookkeeping, which keeps acting/rollouts cheap.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient flag.

    Constructing from external values validates finiteness; ops build their
    results through :meth:`_wrap`, which skips the check.
    """

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor values must be finite (NaN/Inf rejected)")
        self.data = arr
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __getitem__(self, index):
        return getitem(self, index)


Backward = Callable[[list], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    def __init__(self):
        self.records: list[tuple[tuple[Tensor, ...], tuple[Tensor, ...], Backward]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def record(self, outputs: tuple[Tensor, ...], inputs: tuple[Tensor, ...], backward: Backward) -> None:
        self.records.append((outputs, inputs, backward))

    def gradient(self, loss: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. each source (zeros if unused)."""
        sources = list(sources)
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for outputs, inputs, backward in reversed(self.records):
            gouts = [grads.get(id(o)) for o in outputs]
            if all(g is None for g in gouts):
                continue
            gouts = [np.zeros_like(o.data) if g is None else g for o, g in zip(outputs, gouts)]
            gins = backward(gouts)
            for inp, g in zip(inputs, gins):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = g if prev is None else prev + g
        return [grads[id(s)].copy() if id(s) in grads else np.zeros_like(s.data) for s in sources]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(out_arrays, inputs: tuple[Tensor, ...], backward: Backward):
    """Wrap op outputs and record them when a tape is active."""
    single = not isinstance(out_arrays, tuple)
    arrays = (np.asarray(out_arrays, dtype=np.float64),) if single else out_arrays
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    outs = tuple(Tensor._wrap(a, needs) for a in arrays)
    if needs:
        tape.record(outs, inputs, backward)
    return outs[0] if single else outs


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g[0], a.shape), _unbroadcast(g[0], b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g[0], a.shape), _unbroadcast(-g[0], b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g[0] * b.data, a.shape), _unbroadcast(g[0] * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g[0],))


def square(a: Tensor) -> Tensor:
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * a.data * g[0],))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g[0] * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g[0] * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _emit(y, (a,), lambda g: (g[0] * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g[0] * y,))


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(a, floor)``; zero gradient where the floor binds."""
    if floor > 0.0:
        live = a.data > floor
        x = np.where(live, a.data, floor)
    else:
        live = None
        x = a.data
    return _emit(np.log(x), (a,),
                 lambda g: (g[0] / x if live is None else np.where(live, g[0] / x, 0.0),))


# -- reductions and structure -----------------------------------------------

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    y = np.sum(a.data, axis=axis)

    def back(g):
        gg = g[0] if axis is None else np.expand_dims(g[0], axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _emit(np.asarray(y, dtype=np.float64), (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    y = np.mean(a.data, axis=axis)

    def back(g):
        gg = g[0] if axis is None else np.expand_dims(g[0], axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)

    return _emit(np.asarray(y, dtype=np.float64), (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g[0] @ b.data.T, a.data.T @ g[0]))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    arrays = [t.data for t in tensors]
    ax = axis % arrays[0].ndim
    bounds = np.cumsum([a.shape[ax] for a in arrays])[:-1]

    def back(g):
        return tuple(np.split(g[0], bounds, axis=ax))

    return _emit(np.concatenate(arrays, axis=ax), tensors, back)


def _basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int)) or p is Ellipsis for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    basic = _basic_index(index)

    def back(g):
        out = np.zeros_like(a.data)
        if basic:
            out[index] = g[0]
        else:
            np.add.at(out, index, g[0])
        return (out,)

    return _emit(np.array(a.data[index], dtype=np.float64), (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    return _emit(a.data.reshape(shape), (a,), lambda g: (g[0].reshape(a.shape),))


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilised by max subtraction."""
    x = logits.data
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def back(g):
        gy = g[0]
        return (y * (gy - (gy * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (logits,), back)


def one_hot(indices, n: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros(indices.shape + (n,))
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out
