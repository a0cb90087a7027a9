"""Dense float64 tensors with taped reverse-mode differentiation.

The execution model is a Wengert list: while a ``Tape`` is active, every
operation appends a backward closure to it.  ``Tape.backward`` walks the list
in reverse exactly once, accumulating gradients in recording order so repeated
runs are bit-identical.  Outside a tape, the same functions are plain numpy
compute (evaluation mode).
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "reduce_sum",
    "softmax",
    "concat",
    "gather_rows",
    "slice_rows",
    "slice_cols",
    "dropout",
    "layer_norm",
    "batch_norm",
    "BatchNormState",
    "glorot_uniform",
    "zero_grads",
]


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf; the computation is in an error state."""


class TapeError(RuntimeError):
    """Tape protocol violation (reuse, nesting, or a non-scalar root)."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"tensors are at most 2-D, got shape {arr.shape}")
    return arr


class Tensor:
    """A float64 array plus the gradient slot filled in by ``Tape.backward``."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Arithmetic sugar; the free functions do the real work.
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records operations so gradients can be replayed once, in reverse.

    Use as a context manager around the forward build::

        with Tape() as tape:
            loss = ...
        tape.backward(loss)
    """

    _current: Optional["Tape"] = None

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._consumed = False
        self._recorded_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        if Tape._current is not None:
            raise TapeError("a Tape is already active; nested tapes are not supported")
        Tape._current = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        Tape._current = None

    def _record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward))
        self._recorded_ids.add(id(out))

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(tensor) into ``.grad`` of every antecedent."""
        if self._consumed:
            raise TapeError("this tape was already used for a backward pass")
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        if id(root) not in self._recorded_ids and root.requires_grad:
            raise TapeError("backward root was not produced under this tape")
        self._consumed = True
        root.grad = np.ones_like(root.data)
        for out, backward in reversed(self._nodes):
            if out.grad is None:
                continue  # branch not on any path to the root
            backward(out.grad)

    def __len__(self) -> int:
        return len(self._nodes)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Copy on the first contribution: callers may pass views of live buffers.
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray, Tensor], None]) -> Tensor:
    """Finalize an op: finiteness check, then record on the active tape."""
    _check_finite(data, op)
    tape = Tape._current
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        assert tape is not None

        def run(g: np.ndarray, _backward=backward, _out=out) -> None:
            _backward(g, _out)

        tape._record(out, run)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting; gradients are un-broadcast)

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data + b.data

    def backward(g, out):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make("add", data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data - b.data

    def backward(g, out):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make("sub", data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data * b.data

    def backward(g, out):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make("mul", data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def backward(g, out):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make("div", data, (a, b), backward)


def neg(a) -> Tensor:
    a = _coerce(a)

    def backward(g, out):
        if a.requires_grad:
            _accumulate(a, -g)

    return _make("neg", -a.data, (a,), backward)


def scale(a, c: float) -> Tensor:
    """Multiply by a plain python float (no gradient to the constant)."""
    a = _coerce(a)
    c = float(c)

    def backward(g, out):
        if a.requires_grad:
            _accumulate(a, g * c)

    return _make("scale", a.data * c, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g, out):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make("matmul", data, (a, b), backward)


def transpose(a) -> Tensor:
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")

    def backward(g, out):
        if a.requires_grad:
            _accumulate(a, g.T)

    return _make("transpose", a.data.T.copy(), (a,), backward)


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def exp(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def backward(g, out):
        if a.requires_grad:
            _accumulate(a, g * out.data)

    return _make("exp", data, (a,), backward)


def log(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def backward(g, out):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return _make("log", data, (a,), backward)


def tanh(a) -> Tensor:
    a = _coerce(a)
    data = np.tanh(a.data)

    def backward(g, out):
        if a.requires_grad:
            _accumulate(a, g * (1.0 - out.data * out.data))

    return _make("tanh", data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(g, out):
        if a.requires_grad:
            _accumulate(a, g * out.data * (1.0 - out.data))

    return _make("sigmoid", data, (a,), backward)


def relu(a) -> Tensor:
    a = _coerce(a)
    data = np.maximum(a.data, 0.0)

    def backward(g, out):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0.0))

    return _make("relu", data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and structure

def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g, out):
        if not a.requires_grad:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy()
                        if np.ndim(g) == a.data.ndim else np.full_like(a.data, float(g)))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make("sum", data, (a,), backward)


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax along ``axis``.

    ``mask`` (same-shape, 1.0 = keep, 0.0 = drop) excludes entries from the
    distribution; masked positions get probability exactly 0.  A slice with no
    valid entries is an error — an empty set has no distribution.
    """
    a = _coerce(a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax mask shape {mask.shape} != input {x.shape}")
        neg = np.where(mask > 0.0, x, -np.inf)
    else:
        neg = x
    mx = neg.max(axis=axis, keepdims=True)
    if not np.all(np.isfinite(mx)):
        raise ShapeError("softmax over an empty (fully masked) slice")
    ex = np.exp(neg - mx)
    denom = ex.sum(axis=axis, keepdims=True)
    data = ex / denom

    def backward(g, out):
        if a.requires_grad:
            y = out.data
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accumulate(a, y * (g - dot))

    return _make("softmax", data, (a,), backward)


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g, out):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(idx)])

    return _make("concat", data, tuple(parts), backward)


def gather_rows(a, idx) -> Tensor:
    """Select rows ``a[idx]``; backward scatter-adds into the source rows."""
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D tensor, got {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows index out of range for {a.shape[0]} rows")
    data = a.data[idx]

    def backward(g, out):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

    return _make("gather_rows", data, (a,), backward)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _coerce(a)
    if a.ndim != 2 or not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] invalid for shape {a.shape}")
    data = a.data[start:stop].copy()

    def backward(g, out):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[start:stop] += g

    return _make("slice_rows", data, (a,), backward)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _coerce(a)
    if a.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] invalid for shape {a.shape}")
    data = a.data[:, start:stop].copy()

    def backward(g, out):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[:, start:stop] += g

    return _make("slice_cols", data, (a,), backward)


# ---------------------------------------------------------------------------
# stochastic / normalization layers

def dropout(a, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout: active units are scaled by 1/(1-p) at train time so
    evaluation is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    a = _coerce(a)
    if not train or p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(np.float64) / (1.0 - p)
    data = a.data * keep

    def backward(g, out):
        if a.requires_grad:
            _accumulate(a, g * keep)

    return _make("dropout", data, (a,), backward)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then affine."""
    a, gamma, beta = _coerce(a), _coerce(gamma), _coerce(beta)
    if a.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-D tensor, got {a.shape}")
    d = a.shape[1]
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def backward(g, out):
        if gamma.requires_grad:
            _accumulate(gamma, _unbroadcast(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            _accumulate(beta, _unbroadcast(g, beta.data.shape))
        if a.requires_grad:
            dxhat = g * gamma.data
            term = d * dxhat - dxhat.sum(axis=1, keepdims=True) \
                - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
            _accumulate(a, inv / d * term)

    return _make("layer_norm", data, (a, gamma, beta), backward)


class BatchNormState:
    """Running statistics for batch normalization (not trained by gradient)."""

    __slots__ = ("running_mean", "running_var", "momentum", "eps")

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(dim, dtype=np.float64)
        self.running_var = np.ones(dim, dtype=np.float64)
        self.momentum = float(momentum)
        self.eps = float(eps)


def batch_norm(a, gamma, beta, state: BatchNormState, train: bool) -> Tensor:
    """Normalize each column by batch statistics (train) or running stats (eval)."""
    a, gamma, beta = _coerce(a), _coerce(gamma), _coerce(beta)
    if a.ndim != 2:
        raise ShapeError(f"batch_norm needs a 2-D tensor, got {a.shape}")
    n = a.shape[0]
    eps = state.eps
    if train:
        mu = a.data.mean(axis=0, keepdims=True)
        xc = a.data - mu
        var = (xc * xc).mean(axis=0, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.ravel()
        state.running_var = (1 - m) * state.running_var + m * var.ravel()
    else:
        inv = 1.0 / np.sqrt(state.running_var[None, :] + eps)
        xhat = (a.data - state.running_mean[None, :]) * inv
    data = xhat * gamma.data + beta.data

    def backward(g, out):
        if gamma.requires_grad:
            _accumulate(gamma, _unbroadcast(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            _accumulate(beta, _unbroadcast(g, beta.data.shape))
        if a.requires_grad:
            if train:
                dxhat = g * gamma.data
                term = n * dxhat - dxhat.sum(axis=0, keepdims=True) \
                    - xhat * (dxhat * xhat).sum(axis=0, keepdims=True)
                _accumulate(a, inv / n * term)
            else:
                _accumulate(a, g * gamma.data * inv)

    return _make("batch_norm", data, (a, gamma, beta), backward)


# ---------------------------------------------------------------------------
# parameter helpers

def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int | None = None, fan_out: int | None = None,
                   name: str | None = None) -> Tensor:
    """Trainable tensor drawn uniformly from ±sqrt(6/(fan_in+fan_out))."""
    if fan_in is None:
        fan_in = shape[0] if len(shape) == 2 else shape[-1]
    if fan_out is None:
        fan_out = shape[1] if len(shape) == 2 else shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
