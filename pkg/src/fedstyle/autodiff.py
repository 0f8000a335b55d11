"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array. Operations executed inside a
``record()`` context append (output, inputs, backward-rule) entries to the
ambient :class:`Tape` in execution order, which is by construction a
topological order of the computation DAG. ``backward(loss)`` walks those
entries in reverse and accumulates gradients into the ``.grad`` buffer of
every reachable leaf that has ``requires_grad``.

Conventions that the rest of the package relies on:

* everything is float64; ops raise ``FloatingPointError`` the moment a
  non-finite value appears, rather than letting NaN/Inf propagate;
* ``.data`` arrays are never mutated in place — backward rules capture
  references to forward-time arrays, so updates rebind (``p.data = ...``);
* outside a ``record()`` context ops compute forward values only, which
  doubles as an eval / no-grad mode.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "record", "backward", "sgd_step", "zero_grads",
    "clip_grad_norm", "constant", "parameter", "as_tensor",
    "add", "sub", "mul", "mul_scalar", "matmul", "transpose", "relu",
    "exp", "log", "sum", "mean", "concat", "l2_normalize", "cosine_sim",
    "detach", "batchnorm1d",
]


class Tensor:
    """Dense float64 array participating in recorded differentiable computation."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _require_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None  # tape that produced this tensor; None = leaf

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations: (output, inputs, backward rule).

    Execution order guarantees every entry's inputs were created before the
    entry itself, so a single reverse sweep is a valid reverse-topological
    traversal.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self.entries)


_STATE = threading.local()  # clients may train on worker threads


def _active_tape() -> Tape | None:
    return getattr(_STATE, "tape", None)


@contextlib.contextmanager
def record(tape: Tape | None = None):
    """Install ``tape`` (or a fresh one) as this thread's recording target."""
    prev = _active_tape()
    _STATE.tape = tape if tape is not None else Tape()
    try:
        yield _STATE.tape
    finally:
        _STATE.tape = prev


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{what} produced a non-finite value")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Tensor that never requires grad (masks, cached features, targets)."""
    return Tensor(x, requires_grad=False)


def parameter(x) -> Tensor:
    return Tensor(x, requires_grad=True)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], rule: Callable, op: str) -> Tensor:
    _require_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.entries.append((out, inputs, rule))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# forward ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}") from e

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}") from e

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e
    a_data, b_data = a.data, b.data

    def rule(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _emit(data, (a, b), rule, "mul")


def mul_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def rule(g):
        return (g * c,)

    return _emit(a.data * c, (a,), rule, "mul_scalar")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def rule(g):
        return g @ b_data.T, a_data.T @ g

    return _emit(a_data @ b_data, (a, b), rule, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose: expected a matrix, got shape {a.shape}")

    def rule(g):
        return (g.T,)

    return _emit(a.data.T.copy(), (a,), rule, "transpose")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0

    def rule(g):
        return (g * mask,)

    return _emit(np.where(mask, a.data, 0.0), (a,), rule, "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def rule(g):
        return (g * data,)

    return _emit(data, (a,), rule, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    a_data = a.data

    def rule(g):
        return (g / a_data,)

    return _emit(data, (a,), rule, "log")


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - deliberate op name
    a = as_tensor(a)
    shape = a.shape

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(np.sum(a.data, axis=axis), (a,), rule, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.data.size if axis is None else shape[axis]
    if n == 0:
        raise ValueError("mean: empty reduction")

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return _emit(np.mean(a.data, axis=axis), (a,), rule, "mean")


def concat(a, b, axis: int = 0) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = np.concatenate([a.data, b.data], axis=axis)
    except ValueError as e:
        raise ValueError(f"concat: incompatible shapes {a.shape} and {b.shape} on axis {axis}") from e
    split = a.shape[axis]

    def rule(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return _emit(data, (a, b), rule, "concat")


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale slices along ``axis`` to unit L2 norm.

    Slices whose norm is <= eps map to the zero vector and receive zero
    gradient (documented degenerate case — there is no useful direction).
    """
    if eps <= 0:
        raise ValueError("l2_normalize: eps must be positive")
    a = as_tensor(a)
    norm = np.sqrt(np.square(a.data).sum(axis=axis, keepdims=True))
    ok = norm > eps
    safe = np.where(ok, norm, 1.0)
    data = np.where(ok, a.data / safe, 0.0)

    def rule(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (np.where(ok, (g - data * dot) / safe, 0.0),)

    return _emit(data, (a,), rule, "l2_normalize")


def cosine_sim(a, b, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Cosine similarity along ``axis`` (zero-norm slices yield 0)."""
    na = l2_normalize(a, axis=axis, eps=eps)
    nb = l2_normalize(b, axis=axis, eps=eps)
    return sum(mul(na, nb), axis=axis if axis >= 0 else na.ndim + axis)


def detach(a) -> Tensor:
    """Copy of ``a`` cut out of the graph: gradient does not flow through."""
    a = as_tensor(a)
    return Tensor(a.data.copy(), requires_grad=False)


def batchnorm1d(x, gamma, beta, running_mean, running_var,
                eps: float = 1e-5, momentum: float = 0.9,
                training: bool = True) -> Tensor:
    """Batch normalization over axis 0 of a (B, D) tensor.

    Training mode normalizes with per-batch statistics (biased variance) and
    folds them into the running buffers with the given momentum; eval mode
    normalizes with the running buffers. ``running_mean``/``running_var`` are
    plain tensors whose ``.data`` is rebound here — the one sanctioned side
    effect in this module.
    """
    if eps <= 0:
        raise ValueError("batchnorm1d: eps must be positive")
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"batchnorm1d: expected (B, D) input, got {x.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError("batchnorm1d: gamma/beta shape mismatch")

    if training:
        if x.shape[0] < 2:
            raise ValueError("batchnorm1d: training mode needs a batch of at least 2")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean.data = momentum * running_mean.data + (1.0 - momentum) * mu
        running_var.data = momentum * running_var.data + (1.0 - momentum) * var
    else:
        mu = running_mean.data
        var = running_var.data

    std = np.sqrt(var + eps)
    xhat = (x.data - mu) / std
    data = gamma.data * xhat + beta.data
    gamma_data = gamma.data

    if training:
        def rule(g):
            gx = (g - g.mean(axis=0) - xhat * (g * xhat).mean(axis=0)) * (gamma_data / std)
            return gx, (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        def rule(g):
            return g * (gamma_data / std), (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit(data, (x, gamma, beta), rule, "batchnorm1d")


# ---------------------------------------------------------------------------
# backward pass and optimizer


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every reachable requires_grad leaf of ``loss``.

    Leaves the tape never produced (parameters, constants from other tapes)
    accumulate into their ``.grad``; unreachable leaves are left untouched.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("backward: loss was not recorded on a tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for out, inputs, rule in reversed(tape.entries):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        grads = rule(g)
        for inp, gi in zip(inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=np.float64)
            _require_finite(gi, "backward")
            if inp._tape is tape:
                acc = pending.get(id(inp))
                pending[id(inp)] = gi if acc is None else acc + gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


def sgd_step(params: Iterable[Tensor] | Sequence[Tensor], lr: float) -> None:
    """p <- p - lr * grad for every tensor, then clear the grads.

    Rebinds ``.data`` (no in-place mutation) so backward rules recorded
    earlier on the same tape keep their forward-time values.
    """
    if lr < 0:
        raise ValueError("sgd_step: learning rate must be non-negative")
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError("sgd_step: parameter has no gradient (missing backward?)")
    for p in params:
        p.data = p.data - lr * p.grad
        p.grad = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. Skips tensors without gradients.
    """
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(np.sum([np.square(p.grad).sum() for p in params])))
    if total > max_norm > 0:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
    return total
