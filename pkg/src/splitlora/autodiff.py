"""Dense float64 tensors with a define-by-run reverse-mode tape.

Operations record themselves onto the active :class:`Tape` (entered with a
``with`` block) whenever at least one input requires a gradient. Outside a
tape the same functions run as plain numpy forward passes, which is what the
samplers use.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes or a
scalar operand. Anything else goes through :func:`expand`, so every broadcast
in the model is visible at the call site.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "abs_",
    "elementwise",
    "expand",
    "reshape",
    "transpose",
    "take_rows",
    "concat",
    "silu",
    "softmax_rows",
    "rms_norm",
    "sum_",
    "mean",
    "mse",
    "backward",
    "AdamState",
    "adam_init",
    "adam_step",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_TAPES: list["Tape"] = []


class Tensor:
    """An n-dimensional float64 array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: VJP


@dataclass
class Tape:
    """Ordered record of differentiable ops executed while the tape is active."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: VJP) -> None:
        self.nodes.append(_Node(out, inputs, vjp))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        return backward(loss, self)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: VJP, name: str) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    tape = _active_tape()
    if needs and tape is not None:
        tape.record(out, inputs, vjp)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.size == 1 and t.data.ndim <= 1


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


# --------------------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix shared
    across the batch or carries the same leading axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch axes differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    shared_b = b.data.ndim == 2 and a.data.ndim > 2

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared_b:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _emit(out, (a, b), vjp, "matmul")


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeError(f"transpose needs >= 2 axes, got {a.shape}")
    return _emit(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _emit(out, (a,), lambda g: (g.reshape(src),), "reshape")


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast of ``a`` to ``shape``; the adjoint sums."""
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot expand {a.shape} to {shape}") from None
    src = a.shape
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1
    )

    def vjp(g):
        return (g.sum(axis=axes, keepdims=True).reshape(src) if axes else g.reshape(src),)

    return _emit(out, (a,), vjp, "expand")


def take_rows(table: Tensor, index) -> Tensor:
    """Gather rows of a 2-D table; repeated indices accumulate in the adjoint."""
    table = _as_tensor(table)
    idx = np.asarray(index, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table of {table.shape[0]} rows")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit(table.data[idx], (table,), vjp, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit(out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


# --------------------------------------------------------------------------- elementwise


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _reduce_to(g * b.data, sa), _reduce_to(g * a.data, sb)

    return _emit(a.data * b.data, (a, b), vjp, "mul")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return _emit(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name over {add, sub, mul, scale, abs}; ``scale`` takes a float ``b``."""
    if op in _ELEMENTWISE:
        if b is None:
            raise ShapeError(f"{op} needs two operands")
        return _ELEMENTWISE[op](a, b)
    if op == "scale":
        return scale(a, b)
    if op == "abs":
        return abs_(a)
    raise ValueError(f"unknown elementwise op {op!r}")


def silu(a) -> Tensor:
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig
    return _emit(out, (a,), lambda g: (g * (sig + out * (1.0 - sig)),), "silu")


# --------------------------------------------------------------------------- row-wise


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit(s, (a,), vjp, "softmax_rows")


def rms_norm(a, eps: float = 1e-6) -> Tensor:
    """Scale each row to unit root-mean-square (no learned gain)."""
    a = _as_tensor(a)
    n = a.shape[-1]
    r = np.sqrt((a.data**2).mean(axis=-1, keepdims=True) + eps)
    y = a.data / r

    def vjp(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True) / n) / r,)

    return _emit(y, (a,), vjp, "rms_norm")


# --------------------------------------------------------------------------- reductions


def sum_(a) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.full(src, float(g)),), "sum")


def mean(a) -> Tensor:
    a = _as_tensor(a)
    src, n = a.shape, a.size
    return _emit(np.asarray(a.data.mean()), (a,), lambda g: (np.full(src, float(g) / n),), "mean")


def mse(a, b) -> Tensor:
    """Mean of squared differences between two equally shaped tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def vjp(g):
        ga = (2.0 * float(g) / n) * diff
        return ga, -ga

    return _emit(np.asarray((diff * diff).mean()), (a, b), vjp, "mse")


# --------------------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) through ``tape`` in reverse record order.

    Returns a map from every tensor reachable from ``loss`` to its gradient, and
    stores the gradient on each ``requires_grad`` leaf as ``.grad``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else _active_tape()
    if tape is None or not loss.requires_grad:
        raise ValueError("loss was not recorded on a tape")
    if not any(node.out is loss for node in reversed(tape.nodes)):
        raise ValueError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = inp

    out: dict[Tensor, np.ndarray] = {}
    for key, t in seen.items():
        out[t] = grads[key]
        t.grad = grads[key]
    return out


# --------------------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]


def adam_init(params: Iterable[Tensor]) -> AdamState:
    ps = list(params)
    return AdamState(0, [np.zeros_like(p.data) for p in ps], [np.zeros_like(p.data) for p in ps])


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update.

    Parameters get fresh arrays rather than in-place writes, so arrays already
    captured by an earlier tape stay unchanged. A ``None`` gradient is treated
    as zero.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("params, grads and optimiser state are misaligned")
    step = state.step + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    new_m, new_v = [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ShapeError(f"optimiser state {m.shape} does not match parameter {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m.append(m)
        new_v.append(v)
    return AdamState(step, new_m, new_v)
