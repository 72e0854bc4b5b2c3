"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations are recorded on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside of a tape nothing is recorded,
so forward passes there behave like plain numpy (``no_grad`` semantics).

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape():
    ...     loss = sum(square(x))
    ...     _ = backward(loss)
    >>> x.grad
    array([2., 4.])

Binary operations accept equal shapes or a 0-d scalar on either side;
anything else needs an explicit ``reshape``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, EmptyReduction, NoTape, NotScalar, ShapeMismatch, TapeConsumed

__all__ = [
    "Tensor", "Tape", "tensor", "elementwise", "add", "sub", "mul", "div", "neg",
    "exp", "log", "relu", "sigmoid", "square", "smooth_l1", "matmul", "conv2d",
    "softmax", "log_softmax", "reduce", "sum", "mean", "max", "reshape",
    "transpose", "take", "detach", "backward", "grad_check", "inject_backward_fault",
]

_TAPES: list["Tape"] = []
_FAULTY_OPS: set[str] = set()
_STRICT_LOG = True


class Tensor:
    """n-d float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape_id", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_id: tuple[Tape, int] | None = None
        self.op: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations; creation order is a topological order."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    @contextlib.contextmanager
    def paused(self):
        """Temporarily stop recording (used for detached teacher passes)."""
        idx = _TAPES.index(self)
        _TAPES.pop(idx)
        try:
            yield
        finally:
            _TAPES.insert(idx, self)

    def reset(self) -> None:
        for out, _, _ in self.nodes:
            out.tape_id = None
        self.nodes = []
        self.consumed = False

    def leaves(self) -> list[Tensor]:
        """Leaf tensors (parameters) reachable from the recorded nodes."""
        seen: dict[int, Tensor] = {}
        for _, parents, _ in self.nodes:
            for p in parents:
                if p.requires_grad and p.tape_id is None:
                    seen.setdefault(id(p), p)
        return list(seen.values())


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _on_tape(t: Tensor, tape: Tape) -> bool:
    return t.tape_id is not None and t.tape_id[0] is tape


def _wants_grad(t: Tensor) -> bool:
    return t.requires_grad or t.tape_id is not None


def _record(op: str, out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.tape_id = None
    result.op = op
    result.requires_grad = False
    tape = _active_tape()
    if tape is None or tape.consumed:
        return result
    if not any(p.requires_grad or _on_tape(p, tape) for p in parents):
        return result
    if op in _FAULTY_OPS:
        inner = backward_fn

        def backward_fn(g, _inner=inner):
            return tuple(None if x is None else 1.5 * x for x in _inner(g))

    result.requires_grad = True
    result.tape_id = (tape, len(tape.nodes))
    tape.nodes.append((result, tuple(parents), backward_fn))
    return result


@contextlib.contextmanager
def inject_backward_fault(*ops: str):
    """Scale the backward rule of the named ops by 1.5 (verification fault injection)."""
    added = set(ops) - _FAULTY_OPS
    _FAULTY_OPS.update(added)
    try:
        yield
    finally:
        _FAULTY_OPS.difference_update(added)


@contextlib.contextmanager
def strict_log(enabled: bool):
    global _STRICT_LOG
    prev, _STRICT_LOG = _STRICT_LOG, enabled
    try:
        yield
    finally:
        _STRICT_LOG = prev


# ---------------------------------------------------------------- elementwise

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} are not equal and neither is a scalar")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "div")
    if _STRICT_LOG and np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return _record("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if _STRICT_LOG and np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _record("log", out, (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    # np.maximum keeps NaN so corrupt inputs surface as a non-finite loss
    return _record("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # two-sided form avoids exp overflow for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _record("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def smooth_l1(a) -> Tensor:
    """Huber loss with unit transition: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    a = _as_tensor(a)
    x = a.data
    ax = np.abs(x)
    small = ax < 1.0
    out = np.where(small, 0.5 * x * x, ax - 0.5)
    return _record("smooth_l1", out, (a,), lambda g: (g * np.where(small, x, np.sign(x)),))


_UNARY = {"neg": neg, "exp": exp, "log": log, "relu": relu, "sigmoid": sigmoid,
          "square": square, "smooth_l1": smooth_l1}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"{op_kind} takes one operand")
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _record("matmul", a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation (no kernel flip).

    ``x`` is ``Cin x H x W`` or batched ``N x Cin x H x W``; ``kernel`` is
    ``Cout x Cin x kh x kw`` with odd extents; optional ``bias`` has shape
    ``(Cout,)``. Output extent is ``floor((H + 2p - kh) / stride) + 1``.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    parents = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        parents.append(bias)
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise ShapeMismatch(f"conv2d: bad ranks {x.shape}, {kernel.shape}")
    xd = x.data if batched else x.data[None]
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeMismatch(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch("conv2d: kernel extents must be odd")
    if bias is not None and bias.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride >= 1 and padding >= 0 required")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"conv2d: empty output for input {h}x{w}, kernel {kh}x{kw}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, Ho, Wo, Cin, kh, kw) -> rows of im2col
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = kernel.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out if batched else out[0])

    def bw(g):
        g4 = g if batched else g[None]
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        dk = (gmat.T @ cols).reshape(kernel.shape) if _wants_grad(kernel) else None
        dx = None
        if _wants_grad(x):
            dcols = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            if not batched:
                dx = dx[0]
        grads = [dx, dk]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return tuple(grads)

    return _record("conv2d", out, parents, bw)


# ------------------------------------------------------------------ softmax

def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _record("softmax", out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _record("log_softmax", out, (a,), bw)


# ---------------------------------------------------------------- reductions

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    normed = tuple(_norm_axis(ax, ndim) for ax in axes)
    if len(set(normed)) != len(normed):
        raise ValueError(f"reduce: repeated axes {axes}")
    return normed


def reduce(op_kind: str, a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise EmptyReduction(f"{op_kind}: reduced axis has extent 0 in shape {a.shape}")
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    if op_kind == "sum":
        out = a.data.sum(axis=axes)
        return _record("sum", out, (a,), lambda g: (np.broadcast_to(np.reshape(g, kept), a.shape).copy(),))
    if op_kind == "mean":
        count = int(np.prod([a.shape[ax] for ax in axes], dtype=np.int64))
        out = a.data.sum(axis=axes) / count
        return _record("mean", out, (a,),
                       lambda g: (np.broadcast_to(np.reshape(g, kept) / count, a.shape).copy(),))
    if op_kind == "max":
        out = a.data.max(axis=axes)
        hit = a.data == np.reshape(out, kept)
        share = hit / hit.sum(axis=axes, keepdims=True)
        return _record("max", out, (a,), lambda g: (share * np.reshape(g, kept),))
    raise ValueError(f"unknown reduction {op_kind!r}")


def sum(a, axes=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return reduce("sum", a, axes)


def mean(a, axes=None) -> Tensor:
    return reduce("mean", a, axes)


def max(a, axes=None) -> Tensor:  # noqa: A001
    return reduce("max", a, axes)


# ------------------------------------------------------------ shape plumbing

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def take(a, indices, axis: int) -> Tensor:
    """Gather ``indices`` along ``axis`` (duplicates allowed; gradients accumulate)."""
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (ga,)
    return _record("take", out, (a,), bw)


def detach(a: Tensor) -> Tensor:
    """Off-tape view sharing data; gradients never flow through it."""
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.requires_grad = False
    out.grad = None
    out.tape_id = None
    out.op = "detach"
    return out


# ------------------------------------------------------------------ backward

def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map from leaf tensor to the gradient contributed by this call.
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape_id is not None:
        tape, end = loss.tape_id
    else:
        tape = tape or _active_tape()
        if tape is None:
            raise NoTape("loss is not on a tape and no tape is active")
        end = -1  # constant loss: nothing to propagate
    if tape.consumed:
        raise TapeConsumed("backward already ran on this tape; call reset() first")
    tape.consumed = True

    contributed: dict[Tensor, np.ndarray] = {}
    if end < 0:
        for leaf in tape.leaves():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            contributed[leaf] = np.zeros_like(leaf.data)
        return contributed

    grads: dict[int, np.ndarray] = {end: np.ones_like(loss.data)}
    for idx in range(end, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        _, parents, fn = tape.nodes[idx]
        for parent, pg in zip(parents, fn(g)):
            if pg is None:
                continue
            if _on_tape(parent, tape):
                pidx = parent.tape_id[1]
                if pidx in grads:
                    grads[pidx] = grads[pidx] + pg
                else:
                    grads[pidx] = pg
            elif parent.requires_grad:
                if parent in contributed:
                    contributed[parent] = contributed[parent] + pg
                else:
                    contributed[parent] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
    for leaf in tape.leaves():
        contributed.setdefault(leaf, np.zeros_like(leaf.data))
    for leaf, g in contributed.items():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return contributed


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               coords: Iterable[int] | None = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``coords`` optionally restricts the probe to a subset of flat indices.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    saved_grad, saved_flag = x.grad, x.requires_grad
    x.grad, x.requires_grad = None, True
    try:
        with Tape() as tape:
            out = f(x)
            backward(out, tape)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    finally:
        x.grad, x.requires_grad = saved_grad, saved_flag

    flat = x.data.reshape(-1)
    assert np.shares_memory(flat, x.data), "grad_check needs a contiguous tensor"
    idxs = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        num = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - num) / np.maximum(1.0, abs(a))
        if not np.isfinite(err):
            return float("inf")
        worst = err if err > worst else worst
    return float(worst)
