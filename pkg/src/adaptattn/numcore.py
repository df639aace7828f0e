"""Dense numpy tensors with define-by-run reverse-mode autodiff.

Every op builds a fresh graph node; nothing is reused across forward passes.
Detached values can be frozen and replayed (see ``frozen_detach``) so that the
finite-difference oracle differentiates the same function as ``backward``.
"""

from __future__ import annotations

import contextlib
import math
import zlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# Multiply-add counter (active only inside ``count_flops``) and the per-entry
# cost charged to a softmax: max, subtract, exp, sum, divide.
SOFTMAX_COST = 5

_grad_enabled = True
_flop_counter: list[int] | None = None
_detach_tape: dict | None = None


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def count_flops() -> Iterator[list[int]]:
    """Count multiply-adds of matmuls and softmax entries inside the block.

    Yields a one-element list whose item holds the running count.
    """
    global _flop_counter
    prev = _flop_counter
    _flop_counter = [0]
    try:
        yield _flop_counter
    finally:
        _flop_counter = prev


def _charge(n: int) -> None:
    if _flop_counter is not None:
        _flop_counter[0] += int(n)


@contextlib.contextmanager
def frozen_detach(mode: str) -> Iterator[None]:
    """Record (``mode="record"``) or replay (``mode="replay"``) detached values.

    A replay must follow a record inside the same outer ``frozen_detach``
    session; values are matched by call order.
    """
    global _detach_tape
    if mode == "record":
        prev = _detach_tape
        _detach_tape = {"mode": "record", "values": [], "pos": 0}
        try:
            yield
        finally:
            tape = _detach_tape
            _detach_tape = prev
            _last_tape[0] = tape
    elif mode == "replay":
        if _last_tape[0] is None:
            raise ContractError("replay requested without a recorded tape")
        prev = _detach_tape
        tape = _last_tape[0]
        _detach_tape = {"mode": "replay", "values": tape["values"], "pos": 0}
        try:
            yield
        finally:
            _detach_tape = prev
    else:
        raise ValueError(f"unknown frozen_detach mode {mode!r}")


_last_tape: list[dict | None] = [None]


class Tensor:
    """numpy array plus the graph bookkeeping needed for ``backward``."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swap_last(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), bw)


def where_const(x: Tensor, mask: np.ndarray, fill: float) -> Tensor:
    """``x`` where ``mask`` holds, else the constant ``fill`` (no gradient there)."""
    mask = np.asarray(mask, dtype=bool)
    return _make(np.where(mask, x.data, fill).astype(x.dtype), (x,), lambda g: (g * mask,))


def detach(x: Tensor) -> Tensor:
    """Copy without graph history; honours an active ``frozen_detach`` tape."""
    tape = _detach_tape
    if tape is None:
        return Tensor(x.data.copy())
    if tape["mode"] == "record":
        tape["values"].append(x.data.copy())
        return Tensor(x.data.copy())
    pos = tape["pos"]
    vals = tape["values"]
    if pos >= len(vals) or vals[pos].shape != x.shape:
        raise ContractError("detach replay diverged from the recorded op sequence")
    tape["pos"] = pos + 1
    return Tensor(vals[pos].copy())


# --------------------------------------------------------------------------
# shape ops
# --------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of an empty sequence")
    ax = axis % xs[0].ndim
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs))
        )

    return _make(np.concatenate([t.data for t in xs], axis=ax), xs, bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


# --------------------------------------------------------------------------
# linear algebra and normalisation
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading axes."""
    a = as_tensor(a)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _charge(out.size * a.shape[-1])

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NumericError("softmax_rows received non-finite input")
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    _charge(out.size * SOFTMAX_COST)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm affine shapes {gamma.shape}/{beta.shape} vs width {d}")
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = rstd * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, gamma, beta), bw)


def one_hot(index: np.ndarray, n: int, dtype=DEFAULT_DTYPE) -> Tensor:
    index = np.asarray(index)
    out = np.zeros(index.shape + (n,), dtype=dtype)
    np.put_along_axis(out, index[..., None], 1.0, axis=-1)
    return Tensor(out)


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: "ParamStore | None" = None) -> dict[str, np.ndarray]:
    """Reverse-mode pass from a scalar ``loss``.

    Parameter grads are reset before propagation. Returns ``name -> grad`` for
    every entry of ``params`` (zeros for parameters the loss does not touch).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for t in params.values():
            t.grad = None
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is None:
        return {}
    out = {}
    for name, t in params.items():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        out[name] = t.grad
    return out


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


class ParamStore:
    """Named parameter tensors with name-derived, order-independent seeding."""

    def __init__(self, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype).copy(), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def xavier(self, name: str, shape: tuple[int, int], gain: float = 1.0) -> Tensor:
        fan_in, fan_out = shape[-2], shape[-1]
        bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, self._rng(name).uniform(-bound, bound, size=shape))

    def normal(self, name: str, shape, std: float = 0.02) -> Tensor:
        return self.add(name, self._rng(name).normal(0.0, std, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self.add(name, np.ones(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for n in self.names():
            yield n, self._params[n]

    def values(self) -> Iterator[Tensor]:
        for _, t in self.items():
            yield t

    def num_entries(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for n, v in values.items():
            self._params[n].data[...] = v


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    return float(np.asarray(v).reshape(()))


def finite_diff_grad(
    f: Callable[[ParamStore], "Tensor | float"],
    params: ParamStore,
    h: float = 1e-5,
    names: Iterable[str] | None = None,
    freeze_detached: bool = True,
    indices: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` for every parameter entry.

    ``indices`` restricts a parameter to the listed flat entries; the others
    are left at zero.

    With ``freeze_detached`` the detached values of the unperturbed pass are
    replayed in every perturbed pass, so detached quantities are constants of
    the function being differentiated (as they are for ``backward``).
    """
    if params.dtype != np.float64:
        raise ContractError("finite_diff_grad requires float64 parameters")
    if not (1e-6 <= h <= 1e-4):
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    sel = params.names() if names is None else list(names)

    def evaluate() -> float:
        with no_grad():
            if freeze_detached:
                with frozen_detach("replay"):
                    return _scalar(f(params))
            return _scalar(f(params))

    if freeze_detached:
        with no_grad(), frozen_detach("record"):
            f(params)

    out: dict[str, np.ndarray] = {}
    for name in sel:
        t = params[name]
        flat = t.data.reshape(-1)
        g = np.zeros(flat.size, dtype=np.float64)
        todo = range(flat.size) if indices is None or name not in indices else indices[name]
        for i in todo:
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        out[name] = g.reshape(t.shape)
    return out


def gradcheck(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Worst relative error of ``backward`` against central differences, per
    parameter. With ``max_entries`` larger tensors are checked on a seeded
    random sample of that many entries.
    """
    loss = f(params)
    analytic = {n: g.copy() for n, g in backward(loss, params).items()}
    picks: dict[str, np.ndarray] = {}
    if max_entries is not None:
        rng = np.random.default_rng(seed)
        for name, t in params.items():
            if t.data.size > max_entries:
                picks[name] = np.sort(rng.choice(t.data.size, max_entries, replace=False))
    numeric = finite_diff_grad(f, params, h, indices=picks)
    out = {}
    for name in params.names():
        a = analytic[name].reshape(-1)
        b = numeric[name].reshape(-1)
        if name in picks:
            a, b = a[picks[name]], b[picks[name]]
        out[name] = max_rel_error(a, b)
    return out


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor) over entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / den))
