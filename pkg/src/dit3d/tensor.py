"""Dense real tensors with tape-style reverse-mode autodiff.

Every op returns a new :class:`Tensor`. When gradients are enabled and any
operand requires grad, the result remembers its parents and a closure that
maps the output gradient to one gradient per parent. :func:`backward` walks
that graph once in reverse topological order and frees it afterwards.

Broadcasting in ``add``/``mul`` follows numpy rules; the gradient is summed
back to each operand's shape.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_state = threading.local()

_DTYPES = {"float32": np.float32, "float64": np.float64, 32: np.float32, 64: np.float64}

_GELU_C = math.sqrt(2.0 / math.pi)


def get_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(mode) -> None:
    _state.dtype = _DTYPES[mode] if not isinstance(mode, type) else mode


@contextlib.contextmanager
def precision(mode) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with.

    ``mode`` is ``"float64"``/``64`` for verification or ``"float32"``/``32``
    for training and sampling. The setting is per thread.
    """
    prev = get_dtype()
    set_default_dtype(mode)
    try:
        yield
    finally:
        _state.dtype = prev


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or get_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.name = None
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operators --------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible") from None


# -- elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return Tensor._make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor._make(ad * bd, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return Tensor._make(out, (x,), bw, "gelu")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))
    out = xd * sig

    def bw(g):
        return (g * sig * (1.0 + xd * (1.0 - sig)),)

    return Tensor._make(out, (x,), bw, "silu")


# -- linear algebra --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]``.

    ``b`` either has the same leading axes as ``a`` or is a plain matrix
    shared across them (the linear-layer case).
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    if bd.ndim > 2 and bd.shape[:-2] != ad.shape[:-2]:
        raise DimensionError(f"matmul leading dims differ: {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k, n = ad.shape[-1], g.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return Tensor._make(out, (a, b), bw, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} to {shape}") from None
    return Tensor._make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"bad permutation {axes} for {x.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return Tensor._make(out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = np.ascontiguousarray(x.data[idx])
    shape, dtype = x.shape, x.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] += g
        return (full,)

    return Tensor._make(out, (x,), bw, "getitem")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding ids out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._make(table.data[ids], (table,), bw, "embedding")


# -- reductions ------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(np.reshape(g, kept), shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis, keepdims), 1.0 / count)


def mse(a: Tensor, b) -> Tensor:
    """Mean of squared differences over every entry."""
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise DimensionError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff))

    def bw(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return Tensor._make(out, (a, b), bw, "mse")


# -- normalisation ---------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then optionally apply ``gamma``/``beta``."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    D = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (D,):
            raise DimensionError(f"layer_norm affine shape {p.shape} != ({D},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    def bw(g):
        gh = g * gamma.data if gamma is not None else g
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        gg = np.sum(g * xhat, axis=lead) if gamma is not None else None
        gb = np.sum(g, axis=lead) if beta is not None else None
        return gx, gg, gb

    parents = [x]
    grads_map = [0]
    if gamma is not None:
        parents.append(gamma)
        grads_map.append(1)
    if beta is not None:
        parents.append(beta)
        grads_map.append(2)

    def bw_sel(g):
        full = bw(g)
        return tuple(full[i] for i in grads_map)

    return Tensor._make(out, tuple(parents), bw_sel, "layer_norm")


# -- autodiff driver ------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
        node._parents = ()
        node._backward = None


def grad_errors(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4,
                max_entries: int | None = None, seed: int = 0) -> list[float]:
    """Per-input max relative error between analytic and central-difference grads.

    ``max_entries`` subsamples entries of large inputs (deterministically by
    ``seed``); ``None`` checks every entry.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ContractError("grad_check requires float64 inputs")
    with precision("float64"):
        for t in inputs:
            t.requires_grad = True
            t.grad = None
        out = f(*inputs)
        if out.size != 1:
            raise ContractError("grad_check function must be scalar-valued")
        backward(out)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
        rng = np.random.default_rng(seed)
        errs = []
        with no_grad():
            for t, ga in zip(inputs, analytic):
                flat = t.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
                worst = 0.0
                gflat = ga.reshape(-1)
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = f(*inputs).item()
                    flat[i] = orig - eps
                    fm = f(*inputs).item()
                    flat[i] = orig
                    num = (fp - fm) / (2 * eps)
                    err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]))
                    worst = max(worst, err)
                errs.append(worst)
        for t in inputs:
            t.grad = None
    return errs


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max over all inputs of ``|analytic - numeric| / max(1, |analytic|)``."""
    errs = grad_errors(f, inputs, eps=eps, max_entries=max_entries, seed=seed)
    return max(errs) if errs else 0.0
