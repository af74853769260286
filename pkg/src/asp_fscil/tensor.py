"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine: numpy arrays carry the data, each op records its
parents and a backward closure, and :func:`backward` walks the recorded graph
in reverse creation order. Broadcasting is limited to scalar operands and
trailing bias-adds; everything else needs an explicit :func:`broadcast_to` or
:func:`reshape`.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError, NumericError

_next_id = itertools.count()
_grad_enabled = True

GELU_C = float(np.sqrt(2.0 / np.pi))


class Tensor:
    """An n-dimensional float array that may track gradients.

    ``frozen`` marks a parameter that must never be touched by
    :func:`sgd_step`; freezing also disables gradient tracking.
    """

    __slots__ = ("data", "grad", "requires_grad", "frozen", "name", "op",
                 "_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.frozen = False
        self.name = name
        self.op = "leaf"
        self._id = next(_next_id)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def __repr__(self) -> str:
        flag = ", frozen" if self.frozen else (", requires_grad" if self.requires_grad else "")
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- parameter helpers ----------------------------------------------
    def freeze(self) -> "Tensor":
        self.frozen = True
        self.requires_grad = False
        self.grad = None
        return self

    def unfreeze(self) -> "Tensor":
        self.frozen = False
        self.requires_grad = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        t = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)
        t.frozen = self.frozen
        return t

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("div: only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)


def _raise_not_scalar(t: Tensor):
    raise ContractError(f"item: tensor of shape {t.shape} is not a scalar")


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values encountered")


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def parameter(data, name: Optional[str] = None, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.frozen = False
    out.name = None
    out.op = op
    out._id = next(_next_id)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracking leaf.

    The graph is consumed: intermediate nodes drop their closures afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad or loss.is_leaf:
        raise ContractError("backward: loss is not connected to any tracked tensor")

    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    grads = {loss._id: np.ones_like(loss.data)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = grads.pop(node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"{node.op} backward: gradient shape {pg.shape} != input shape {parent.shape}")
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------

def _bias_axes(big: tuple, small: tuple) -> Optional[tuple]:
    """Leading axes to reduce when ``small`` is a trailing-suffix bias of ``big``."""
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return tuple(range(len(big) - len(small)))
    return None


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _add_scalar(as_tensor(a), float(b))
    if not isinstance(a, Tensor):
        return _add_scalar(b, float(a))
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    axes = _bias_axes(a.shape, b.shape)
    if axes is not None:
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)), "add")
    axes = _bias_axes(b.shape, a.shape)
    if axes is not None:
        return _make(a.data + b.data, (a, b), lambda g: (g.sum(axis=axes), g), "add")
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def _add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_scalar")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _add_scalar(as_tensor(a), -float(b))
    return add(a, neg(b))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(as_tensor(a), b)
    if not isinstance(a, Tensor):
        return scale(b, a)
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd if a.requires_grad else None,
                                           g * ad if b.requires_grad else None), "mul")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericError("log: non-positive input")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def gelu(a: Tensor) -> Tensor:
    """GELU with the tanh approximation."""
    x = a.data
    dt = x.dtype.type
    x2 = x * x
    inner = dt(GELU_C) * x * (dt(1.0) + dt(0.044715) * x2)
    t = np.tanh(inner)
    out = dt(0.5) * x * (dt(1.0) + t)

    def bw(g):
        dinner = dt(GELU_C) * (dt(1.0) + dt(3 * 0.044715) * x2)
        return (g * (dt(0.5) * (dt(1.0) + t) + dt(0.5) * x * (dt(1.0) - t * t) * dinner),)

    return _make(out, (a,), bw, "gelu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` (..., n, k) and ``b`` either (k, m) or (..., k, m)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim != 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ, {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # one GEMM over all leading rows
        k, m = bd.shape
        out = (ad.reshape(-1, k) @ bd).reshape(ad.shape[:-1] + (m,))
    else:
        out = ad @ bd

    def bw(g):
        ga = gb = None
        if bd.ndim == 2:
            if a.requires_grad:
                ga = (g.reshape(-1, m) @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            if a.requires_grad:
                ga = g @ np.swapaxes(bd, -1, -2)
            if b.requires_grad:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum(mul(a, b))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [t for t in tensors]
    if not tensors:
        raise DimensionError("concat: no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; use :func:`take` for integer-array gathers."""
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    src_shape, dtype = a.shape, a.dtype

    def bw(g):
        z = np.zeros(src_shape, dtype=dtype)
        z[index] = g
        return (z,)

    return _make(np.ascontiguousarray(out), (a,), bw, "getitem")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, idx, axis=axis)
    src_shape, dtype = a.shape, a.dtype

    def bw(g):
        z = np.zeros(src_shape, dtype=dtype)
        gm = np.moveaxis(g, axis, 0)
        zm = np.moveaxis(z, axis, 0)
        np.add.at(zm, idx, gm)
        return (z,)

    return _make(out, (a,), bw, "take")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast: prepend new leading axes or expand size-1 axes."""
    shape = tuple(shape)
    lead = len(shape) - a.ndim
    if lead < 0 or any(s != 1 and s != t for s, t in zip(a.shape, shape[lead:])):
        raise DimensionError(f"broadcast_to: cannot broadcast {a.shape} to {shape}")
    expanded = tuple(lead + i for i, (s, t) in enumerate(zip(a.shape, shape[lead:])) if s == 1 and t != 1)
    src = a.shape

    def bw(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if expanded:
            g = g.sum(axis=tuple(e - lead for e in expanded), keepdims=True)
        return (g.reshape(src),)

    return _make(np.broadcast_to(a.data, shape), (a,), bw, "broadcast_to")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max(a: Tensor, axis: int = -1) -> Tensor:  # noqa: A001
    """Hard maximum; the gradient goes to the first maximising entry only."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    src, dtype = a.shape, a.dtype

    def bw(g):
        z = np.zeros(src, dtype=dtype)
        np.put_along_axis(z, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (z,)

    return _make(out, (a,), bw, "max")


def l2_norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if (n == 0).any():
        raise NumericError("l2_norm: zero-norm vector")
    ad = a.data

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * ad / n,)

    out = n if keepdims else n.squeeze(axis)
    return _make(out, (a,), bw, "l2_norm")


def normalize(a: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """``a / (||a|| + eps)`` along ``axis``; exact zero vectors are rejected."""
    ad = a.data
    n = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    if (n == 0).any():
        raise NumericError("normalize: zero-norm vector")
    s = n + ad.dtype.type(eps)
    out = ad / s

    def bw(g):
        ga = (g * ad).sum(axis=axis, keepdims=True)
        return (g / s - ad * ga / (s * s * n),)

    return _make(out, (a,), bw, "normalize")


def cosine(a: Tensor, b: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    return sum(mul(normalize(a, axis, eps), normalize(b, axis, eps)), axis=axis)


# ---------------------------------------------------------------------------
# fused neural-network ops
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] < 1:
        raise DimensionError(f"softmax: empty axis in shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def bw(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"cross_entropy: labels outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=1, keepdims=True)
    logp = z - np.log(se)
    rows = np.arange(labels.size)
    n = labels.size
    out = np.asarray(-logp[rows, labels].sum() / logits.dtype.type(n))

    def bw(g):
        p = e / se
        p[rows, labels] -= 1
        return (p * (g / logits.dtype.type(n)),)

    return _make(out, (logits,), bw, "cross_entropy")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: input {x.shape} vs scale {gamma.shape}/{beta.shape}")
    xd = x.data
    dt = xd.dtype.type
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = dt(1.0) / np.sqrt(var + dt(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def gaussian(shape: Sequence[int], rng: np.random.Generator, std: float = 1.0,
             dtype=np.float32) -> Tensor:
    """A constant tensor of N(0, std^2) draws from an explicit stream."""
    return Tensor(rng.standard_normal(tuple(shape)).astype(dtype) * dtype(std))


# ---------------------------------------------------------------------------
# optimisation and checking
# ---------------------------------------------------------------------------

def sgd_step(params: Iterable[Tensor], lr: float, grads: Optional[Sequence[np.ndarray]] = None) -> None:
    """Plain SGD: ``p <- p - lr * g``. Frozen tensors are skipped."""
    if not lr > 0:
        raise ContractError(f"sgd_step: learning rate must be positive, got {lr}")
    params = list(params)
    if grads is not None and len(grads) != len(params):
        raise DimensionError(f"sgd_step: {len(params)} params but {len(grads)} grads")
    for i, p in enumerate(params):
        if p.frozen:
            continue
        g = p.grad if grads is None else grads[i]
        if g is None:
            continue
        g = np.asarray(g)
        if g.shape != p.shape:
            raise DimensionError(f"sgd_step: param shape {p.shape} vs grad shape {g.shape}")
        p.data = (p.data - p.data.dtype.type(lr) * g.astype(p.dtype, copy=False))


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Runs in float64. Non-smooth points (e.g. ties under :func:`max`) give
    large errors by construction; callers should treat that as a flag.
    """
    if not h > 0:
        raise ContractError("grad_check: step must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ContractError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x0.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x0.copy())).data)
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    return float((np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))).max())


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-4) -> dict:
    """Check every coordinate of every tensor in ``params`` against central differences.

    ``loss_fn`` must rebuild the loss from the current ``.data`` of ``params``
    and be deterministic. Returns ``{name_or_index: max relative error}``.
    """
    zero_grads(params)
    backward(loss_fn())
    report = {}
    for i, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros(p.shape, dtype=np.float64)
        base = p.data
        work = base.copy()
        flat = work.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            p.data = work.copy()
            fp = float(loss_fn().data)
            flat[j] = orig - h
            p.data = work.copy()
            fm = float(loss_fn().data)
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2 * h)
        p.data = base
        err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
        report[p.name or i] = float(err.max()) if err.size else 0.0
    zero_grads(params)
    return report


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for the sub-stream ``stream`` of ``seed``.

    Distinct ``stream`` paths give statistically independent generators, so
    every stochastic consumer can own its stream without coupling to others.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))
