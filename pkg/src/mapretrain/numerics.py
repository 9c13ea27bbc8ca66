"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine on top of numpy. Every op records its parents and
a closure mapping the output gradient to parent gradients; ``backward`` walks
the graph once in reverse topological order.

Broadcasting is restricted to *leading* dimensions: an operand whose shape is a
suffix of the other's shape is repeated over the missing leading axes (biases,
positional tables, shared weights). Anything else is a ``DimensionError``.

The heavy kernels (masked softmax, layer norm, selective scan, cross entropy)
are fused ops with hand-written backward passes.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "DegenerateMaskError",
    "ContractError",
    "NumericError",
    "tensor",
    "zeros",
    "get_dtype",
    "precision",
    "no_grad",
    "fd_step",
    "add",
    "sub",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "take",
    "where",
    "sum",
    "mean",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "silu",
    "softplus",
    "gelu",
    "layer_norm",
    "softmax",
    "softmax_masked",
    "cross_entropy",
    "selective_scan",
    "causal_conv1d",
    "backward",
    "numerical_grad",
    "gradcheck",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateMaskError(ValueError):
    """A visibility mask row allows no keys at all."""


class ContractError(ValueError):
    """An operation was called outside its preconditions."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where it must not."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


_DTYPE: type = np.float32
_GRAD_ENABLED = True


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default float dtype (``float32`` or ``float64``)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    old, _DTYPE = _DTYPE, dtype
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def fd_step(dtype=None) -> float:
    """Central-difference step matched to the working precision."""
    dtype = np.dtype(dtype or _DTYPE)
    return 1e-5 if dtype == np.float64 else 1e-3


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE and op == "leaf":
            arr = arr.astype(_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes or None)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], fn: Callable) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, True, op, parents, fn)
    return Tensor(data, False, op)


def _check_suffix(a: tuple, b: tuple, op: str) -> tuple:
    """Result shape when one shape is a trailing suffix of the other."""
    if len(a) >= len(b):
        big, small = a, b
    else:
        big, small = b, a
    if len(small) and tuple(big[len(big) - len(small):]) != tuple(small):
        raise DimensionError(f"{op}: shapes {a} and {b} only broadcast over leading dims")
    return tuple(big)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    # size-1 axes can only come from constant masks; keep the rule simple
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_suffix(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_suffix(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_suffix(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, "mul", (a, b), fn)


def matmul(a, b) -> Tensor:
    """``a[..., P, Q] @ b[Q, R]`` (shared right operand) or batched ``b[..., Q, R]``."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), fn)


# ---------------------------------------------------------------------------
# shape ops


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "transpose", (a,),
                 lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather ``a`` along ``axis`` with an integer index array."""
    index = np.asarray(index, dtype=np.intp)
    axis = axis % a.ndim
    shape = a.shape

    def fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.data, index, axis=axis), "take", (a,), fn)


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = _lift(a), _lift(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    sa, sb = a.shape, b.shape
    zero = np.zeros((), dtype=out.dtype)

    def fn(g):
        ga = _unbroadcast(np.where(cond, g, zero), sa) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, zero, g), sb) if b.requires_grad else None
        return ga, gb

    return _make(out, "where", (a, b), fn)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), "sum", (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = math.prod(a.shape[i] for i in axes)
    return mul(sum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# elementwise unary ops


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), "log", (a,), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1 - out),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _make(x * s, "silu", (a,), lambda g: (g * (s * (1 + x * (1 - s))),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0, x).astype(x.dtype)
    return _make(out, "softplus", (a,), lambda g: (g * _sigmoid(x),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))   # x**3 takes the slow pow path
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def fn(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _make(out, "gelu", (a,), fn)


# ---------------------------------------------------------------------------
# fused kernels


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data
    d = xd.shape[-1]

    def fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        gg = _unbroadcast(g * xhat, gd.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out, "layer_norm", (x, gamma, beta), fn)


def _check_mask(logits_shape: tuple, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim < 2 or mask.shape[-2:] != tuple(logits_shape[-2:]):
        raise DimensionError(f"mask shape {mask.shape} does not match logits {logits_shape}")
    if mask.ndim > len(logits_shape):
        raise DimensionError(f"mask has more dims than logits: {mask.shape} vs {logits_shape}")
    lead = logits_shape[len(logits_shape) - mask.ndim:-2]
    for m, l in zip(mask.shape[:-2], lead):
        if m not in (1, l):
            raise DimensionError(f"mask shape {mask.shape} cannot cover logits {logits_shape}")
    if not mask.any(axis=-1).all():
        raise DegenerateMaskError("visibility mask has a row with no allowed keys")
    return mask


def softmax_masked(logits: Tensor, mask) -> Tensor:
    """Row softmax over the last axis restricted to ``mask``-allowed entries.

    Disallowed entries come out as exactly 0. The row maximum used for
    stabilization is taken over allowed entries only.
    """
    mask = _check_mask(logits.shape, mask)
    x = logits.data
    neg = np.array(-np.inf, dtype=x.dtype)
    masked = np.where(mask, x, neg)
    mx = masked.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(masked - mx), 0).astype(x.dtype)
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, "softmax_masked", (logits,), fn)


def softmax(logits: Tensor) -> Tensor:
    """Unmasked softmax over the last axis."""
    if logits.ndim == 1:
        row = reshape(logits, (1, logits.shape[0]))
        return reshape(softmax_masked(row, np.ones(row.shape, dtype=bool)), logits.shape)
    return softmax_masked(logits, np.ones(logits.shape[-2:], dtype=bool))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    labels = np.asarray(labels, dtype=np.intp)
    x = logits.data
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise DimensionError(f"cross_entropy expects [B,K] logits and [B] labels, "
                             f"got {x.shape} and {labels.shape}")
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = x.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def fn(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return (g * p / n,)

    return _make(np.asarray(loss, dtype=x.dtype), "cross_entropy", (logits,), fn)


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor) -> Tensor:
    """Diagonal selective state-space recurrence over axis -2.

    Shapes: ``u, delta`` are ``[..., L, E]``, ``A`` is ``[E, S]``, ``B, C`` are
    ``[..., L, S]``. Per channel ``e`` and state ``s``::

        h[t] = exp(delta[t] * A) * h[t-1] + delta[t] * B[t] * u[t]
        y[t] = sum_s C[t] * h[t]

    with ``h[-1] = 0``. Returns ``y`` with the shape of ``u``.
    """
    ud, dd, Ad, Bd, Cd = u.data, delta.data, A.data, B.data, C.data
    if ud.shape != dd.shape or ud.ndim < 2:
        raise DimensionError(f"u {ud.shape} and delta {dd.shape} must match")
    E, S = Ad.shape if Ad.ndim == 2 else (None, None)
    if E != ud.shape[-1] or Bd.shape != ud.shape[:-1] + (S,) or Cd.shape != Bd.shape:
        raise DimensionError(f"selective_scan shapes u{ud.shape} A{Ad.shape} "
                             f"B{Bd.shape} C{Cd.shape} disagree")
    L = ud.shape[-2]
    # time-major copies keep every per-step slice contiguous
    dT = np.moveaxis(dd, -2, 0)                            # [L, ..., E]
    duT = np.moveaxis(dd * ud, -2, 0)
    BT, CT = np.moveaxis(Bd, -2, 0), np.moveaxis(Cd, -2, 0)  # [L, ..., S]
    abar = np.exp(dT[..., None] * Ad)                      # [L, ..., E, S]
    H = np.empty_like(abar)
    h = np.zeros(abar.shape[1:], dtype=abar.dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(L):
            h = abar[t] * h + duT[t][..., None] * BT[t][..., None, :]
            H[t] = h
    if not np.isfinite(H).all():
        bad = ~np.isfinite(H.reshape(L, -1)).all(axis=1)
        step = int(np.argmax(bad))
        raise NumericError(f"selective scan produced a non-finite state at step {step}", step)
    y = np.moveaxis((H @ CT[..., None])[..., 0], 0, -2)

    def fn(g):
        # adjoint of the state: G[t] = g[t] C[t] + abar[t+1] G[t+1]
        gT = np.moveaxis(g, -2, 0)
        G = np.empty_like(H)
        acc = np.zeros_like(h)
        for t in range(L - 1, -1, -1):
            acc = gT[t][..., None] * CT[t][..., None, :] + acc
            G[t] = acc
            acc = abar[t] * acc
        gabar = G * abar                                   # d/d(dA) = G h[t-1] abar
        gabar[1:] *= H[:-1]
        gabar[0] = 0
        GB = (G @ BT[..., None])[..., 0]                   # [L, ..., E]
        gdelta = (gabar * Ad).sum(axis=-1)
        gA = np.einsum("nes,ne->es", gabar.reshape(-1, E, S), dT.reshape(-1, E))
        gB = (np.swapaxes(G, -1, -2) @ duT[..., None])[..., 0]
        gC = (np.swapaxes(H, -1, -2) @ gT[..., None])[..., 0]
        back = lambda a: np.moveaxis(a, 0, -2)
        return (back(GB * dT), back(gdelta + GB * np.moveaxis(ud, -2, 0)), gA, back(gB),
                back(gC))

    return _make(y.astype(ud.dtype), "selective_scan", (u, delta, A, B, C), fn)


def causal_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Depthwise causal convolution over axis -2.

    ``y[t, e] = b[e] + sum_i w[i, e] * x[t - i, e]`` with zero history.
    ``x`` is ``[..., L, E]``, ``w`` is ``[K, E]``, ``b`` is ``[E]``.
    """
    xd, wd = x.data, w.data
    K, L = wd.shape[0], xd.shape[-2]
    if wd.ndim != 2 or wd.shape[1] != xd.shape[-1] or b.shape != (xd.shape[-1],):
        raise DimensionError(f"causal_conv1d: x{xd.shape} w{wd.shape} b{b.shape}")
    out = np.broadcast_to(b.data, xd.shape).copy()
    for i in range(min(K, L)):
        out[..., i:, :] += wd[i] * xd[..., :L - i, :]

    def fn(g):
        gx = np.zeros_like(xd)
        gw = np.zeros_like(wd)
        for i in range(min(K, L)):
            gx[..., :L - i, :] += wd[i] * g[..., i:, :]
            gw[i] = (g[..., i:, :] * xd[..., :L - i, :]).reshape(-1, xd.shape[-1]).sum(axis=0)
        return gx, gw, _unbroadcast(g, b.shape)

    return _make(out, "causal_conv1d", (x, w, b), fn)


# ---------------------------------------------------------------------------
# backward pass


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any requires_grad leaf")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# finite-difference oracle


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float | None = None,
                   indices: Iterable[int] | None = None) -> dict[int, float]:
    """Central differences of scalar ``fn()`` wrt flat entries of ``param``."""
    h = fd_step(param.dtype) if h is None else h
    flat = param.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = {}
    with no_grad():
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = float(np.asarray(fn().data, dtype=np.float64))
            flat[i] = old - h
            fm = float(np.asarray(fn().data, dtype=np.float64))
            flat[i] = old
            out[int(i)] = (fp - fm) / (2 * h)
    return out


def gradcheck(fn: Callable[[], Tensor], params: dict[str, Tensor], h: float | None = None,
              samples: int | None = None, rng: np.random.Generator | None = None,
              floor: float = 0.0) -> dict[str, float]:
    """Relative error between backprop and central differences, per tensor.

    For each tensor the error is ``|g_bp - g_fd| / max(|g_bp|, |g_fd|, floor)``
    (Euclidean norms over the checked entries: all of them, or ``samples``
    random ones). ``floor`` keeps leaves whose true gradient is (near) zero
    from turning differencing noise into a large ratio.
    """
    for p in params.values():
        p.zero_grad()
    backward(fn())
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        n = p.data.size
        if samples is None or samples >= n:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.choice(n, size=samples, replace=False))
        fd = numerical_grad(fn, p, h, idx)
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)[idx]
        analytic = analytic.astype(np.float64)
        numeric = np.array([fd[int(i)] for i in idx])
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
        errors[name] = 0.0 if scale == 0 else float(np.linalg.norm(analytic - numeric) / scale)
    return errors
