"""Dense float64 arrays with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure mapping the output gradient to parent gradients.  Calling
:func:`backward` on a scalar walks the recorded DAG once in reverse
topological order.

Shapes are never broadcast implicitly.  Binary elementwise ops require equal
shapes; the few places that need row broadcasting have dedicated ops
(:func:`bias_add`, :func:`mul_col`) so the intent is visible at the call site.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, TrainingError

GradFn = Callable[[np.ndarray], tuple]


class Tensor:
    """An immutable-by-convention float64 array node."""

    __slots__ = ("data", "requires_grad", "name", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: GradFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, fn: GradFn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Graph and backward
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    """Topologically ordered view of the DAG feeding one output node."""

    output: Tensor
    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> Graph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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
        return cls(output=output, nodes=order)


class Gradients(Mapping):
    """Gradient map keyed by tensor identity."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._keys: dict[int, Tensor] = {}

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        k = id(t)
        if k in self._grads:
            self._grads[k] = self._grads[k] + g
        else:
            self._grads[k] = g
            self._keys[k] = t

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._grads[id(t)]

    def get(self, t, default=None):
        return self._grads.get(id(t), default)

    def __contains__(self, t) -> bool:
        return isinstance(t, Tensor) and id(t) in self._grads

    def __iter__(self):
        return iter(self._keys.values())

    def __len__(self) -> int:
        return len(self._grads)


def backward(loss: Tensor, graph: Graph | None = None) -> Gradients:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns gradients for every node that requires grad, leaves included.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = graph or Graph.trace(loss)
    grads = Gradients()
    if not loss.requires_grad:
        return grads
    grads._accumulate(loss, np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        g = grads.get(node)
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise DimensionError(
                    f"backward[{node.op}]: gradient shape {pg.shape} != value shape {p.shape}"
                )
            grads._accumulate(p, pg)
    return grads


# ---------------------------------------------------------------------------
# Elementwise and linear algebra
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _node(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b), "div", lambda g: (g / bd, -g * out / bd))


def scale(x: Tensor, c: float) -> Tensor:
    return _node(x.data * c, (x,), "scale", lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return _node(x.data + c, (x,), "shift", lambda g: (g,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _node(xd * xd, (x,), "square", lambda g: (2.0 * g * xd,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.log(xd), (x,), "log", lambda g: (g / xd,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero where the clamp is active."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _node(np.clip(xd, lo, hi), (x,), "clip", lambda g: (g * inside,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _node(ad @ bd, (a, b), "matmul", fn)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector ``b`` of shape (n,) to every row of ``x`` (..., n)."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias_add: shape mismatch {x.shape} + {b.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _node(x.data + b.data, (x, b), "bias_add", lambda g: (g, g.sum(axis=axes)))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else bias_add(out, b)


def mul_col(x: Tensor, a: Tensor) -> Tensor:
    """Scale row ``i`` of ``x`` (B, n) by ``a[i, 0]`` where ``a`` is (B, 1)."""
    if x.data.ndim != 2 or a.shape != (x.shape[0], 1):
        raise DimensionError(f"mul_col: shape mismatch {x.shape} * {a.shape}")
    xd, ad = x.data, a.data
    return _node(
        xd * ad, (x, a), "mul_col", lambda g: (g * ad, (g * xd).sum(axis=1, keepdims=True))
    )


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return _node(np.array(x.data.sum()), (x,), "sum", lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _node(
        np.array(x.data.mean()), (x,), "mean", lambda g: (np.full(shape, float(g) / n),)
    )


def sum_cols(x: Tensor) -> Tensor:
    """Row sums of a 2-D tensor, keeping a trailing unit axis: (B, n) -> (B, 1)."""
    if x.data.ndim != 2:
        raise DimensionError(f"sum_cols: expected 2-D input, got {x.shape}")
    n = x.shape[1]
    return _node(
        x.data.sum(axis=1, keepdims=True), (x,), "sum_cols", lambda g: (np.repeat(g, n, axis=1),)
    )


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot reshape {src} to {tuple(shape)}") from exc
    return _node(out, (x,), "reshape", lambda g: (g.reshape(src),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ContractError("concat: empty input list")
    nd = xs[0].data.ndim
    ax = axis % nd
    for t in xs[1:]:
        if t.data.ndim != nd or any(
            t.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax
        ):
            raise DimensionError(f"concat: shape mismatch {xs[0].shape} vs {t.shape} on axis {ax}")
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        sl = [slice(None)] * nd
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _node(np.concatenate([t.data for t in xs], axis=ax), xs, "concat", fn)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` along the last axis."""
    n = x.shape[-1]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice_cols: range [{start}, {stop}) outside last dim of {x.shape}")
    shape = x.shape

    def fn(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return _node(x.data[..., start:stop], (x,), "slice_cols", fn)


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows of ``x`` along axis 0; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError(f"take_rows: index out of range for leading dim of {x.shape}")
    shape = x.shape

    def fn(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), "take_rows", fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Look up rows of an embedding ``table`` (V, D) for integer ``ids``."""
    if table.data.ndim != 2:
        raise DimensionError(f"embedding: table must be 2-D, got {table.shape}")
    out = take_rows(table, ids)
    out.op = "embedding"
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _node(
        out, (x,), "softmax", lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    )


# ---------------------------------------------------------------------------
# Convolutional ops, NCHW layout
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid cross-correlation of ``x`` (B, C, H, W) with ``w`` (F, C, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: shape mismatch input {x.shape} kernel {w.shape}")
    B, C, H, W = x.shape
    F, _, kh, kw = w.shape
    if kh > H or kw > W:
        raise DimensionError(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    s = stride
    Ho, Wo = (H - kh) // s + 1, (W - kw) // s + 1
    xd, wd = x.data, w.data
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    # win: (B, C, Ho, Wo, kh, kw)
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        if b.shape != (F,):
            raise DimensionError(f"conv2d: bias shape {b.shape} != ({F},)")
        out = out + b.data[None, :, None, None]

    def fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for u in range(kh):
                for v in range(kw):
                    contrib = np.tensordot(g, wd[:, :, u, v], axes=([1], [0]))
                    gx[:, :, u : u + s * (Ho - 1) + 1 : s, v : v + s * (Wo - 1) + 1 : s] += (
                        contrib.transpose(0, 3, 1, 2)
                    )
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, "conv2d", fn)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    p = size
    Hp, Wp = H // p, W // p
    if Hp == 0 or Wp == 0:
        raise DimensionError(f"maxpool2d: window {p} larger than input {x.shape}")
    xr = (
        x.data[:, :, : Hp * p, : Wp * p]
        .reshape(B, C, Hp, p, Wp, p)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, Hp, Wp, p * p)
    )
    idx = xr.argmax(axis=-1)[..., None]
    out = np.take_along_axis(xr, idx, axis=-1)[..., 0]
    shape = x.shape

    def fn(g):
        gr = np.zeros((B, C, Hp, Wp, p * p))
        np.put_along_axis(gr, idx, g[..., None], axis=-1)
        gr = gr.reshape(B, C, Hp, Wp, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Hp * p, Wp * p)
        gx = np.zeros(shape)
        gx[:, :, : Hp * p, : Wp * p] = gr
        return (gx,)

    return _node(out, (x,), "maxpool2d", fn)


def _channel_window_sum(a: np.ndarray, n: int) -> np.ndarray:
    half = n // 2
    C = a.shape[1]
    cs = np.cumsum(np.pad(a, ((0, 0), (1, 0), (0, 0), (0, 0))), axis=1)
    hi = np.minimum(np.arange(C) + half + 1, C)
    lo = np.maximum(np.arange(C) - half, 0)
    return cs[:, hi] - cs[:, lo]


def local_response_norm(
    x: Tensor, k: float = 2.0, n: int = 5, alpha: float = 1e-4, beta: float = 0.75
) -> Tensor:
    """Cross-channel normalisation ``x_c / (k + alpha * sum_{|c'-c|<=n//2} x_c'^2) ** beta``."""
    if x.data.ndim != 4:
        raise DimensionError(f"local_response_norm: expected 4-D input, got {x.shape}")
    xd = x.data
    denom = k + alpha * _channel_window_sum(xd * xd, n)
    scale_ = denom**-beta
    out = xd * scale_

    def fn(g):
        inner = g * xd * scale_ / denom
        return (g * scale_ - 2.0 * alpha * beta * xd * _channel_window_sum(inner, n),)

    return _node(out, (x,), "local_response_norm", fn)


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------


def _check_finite(params: Mapping[str, Tensor], grads: Mapping) -> None:
    for name, p in params.items():
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"optimizer: gradient shape {g.shape} != parameter {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")


class SGD:
    """Plain gradient descent: ``p -= lr * g``."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: Mapping[str, Tensor], grads: Mapping) -> None:
        _check_finite(params, grads)
        for p in params.values():
            g = grads.get(p)
            if g is not None:
                p.data -= self.lr * g

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}


class RMSProp:
    """``cache = decay * cache + (1 - decay) * g**2``; ``p -= lr * g / sqrt(cache + eps)``."""

    def __init__(self, lr: float, decay: float = 0.9, eps: float = 1e-8):
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.cache: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping) -> None:
        _check_finite(params, grads)
        for name, p in params.items():
            g = grads.get(p)
            if g is None:
                continue
            c = self.cache.get(name)
            if c is None:
                c = np.zeros_like(p.data)
            c = self.decay * c + (1.0 - self.decay) * g * g
            self.cache[name] = c
            p.data -= self.lr * g / np.sqrt(c + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"rmsprop/{k}": v for k, v in sorted(self.cache.items())}


def sgd_step(params, grads, lr: float, state=None):
    """Functional form of :class:`SGD`; returns the (unused) state."""
    SGD(lr).step(params, grads)
    return state


def rmsprop_step(params, grads, lr: float, state: RMSProp | None = None, decay=0.9, eps=1e-8):
    """Functional form of :class:`RMSProp`; pass the returned state to the next call."""
    state = state or RMSProp(lr, decay, eps)
    state.lr = lr
    state.step(params, grads)
    return state


# ---------------------------------------------------------------------------
# Initialisation and finite differences
# ---------------------------------------------------------------------------


def glorot(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(1e-8, |a| + |b|)`` with Euclidean norms over the whole array."""
    num = float(np.linalg.norm(a - b))
    den = max(1e-8, float(np.linalg.norm(a) + np.linalg.norm(b)))
    return num / den


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to array ``x`` (mutated in place, restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def gradcheck(
    fn: Callable[..., Tensor], inputs: Iterable[Tensor], eps: float = 1e-5
) -> dict[int, float]:
    """Compare analytic and central-difference gradients of ``fn(*inputs)``.

    Non-scalar outputs are reduced against a fixed random projection so every
    output element contributes.  Returns ``{input index: relative error}``.
    """
    inputs = list(inputs)
    out = fn(*inputs)
    proj = np.random.default_rng(1234).uniform(0.5, 1.5, size=out.shape)

    def scalar_loss():
        return sum(mul(fn(*inputs), constant(proj)))

    grads = backward(scalar_loss())
    errors = {}
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        numeric = numerical_grad(lambda: scalar_loss().item(), t.data, eps)
        errors[i] = relative_error(analytic, numeric)
    return errors
