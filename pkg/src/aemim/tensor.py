"""Minimal reverse-mode autodiff over numpy arrays.

Every op that touches a tensor with ``requires_grad`` records a node holding its
parents and a closure mapping the output gradient to parent gradients.  Nodes
carry a global creation sequence number, so sorting reachable nodes by that
number yields a topological order (the tape).  Graphs are meant to live for one
training step and are dropped afterwards; only first-order gradients exist.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_SEQ = itertools.count()

GELU_K = float(np.sqrt(2.0 / np.pi))


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_SEQ)

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: scale(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, key: getitem(self, key)

    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires a gradient."""
        grads = _run_backward(self)
        for node, g in grads.items():
            if node._backward is None and node.requires_grad:
                node.grad = g


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` over the axes that broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------- tape


@dataclass
class Tape:
    """Nodes reachable from a loss, in creation (hence topological) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        stack = [out]
        nodes = []
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)


def _run_backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    by_id: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.get(id(node))
        by_id[id(node)] = node
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
    return {by_id[k]: g for k, g in grads.items() if k in by_id}


def grad(loss: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient map of ``loss`` w.r.t. the named tensors.

    Names whose tensor does not take part in the graph map to zeros.
    """
    found = _run_backward(loss)
    by_id = {id(t): g for t, g in found.items()}
    out = {}
    for name, t in wrt.items():
        g = by_id.get(id(t))
        out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
    return out


def backward(loss: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return grad(loss, wrt)


# ----------------------------------------------------------------- elementwise ops


def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    k = xd.dtype.type(GELU_K)
    c = xd.dtype.type(0.044715)
    inner = k * (xd + c * xd * xd * xd)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = k * (1.0 + 3.0 * c * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(y, (x,), bw)


def cast(x: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    if x.dtype == dtype:
        return x
    src = x.dtype
    return _make(x.data.astype(dtype), (x,), lambda g: (g.astype(src),))


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the graph."""
    return Tensor(x.data, requires_grad=False)


# ------------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(out)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(y), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axes, keepdims), 1.0 / n)


def mse(a: Tensor, b) -> Tensor:
    """Mean of squared differences over all elements."""
    b = _lift(b, a)
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size
    y = np.asarray((d * d).sum() / n, dtype=a.dtype)

    def bw(g):
        ga = (2.0 / n) * g * d
        return (ga.astype(a.dtype, copy=False) if a.requires_grad else None,
                (-ga).astype(b.dtype, copy=False) if b.requires_grad else None)

    return _make(y, (a, b), bw)


# ------------------------------------------------------------------ linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    y = ad @ bd

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(y, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ------------------------------------------------------------------ normalization


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: last dim {d} vs gamma {gamma.shape} / beta {beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    gd = gamma.data
    y = xhat * gd + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(y, (x, gamma, beta), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=ax, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=ax, keepdims=True),)

    return _make(y, (x,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    lp = log_softmax(logits, -1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return scale(sum(mul(lp, onehot)), -1.0 / len(labels))


# --------------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"bad permutation {axes} for {x.ndim}-d tensor")
    inv = tuple(np.argsort([a % x.ndim for a in axes]))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    return _make(np.broadcast_to(x.data, shape), (x,), lambda g: (unbroadcast(g, src),))


def getitem(x: Tensor, key) -> Tensor:
    src, dt = x.shape, x.dtype

    def bw(g):
        out = np.zeros(src, dtype=dt)
        if _is_fancy(key):
            np.add.at(out, key, g)
        else:
            out[key] = g
        return (out,)

    return _make(np.asarray(x.data[key]), (x,), bw)


def _is_fancy(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_lift(x) for x in xs]
    (ax,) = _norm_axis(axis, xs[0].ndim)
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax):
            raise DimensionError(f"concat shapes incompatible: {[t.shape for t in xs]}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=ax), xs,
                 lambda g: tuple(np.split(g, bounds, axis=ax)))


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis -2: ``x[..., N, D], idx[..., V] -> [..., V, D]``.

    Indices within one row of ``idx`` must be unique (mask selection).
    """
    idx = np.asarray(idx)
    if idx.shape[:-1] != x.shape[:-2]:
        raise DimensionError(f"gather_rows: index {idx.shape} does not match tensor {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-2]):
        raise ContractError(f"gather_rows: index out of range for {x.shape[-2]} rows")
    full = idx[..., None]
    src, dt = x.shape, x.dtype

    def bw(g):
        out = np.zeros(src, dtype=dt)
        np.put_along_axis(out, full, g, axis=-2)
        return (out,)

    return _make(np.take_along_axis(x.data, full, axis=-2), (x,), bw)


def scatter_rows(src: Tensor, idx: np.ndarray, base: Tensor) -> Tensor:
    """Copy of ``base[..., N, D]`` whose rows ``idx[..., V]`` are replaced by ``src[..., V, D]``."""
    idx = np.asarray(idx)
    if src.shape[:-2] != base.shape[:-2] or src.shape[-1] != base.shape[-1] or idx.shape != src.shape[:-1]:
        raise DimensionError(f"scatter_rows: src {src.shape}, idx {idx.shape}, base {base.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= base.shape[-2]):
        raise ContractError(f"scatter_rows: index out of range for {base.shape[-2]} rows")
    full = idx[..., None]
    out = np.array(base.data, copy=True)
    np.put_along_axis(out, full, src.data, axis=-2)

    def bw(g):
        gsrc = np.take_along_axis(g, full, axis=-2) if src.requires_grad else None
        gbase = None
        if base.requires_grad:
            gbase = g.copy()
            np.put_along_axis(gbase, full, 0.0, axis=-2)
        return gsrc, gbase

    return _make(out, (src, base), bw)


def add_positional(x: Tensor, table) -> Tensor:
    """Add a ``[N, D]`` positional table to every sequence of ``x[..., N, D]``."""
    table = _lift(table, x)
    if table.shape != x.shape[-2:]:
        raise DimensionError(f"positional table {table.shape} does not match tokens {x.shape}")
    return add(x, table)


def stack_grads(maps: Iterable[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Sum gradient maps in iteration order (fixed reduction order)."""
    out: dict[str, np.ndarray] = {}
    for m in maps:
        for k, v in m.items():
            out[k] = out[k] + v if k in out else v
    return out
