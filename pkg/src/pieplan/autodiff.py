"""Minimal dense-tensor reverse-mode autodiff engine.

Everything downstream (state-space blocks, attention, MoE, heads, losses)
is expressed through the primitives in this module. Storage is float64
row-major throughout; gradient checks at h=1e-6 rely on that precision.

Broadcasting for elementwise binary ops is deliberately restricted:
two shapes are compatible iff they are equal, one operand is a scalar
(a single element), or one shape is a trailing suffix of the other
(e.g. (L, D) op (D,)). Anything else is rejected.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GraphNode",
    "Module",
    "no_grad",
    "backward",
    "grad_check",
    "add", "sub", "mul", "div", "neg", "matmul", "concat", "split",
    "softmax", "silu", "layer_norm", "transpose", "reshape", "sum_",
    "mean_", "abs_", "exp", "log", "cos", "sin", "sigmoid", "softplus",
    "gather", "scatter_add", "embedding_lookup",
    "init_uniform", "init_normal",
]

LAYER_NORM_EPS = 1e-5

_grad_enabled = True


class no_grad:
    """Context manager that suppresses graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class GraphNode:
    """One recorded primitive application.

    `backward_fn` maps the incoming output gradient to a tuple of parent
    gradients (None for parents that need no gradient). `saved` holds
    whatever the backward rule captured from the forward pass.
    """

    __slots__ = ("op_kind", "parents", "backward_fn", "saved")

    def __init__(self, op_kind: str, parents: tuple, backward_fn: Callable, saved=None):
        self.op_kind = op_kind
        self.parents = parents
        self.backward_fn = backward_fn
        self.saved = saved


class Tensor:
    """Dense float64 tensor participating in a reverse-mode graph.

    data is kept C-contiguous (row-major); `flat` exposes the underlying
    1-D storage. Tensors without a node are immutable by convention and
    safe to share read-only.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[GraphNode] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.reshape(self.data.shape)

    def backward(self, free_graph: bool = True) -> None:
        backward(self, free_graph=free_graph)

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op_kind: str, out_data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable, saved=None) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad or p.node is not None for p in parents):
        out.requires_grad = True
        out.node = GraphNode(op_kind, tuple(parents), backward_fn, saved)
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers (restricted: equal | scalar | trailing-suffix)
# ---------------------------------------------------------------------------

def _is_scalar_shape(shape: tuple) -> bool:
    return int(np.prod(shape, dtype=np.int64)) == 1


def _check_broadcast(sa: tuple, sb: tuple, op: str) -> None:
    if sa == sb or _is_scalar_shape(sa) or _is_scalar_shape(sb):
        return
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    if len(sa) == len(sb) and all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb)):
        return
    raise ValueError(
        f"{op}: shapes {sa} and {sb} are not broadcast-compatible "
        "(allowed: equal, scalar, trailing-suffix expansion, or same-rank size-1 expansion)")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`: sum extra leading axes,
    then sum axes that were expanded from size 1."""
    if grad.shape == shape:
        return grad
    if _is_scalar_shape(shape):
        return np.asarray(grad.sum()).reshape(shape)
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    ones = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if ones:
        grad = grad.sum(axis=ones, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "add")
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "sub")
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "mul")
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def cos(a: Tensor) -> Tensor:
    return _make("cos", np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sin(a: Tensor) -> Tensor:
    return _make("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return _make("softplus", out, (a,), lambda g: (g * sig,))


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def bw(g):
        return (g * sig * (1.0 + a.data * (1.0 - sig)),)

    return _make("silu", out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra / shape primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul: expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", out, (a, b), bw)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(perm)
    out = np.ascontiguousarray(a.data.transpose(perm))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make("transpose", out, (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _make("reshape", np.ascontiguousarray(out), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat: empty tensor list")
    shapes = [t.shape for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ValueError(f"concat: incompatible shapes {shapes} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
                     for i in range(len(tensors)))

    return _make("concat", out, tuple(tensors), bw)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list:
    if sum(sizes) != a.shape[axis]:
        raise ValueError(f"split: sizes {list(sizes)} do not sum to axis length {a.shape[axis]}")
    offsets = np.cumsum([0] + list(sizes))
    outs = []
    for i in range(len(sizes)):
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(offsets[i], offsets[i + 1])
        piece = np.ascontiguousarray(a.data[tuple(idx)])

        def bw(g, _i=i):
            full = np.zeros_like(a.data)
            sl = [slice(None)] * a.data.ndim
            sl[axis] = slice(offsets[_i], offsets[_i + 1])
            full[tuple(sl)] = g
            return (full,)

        outs.append(_make("split", piece, (a,), bw))
    return outs


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise ValueError("softmax: empty axis")
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    # guard fully-masked rows (all -inf) from producing NaN via inf - inf
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    z = e.sum(axis=axis, keepdims=True)
    out = e / z

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax", out, (a,), bw)


def layer_norm(a: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis (no learned affine; compose that outside)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv

    def bw(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make("layer_norm", xhat, (a,), bw)


def sum_(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.full_like(a.data, float(g)),) if np.isscalar(g) or g.ndim == 0 \
                else (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean_(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.full_like(a.data, float(g) / n),) if np.isscalar(g) or g.ndim == 0 \
                else (np.broadcast_to(g / n, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)

    return _make("mean", np.asarray(out), (a,), bw)


# ---------------------------------------------------------------------------
# indexed primitives
# ---------------------------------------------------------------------------

def gather(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows (axis 0) of `a` by integer index."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather: index out of range for axis of length {a.shape[0]}")
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make("gather", out, (a,), bw)


def scatter_add(a: Tensor, indices: Sequence[int], out_rows: int) -> Tensor:
    """Accumulate rows of `a` into a zero tensor of `out_rows` rows: out[idx[i]] += a[i]."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[0] != a.shape[0]:
        raise ValueError("scatter_add: one index per input row required")
    if idx.size and (idx.min() < 0 or idx.max() >= out_rows):
        raise IndexError(f"scatter_add: index out of range for {out_rows} output rows")
    out = np.zeros((out_rows,) + a.shape[1:], dtype=np.float64)
    np.add.at(out, idx, a.data)

    def bw(g):
        return (g[idx],)

    return _make("scatter_add", out, (a,), bw)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row lookup into an embedding table; gradient scatters back into the table."""
    return gather(table, ids)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.node.parents:
            if p.node is not None and id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def backward(root: Tensor, free_graph: bool = True) -> None:
    """Accumulate d(root)/d(leaf) into every reachable requires_grad leaf.

    root must be scalar; gradients from multiple graph uses of the same
    tensor add. The graph is released afterwards unless free_graph=False.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None:
                continue
            if p.node is not None:
                acc = grads.get(id(p))
                # never accumulate in place: backward rules may alias their input
                grads[id(p)] = pg.copy() if acc is None else acc + pg
            elif p.requires_grad:
                p.accumulate_grad(pg)
    if root.requires_grad and root.node is None:
        root.accumulate_grad(np.ones_like(root.data))
    if free_graph:
        for t in order:
            t.node = None


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per component is |analytic - numeric| / max(1, |analytic|).
    Non-finite values propagate into the returned maximum.
    """
    if not (0.0 < h <= 1e-3):
        raise ValueError(f"grad_check: h must be in (0, 1e-3], got {h}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    numeric = np.zeros_like(analytic)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(Tensor(probe.data)).item()
            flat[i] = orig - h
            lo = f(Tensor(probe.data)).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * h)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


# ---------------------------------------------------------------------------
# parameters and modules
# ---------------------------------------------------------------------------

def init_uniform(rng: np.random.Generator, fan_in: int, shape: tuple) -> Tensor:
    """Weight init: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_normal(rng: np.random.Generator, shape: tuple, std: float = 0.02) -> Tensor:
    """Embedding / learnable-query init: normal(0, std)."""
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Module:
    """Lightweight parameter container with recursive named traversal.

    Attribute insertion order fixes parameter naming, so checkpoints are
    deterministic. A tensor reachable through two paths is yielded once,
    under its first name — shared storage has exactly one name.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        yield from self._walk(prefix, seen)

    def _walk(self, prefix: str, seen: set) -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                if id(val) not in seen:
                    seen.add(id(val))
                    yield name, val
            elif isinstance(val, Module):
                if id(val) not in seen:
                    seen.add(id(val))
                    yield from val._walk(name, seen)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module) and id(item) not in seen:
                        seen.add(id(item))
                        yield from item._walk(f"{name}.{i}", seen)

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())


class Linear(Module):
    """y = x @ W (+ b). Weight shape (fan_in, fan_out)."""

    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True):
        self.w = init_uniform(rng, fan_in, (fan_in, fan_out))
        self.b = init_uniform(rng, fan_in, (fan_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.w)
        if self.b is not None:
            out = add(out, self.b)
        return out


class LayerNorm(Module):
    """Layer norm over the last axis with learned gain and shift."""

    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(mul(layer_norm(x), self.gain), self.shift)
