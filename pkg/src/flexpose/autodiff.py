"""A small reverse-mode automatic differentiation engine over float64 arrays.

Operations are evaluated eagerly; every result remembers its parents and a
closure that pushes the output gradient back to them, so the tape *is* the
graph. Broadcasting is limited to a leading batch dimension (or a scalar
constant operand).
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()


class NumericalError(FloatingPointError):
    """A forward value or gradient became NaN or infinite."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.node_id = next(_ids)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(self, o)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(as_tensor(o), self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(self, o)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: scale(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _node(data, parents: tuple, op: str, backward: Callable) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, rg, op, parents if rg else (), backward if rg else None)
    if not np.isfinite(out.data).all():
        raise NumericalError(f"numerical blow-up at node {out.node_id} ({op})")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # only a leading batch dimension may have been broadcast
    return g.reshape(-1, *shape).sum(axis=0)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == len(sb) + 1 and sa[1:] == sb:
        return
    if len(sb) == len(sa) + 1 and sb[1:] == sa:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} "
                     f"(inputs are nodes {a.node_id} and {b.node_id})")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _node(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)

    return _node(ad * bd, (a, b), "mul", bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * c, (a,), "scale", lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """``(..., n, k) @ (k, m)``; the right operand must be a plain matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _node(ad @ bd, (a, b), "matmul", bw)


def linear(x, w, b) -> Tensor:
    """Fused ``x @ w + b`` for a ``(B, k)`` input and a bias broadcast over the batch."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    out += b.data

    def bw(g):
        return (g @ wd.T if x.requires_grad else None,
                xd.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return _node(out, (x, w, b), "linear", bw)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    mask = np.where(a.data >= 0, 1.0, slope)
    return _node(a.data * mask, (a,), "leaky_relu", lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: (g * out,))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    p = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = np.einsum("...i,...i->...", g, p)[..., None]
        out = g - dot
        out *= p
        return (out,)

    return _node(p, (a,), "softmax", bw)


def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(a.data.sum(axis=axis), (a,), "sum", bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def sq_error(a, b) -> Tensor:
    """Sum of squared differences between two equally shaped tensors (a scalar)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sq_error: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data

    def bw(g):
        return 2.0 * g * d, -2.0 * g * d

    return _node(np.asarray((d * d).sum()), (a, b), "sq_error", bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        outs = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            outs.append(g[tuple(idx)])
        return tuple(outs)

    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    return _node(data, tuple(ts), "concat", bw)


def getitem(a, idx) -> Tensor:
    """Basic slicing (ints and slices)."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return _node(a.data[idx], (a,), "slice", bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (feature) axis; no learned affine."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, (a,), "layer_norm", bw)


def pairwise_sq_dists(x, y) -> Tensor:
    """Squared Euclidean distances between the rows of ``x`` (n, d) and ``y`` (m, d)."""
    x, y = as_tensor(x), as_tensor(y)
    if x.data.ndim != 2 or y.data.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"pairwise_sq_dists: shapes {x.shape} and {y.shape}")
    xd, yd = x.data, y.data
    d2 = np.einsum("ij,ij->i", xd, xd)[:, None] + np.einsum("ij,ij->i", yd, yd)[None, :]
    d2 -= 2.0 * (xd @ yd.T)
    np.maximum(d2, 0.0, out=d2)

    def bw(g):
        gx = 2.0 * (g.sum(axis=1)[:, None] * xd - g @ yd) if x.requires_grad else None
        gy = 2.0 * (g.sum(axis=0)[:, None] * yd - g.T @ xd) if y.requires_grad else None
        return gx, gy

    return _node(d2, (x, y), "pairwise_sq_dists", bw)


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with ``requires_grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``params`` (zeros for unreachable ones)."""
    for p in params:
        p.grad = None
    backward(loss)
    out = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericalError("non-finite gradient")
        out.append(g)
    return out


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeError("one gradient per parameter is required")
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        step = self.lr / c1
        root_c2 = np.sqrt(c2)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            # lr * (m / c1) / (sqrt(v / c2) + eps), rearranged to reuse buffers
            denom = np.sqrt(v)
            denom /= root_c2
            denom += self.eps
            np.divide(m, denom, out=denom)
            denom *= step
            p.data -= denom


def adam_step(params, grads, state: Adam) -> None:
    """Functional spelling of :meth:`Adam.step` for an existing optimizer state."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ShapeError("optimizer state was built for different parameters")
    state.step(grads)


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
               max_params: int = 10_000, order: int = 2, skip_kinks: bool = False):
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` rebuilds the scalar loss from the current parameter values.
    ``order`` selects the 3-point (2) or 5-point (4) central stencil; the
    latter keeps roundoff small enough to check gradient entries near 1e-8.
    Relative error per entry is ``|a - b| / max(1e-12, |a| + |b|)``.

    With ``skip_kinks`` (5-point only) an entry is excluded when its two
    embedded 3-point estimates (steps ``eps`` and ``2 eps``) disagree by more
    than 1e-3 relative, which means a non-differentiable point such as a
    leaky-relu kink lies inside the stencil. The return value is then
    ``(worst, n_skipped)``.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if skip_kinks and order != 4:
        raise ValueError("kink detection needs the 5-point stencil")
    params = list(params)
    total = int(np.sum([p.data.size for p in params]))
    if total > max_params:
        raise ValueError(f"grad_check limited to {max_params} entries, got {total}")
    analytic = grad(fn(), params)
    steps = (1, -1) if order == 2 else (2, 1, -1, -2)
    worst, skipped = 0.0, 0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        af = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            f = {}
            for k in steps:
                flat[i] = orig + k * eps
                f[k] = float(fn().data)
            flat[i] = orig
            d1 = (f[1] - f[-1]) / (2.0 * eps)
            if order == 2:
                num = d1
            else:
                d2 = (f[2] - f[-2]) / (4.0 * eps)
                num = (4.0 * d1 - d2) / 3.0
                if skip_kinks and abs(d1 - d2) > 1e-3 * (abs(d1) + abs(d2)) + 1e-10:
                    skipped += 1
                    continue
            rel = abs(af[i] - num) / max(1e-12, abs(af[i]) + abs(num))
            worst = max(worst, rel)
    return (worst, skipped) if skip_kinks else worst
