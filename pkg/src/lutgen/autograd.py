"""A small reverse-mode differentiation engine over NumPy arrays.

Only the operations the tokenizer and the token policy need are provided.
Volumetric tensors are channels-last: ``(batch, depth, height, width, C)``.
A graph is recorded only when at least one input requires a gradient.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- plumbing -----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior gradients are not needed once propagated
                    node.grad = None

    # -- elementwise ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other ** -1.0)
        return mul(self, 1.0 / other)

    def __pow__(self, p: float):
        x = self.data
        return _make(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        x = self.data

        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)

        def back(g):
            out = np.zeros_like(x)
            if basic:
                out[idx] = g  # basic indexing never repeats an element
            else:
                np.add.at(out, idx, g)
            return (out,)

        return _make(x[idx], (self,), back)

    def exp(self):
        y = np.exp(self.data)
        return _make(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return _make(np.log(x), (self,), lambda g: (g / x,))

    def sigmoid(self):
        y = _sigmoid(self.data)
        return _make(y, (self,), lambda g: (g * y * (1.0 - y),))

    def tanh(self):
        y = np.tanh(self.data)
        return _make(y, (self,), lambda g: (g * (1.0 - y * y),))

    def silu(self):
        x = self.data
        s = _sigmoid(x)
        return _make(x * s, (self,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))

    def gelu(self):
        # tanh approximation
        x = self.data
        c = np.sqrt(2.0 / np.pi).astype(x.dtype)
        inner = c * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        y = 0.5 * x * (1.0 + t)

        def back(g):
            dinner = c * (1.0 + 3 * 0.044715 * x**2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

        return _make(y, (self,), back)

    # -- reductions and shape -------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        x = self.data

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape),)

        return _make(np.sum(x, axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        x = self.data
        shape = shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape
        return _make(x.reshape(shape), (self,), lambda g: (g.reshape(x.shape),))

    def transpose(self, *axes):
        axes = axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes
        inv = np.argsort(axes)
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def log_softmax(self, axis: int = -1):
        x = self.data
        shifted = x - x.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        y = shifted - lse

        def back(g):
            return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

        return _make(y, (self,), back)

    def softmax(self, axis: int = -1):
        x = self.data
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        y = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

        return _make(y, (self,), back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(data)
    out = Tensor(data, requires_grad=True, _parents=parents)

    def run(g):
        grads = backward(g)
        for p, pg in zip(parents, grads):
            if p.requires_grad and pg is not None:
                p._accumulate(pg)

    out._backward = run
    return out


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    x, y = a.data, b.data
    return _make(
        x * y,
        (a, b),
        lambda g: (
            _unbroadcast(g * y, x.shape) if a.requires_grad else None,
            _unbroadcast(g * x, y.shape) if b.requires_grad else None,
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    x, y = a.data, b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape) if y.ndim > 1 else np.multiply.outer(g, y)
        if b.requires_grad:
            if x.ndim == 1:
                gb = np.multiply.outer(x, g)
            elif y.ndim == 2 and x.ndim > 2:
                gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return ga, gb

    return _make(x @ y, (a, b), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def embedding(weight: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``weight[idx]`` with a scatter-add backward."""
    w = weight.data
    idx = np.asarray(idx)

    def back(g):
        out = np.zeros_like(w)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, w.shape[1]))
        return (out,)

    return _make(w[idx], (weight,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm, bt = gamma.data, beta.data

    def back(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gm
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, v.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, v.shape[-1]).sum(axis=0)
        return gx, gg, gb

    return _make(xhat * gm + bt, (x, gamma, beta), back)


# -- volumetric ops -----------------------------------------------------------

def _conv_valid(x: np.ndarray, w: np.ndarray):
    """Stride-1 valid correlation; returns the output and a backward closure.

    All kernel offsets are evaluated by one matrix product into a
    ``(k^3, O, B, D, H, W)`` response volume, which is then shift-added.
    """
    bsz, d, h, wd_, cin = x.shape
    k = w.shape[0]
    cout = w.shape[-1]
    do, ho, wo = d - k + 1, h - k + 1, wd_ - k + 1
    offsets = [(a, b, c) for a in range(k) for b in range(k) for c in range(k)]
    xt = np.ascontiguousarray(x.transpose(4, 0, 1, 2, 3)).reshape(cin, -1)
    wall = np.ascontiguousarray(w.transpose(0, 1, 2, 4, 3)).reshape(k**3 * cout, cin)
    z = (wall @ xt).reshape(k**3, cout, bsz, d, h, wd_)
    yt = np.zeros((cout, bsz, do, ho, wo), dtype=z.dtype)
    for n, (a, b, c) in enumerate(offsets):
        yt += z[n, :, :, a : a + do, b : b + ho, c : c + wo]
    y = np.ascontiguousarray(yt.transpose(1, 2, 3, 4, 0))

    def back(g: np.ndarray, need_x: bool = True, need_w: bool = True):
        gt = np.ascontiguousarray(g.transpose(4, 0, 1, 2, 3))
        gz = np.zeros((k**3, cout, bsz, d, h, wd_), dtype=g.dtype)
        for n, (a, b, c) in enumerate(offsets):
            gz[n, :, :, a : a + do, b : b + ho, c : c + wo] = gt
        gz = gz.reshape(k**3 * cout, -1)
        gw = gx = None
        if need_w:
            gw = (gz @ xt.T).reshape(k, k, k, cout, cin).transpose(0, 1, 2, 4, 3)
        if need_x:
            gx = (wall.T @ gz).reshape(cin, bsz, d, h, wd_).transpose(1, 2, 3, 4, 0)
        return gx, gw

    return y, back


def _space_to_depth(x: np.ndarray, s: int) -> np.ndarray:
    b, d, h, w, c = x.shape
    x = x.reshape(b, d // s, s, h // s, s, w // s, s, c).transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(b, d // s, h // s, w // s, s**3 * c)


def _depth_to_space(x: np.ndarray, s: int, c: int) -> np.ndarray:
    b, d, h, w, _ = x.shape
    x = x.reshape(b, d, h, w, s, s, s, c).transpose(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(b, d * s, h * s, w * s, c)


def _kernel_to_depth(w: np.ndarray, s: int) -> np.ndarray:
    k, _, _, c, o = w.shape
    q = k // s
    w = w.reshape(q, s, q, s, q, s, c, o).transpose(0, 2, 4, 1, 3, 5, 6, 7)
    return w.reshape(q, q, q, s**3 * c, o)


def _depth_to_kernel(w: np.ndarray, s: int, c: int) -> np.ndarray:
    q, o = w.shape[0], w.shape[-1]
    w = w.reshape(q, q, q, s, s, s, c, o).transpose(0, 3, 1, 4, 2, 5, 6, 7)
    return w.reshape(q * s, q * s, q * s, c, o)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation with zero padding.

    ``x``: ``(B, D, H, W, C)``; ``weight``: ``(k, k, k, C, O)``; ``bias``: ``(O,)``.
    Strided convolutions require ``k`` and the padded extent to be multiples
    of the stride; they are rewritten as stride-1 convolutions on a
    space-to-depth view.
    """
    xd, wd = x.data, weight.data
    k, _, _, cin, cout = wd.shape
    if xd.shape[-1] != cin:
        raise ValueError(f"conv3d: input has {xd.shape[-1]} channels, weight expects {cin}")
    p, s = padding, stride
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (p, p), (0, 0))) if p else xd
    if s > 1:
        if k % s or any(n % s for n in xp.shape[1:4]):
            raise ValueError("conv3d: kernel and padded size must be multiples of the stride")
        y, inner = _conv_valid(_space_to_depth(xp, s), _kernel_to_depth(wd, s))
    else:
        y, inner = _conv_valid(xp, wd)
    if bias is not None:
        y += bias.data

    def back(g):
        gx, gw = inner(g, need_x=x.requires_grad, need_w=weight.requires_grad)
        if gx is not None:
            if s > 1:
                gx = _depth_to_space(gx, s, cin)
            if p:
                gx = gx[:, p:-p, p:-p, p:-p, :]
        if gw is not None and s > 1:
            gw = _depth_to_kernel(gw, s, cin)
        gb = g.reshape(-1, cout).sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, back)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the three spatial axes."""
    v = x.data
    f = factor
    y = v.repeat(f, axis=1).repeat(f, axis=2).repeat(f, axis=3)
    b, d, h, w, c = v.shape

    def back(g):
        return (g.reshape(b, d, f, h, f, w, f, c).sum(axis=(2, 4, 6)),)

    return _make(y, (x,), back)
