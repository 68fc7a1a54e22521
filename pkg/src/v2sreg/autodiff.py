"""Minimal reverse-mode automatic differentiation over numpy arrays.

Feature tensors default to float32; every op also runs in float64 so the
whole network can be finite-difference checked in a 64-bit test mode. The
graph is rebuilt per forward pass; ``backward()`` walks it in reverse
topological order. Gradient accumulation is non-inplace, so passing an
upstream gradient array through to a parent never aliases a buffer that is
later mutated.
"""

import numpy as np

from .kernels import softmax_rows, softmax_rows_grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def backward(self, grad=None):
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum gradient over broadcast dimensions back to the original shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), bw)


def scale(a, s):
    def bw(g):
        _accum(a, g * s)

    return _node(a.data * s, (a,), bw)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _node(np.matmul(a.data, b.data), (a, b), bw)


def relu(a):
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return _node(np.where(mask, a.data, 0), (a,), bw)


def reshape(a, shape):
    old = a.data.shape

    def bw(g):
        _accum(a, g.reshape(old))

    return _node(a.data.reshape(shape), (a,), bw)


def transpose(a, axes):
    inv = np.argsort(axes)

    def bw(g):
        _accum(a, g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), bw)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def expand(a, shape):
    """Broadcast to ``shape``; gradient sums over the broadcast axes."""
    old = a.data.shape

    def bw(g):
        _accum(a, _unbroadcast(g, old))

    return _node(np.broadcast_to(a.data, shape).copy(), (a,), bw)


def gather(a, idx):
    """Select rows along axis 0; idx may be any integer array shape."""
    idx = np.asarray(idx)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx.ravel(), g.reshape(-1, *a.data.shape[1:]))
        _accum(a, ga)

    return _node(a.data[idx], (a,), bw)


def tsum(a, axis=None, keepdims=False):
    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def amax(a, axis):
    """Max along an axis; gradient routes to the lowest-index maximizer."""
    arg = np.argmax(a.data, axis=axis)  # argmax picks the first maximum
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        _accum(a, ga)

    return _node(out, (a,), bw)


def rownorm(a, eps=0.0):
    """Euclidean norm over the last axis with a zero-safe gradient."""
    sq = (a.data * a.data).sum(axis=-1)
    out = np.sqrt(sq + eps)

    def bw(g):
        denom = np.maximum(out, np.finfo(a.data.dtype).tiny)
        _accum(a, (g / denom)[..., None] * a.data)

    return _node(out, (a,), bw)


def softmax(a):
    """Numerically stable softmax over the last axis."""
    flat = np.ascontiguousarray(a.data.reshape(-1, a.data.shape[-1]))
    y = softmax_rows(flat).reshape(a.data.shape)

    def bw(g):
        gflat = np.ascontiguousarray(g.reshape(-1, g.shape[-1]))
        yflat = np.ascontiguousarray(y.reshape(-1, y.shape[-1]))
        _accum(a, softmax_rows_grad(yflat, gflat).reshape(a.data.shape))

    return _node(y, (a,), bw)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Layer normalization over the last (channel) axis."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        _accum(gamma, _unbroadcast(g * xhat, gamma.data.shape))
        _accum(beta, _unbroadcast(g, beta.data.shape))
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv * (dxhat - m1 - xhat * m2))

    return _node(xhat * gamma.data + beta.data, (a, gamma, beta), bw)


def weighted_gather(feats, idx, w):
    """Fixed-weight linear map: out[n] = sum_k w[n, k] * feats[idx[n, k]].

    idx and w are (N, K) constants (e.g. 3-NN interpolation weights); only
    ``feats`` participates in differentiation.
    """
    idx = np.asarray(idx)
    w = np.asarray(w, dtype=feats.data.dtype)
    out = np.einsum("nk,nkc->nc", w, feats.data[idx])

    def bw(g):
        gf = np.zeros_like(feats.data)
        np.add.at(gf, idx.ravel(), (w[..., None] * g[:, None, :]).reshape(-1, g.shape[-1]))
        _accum(feats, gf)

    return _node(out, (feats,), bw)
