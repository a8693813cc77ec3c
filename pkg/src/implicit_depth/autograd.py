"""A small reverse-mode automatic differentiation engine over numpy arrays.

Each :class:`Tensor` records the tensors it was computed from and a closure
that pushes its gradient back to them. ``Tensor.backward`` walks the graph in
reverse topological order. Only the operations the models in this package
need are implemented; image tensors are channels-last (N, H, W, C).
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, parents=(), requires_grad=None, name=""):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = None
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self._parents)
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # interior nodes hold gradients only for the duration of this pass
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(data, parents, backward, name=""):
    out = Tensor(data, parents, name=name)
    if out.requires_grad:
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a) -> Tensor:
    return _make(-a.data, (a,), lambda g: a._accumulate(-g), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def tsum(a) -> Tensor:
    return _make(a.data.sum(), (a,), lambda g: a._accumulate(np.broadcast_to(g, a.shape)), "sum")


def tmean(a) -> Tensor:
    n = a.data.size
    return _make(a.data.mean(), (a,),
                 lambda g: a._accumulate(np.broadcast_to(g / n, a.shape)), "mean")


def elu(a, alpha: float = 1.0) -> Tensor:
    x = a.data
    out = x.copy()
    negative = x < 0
    out[negative] = alpha * np.expm1(x[negative])

    def backward(g):
        # d/dx is 1 for x > 0 and out + alpha otherwise
        slope = np.minimum(out, 0.0)
        slope += alpha
        if alpha != 1.0:
            slope[~negative] = 1.0
        a._accumulate(g * slope)

    return _make(out, (a,), backward, "elu")


def sigmoid(a) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        a._accumulate(g * out * (1.0 - out))

    return _make(out, (a,), backward, "sigmoid")


def log(a) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data), "log")


def exp(a) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: a._accumulate(g * out), "exp")


def tabs(a) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: a._accumulate(g * np.sign(a.data)), "abs")


def clip(a, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: a._accumulate(g * inside), "clip")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(part)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 backward, "concat")


def take_rows(a, index: np.ndarray) -> Tensor:
    """``a[index]`` along the first axis."""
    index = np.asarray(index)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _make(a.data[index], (a,), backward, "take_rows")


def reshape(a, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)), "reshape")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 1, dilation: int = 1) -> Tensor:
    """2-D cross-correlation, channels-last.

    x: (N, H, W, Cin); weight: (kh, kw, Cin, Cout); bias: (Cout,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    n, h, w, cin = x.shape
    kh, kw, wcin, cout = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {wcin}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1

    def window(arr, i, j):
        i, j = i * dilation, j * dilation
        return arr[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :]

    out = np.zeros((n, ho, wo, cout), dtype=np.result_type(x.data, weight.data))
    for i in range(kh):
        for j in range(kw):
            out += window(xp, i, j) @ weight.data[i, j]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)

    def backward(g):
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            g2 = g.reshape(-1, cout)
            for i in range(kh):
                for j in range(kw):
                    gw[i, j] = window(xp, i, j).reshape(-1, cin).T @ g2
            weight._accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    window(gxp, i, j)[...] += g @ weight.data[i, j].T
            x._accumulate(gxp[:, padding : padding + h, padding : padding + w, :])

    return _make(out, tuple(parents), backward, "conv2d")


def bilinear_gather(fmap, batch_index, u, v) -> Tensor:
    """Sample a channels-last map at continuous locations.

    fmap: (N, h, w, K); batch_index, u, v: (B,). Coordinates are clamped to the
    map extent (border padding). Returns (B, K).
    """
    fmap = as_tensor(fmap)
    _, h, w, k = fmap.shape
    b = np.asarray(batch_index, dtype=np.int64)
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, w - 1)
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, h - 1)
    x0 = np.clip(np.floor(u), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(v), 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (u - x0)[:, None].astype(fmap.dtype)
    ay = (v - y0)[:, None].astype(fmap.dtype)
    corners = ((y0, x0, (1 - ax) * (1 - ay)), (y0, x1, ax * (1 - ay)),
               (y1, x0, (1 - ax) * ay), (y1, x1, ax * ay))
    data = fmap.data
    out = sum(data[b, yy, xx] * wt for yy, xx, wt in corners)

    def backward(g):
        full = np.zeros_like(data)
        flat = full.reshape(-1, k)
        for yy, xx, wt in corners:
            rows = (b * h + yy) * w + xx
            np.add.at(flat, rows, g * wt)
        fmap._accumulate(full)

    return _make(out, (fmap,), backward, "bilinear_gather")
