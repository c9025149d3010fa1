"""Reverse-mode autodiff over numpy arrays.

A Tensor records the ops that produced it; backward() runs the recorded
closures once each in reverse topological order and accumulates gradients
into every tensor with requires_grad. Composite ops (convolution, instance
norm, pooling) are single tape nodes with hand-written backward rules, which
keeps the tape short and the hot paths inside BLAS.
"""

import numpy as np

from ..errors import StainBenchError


class ShapeError(StainBenchError):
    pass


def _as_float(data):
    arr = np.asarray(data)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """Numpy array plus gradient accumulator and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_float(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() starts from a scalar loss")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, -other)
        return add(self, -float(other))

    def __rsub__(self, other):
        return add(-self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / float(other))

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    # Sum the gradient back down to the original operand shape.
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    if not isinstance(b, Tensor):
        # Plain python numbers stay weakly typed so float32 data is not
        # silently promoted.
        offset = float(b)
        a = _wrap(a)

        def backward_scalar():
            if a.requires_grad:
                a._accum(out.grad)

        out = _node(a.data + offset, (a,), backward_scalar)
        return out
    a = _wrap(a)

    def backward():
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad, b.data.shape))

    out = _node(a.data + b.data, (a, b), backward)
    return out


def mul(a, b):
    if not isinstance(b, Tensor):
        scale = float(b)
        a = _wrap(a)

        def backward_scalar():
            if a.requires_grad:
                a._accum(out.grad * scale)

        out = _node(a.data * scale, (a,), backward_scalar)
        return out
    a = _wrap(a)

    def backward():
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad * a.data, b.data.shape))

    out = _node(a.data * b.data, (a, b), backward)
    return out


def tsum(a):
    a = _wrap(a)

    def backward():
        if a.requires_grad:
            a._accum(np.full_like(a.data, float(out.grad)))

    out = _node(a.data.sum(), (a,), backward)
    return out


def tmean(a):
    return tsum(a) / a.size


def relu(a):
    a = _wrap(a)
    mask = a.data > 0

    def backward():
        if a.requires_grad:
            a._accum(out.grad * mask)

    out = _node(a.data * mask, (a,), backward)
    return out


def leaky_relu(a, slope=0.2):
    a = _wrap(a)
    factor = np.where(a.data > 0, a.data.dtype.type(1.0), a.data.dtype.type(slope))

    def backward():
        if a.requires_grad:
            a._accum(out.grad * factor)

    out = _node(a.data * factor, (a,), backward)
    return out


def tanh_act(a):
    a = _wrap(a)
    y = np.tanh(a.data)

    def backward():
        if a.requires_grad:
            a._accum(out.grad * (1.0 - y * y))

    out = _node(y, (a,), backward)
    return out


def sigmoid(a):
    a = _wrap(a)
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)

    def backward():
        if a.requires_grad:
            a._accum(out.grad * y * (1.0 - y))

    out = _node(y, (a,), backward)
    return out


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D tensors")

    def backward():
        if a.requires_grad:
            a._accum(out.grad @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ out.grad)

    out = _node(a.data @ b.data, (a, b), backward)
    return out


def reshape(a, shape):
    a = _wrap(a)

    def backward():
        if a.requires_grad:
            a._accum(out.grad.reshape(a.data.shape))

    out = _node(a.data.reshape(shape), (a,), backward)
    return out


# -- padding ---------------------------------------------------------------


def _pad_forward(x, pad, mode):
    if pad == 0:
        return x
    spec = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    if mode == "zeros":
        return np.pad(x, spec)
    if mode == "reflect":
        return np.pad(x, spec, mode="reflect")
    raise ShapeError(f"unknown pad mode {mode!r}")


def _pad_backward(g, pad, mode, h, w):
    if pad == 0:
        return g
    if mode == "zeros":
        return g[:, :, pad : pad + h, pad : pad + w].copy()
    # Reflection is separable, so fold the pad strips back one axis at a
    # time over the full extent of the other (corners fold twice). Padded
    # position j mirrors index pad-j on the left and w-2-j on the right.
    gc = g[:, :, :, pad : pad + w].copy()
    for j in range(pad):
        gc[:, :, :, pad - j] += g[:, :, :, j]
        gc[:, :, :, w - 2 - j] += g[:, :, :, pad + w + j]
    gr = gc[:, :, pad : pad + h, :].copy()
    for j in range(pad):
        gr[:, :, pad - j, :] += gc[:, :, j, :]
        gr[:, :, h - 2 - j, :] += gc[:, :, pad + h + j, :]
    return gr


def _im2col(xp, kh, kw, stride):
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    # (N, C, Ho, Wo, kh, kw) -> (N, C*kh*kw, Ho*Wo)
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols, xp_shape, kh, kw, stride, ho, wo):
    n, c, hp, wp = xp_shape
    g = np.zeros(xp_shape, dtype=cols.dtype)
    blocks = cols.reshape(n, c, kh, kw, ho, wo)
    for ki in range(kh):
        for kj in range(kw):
            g[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += blocks[
                :, :, ki, kj
            ]
    return g


def conv2d(x, w, b, stride=1, pad=0, pad_mode="zeros"):
    """Cross-correlate NCHW input x with OIHW weights w plus bias b."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW weights")
    n, c, hi, wi = x.data.shape
    f, c_w, kh, kw = w.data.shape
    if c != c_w:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weights {c_w}")
    if b.data.shape != (f,):
        raise ShapeError("bias must have one entry per output channel")
    if hi + 2 * pad < kh or wi + 2 * pad < kw:
        raise ShapeError("kernel larger than padded input")
    xp = _pad_forward(x.data, pad, pad_mode)
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(f, c * kh * kw)
    out_data = np.einsum("fk,nkl->nfl", wmat, cols, optimize=True)
    out_data = out_data.reshape(n, f, ho, wo) + b.data.reshape(1, f, 1, 1)

    def backward():
        g = out.grad.reshape(n, f, ho * wo)
        if b.requires_grad:
            b._accum(g.sum(axis=(0, 2)))
        if w.requires_grad:
            gw = np.einsum("nfl,nkl->fk", g, cols, optimize=True)
            w._accum(gw.reshape(w.data.shape))
        if x.requires_grad:
            gcols = np.einsum("fk,nfl->nkl", wmat, g, optimize=True)
            gp = _col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
            x._accum(_pad_backward(gp, pad, pad_mode, hi, wi))

    out = _node(out_data, (x, w, b), backward)
    return out


def instance_norm(x, gamma, beta, eps=1e-5):
    """Normalize each (sample, channel) plane over space, then scale/shift."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if x.data.ndim != 4:
        raise ShapeError("instance_norm expects NCHW input")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("instance_norm scale/shift must be per channel")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward():
        g = out.grad
        if beta.requires_grad:
            beta._accum(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = g * gamma.data.reshape(1, c, 1, 1)
            m1 = gx.mean(axis=(2, 3), keepdims=True)
            m2 = (gx * xhat).mean(axis=(2, 3), keepdims=True)
            x._accum(inv * (gx - m1 - xhat * m2))

    out = _node(out_data, (x, gamma, beta), backward)
    return out


def max_pool2(x):
    """2x2 max pooling with stride 2; ties route to the first maximum."""
    x = _wrap(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError("max_pool2 needs even spatial extents")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward():
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], out.grad[..., None], axis=-1)
        gx = gflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        x._accum(gx.reshape(n, c, h, w))

    out = _node(out_data, (x,), backward)
    return out


def upsample_nearest2(x):
    """Double both spatial extents by pixel repetition."""
    x = _wrap(x)
    if x.data.ndim != 4:
        raise ShapeError("upsample_nearest2 expects NCHW input")
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward():
        n, c, h, w = x.data.shape
        g = out.grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        x._accum(g)

    out = _node(out_data, (x,), backward)
    return out
