"""Mean-reduced training losses as single tape nodes."""

import numpy as np

from .tensor import Tensor, ShapeError, _node, _wrap


def _check(a, b, what):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{what}: shapes {a.data.shape} and {b.data.shape} differ")


def bce_with_logits(pred, target):
    """Mean binary cross-entropy of logits against targets in [0, 1].

    Computed in the softplus form max(z,0) - z*t + log(1+exp(-|z|)), which is
    stable for large magnitude logits.
    """
    pred, target = _wrap(pred), _wrap(target)
    _check(pred, target, "bce_with_logits")
    z, t = pred.data, target.data
    vals = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out_data = vals.mean()

    def backward():
        sig = 0.5 * (np.tanh(0.5 * z) + 1.0)
        scale = float(out.grad) / z.size
        if pred.requires_grad:
            pred._accum((sig - t) * scale)
        if target.requires_grad:
            target._accum(-z * scale)

    out = _node(np.asarray(out_data), (pred, target), backward)
    return out


def l1_loss(a, b):
    """Mean absolute difference."""
    a, b = _wrap(a), _wrap(b)
    _check(a, b, "l1_loss")
    diff = a.data - b.data
    out_data = np.abs(diff).mean()

    def backward():
        g = np.sign(diff) * (float(out.grad) / diff.size)
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    out = _node(np.asarray(out_data), (a, b), backward)
    return out


def mse_loss(a, b):
    """Mean squared difference."""
    a, b = _wrap(a), _wrap(b)
    _check(a, b, "mse_loss")
    diff = a.data - b.data
    out_data = (diff * diff).mean()

    def backward():
        g = diff * (2.0 * float(out.grad) / diff.size)
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    out = _node(np.asarray(out_data), (a, b), backward)
    return out
