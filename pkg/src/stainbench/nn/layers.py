"""Parameterized layers and the module container they hang off."""

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    conv2d,
    instance_norm,
    matmul,
)

INIT_STD = 0.02


class Module:
    """Base container: walks its attributes to enumerate parameters."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays):
        from ..errors import CheckpointError

        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise CheckpointError(
                f"parameter names disagree; missing {missing}, unexpected {extra}"
            )
        for name, p in params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"{name}: checkpoint shape {arr.shape} != model shape {p.data.shape}"
                )
            p.data = arr.astype(p.data.dtype)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, pad=0, pad_mode="zeros",
                 rng=None, dtype=np.float32, init_std=None):
        rng = rng if rng is not None else np.random.default_rng()
        # The flat default suits normalized nets; pass fan-in scaled values
        # for plain conv stacks, where it would shrink activations away.
        std = INIT_STD if init_std is None else init_std
        w = rng.normal(0.0, std, size=(out_ch, in_ch, kernel, kernel))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.pad = pad
        self.pad_mode = pad_mode

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.pad, self.pad_mode)


class InstanceNorm2d(Module):
    def __init__(self, channels, eps=1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return instance_norm(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None, dtype=np.float32,
                 init_std=None):
        rng = rng if rng is not None else np.random.default_rng()
        std = INIT_STD if init_std is None else init_std
        w = rng.normal(0.0, std, size=(in_features, out_features))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        if x.data.ndim != 2:
            raise ShapeError("Linear expects a (batch, features) tensor")
        return matmul(x, self.weight) + self.bias
