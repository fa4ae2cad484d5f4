"""Layer modules over the tensor engine.

A Module owns parameter Tensors and child modules as plain attributes;
traversal follows attribute declaration order, which fixes the layer table
layout used by checkpoints. Weights use He fan-in initialization
(std = sqrt(2/fan_in)), biases start at zero, batch norm at identity.
"""

from __future__ import annotations

import math

import numpy as np

from .autograd import Tensor, batch_norm, conv2d, conv_transpose2d, dropout


class Module:
    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for v in self.__dict__.values():
            if isinstance(v, Module):
                yield v
            elif isinstance(v, (list, tuple)):
                for u in v:
                    if isinstance(u, Module):
                        yield u

    def modules(self):
        yield self
        for c in self._children():
            yield from c.modules()

    def named_parameters(self, prefix: str = ""):
        for k, v in self.__dict__.items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + k, v
            elif isinstance(v, Module):
                yield from v.named_parameters(prefix + k + ".")
            elif isinstance(v, (list, tuple)):
                for i, u in enumerate(v):
                    if isinstance(u, Module):
                        yield from u.named_parameters(f"{prefix}{k}.{i}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for k in getattr(self, "_buffer_names", ()):
            yield prefix + k, getattr(self, k)
        for k, v in self.__dict__.items():
            if isinstance(v, Module):
                yield from v.named_buffers(prefix + k + ".")
            elif isinstance(v, (list, tuple)):
                for i, u in enumerate(v):
                    if isinstance(u, Module):
                        yield from u.named_buffers(f"{prefix}{k}.{i}.")

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def count_params(module: Module) -> int:
    """Trainable parameter count. Batch-norm running statistics are buffers
    and do not contribute."""
    return sum(p.data.size for p in module.parameters())


def memory_bytes(module: Module) -> int:
    """Parameter memory at float32: 4 bytes per trainable parameter."""
    return 4 * count_params(module)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, dilation: int = 1, padding=0,
                 bias: bool = True, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        std = math.sqrt(2.0 / (cin * k * k))
        self.w = Tensor(rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        self.dilation = dilation
        self.padding = padding

    def forward(self, x):
        return conv2d(x, self.w, self.b, dilation=self.dilation, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 2, stride: int = 2,
                 bias: bool = True, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        std = math.sqrt(2.0 / (cin * k * k))
        self.w = Tensor(rng.normal(0.0, std, (cin, cout, k, k)).astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride

    def forward(self, x):
        return conv_transpose2d(x, self.w, self.b, stride=self.stride)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          training=self.training, momentum=self.momentum, eps=self.eps)


class Dropout(Module):
    """Holds the rate; the random stream is injected so training runs stay
    reproducible (set .rng before use in training mode)."""

    def __init__(self, rate: float, rng: np.random.Generator | None = None):
        super().__init__()
        self.rate = rate
        self.rng = rng

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            return x
        if self.rng is None:
            raise RuntimeError("Dropout used in training mode without an rng")
        return dropout(x, self.rate, self.rng, training=True)
