"""Layer building blocks on top of the autodiff engine.

A tiny Module system: assigning a Tensor attribute registers a parameter,
assigning a Module registers a child.  Parameter initialization is driven by
a numpy Generator so whole models are reproducible from one seed.
"""

from __future__ import annotations

import numpy as np

from . import engine
from .engine import Tensor


class Module:
    """Base class with parameter/child registration and train/eval state."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield (prefix + name, b)
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self):
        self.set_training(True)

    def eval(self):
        self.set_training(False)

    def set_training(self, flag):
        object.__setattr__(self, "training", bool(flag))
        for child in self._children.values():
            child.set_training(flag)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def annotate_scopes(self, prefix=""):
        """Assign dotted path names used by the FLOP recorder."""
        object.__setattr__(self, "_scope", prefix.rstrip(".") or "top")
        for cname, child in self._children.items():
            child.annotate_scopes(prefix + cname + ".")

    @property
    def scope(self):
        return getattr(self, "_scope", None)


class Conv2d(Module):
    """Convolution layer; weights use fan-in-scaled uniform init, zero bias."""

    def __init__(self, cin, cout, k, rng, stride=1, padding=0, dilation=1,
                 bias=True, dtype=np.float64):
        super().__init__()
        self.cin = cin
        self.cout = cout
        self.k = k
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        bound = float(np.sqrt(1.0 / (cin * k * k)))
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.has_bias = bias
        if bias:
            self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        with engine.scoped(self.scope):
            return engine.conv2d(x, self.weight,
                                 self.bias if self.has_bias else None,
                                 stride=self.stride, padding=self.padding,
                                 dilation=self.dilation)


class BatchNorm2d(Module):
    def __init__(self, c, dtype=np.float64, eps=1e-5, momentum=0.1):
        super().__init__()
        self.c = c
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(c, dtype=np.float64))
        self.register_buffer("running_var", np.ones(c, dtype=np.float64))

    def __call__(self, x):
        with engine.scoped(self.scope):
            return engine.batch_norm(x, self.gamma, self.beta,
                                     self.running_mean, self.running_var,
                                     training=self.training,
                                     momentum=self.momentum, eps=self.eps)


class ConvBNReLU(Module):
    """conv -> batch norm -> ReLU, the network's standard sequential block."""

    def __init__(self, cin, cout, k, rng, stride=1, padding=None, dilation=1,
                 dtype=np.float64):
        super().__init__()
        if padding is None:
            padding = dilation * (k - 1) // 2  # "same" for odd k
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, padding=padding,
                           dilation=dilation, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def __call__(self, x):
        with engine.scoped(self.scope):
            return engine.relu(self.bn(self.conv(x)))


class ResidualBlock(Module):
    """Two 3x3 ConvBNReLU convs with identity skip (same channel count)."""

    def __init__(self, c, rng, dtype=np.float64):
        super().__init__()
        self.block1 = ConvBNReLU(c, c, 3, rng, dtype=dtype)
        self.conv2 = Conv2d(c, c, 3, rng, padding=1, dtype=dtype)
        self.bn2 = BatchNorm2d(c, dtype=dtype)

    def __call__(self, x):
        with engine.scoped(self.scope):
            y = self.bn2(self.conv2(self.block1(x)))
            return engine.relu(y + x)
