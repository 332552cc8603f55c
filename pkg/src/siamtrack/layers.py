"""Parameterised building blocks on top of the tensor engine."""

import numpy as np

from . import tensor as T
from .tensor import Param


class Module:
    """Holds Params and child Modules; collects them in declaration order."""

    def named_params(self, prefix=""):
        out = []
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}" if prefix else attr
            if isinstance(value, Param):
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_params(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{name}.{i}."))
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def zero_grad(self):
        for p in self.params():
            p.tensor.grad = None

    def finalize_names(self):
        """Stamp full dotted names onto Params and reject duplicates."""
        seen = set()
        for name, p in self.named_params():
            if name in seen:
                raise ValueError(f"duplicate parameter name: {name}")
            seen.add(name)
            p.name = name
        return self


def he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, rng=None, zero_init=False):
        self.stride = stride
        self.pad = pad
        if zero_init:
            w = np.zeros((cout, cin, k, k))
        else:
            w = he_uniform(rng, (cout, cin, k, k), cin * k * k)
        self.weight = Param(w, "weight")
        self.bias = Param(np.zeros(cout), "bias")

    def __call__(self, x):
        return T.conv2d(x, self.weight.tensor, self.bias.tensor, self.stride, self.pad)


class BottleneckFFN(Module):
    """Two 1x1 convs (C -> hidden -> C) with a ReLU between, no output activation.

    Runs on [N,C,1,1] pooled vectors and emits per-channel weights.
    """

    def __init__(self, channels, hidden, rng):
        self.reduce = Conv2d(channels, hidden, 1, rng=rng)
        self.expand = Conv2d(hidden, channels, 1, rng=rng)

    def __call__(self, x):
        return self.expand(T.relu(self.reduce(x)))


class Gate(Module):
    """Scalar learned weight for a residual branch, initialised to zero."""

    def __init__(self):
        self.gamma = Param(np.zeros(()), "gamma")

    def __call__(self, x):
        return T.scale(x, self.gamma.tensor)

    @property
    def value(self):
        return float(self.gamma.data)
