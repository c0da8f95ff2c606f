"""Parameter containers shared by the network modules."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc


class Module:
    """Holds named parameter tensors and child modules in insertion order."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def add_param(self, name, array):
        t = dc.parameter(np.asarray(array), name=name)
        self._params[name] = t
        object.__setattr__(self, name, t)
        return t

    def add_child(self, name, module):
        self._children[name] = module
        object.__setattr__(self, name, module)
        return module

    def named_parameters(self, prefix=""):
        for name, t in self._params.items():
            yield prefix + name, t
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)


def init_weight(rng, fan_in, fan_out, dtype, zero=False):
    if zero:
        return np.zeros((fan_in, fan_out), dtype=dtype)
    return (rng.normal(size=(fan_in, fan_out)) / np.sqrt(fan_in)).astype(dtype)


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng, dtype=np.float64, zero=False, bias=True):
        super().__init__()
        self.add_param("weight", init_weight(rng, fan_in, fan_out, dtype, zero))
        self.has_bias = bias
        if bias:
            self.add_param("bias", np.zeros(fan_out, dtype=dtype))

    def __call__(self, x):
        out = dc.matmul(x, self.weight)
        return out + self.bias if self.has_bias else out
