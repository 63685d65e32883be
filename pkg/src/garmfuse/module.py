"""Tiny parameter-container base for the network blocks."""

import numpy as np

from .tensor import Tensor, current_dtype


class Module:
    """Registers Tensors assigned to attributes as parameters, recursively."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_dict(self):
        return dict(self.named_parameters())

    def load_param_arrays(self, arrays, strict=True):
        """Copy raw arrays into parameters by name (dtype preserved per param)."""
        own = self.param_dict()
        if strict:
            missing = sorted(set(own) - set(arrays))
            extra = sorted(set(arrays) - set(own))
            if missing or extra:
                raise KeyError(
                    f"parameter name mismatch: missing={missing[:4]} extra={extra[:4]}"
                )
        for name, p in own.items():
            if name in arrays:
                a = arrays[name]
                if tuple(a.shape) != tuple(p.data.shape):
                    raise ValueError(
                        f"shape mismatch for {name}: file {a.shape} vs model {p.data.shape}"
                    )
                p.data = np.asarray(a, dtype=p.data.dtype).copy()

    def set_requires_grad(self, flag):
        for _, p in self.named_parameters():
            p.requires_grad = flag

    def zero_grads(self):
        for _, p in self.named_parameters():
            p.grad = None


def param(shape, rng, std=None, zero=False):
    """Fresh trainable parameter; He-style scale unless overridden."""
    if zero:
        data = np.zeros(shape, dtype=current_dtype())
    else:
        if std is None:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
            std = 1.0 / np.sqrt(max(fan_in, 1))
        data = rng.standard_normal(shape).astype(current_dtype()) * std
    return Tensor(data, requires_grad=True)
