"""AdamW with decoupled weight decay.

Default learning rate matches the full-scale recipe this build is scaled
down from (see the `fullscale` config section).
"""

import numpy as np

from .tensor import NumericsError, ShapeError


class AdamW:
    """Standard bias-corrected Adam update plus decoupled decay.

    Moment buffers live next to their parameters; `step_count` increases by
    exactly one per `step()`.
    """

    def __init__(self, named_params, lr=5e-5, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        """Apply one update from the accumulated gradients.

        A parameter with no gradient this step is only decayed, not moved.
        Non-finite gradients abort before any parameter is touched.
        """
        for name, p in zip(self.names, self.params):
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ShapeError(
                    f"gradient shape {p.grad.shape} does not match parameter "
                    f"{name} with shape {p.data.shape}"
                )
            if not np.all(np.isfinite(p.grad)):
                raise NumericsError(f"non-finite gradient for parameter {name}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= self.lr * (mhat / (np.sqrt(vhat) + self.eps)
                                 + self.weight_decay * p.data)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        """Flat name->array view of the optimizer state for checkpointing."""
        out = {"step": np.asarray([float(self.step_count)], dtype=np.float32)}
        for name, m, v in zip(self.names, self.m, self.v):
            out[f"m.{name}"] = m
            out[f"v.{name}"] = v
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(round(float(arrays["step"][0])))
        for i, name in enumerate(self.names):
            self.m[i] = np.asarray(arrays[f"m.{name}"], dtype=self.m[i].dtype).copy()
            self.v[i] = np.asarray(arrays[f"v.{name}"], dtype=self.v[i].dtype).copy()
