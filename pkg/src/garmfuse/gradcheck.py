"""Finite-difference verification of tape gradients.

Run under `precision("float64")`; central differences in float32 drown in
rounding noise long before the 1e-4 gate.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad, tape


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def _rel_err(ga, gn):
    return abs(ga - gn) / max(1e-8, abs(ga) + abs(gn))


def grad_check(f, params, h=1e-5, tol=1e-4, probes_per_param=None, rng=None):
    """Compare tape gradients of scalar `f()` against central differences.

    `f` must be a pure function of `params` (re-evaluated many times).
    `probes_per_param` limits how many coordinates of each parameter get
    probed; None probes all of them.
    """
    t = tape()
    t.clear()
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [None if p.grad is None else p.grad.copy() for p in params]
    t.clear()

    report = GradCheckReport(max_rel_err=0.0, tol=tol)
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        n = flat.size
        if probes_per_param is None or probes_per_param >= n:
            idxs = range(n)
        else:
            gen = rng if rng is not None else np.random.default_rng(0)
            idxs = gen.choice(n, size=probes_per_param, replace=False)
        ga_flat = (
            np.zeros(n) if analytic[k] is None else analytic[k].reshape(-1)
        )
        worst = 0.0
        with no_grad():
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                gn = (up - down) / (2.0 * h)
                worst = max(worst, _rel_err(float(ga_flat[i]), gn))
        report.per_param[k] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
