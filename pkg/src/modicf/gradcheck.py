"""Finite-difference verification of analytic gradients.

Compares reverse-mode gradients against central differences, parameter
entry by parameter entry. The relative error uses a unit floor in the
denominator so near-zero gradients are compared absolutely, which keeps
the check meaningful at 32-bit precision.
"""

import numpy as np

from .autodiff import backward


def grad_check(fn, params, h=None):
    """Worst relative error between analytic and numeric gradients.

    fn: nullary callable rebuilding the scalar loss from current parameter
    values (a fresh graph per call). params: tensors to perturb.
    """
    params = list(params)
    if h is None:
        h = 1e-3 if params and params[0].data.dtype == np.float32 else 1e-5

    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            saved = flat[j]
            flat[j] = saved + h
            up = float(fn().data)
            flat[j] = saved - h
            down = float(fn().data)
            flat[j] = saved
            numeric = (up - down) / (2 * h)
            aj = float(a.reshape(-1)[j])
            err = abs(aj - numeric) / max(1.0, abs(aj), abs(numeric))
            worst = max(worst, err)
    return worst
