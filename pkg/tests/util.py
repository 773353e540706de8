"""Shared test helpers: finite-difference oracle and gradient comparison."""

from __future__ import annotations

import numpy as np

from nerfedit import numerics as nm


def fd_grad(f, arrays, h=1e-5):
    """Central finite differences of a scalar function of numpy arrays.

    f takes the list of arrays and returns a float.  Returns one gradient
    array per input, evaluated elementwise with step h.
    """
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(arrays)
            flat[i] = orig - h
            fm = f(arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return np.max(np.abs(a - b)) / denom


def check_grads(build, arrays, rtol=1e-4, h=1e-5):
    """Compare tape gradients of build(tensors)->scalar Tensor against FD."""
    tensors = [nm.parameter(a.copy()) for a in arrays]
    with nm.tape() as tp:
        loss = build(tensors)
        nm.backward(loss)
    analytic = [t.grad.data if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]

    def f(arrs):
        ts = [nm.tensor(a) for a in arrs]
        return build(ts).item()

    numeric = fd_grad(f, [a.copy() for a in arrays], h=h)
    errs = [rel_err(an, nu) for an, nu in zip(analytic, numeric)]
    return max(errs), analytic, numeric
