from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor


def numeric_grad(fn, inputs, eps=1e-5):
    """Central finite differences of scalar ``fn(*inputs)`` w.r.t. each input."""
    grads = []
    for t in inputs:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = fn(*inputs).item()
            flat[i] = old - eps
            fm = fn(*inputs).item()
            flat[i] = old
            gf[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def analytic_grad(fn, inputs):
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def rel_err(a, b):
    """||a - b|| / max(||a||, ||b||), with a floor for all-zero gradients."""
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return num / den


def gradcheck(fn, inputs, eps=1e-5):
    """Worst relative error between tape and finite-difference gradients."""
    inputs = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    ana = analytic_grad(fn, inputs)
    num = numeric_grad(fn, inputs, eps)
    return max(rel_err(a, n) for a, n in zip(ana, num))
