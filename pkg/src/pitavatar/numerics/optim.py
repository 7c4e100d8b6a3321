from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Named trainable tensors plus AdamW moment buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def num_values(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self):
        return {k: p.grad for k, p in self.params.items()}

    def state_arrays(self):
        """Parameters and optimizer state as a flat name -> array map."""
        out = {f"param/{k}": p.data for k, p in self.params.items()}
        out.update({f"adam_m/{k}": a for k, a in self.m.items()})
        out.update({f"adam_v/{k}": a for k, a in self.v.items()})
        out["adam_step"] = np.array([float(self.step)])
        return out

    def load_arrays(self, arrays, strict=True):
        for k, p in self.params.items():
            key = f"param/{k}"
            if key not in arrays:
                if strict:
                    raise KeyError(f"checkpoint lacks parameter {k!r}")
                continue
            a = arrays[key]
            if a.shape != p.data.shape:
                raise ValueError(f"parameter {k!r}: checkpoint shape {a.shape} != {p.data.shape}")
            p.data = a.copy()
            if f"adam_m/{k}" in arrays:
                self.m[k] = arrays[f"adam_m/{k}"].copy()
                self.v[k] = arrays[f"adam_v/{k}"].copy()
        if "adam_step" in arrays:
            self.step = int(arrays["adam_step"][0])


def adamw_step(store, grads=None, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8,
               weight_decay=0.01):
    """One AdamW update (decoupled weight decay, bias-corrected moments)."""
    if grads is None:
        grads = store.grads()
    for name in store.params:
        if grads.get(name) is None:
            raise ValueError(f"no gradient for parameter {name!r}")
        if grads[name].shape != store.params[name].data.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def clip_grad_norm(store, max_norm=0.1):
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad))
                          for p in store.params.values() if p.grad is not None))
    if total > max_norm:
        s = max_norm / total
        for p in store.params.values():
            if p.grad is not None:
                p.grad = p.grad * s
    return total


@dataclass
class LrSchedule:
    peak_lr: float = 1e-4
    warmup_steps: int = 100
    total_steps: int = 2000


def cosine_lr(sched, step):
    if step < sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    span = max(sched.total_steps - sched.warmup_steps, 1)
    progress = min(max((step - sched.warmup_steps) / span, 0.0), 1.0)
    return 0.5 * sched.peak_lr * (1.0 + math.cos(math.pi * progress))
