"""Parameter scoping and small building blocks shared by the network modules."""
from __future__ import annotations

import numpy as np

from . import numerics as nx


class Scope:
    """Hierarchical view onto a ParamStore: ``scope.sub("a")["w"]`` is ``a/w``."""

    def __init__(self, store, prefix="", rng=None):
        self.store = store
        self.prefix = prefix
        self.rng = rng

    def sub(self, name):
        return Scope(self.store, f"{self.prefix}{name}/", self.rng)

    def __getitem__(self, name):
        return self.store[self.prefix + name]

    def __contains__(self, name):
        return (self.prefix + name) in self.store

    def add(self, name, value):
        return self.store.add(self.prefix + name, value)

    def dense(self, name, fan_in, fan_out, zero=False, bias=True):
        std = 0.0 if zero else 1.0 / np.sqrt(fan_in)
        self.add(f"{name}.w", self.rng.normal(scale=std, size=(fan_in, fan_out)) if std else np.zeros((fan_in, fan_out)))
        if bias:
            self.add(f"{name}.b", np.zeros(fan_out))

    def norm(self, name, dim):
        self.add(f"{name}.g", np.ones(dim))
        self.add(f"{name}.b", np.zeros(dim))


def dense(scope, name, x):
    b = f"{name}.b"
    return nx.linear(x, scope[f"{name}.w"], scope[b] if b in scope else None)


def norm(scope, name, x):
    return nx.layernorm(x, scope[f"{name}.g"], scope[f"{name}.b"])


def init_mlp(scope, name, dims, zero_last=False):
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        scope.dense(f"{name}{i}", dims[i], dims[i + 1], zero=zero_last and last)


def mlp(scope, name, x, n_layers, act=nx.gelu):
    for i in range(n_layers):
        x = dense(scope, f"{name}{i}", x)
        if i < n_layers - 1:
            x = act(x)
    return x


def split_heads(x, heads):
    """(..., L, C) -> (..., heads, L, C // heads)."""
    *lead, L, C = x.shape
    x = nx.reshape(x, (*lead, L, heads, C // heads))
    nd = len(lead)
    return nx.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))


def merge_heads(x):
    """(..., heads, L, d) -> (..., L, heads * d)."""
    *lead, h, L, d = x.shape
    nd = len(lead)
    x = nx.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    return nx.reshape(x, (*lead, L, h * d))


def qkv_heads(scope, name, x, heads):
    qkv = dense(scope, name, x)
    C = qkv.shape[-1] // 3
    return [split_heads(qkv[..., i * C:(i + 1) * C], heads) for i in range(3)]


def attend(q, k, v, key_mask=None, dtype=None):
    """Fused attention, optionally computed in a lower precision."""
    return nx.attention(q, k, v, key_mask=key_mask, dtype=dtype)
