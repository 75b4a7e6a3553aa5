"""Parameter containers and the layers shared by encoder, sampler and decoder."""

from __future__ import annotations

import numpy as np

from textrich import tensor as T
from textrich.tensor import Tensor

NEG_INF = -1e9


class Module:
    """Owns parameters and submodules; attribute order defines parameter order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad and value.node is None:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(array: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(array, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = param(rng.uniform(-bound, bound, size=(d_in, d_out)), dtype)
        self.bias = param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = param(np.ones(dim), dtype)
        self.beta = param(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, dim: int, mult: int, rng, dtype=np.float32):
        self.fc1 = Linear(dim, dim * mult, rng, dtype)
        self.fc2 = Linear(dim * mult, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    n = len(lead)
    x = x.reshape(*lead, t, heads, d // heads)
    return x.transpose(*range(n), n + 1, n, n + 2)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    n = len(lead)
    x = x.transpose(*range(n), n + 1, n, n + 2)
    return x.reshape(*lead, t, h * dh)


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None):
    """Scaled dot-product attention over ``[..., T, D]`` inputs.

    ``mask`` is an additive array broadcastable to ``[..., H, Tq, Tk]``.
    Returns the merged output and the attention weights.
    """
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    dh = qh.shape[-1]
    n = kh.ndim
    scores = T.scale(qh @ kh.transpose(*range(n - 2), n - 1, n - 2), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + Tensor(np.asarray(mask, dtype=scores.dtype))
    weights = T.softmax(scores, axis=-1)
    return merge_heads(weights @ vh), weights


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype=np.float32, kv_dim: int | None = None):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(kv_dim, dim, rng, dtype)
        self.v = Linear(kv_dim, dim, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype)
        self.last_weights: np.ndarray | None = None  # detached, for inspection

    def __call__(self, xq: Tensor, xkv: Tensor | None = None, mask=None) -> Tensor:
        xkv = xq if xkv is None else xkv
        y, w = attend(self.q(xq), self.k(xkv), self.v(xkv), self.heads, mask)
        self.last_weights = w.data
        return self.out(y)


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF), k=1)
