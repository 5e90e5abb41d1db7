"""Transformer building blocks on top of the autodiff tensor engine.

A Module is just a container whose Parameter attributes (and sub-modules,
recursively) are discoverable by name. Names follow attribute paths, e.g.
``blocks.0.attn.query.weight``, so the whole tree serializes into the
named-tensor archive and registers on a GradientTape in one call.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ShapeError


class Module:
    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        found: dict[str, Parameter] = {}
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                found[name] = value
            elif isinstance(value, Module):
                found.update(value.named_parameters(f"{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        found[f"{name}.{i}"] = item
                    elif isinstance(item, Module):
                        found.update(item.named_parameters(f"{name}.{i}."))
        return found

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        """Overwrite parameter buffers in place from an archive mapping."""
        for name, param in self.named_parameters(prefix).items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.data.shape:
                raise ShapeError(
                    f"parameter {name!r}: stored {value.shape} vs model {param.data.shape}"
                )
            param.data[...] = value

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape if shape is not None else (fan_in, fan_out))


class Linear(Module):
    """y = x @ weight (+ bias) with weight shaped (in_dim, out_dim)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True):
        self.weight = Parameter(xavier(rng, in_dim, out_dim))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = ad.add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, eps=self.eps)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.up = Linear(dim, hidden, rng)
        self.down = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ad.gelu(self.up(x)))


def attention_mask(valid: np.ndarray) -> np.ndarray:
    """(B, Lk) validity flags -> (B, 1, 1, Lk) additive mask of 0 / -1e9."""
    mask = np.where(np.asarray(valid, dtype=bool), 0.0, -1e9)
    return mask[:, None, None, :]


class MultiHeadAttention(Module):
    """Scaled dot-product attention; queries and keys/values may differ.

    ``key_mask`` is an additive (B, 1, 1, Lk) constant; masked keys receive
    -1e9 before the softmax so padded positions never contribute.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ShapeError(f"embed dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor, batch: int, length: int) -> Tensor:
        x = ad.reshape(x, (batch, length, self.heads, self.head_dim))
        return ad.transpose(x, (0, 2, 1, 3))

    def __call__(self, q_src: Tensor, kv_src: Tensor, key_mask=None) -> Tensor:
        if q_src.shape[-1] != kv_src.shape[-1]:
            raise ShapeError(f"attention dims differ: {q_src.shape} vs {kv_src.shape}")
        batch, lq, dim = q_src.shape
        lk = kv_src.shape[1]
        q = self._split(self.query(q_src), batch, lq)
        k = self._split(self.key(kv_src), batch, lk)
        v = self._split(self.value(kv_src), batch, lk)
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        if key_mask is not None:
            scores = ad.add(scores, Tensor(key_mask))
        weights = ad.softmax(scores, axis=-1)
        mixed = ad.matmul(weights, v)
        mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (batch, lq, dim))
        return self.out(mixed)

    def attention_weights(self, q_src: Tensor, kv_src: Tensor, key_mask=None) -> np.ndarray:
        """Forward-only attention map (B, H, Lq, Lk), for inspection/tests."""
        batch, lq, _ = q_src.shape
        lk = kv_src.shape[1]
        q = self._split(self.query(q_src), batch, lq)
        k = self._split(self.key(kv_src), batch, lk)
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        if key_mask is not None:
            scores = ad.add(scores, Tensor(key_mask))
        return ad.softmax(scores, axis=-1).data


class TransformerBlock(Module):
    """Pre-norm self-attention followed by a pre-norm feed-forward."""

    def __init__(self, dim: int, heads: int, hidden: int, rng: np.random.Generator):
        self.norm_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm_ff = LayerNorm(dim)
        self.ff = FeedForward(dim, hidden, rng)

    def __call__(self, x: Tensor, key_mask=None) -> Tensor:
        normed = self.norm_attn(x)
        x = ad.add(x, self.attn(normed, normed, key_mask=key_mask))
        return ad.add(x, self.ff(self.norm_ff(x)))


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table, (length, dim)."""
    positions = np.arange(length)[:, None]
    freqs = np.exp(-np.log(10000.0) * (2 * (np.arange(dim) // 2)) / dim)
    angles = positions * freqs[None, :]
    table = np.where(np.arange(dim) % 2 == 0, np.sin(angles), np.cos(angles))
    return table
