"""Visual and textual feature encoders.

Both are small pre-norm transformers sharing the layer library: the image
encoder runs on non-overlapping patches plus a learned CLS token and pools at
CLS; the text encoder embeds token ids (bidirectional, PAD keys masked) and
pools at the EOS position. The implicit path reuses the text encoder but
substitutes per-identity learnable embeddings at the slot positions of the
template sequence, so gradients reach only that identity's bank rows and the
shared encoder weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ShapeError
from .tokenizer import TokenSequence, Vocabulary


@dataclass
class EncoderConfig:
    """Shared transformer sizing; defaults are desk scale.

    Full-scale counterparts (embed_dim=512, layers=12, context_length=77,
    image_size=224/patch 16) remain valid settings, just slow on a laptop.
    """

    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    patch_size: int = 8
    image_size: int = 32
    context_length: int = 32
    mlp_ratio: float = 2.0
    channels: int = 3

    def validate(self) -> None:
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch {self.patch_size}"
            )
        if self.context_length < 3:
            raise ConfigError("context_length must be >= 3")

    @property
    def patches_per_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def image_tokens(self) -> int:
        return self.patches_per_side ** 2 + 1

    @property
    def hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, n_patches, patch*patch*C), row-major patch order."""
    b, h, w, c = images.shape
    ph, pw = h // patch, w // patch
    x = images.reshape(b, ph, patch, pw, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, ph * pw, patch * patch * c)


class ImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
        self.patch_proj = nn.Linear(patch_dim, cfg.embed_dim, rng)
        self.cls_token = Parameter(rng.normal(0.0, 0.02, size=(1, 1, cfg.embed_dim)))
        self.positions = nn.sinusoidal_positions(cfg.image_tokens, cfg.embed_dim)
        self.blocks = [
            nn.TransformerBlock(cfg.embed_dim, cfg.heads, cfg.hidden_dim, rng)
            for _ in range(cfg.layers)
        ]
        self.final_norm = nn.LayerNorm(cfg.embed_dim)

    def __call__(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        """Returns (token sequence (B, n+1, D), CLS feature (B, D))."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        cfg = self.cfg
        expected = (cfg.image_size, cfg.image_size, cfg.channels)
        if images.shape[1:] != expected:
            raise ShapeError(f"image shape {images.shape[1:]} != configured {expected}")
        batch = images.shape[0]
        tokens = self.patch_proj(Tensor(extract_patches(images, cfg.patch_size)))
        cls = ad.broadcast_to(self.cls_token, (batch, 1, cfg.embed_dim))
        seq = ad.concat([cls, tokens], axis=1)
        seq = ad.add(seq, Tensor(self.positions))
        for block in self.blocks:
            seq = block(seq)
        seq = self.final_norm(seq)
        pooled = ad.select_rows(seq, np.zeros(batch, dtype=np.int64))
        return seq, pooled


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, vocab_size: int, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.token_table = Parameter(rng.normal(0.0, 0.02, size=(vocab_size, cfg.embed_dim)))
        self.positions = nn.sinusoidal_positions(cfg.context_length, cfg.embed_dim)
        self.blocks = [
            nn.TransformerBlock(cfg.embed_dim, cfg.heads, cfg.hidden_dim, rng)
            for _ in range(cfg.layers)
        ]
        self.final_norm = nn.LayerNorm(cfg.embed_dim)

    def _run(self, embedded: Tensor, ids: np.ndarray, eos_positions: np.ndarray):
        valid = ids != 0  # PAD id is 0; PAD keys never attend
        mask = nn.attention_mask(valid)
        seq = ad.add(embedded, Tensor(self.positions[: ids.shape[1]]))
        for block in self.blocks:
            seq = block(seq, key_mask=mask)
        seq = self.final_norm(seq)
        pooled = ad.select_rows(seq, eos_positions)
        return seq, pooled


def pack_sequences(sequences: list[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array([seq.ids for seq in sequences], dtype=np.int64)
    eos = np.array([seq.eos_position for seq in sequences], dtype=np.int64)
    return ids, eos


def encode_text(encoder: TextEncoder, sequences: list[TokenSequence]):
    """EOS-pooled features for a batch of token sequences.

    Returns (token sequence tensor (B, L, D), pooled (B, D)).
    """
    ids, eos = pack_sequences(sequences)
    if ids.shape[1] != encoder.cfg.context_length:
        raise ShapeError(
            f"sequence length {ids.shape[1]} != context {encoder.cfg.context_length}"
        )
    embedded = ad.embedding(encoder.token_table, ids)
    return encoder._run(embedded, ids, eos)


class ImplicitPromptBank(nn.Module):
    """Per-identity learnable slot embeddings inside a fixed template."""

    def __init__(self, identity_count: int, template: TokenSequence,
                 vocab: Vocabulary, embed_dim: int, rng: np.random.Generator):
        slot_ids = set(vocab.slot_ids)
        positions = [i for i, t in enumerate(template.ids) if t in slot_ids]
        if not positions:
            raise ConfigError("template has no slot positions")
        self.identity_count = identity_count
        self.slot_count = len(positions)
        self.positions = np.array(positions, dtype=np.int64)
        self.template = template
        self.rows = Parameter(
            rng.normal(0.0, 0.02, size=(identity_count * self.slot_count, embed_dim))
        )

    def flat_indices(self, identities: np.ndarray) -> np.ndarray:
        identities = np.asarray(identities, dtype=np.int64)
        if identities.size and (identities.min() < 0 or identities.max() >= self.identity_count):
            raise ConfigError(
                f"identity outside bank of {self.identity_count} rows: {identities}"
            )
        return identities[:, None] * self.slot_count + np.arange(self.slot_count)[None, :]


def encode_implicit(encoder: TextEncoder, bank: ImplicitPromptBank,
                    identities: np.ndarray):
    """Template features with per-identity slot embeddings swapped in."""
    identities = np.asarray(identities, dtype=np.int64)
    batch = identities.shape[0]
    length = len(bank.template.ids)
    ids = np.tile(np.array(bank.template.ids, dtype=np.int64), (batch, 1))
    eos = np.full(batch, bank.template.eos_position, dtype=np.int64)
    embedded = ad.embedding(encoder.token_table, ids)
    slot_rows = ad.embedding(bank.rows, bank.flat_indices(identities))  # (B, T, D)
    keep = np.ones((1, length, 1))
    keep[0, bank.positions, 0] = 0.0
    scatter = np.zeros((batch, length, bank.slot_count))
    scatter[np.arange(batch)[:, None], bank.positions[None, :],
            np.arange(bank.slot_count)[None, :]] = 1.0
    placed = ad.matmul(Tensor(scatter), slot_rows)  # (B, L, T) @ (B, T, D)
    mixed = ad.add(ad.mul(embedded, Tensor(keep)), placed)
    return encoder._run(mixed, ids, eos)
