"""Cross-modal fusion and the alignment loss suite.

The prompt token sequence queries a cross-attention block whose keys/values
are the image tokens concatenated with the prompt tokens; attended prompts
pool at EOS. ChatGPT-style and question-derived features ensemble through an
MLP on their concatenation, the ensembled feature joins a learned CLS token
and the image tokens in a small multi-modal transformer, and four losses
(CLS cross-entropy, both contrastive directions, and the implicit-path
cross-entropy) sum into the alignment objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ShapeError


class CrossAttentionBlock(nn.Module):
    """Prompt tokens attend over [image tokens ++ prompt tokens]."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.attn = nn.MultiHeadAttention(dim, heads, rng)
        self.norm = nn.LayerNorm(dim)

    def __call__(self, prompt_tokens: Tensor, image_tokens: Tensor,
                 prompt_valid: np.ndarray, eos_positions: np.ndarray) -> Tensor:
        """Attended prompt feature pooled at the prompt's EOS position."""
        if prompt_tokens.shape[-1] != image_tokens.shape[-1]:
            raise ShapeError(
                f"prompt dim {prompt_tokens.shape} vs image dim {image_tokens.shape}"
            )
        if prompt_tokens.shape[0] != image_tokens.shape[0]:
            raise ShapeError(
                f"batch mismatch: {prompt_tokens.shape[0]} prompts vs "
                f"{image_tokens.shape[0]} images"
            )
        kv = ad.concat([image_tokens, prompt_tokens], axis=1)
        image_valid = np.ones((prompt_tokens.shape[0], image_tokens.shape[1]))
        valid = np.concatenate([image_valid, prompt_valid], axis=1)
        mask = nn.attention_mask(valid)
        attended = self.norm(ad.add(prompt_tokens, self.attn(prompt_tokens, kv, key_mask=mask)))
        return ad.select_rows(attended, eos_positions)


class ExplicitEnsemble(nn.Module):
    """Two-layer MLP over the concatenation of the two explicit features."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.up = nn.Linear(2 * dim, 2 * dim, rng)
        self.down = nn.Linear(2 * dim, dim, rng)

    def __call__(self, f_chatgpt: Tensor, f_vqa: Tensor) -> Tensor:
        if f_chatgpt.shape != f_vqa.shape:
            raise ShapeError(f"ensemble inputs differ: {f_chatgpt.shape} vs {f_vqa.shape}")
        joined = ad.concat([f_chatgpt, f_vqa], axis=1)
        return self.down(ad.gelu(self.up(joined)))


class MultiModalTransformer(nn.Module):
    """Transformer over [CLS, ensembled prompt, image tokens...]."""

    def __init__(self, dim: int, heads: int, hidden: int, depth: int,
                 rng: np.random.Generator):
        self.cls_token = Parameter(rng.normal(0.0, 0.02, size=(1, 1, dim)))
        self.blocks = [nn.TransformerBlock(dim, heads, hidden, rng) for _ in range(depth)]
        self.final_norm = nn.LayerNorm(dim)

    def __call__(self, f_explicit: Tensor, image_tokens: Tensor) -> tuple[Tensor, Tensor]:
        batch, dim = f_explicit.shape
        cls = ad.broadcast_to(self.cls_token, (batch, 1, dim))
        prompt = ad.reshape(f_explicit, (batch, 1, dim))
        seq = ad.concat([cls, prompt, image_tokens], axis=1)
        for block in self.blocks:
            seq = block(seq)
        seq = self.final_norm(seq)
        pooled = ad.select_rows(seq, np.zeros(batch, dtype=np.int64))
        return seq, pooled


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def smoothed_targets(labels: np.ndarray, num_classes: int, epsilon: float) -> np.ndarray:
    """Label-smoothed one-hot rows: 1-eps+eps/N on the true class, eps/N off it."""
    labels = np.asarray(labels, dtype=np.int64)
    q = np.full((labels.shape[0], num_classes), epsilon / num_classes)
    q[np.arange(labels.shape[0]), labels] += 1.0 - epsilon
    return q


def _validate_distribution_rows(q: np.ndarray) -> None:
    sums = q.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ConfigError(f"target rows must sum to 1, worst sum {sums.max():.8f}")
    if (q < 0).any():
        raise ConfigError("target distribution has negative entries")


def cross_entropy(logits: Tensor, targets: np.ndarray, reduction: str = "mean") -> Tensor:
    """-sum_k q_k log softmax(logits)_k, reduced over the batch."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets[None]
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, logits.shape[0]))
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    _validate_distribution_rows(targets)
    log_probs = ad.log_softmax(logits, axis=-1)
    per_row = ad.neg(ad.reduce_sum(ad.mul(log_probs, Tensor(targets)), axis=-1))
    return reduce_batch(per_row, reduction)


def reduce_batch(per_row: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return ad.mean(per_row)
    if reduction == "sum":
        return ad.reduce_sum(per_row)
    raise ConfigError(f"unknown batch reduction {reduction!r}")


def image_to_prompt_loss(similarity: Tensor, reduction: str = "mean") -> Tensor:
    """Contrastive loss over rows: -log exp(S_ii) / sum_a exp(S_ia)."""
    n, m = _square(similarity)
    log_probs = ad.log_softmax(similarity, axis=-1)
    diag = ad.select_entries(log_probs, np.arange(n))
    return reduce_batch(ad.neg(diag), reduction)


def prompt_to_image_loss(similarity: Tensor, reduction: str = "mean") -> Tensor:
    """Contrastive loss over columns: -log exp(S_ii) / sum_a exp(S_ai).

    Implemented exactly as the row loss of the transpose so the identity
    prompt_to_image(S) == image_to_prompt(S^T) holds bit for bit.
    """
    _square(similarity)
    return image_to_prompt_loss(ad.transpose(similarity), reduction)


def _square(similarity: Tensor) -> tuple:
    if similarity.ndim != 2 or similarity.shape[0] != similarity.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {similarity.shape}")
    return similarity.shape


def image_to_prompt_ce(similarity: Tensor, targets: np.ndarray,
                       reduction: str = "mean") -> Tensor:
    """Cross-entropy of row-softmaxed similarities against target rows.

    Used on the implicit path, where several images in a batch share one
    identity's prompt and the target row spreads mass accordingly.
    """
    if similarity.ndim != 2:
        raise ShapeError(f"similarity must be 2-d, got {similarity.shape}")
    return cross_entropy(similarity, targets, reduction)


@dataclass
class AlignmentLosses:
    """The four alignment components and their exact sum."""

    classification: Tensor
    image_to_prompt: Tensor
    prompt_to_image: Tensor
    implicit_ce: Tensor
    total: Tensor


def combine_alignment(classification: Tensor, image_to_prompt: Tensor,
                      prompt_to_image: Tensor, implicit_ce: Tensor) -> AlignmentLosses:
    """Bundle the four components; total is their sum, computed on the tape."""
    components = {
        "classification": classification,
        "image_to_prompt": image_to_prompt,
        "prompt_to_image": prompt_to_image,
        "implicit_ce": implicit_ce,
    }
    for name, component in components.items():
        if float(component.data) < 0.0:
            raise ConfigError(
                f"alignment component {name} is negative: {float(component.data)}"
            )
    total = ad.add(ad.add(classification, image_to_prompt),
                   ad.add(prompt_to_image, implicit_ce))
    return AlignmentLosses(total=total, **components)
