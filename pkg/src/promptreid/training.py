"""Retrieval training: similarity projections, identity/triplet losses,
identity-balanced batch sampling, Adam, and the training loop.

Batches hold S identities with K samples each so hard triplets exist inside
every batch. Retrieval distances (here and at evaluation time) are Euclidean
on the image CLS feature; prompt features shape that space only through the
alignment losses. Every loss component is logged per step to a CSV, and runs
are deterministic for a fixed config and seed: batch sampling draws from a
per-step generator keyed (seed, step), so resuming from a checkpoint replays
the exact remaining steps.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import fusion as fu
from . import nn
from . import prompts as pr
from . import tokenizer as tok
from .archive import load_archive, save_archive
from .autodiff import GradientTape, Tensor
from .encoders import (
    EncoderConfig,
    ImageEncoder,
    ImplicitPromptBank,
    TextEncoder,
    encode_implicit,
    encode_text,
)
from .errors import ConfigError, NumericError
from .fusion import (
    CrossAttentionBlock,
    ExplicitEnsemble,
    MultiModalTransformer,
    combine_alignment,
    cross_entropy,
    smoothed_targets,
)
from .tokenizer import TokenSequence, Vocabulary

METRICS_HEADER = ["step", "l_cls", "l_m2p", "l_p2m", "l_m2pce", "l_id", "l_tri", "total"]
CHECKPOINT_SCHEMA = 1


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = ad.sqrt(ad.add(ad.reduce_sum(ad.mul(x, x), axis=-1, keepdims=True), Tensor(eps)))
    return ad.div(x, norm)


class SimilarityHead(nn.Module):
    """Bias-free linear maps into a shared space; dot product scores.

    With ``normalize`` on (the default) scores are cosines of the projected
    vectors scaled by 1/temperature; off, they are raw projected dot products.
    """

    def __init__(self, dim: int, rng: np.random.Generator,
                 normalize: bool = True, temperature: float = 1.0):
        self.image_proj = nn.Linear(dim, dim, rng, bias=False)
        self.text_proj = nn.Linear(dim, dim, rng, bias=False)
        self.normalize = normalize
        self.temperature = temperature

    def matrix(self, image_feats: Tensor, text_feats: Tensor) -> Tensor:
        """(B, D) x (P, D) -> (B, P) similarity scores."""
        u = self.image_proj(image_feats)
        v = self.text_proj(text_feats)
        if self.normalize:
            u, v = l2_normalize(u), l2_normalize(v)
        return ad.matmul(u, ad.transpose(v)) * (1.0 / self.temperature)

    def pair(self, image_feat: Tensor, text_feat: Tensor) -> Tensor:
        """Scalar similarity between one image and one prompt embedding."""
        m = ad.reshape(image_feat, (1, image_feat.size))
        p = ad.reshape(text_feat, (1, text_feat.size))
        return ad.reshape(self.matrix(m, p), ())


# ---------------------------------------------------------------------------
# reid losses
# ---------------------------------------------------------------------------


def identity_loss(logits: Tensor, labels: np.ndarray, epsilon: float,
                  reduction: str = "mean") -> Tensor:
    """Label-smoothed identity cross-entropy."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    num_classes = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ConfigError(f"identity label outside [0, {num_classes})")
    return cross_entropy(logits, smoothed_targets(labels, num_classes, epsilon), reduction)


def triplet_hinge(d_pos, d_neg, margin: float) -> Tensor:
    """max(d_pos - d_neg + margin, 0) on scalar distances."""
    d_pos = d_pos if isinstance(d_pos, Tensor) else Tensor(float(d_pos))
    d_neg = d_neg if isinstance(d_neg, Tensor) else Tensor(float(d_neg))
    if (d_pos.data < 0).any() or (d_neg.data < 0).any():
        raise ConfigError("triplet distances must be nonnegative")
    return ad.relu(ad.add(ad.sub(d_pos, d_neg), Tensor(margin)))


def pairwise_euclidean(embs: Tensor) -> Tensor:
    """(B, D) -> (B, B) Euclidean distance matrix, differentiable."""
    prod = ad.matmul(embs, ad.transpose(embs))
    sq = ad.reduce_sum(ad.mul(embs, embs), axis=1, keepdims=True)
    d2 = ad.relu(ad.sub(ad.add(sq, ad.transpose(sq)), prod * 2.0))
    return ad.sqrt(ad.add(d2, Tensor(1e-12)))


def batch_hard_triplet(embs: Tensor, labels: np.ndarray, margin: float,
                       reduction: str = "mean") -> Tensor:
    """Hardest positive / hardest negative per anchor, then the hinge."""
    labels = np.asarray(labels)
    n = labels.shape[0]
    dist = pairwise_euclidean(embs)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    if not pos_mask.any(axis=1).all():
        raise ConfigError("every anchor needs at least one positive in the batch")
    if not neg_mask.any(axis=1).all():
        raise ConfigError("every anchor needs at least one negative in the batch")
    scores = dist.data
    hardest_pos = np.where(pos_mask, scores, -np.inf).argmax(axis=1)
    hardest_neg = np.where(neg_mask, scores, np.inf).argmin(axis=1)
    d_pos = ad.select_entries(dist, hardest_pos)
    d_neg = ad.select_entries(dist, hardest_neg)
    hinge = ad.relu(ad.add(ad.sub(d_pos, d_neg), Tensor(margin)))
    return fu.reduce_batch(hinge, reduction)


def reid_loss(l_id: Tensor, l_tri: Tensor, id_weight: float, triplet_weight: float) -> Tensor:
    return ad.add(l_id * id_weight, l_tri * triplet_weight)


def total_loss(l_align: Tensor, l_reid: Tensor) -> Tensor:
    return ad.add(l_align, l_reid)


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------


@dataclass
class TripletBatch:
    indices: np.ndarray  # positions into the training record list
    labels: np.ndarray   # identity per position


def sample_pk_batch(records, identities_per_batch: int, samples_per_identity: int,
                    rng: np.random.Generator) -> TripletBatch:
    """S identities without replacement, K samples each (with replacement
    only when an identity has fewer than K samples)."""
    by_identity: dict[int, list[int]] = {}
    for i, record in enumerate(records):
        by_identity.setdefault(record.identity, []).append(i)
    identities = sorted(by_identity)
    if len(identities) < identities_per_batch:
        raise ConfigError(
            f"batch wants {identities_per_batch} identities, dataset has {len(identities)}"
        )
    chosen = rng.choice(len(identities), size=identities_per_batch, replace=False)
    indices, labels = [], []
    for c in chosen:
        identity = identities[int(c)]
        pool = by_identity[identity]
        replace = len(pool) < samples_per_identity
        picks = rng.choice(len(pool), size=samples_per_identity, replace=replace)
        indices.extend(pool[int(p)] for p in picks)
        labels.extend([identity] * samples_per_identity)
    return TripletBatch(indices=np.array(indices), labels=np.array(labels))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, grads: dict[str, Tensor], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, param in self.params.items():
            g = grads[name].data
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            param.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"optimizer.t": np.array(float(self.t))}
        for name in self.params:
            out[f"optimizer.m.{name}"] = self.m[name].copy()
            out[f"optimizer.v.{name}"] = self.v[name].copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["optimizer.t"])
        for name in self.params:
            self.m[name] = state[f"optimizer.m.{name}"].copy()
            self.v[name] = state[f"optimizer.v.{name}"].copy()


def learning_rate_at(step: int, total_steps: int, base_lr: float,
                     warmup_fraction: float) -> float:
    """Linear warmup from 0 to base_lr over the first fraction of training."""
    warmup = max(1, int(round(warmup_fraction * total_steps)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    return base_lr


# ---------------------------------------------------------------------------
# strategy rows
# ---------------------------------------------------------------------------

STRATEGY_ROWS = ("LP", "LP+AW", "LP+GC", "LP+VP", "LP+CP", "LP+CP&VP")

_CHATGPT_SLOT = {"CP": "chatgpt", "AW": "attribute_words", "GC": "caption"}


@dataclass(frozen=True)
class StrategyFlags:
    """Which prompt kinds a run uses; the learnable prompt is always on."""

    chatgpt_source: str | None = None
    use_vqa: bool = False

    @property
    def uses_explicit(self) -> bool:
        return self.chatgpt_source is not None or self.use_vqa


def parse_strategy(strategy: str) -> StrategyFlags:
    parts = strategy.split("+")
    if parts[0] != "LP":
        raise ConfigError(f"strategy {strategy!r} must start with the LP baseline")
    chatgpt_source = None
    use_vqa = False
    for token in "&".join(parts[1:]).split("&") if len(parts) > 1 else []:
        if token == "VP":
            use_vqa = True
        elif token in _CHATGPT_SLOT:
            if chatgpt_source is not None:
                raise ConfigError(f"strategy {strategy!r} sets two sentence-prompt sources")
            chatgpt_source = _CHATGPT_SLOT[token]
        elif token:
            raise ConfigError(f"strategy {strategy!r}: unknown component {token!r}")
    return StrategyFlags(chatgpt_source=chatgpt_source, use_vqa=use_vqa)


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    identity_count: int
    slot_count: int = 4
    fusion_depth: int = 1
    normalize_similarity: bool = True
    temperature: float = 1.0


class ReidModel(nn.Module):
    """All trainable pieces; strategies only change which ones the loss uses,
    so shared components initialize identically across ablation rows."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, rng: np.random.Generator):
        enc = cfg.encoder
        template = pr.implicit_template(cfg.slot_count, vocab, enc.context_length)
        self.image_encoder = ImageEncoder(enc, rng)
        self.text_encoder = TextEncoder(enc, vocab.size, rng)
        self.implicit_bank = ImplicitPromptBank(
            cfg.identity_count, template, vocab, enc.embed_dim, rng
        )
        self.cross_attention = CrossAttentionBlock(enc.embed_dim, enc.heads, rng)
        self.ensemble = ExplicitEnsemble(enc.embed_dim, rng)
        self.fuser = MultiModalTransformer(
            enc.embed_dim, enc.heads, enc.hidden_dim, cfg.fusion_depth, rng
        )
        self.similarity = SimilarityHead(
            enc.embed_dim, rng, normalize=cfg.normalize_similarity,
            temperature=cfg.temperature,
        )
        self.id_head = nn.Linear(enc.embed_dim, cfg.identity_count, rng)
        self.cls_head = nn.Linear(enc.embed_dim, cfg.identity_count, rng)
        self.cfg = cfg


@dataclass
class PromptCache:
    """Token sequences per identity for every prompt kind a run may need."""

    chatgpt: dict[int, TokenSequence] = field(default_factory=dict)
    vqa: dict[int, list[TokenSequence]] = field(default_factory=dict)

    def chatgpt_batch(self, identities) -> list[TokenSequence]:
        return [self.chatgpt[int(i)] for i in identities]

    def vqa_batch(self, identities) -> list[TokenSequence]:
        flat = []
        for i in identities:
            flat.extend(self.vqa[int(i)])
        return flat


def build_prompt_cache(flags: StrategyFlags, prompt_sets: dict[int, pr.PromptSet],
                       attribute_records, captions: dict[int, str] | None,
                       vocab: Vocabulary, context_length: int) -> PromptCache:
    cache = PromptCache()
    attr_by_id = {rec.identity: rec.attributes for rec in attribute_records}
    complaints = pr.check_context_fit(prompt_sets.values(), vocab, context_length)
    if complaints:
        warnings.warn(
            f"{len(complaints)} prompt sentences exceed the context window; "
            f"first: {complaints[0]}"
        )
    for identity in sorted(attr_by_id):
        if flags.chatgpt_source == "chatgpt":
            sentence = prompt_sets[identity].chatgpt
        elif flags.chatgpt_source == "attribute_words":
            sentence = ", ".join(attr_by_id[identity].values())
        elif flags.chatgpt_source == "caption":
            if captions is None or identity not in captions:
                raise ConfigError(
                    f"strategy row needs caption prompts but identity {identity} "
                    "has no caption (supply a caption file)"
                )
            sentence = captions[identity]
        else:
            sentence = None
        if sentence is not None:
            cache.chatgpt[identity] = tok.encode(sentence, vocab, context_length)
        if flags.use_vqa:
            cache.vqa[identity] = [
                tok.encode(s, vocab, context_length)
                for s in prompt_sets[identity].vqa
            ]
    return cache


# ---------------------------------------------------------------------------
# loss computation for one batch
# ---------------------------------------------------------------------------


@dataclass
class LossConfig:
    id_weight: float = 0.25
    triplet_weight: float = 1.0
    triplet_margin: float = 0.3
    label_smoothing: float = 0.1
    batch_reduction: str = "mean"


@dataclass
class StepLosses:
    alignment: fu.AlignmentLosses
    identity: Tensor
    triplet: Tensor
    reid: Tensor
    total: Tensor

    def row(self, step: int) -> list:
        a = self.alignment
        return [
            step,
            float(a.classification.data),
            float(a.image_to_prompt.data),
            float(a.prompt_to_image.data),
            float(a.implicit_ce.data),
            float(self.identity.data),
            float(self.triplet.data),
            float(self.total.data),
        ]


def _repeat_image_tokens(image_tokens: Tensor, times: int) -> Tensor:
    b, li, d = image_tokens.shape
    expanded = ad.reshape(image_tokens, (b, 1, li, d))
    expanded = ad.broadcast_to(expanded, (b, times, li, d))
    return ad.reshape(expanded, (b * times, li, d))


def gather_along_batch(x: Tensor, ids: np.ndarray) -> Tensor:
    """out[i] = x[ids[i]] for a (S, ...) tensor; grads scatter-add back.

    Lets per-identity prompt encodings be computed once and fanned out to the
    samples of a batch.
    """
    shape = x.shape
    flat = ad.reshape(x, (shape[0], int(np.prod(shape[1:]))))
    picked = ad.embedding(flat, np.asarray(ids, dtype=np.int64))
    return ad.reshape(picked, (len(ids),) + shape[1:])


def _valid_mask(sequences: list[TokenSequence], pad_id: int) -> np.ndarray:
    ids = np.array([s.ids for s in sequences])
    return (ids != pad_id).astype(float)


def compute_step_losses(model: ReidModel, images: np.ndarray, labels: np.ndarray,
                        cache: PromptCache, flags: StrategyFlags,
                        loss_cfg: LossConfig, vocab: Vocabulary) -> StepLosses:
    reduction = loss_cfg.batch_reduction
    eps = loss_cfg.label_smoothing
    identity_count = model.cfg.identity_count
    image_tokens, image_feat = model.image_encoder(images)
    zero = Tensor(0.0)

    unique_ids, inverse = np.unique(labels, return_inverse=True)
    _, implicit_feats = encode_implicit(model.text_encoder, model.implicit_bank, unique_ids)
    sim_implicit = model.similarity.matrix(image_feat, implicit_feats)
    targets = smoothed_targets(inverse, len(unique_ids), eps)
    l_m2pce = fu.image_to_prompt_ce(sim_implicit, targets, reduction)

    l_cls = l_m2p = l_p2m = zero
    if flags.uses_explicit:
        # prompts are per identity: encode each one once, then fan the token
        # tensors out to the samples that share the identity
        f_chatgpt = f_vqa = None          # cross-attended, per sample
        f_chatgpt_text = f_vqa_text = None  # pure text, per identity
        if flags.chatgpt_source is not None:
            seqs = cache.chatgpt_batch(unique_ids)
            prompt_tokens, f_chatgpt_text = encode_text(model.text_encoder, seqs)
            eos = np.array([s.eos_position for s in seqs])[inverse]
            valid = _valid_mask(seqs, vocab.pad_id)[inverse]
            f_chatgpt = model.cross_attention(
                gather_along_batch(prompt_tokens, inverse), image_tokens, valid, eos
            )
        if flags.use_vqa:
            seqs = cache.vqa_batch(unique_ids)
            prompt_tokens, vqa_pooled = encode_text(model.text_encoder, seqs)
            f_vqa_text = ad.mean(
                ad.reshape(vqa_pooled, (len(unique_ids), 7, vqa_pooled.shape[-1])), axis=1
            )
            fan = (inverse[:, None] * 7 + np.arange(7)[None, :]).reshape(-1)
            eos = np.array([s.eos_position for s in seqs])[fan]
            valid = _valid_mask(seqs, vocab.pad_id)[fan]
            repeated = _repeat_image_tokens(image_tokens, 7)
            attended = model.cross_attention(
                gather_along_batch(prompt_tokens, fan), repeated, valid, eos
            )
            grouped = ad.reshape(attended, (labels.shape[0], 7, attended.shape[-1]))
            f_vqa = ad.mean(grouped, axis=1)

        # fused classification consumes the attended (image-conditioned)
        # ensemble; the contrastive pair uses the pure text ensemble so an
        # image cannot match its own prompt by recognizing leaked image
        # content instead of learning identity structure
        f_explicit = model.ensemble(
            f_chatgpt if f_chatgpt is not None else f_vqa,
            f_vqa if f_vqa is not None else f_chatgpt,
        )
        _, f_cls = model.fuser(f_explicit, image_tokens)
        l_cls = cross_entropy(
            model.cls_head(f_cls), smoothed_targets(labels, identity_count, eps), reduction
        )
        f_explicit_text = model.ensemble(
            f_chatgpt_text if f_chatgpt_text is not None else f_vqa_text,
            f_vqa_text if f_vqa_text is not None else f_chatgpt_text,
        )
        sim_explicit = model.similarity.matrix(
            image_feat, gather_along_batch(f_explicit_text, inverse)
        )
        l_m2p = fu.image_to_prompt_loss(sim_explicit, reduction)
        l_p2m = fu.prompt_to_image_loss(sim_explicit, reduction)

    alignment = combine_alignment(l_cls, l_m2p, l_p2m, l_m2pce)
    l_id = identity_loss(model.id_head(image_feat), labels, eps, reduction)
    l_tri = batch_hard_triplet(image_feat, labels, loss_cfg.triplet_margin, reduction)
    l_reid = reid_loss(l_id, l_tri, loss_cfg.id_weight, loss_cfg.triplet_weight)
    return StepLosses(
        alignment=alignment,
        identity=l_id,
        triplet=l_tri,
        reid=l_reid,
        total=total_loss(alignment.total, l_reid),
    )


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainHandle:
    model: ReidModel
    vocab: Vocabulary
    metrics_path: str
    checkpoint_path: str
    manifest_path: str
    final_step: int


def build_corpus(prompt_sets: dict[int, pr.PromptSet], attribute_records,
                 captions: dict[int, str] | None) -> list[str]:
    corpus = [f"{pr.IMPLICIT_PREFIX} {pr.IMPLICIT_SUFFIX}"] * 2
    for identity in sorted(prompt_sets):
        ps = prompt_sets[identity]
        corpus.append(ps.chatgpt)
        corpus.extend(ps.vqa)
    for rec in sorted(attribute_records, key=lambda r: r.identity):
        corpus.append(", ".join(rec.attributes.values()))
    if captions:
        corpus.extend(captions[i] for i in sorted(captions))
    return corpus


def load_captions(path) -> dict[int, str]:
    captions = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            captions[int(doc["id"])] = str(doc["caption"])
    return captions


def save_checkpoint(path, model: ReidModel, optimizer: Adam, step: int,
                    seed: int, config_hash: str) -> None:
    state = model.state()
    state.update(optimizer.state())
    state["train.step"] = np.array(float(step))
    save_archive(path, state)
    manifest = {
        "step": step,
        "seed": seed,
        "config_hash": config_hash,
        "archive": os.path.basename(str(path)),
        "schema_version": CHECKPOINT_SCHEMA,
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)


def load_checkpoint(path, model: ReidModel, optimizer: Adam | None = None) -> int:
    state = load_archive(path)
    model.load_state(state)
    if optimizer is not None:
        optimizer.load_state(state)
    return int(state["train.step"])


def run_training(model: ReidModel, train_records, cache: PromptCache,
                 flags: StrategyFlags, loss_cfg: LossConfig, vocab: Vocabulary,
                 steps: int, learning_rate: float, warmup_fraction: float,
                 identities_per_batch: int, samples_per_identity: int, seed: int,
                 metrics_path, checkpoint_path, config_hash: str,
                 start_step: int = 0, optimizer: Adam | None = None) -> TrainHandle:
    """Steps [start_step, steps); appends one metrics row per step."""
    params = model.named_parameters()
    if optimizer is None:
        optimizer = Adam(params)
    images = np.stack([r.image for r in train_records])
    rows = []
    for step in range(start_step, steps):
        rng = np.random.default_rng([seed, 2, step])
        batch = sample_pk_batch(train_records, identities_per_batch,
                                samples_per_identity, rng)
        try:
            with GradientTape() as tape:
                tape.register_all(params)
                losses = compute_step_losses(
                    model, images[batch.indices], batch.labels, cache, flags,
                    loss_cfg, vocab,
                )
            grads = tape.backward(losses.total)
        except NumericError as exc:
            raise NumericError(f"non-finite loss at step {step}: {exc}") from exc
        if not np.isfinite(losses.total.data):
            raise NumericError(f"non-finite loss at step {step}")
        lr = learning_rate_at(step, steps, learning_rate, warmup_fraction)
        optimizer.step(grads, lr)
        rows.append(losses.row(step))

    mode = "a" if start_step > 0 and os.path.exists(metrics_path) else "w"
    with open(metrics_path, mode, newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([row[0]] + [f"{v:.12g}" for v in row[1:]])
    save_checkpoint(checkpoint_path, model, optimizer, steps, seed, config_hash)
    return TrainHandle(
        model=model,
        vocab=vocab,
        metrics_path=str(metrics_path),
        checkpoint_path=str(checkpoint_path),
        manifest_path=str(checkpoint_path) + ".json",
        final_step=steps,
    )


def embed_images(model: ReidModel, records, batch_size: int = 32) -> np.ndarray:
    """Image CLS features for a record list; forward only, no tape."""
    feats = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        images = np.stack([r.image for r in chunk])
        _, pooled = model.image_encoder(images)
        feats.append(pooled.data)
    return np.concatenate(feats, axis=0)
