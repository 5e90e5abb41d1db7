"""End-to-end orchestration: the run directory layout behind each command.

A training run directory holds config.json, vocab.json, metrics.csv,
checkpoint.ntar(+.json) and manifest.json; evaluation writes report.json next
to whatever directory it is pointed at. Everything records the config hash
and seed that produced it.
"""

from __future__ import annotations

import json
import os
from dataclasses import replace

import numpy as np

from . import __version__
from . import prompts as pr
from . import synthetic as syn
from . import tokenizer as tok
from . import training as tr
from .config import RunConfig, config_hash, save_config
from .errors import ConfigError
from .evaluation import (
    AblationSpec,
    EvalReport,
    evaluate_ranking,
    format_summary_table,
    run_ablation,
    summarize_reports,
    write_ablation_csv,
)
from .tokenizer import Vocabulary
from .training import (
    Adam,
    ModelConfig,
    ReidModel,
    StrategyFlags,
    build_corpus,
    build_prompt_cache,
    embed_images,
    load_captions,
    load_checkpoint,
    parse_strategy,
    run_training,
)

MANIFEST_SCHEMA = 1


def write_manifest(out_dir, command: str, cfg: RunConfig, extra=None) -> None:
    doc = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "schema_version": MANIFEST_SCHEMA,
        "package_version": __version__,
    }
    if extra:
        doc.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)


def generate_data(cfg: RunConfig, out_dir) -> syn.Dataset:
    os.makedirs(out_dir, exist_ok=True)
    spec = replace(cfg.data, seed=cfg.seed)
    dataset = syn.generate(spec)
    syn.save_dataset(dataset, out_dir)
    write_manifest(out_dir, "gen-data", cfg)
    return dataset


def generate_prompts(cfg: RunConfig, out_path, offline: bool = False,
                     bank: pr.QuestionBank | None = None,
                     client=None) -> list[pr.PromptSet]:
    dataset = syn.load_dataset(cfg.dataset_dir)
    records = dataset.attribute_records()
    bank = bank or pr.DEFAULT_QUESTION_BANK
    if client is None and not offline:
        client = pr.HttpGeneratorClient.from_env()
    if offline:
        client = None
    prompt_sets = pr.build_prompt_dataset(
        records, bank, client, seed=cfg.seed, path=out_path, slot_count=cfg.slot_count
    )
    return prompt_sets


class RunContext:
    """Everything a training or evaluation pass needs, built deterministically."""

    def __init__(self, cfg: RunConfig, vocab: Vocabulary | None = None):
        self.cfg = cfg
        self.flags: StrategyFlags = parse_strategy(cfg.strategy)
        self.dataset = syn.load_dataset(cfg.dataset_dir)
        identity_count = self.dataset.identity_count
        self.prompt_sets = pr.load_prompt_dataset(cfg.prompts_path, identity_count)
        missing = [
            r.identity
            for r in self.dataset.attribute_records()
            if r.identity not in self.prompt_sets
        ]
        if missing:
            raise ConfigError(f"prompt dataset missing identities {missing[:8]}")
        self.captions = (
            load_captions(cfg.captions_path) if cfg.captions_path else None
        )
        if vocab is None:
            corpus = build_corpus(
                self.prompt_sets, self.dataset.attribute_records(), self.captions
            )
            vocab = tok.build_vocab(corpus, cfg.vocab_size, n_slots=cfg.slot_count)
        self.vocab = vocab
        self.model = ReidModel(
            ModelConfig(
                encoder=cfg.encoder,
                identity_count=identity_count,
                slot_count=cfg.slot_count,
                fusion_depth=cfg.fusion_depth,
                normalize_similarity=cfg.normalize_similarity,
                temperature=cfg.temperature,
            ),
            self.vocab,
            np.random.default_rng([cfg.seed, 1]),
        )
        self.cache = build_prompt_cache(
            self.flags, self.prompt_sets, self.dataset.attribute_records(),
            self.captions, self.vocab, cfg.encoder.context_length,
        )


def train(cfg: RunConfig, out_dir, resume_from=None) -> tr.TrainHandle:
    """Full training run into ``out_dir``; optionally resume a checkpoint dir."""
    os.makedirs(out_dir, exist_ok=True)
    vocab = None
    start_step = 0
    if resume_from is not None:
        with open(os.path.join(resume_from, "vocab.json"), encoding="utf-8") as fh:
            vocab = Vocabulary.from_json(fh.read())
    context = RunContext(cfg, vocab=vocab)
    optimizer = Adam(context.model.named_parameters())
    if resume_from is not None:
        start_step = load_checkpoint(
            os.path.join(resume_from, "checkpoint.ntar"), context.model, optimizer
        )
        if start_step >= cfg.steps:
            raise ConfigError(
                f"checkpoint already at step {start_step}, config wants {cfg.steps}"
            )
    with open(os.path.join(out_dir, "vocab.json"), "w", encoding="utf-8") as fh:
        fh.write(context.vocab.to_json())
    save_config(cfg, os.path.join(out_dir, "config.json"))
    handle = run_training(
        model=context.model,
        train_records=context.dataset.train,
        cache=context.cache,
        flags=context.flags,
        loss_cfg=cfg.loss,
        vocab=context.vocab,
        steps=cfg.steps,
        learning_rate=cfg.learning_rate,
        warmup_fraction=cfg.warmup_fraction,
        identities_per_batch=cfg.identities_per_batch,
        samples_per_identity=cfg.samples_per_identity,
        seed=cfg.seed,
        metrics_path=os.path.join(out_dir, "metrics.csv"),
        checkpoint_path=os.path.join(out_dir, "checkpoint.ntar"),
        config_hash=config_hash(cfg),
        start_step=start_step,
        optimizer=optimizer,
    )
    write_manifest(out_dir, "train", cfg, extra={"final_step": handle.final_step})
    return handle


def evaluate(cfg: RunConfig, run_dir, report_path=None) -> EvalReport:
    """Rank the gallery for every query using a trained checkpoint."""
    with open(os.path.join(run_dir, "vocab.json"), encoding="utf-8") as fh:
        vocab = Vocabulary.from_json(fh.read())
    context = RunContext(cfg, vocab=vocab)
    load_checkpoint(os.path.join(run_dir, "checkpoint.ntar"), context.model)
    report = evaluate_model(context.model, context.dataset, cfg)
    if report_path is None:
        report_path = os.path.join(run_dir, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    return report


def evaluate_model(model: ReidModel, dataset: syn.Dataset, cfg: RunConfig) -> EvalReport:
    from .evaluation import rank_gallery

    query, gallery = dataset.query, dataset.gallery
    query_embs = embed_images(model, query)
    gallery_embs = embed_images(model, gallery)
    result = rank_gallery(
        query_embs,
        gallery_embs,
        np.array([r.identity for r in query]),
        np.array([r.identity for r in gallery]),
        np.array([r.camera for r in query]),
        np.array([r.camera for r in gallery]),
    )
    return evaluate_ranking(result, cfg.strategy, cfg.seed, config_hash(cfg))


def train_and_evaluate(cfg: RunConfig, out_dir) -> EvalReport:
    train(cfg, out_dir)
    return evaluate(cfg, out_dir)


def ablate(cfg: RunConfig, out_dir, rows=None, seeds=None) -> list[EvalReport]:
    """Train+evaluate every (strategy row, seed); write summary CSV and table."""
    os.makedirs(out_dir, exist_ok=True)
    spec = AblationSpec(rows=tuple(rows)) if rows else AblationSpec()
    seeds = list(seeds) if seeds else [cfg.seed]

    def train_and_eval(row_cfg: RunConfig) -> EvalReport:
        run_dir = os.path.join(
            out_dir, f"{row_cfg.strategy.replace('&', 'x').replace('+', '_')}_s{row_cfg.seed}"
        )
        return train_and_evaluate(row_cfg, run_dir)

    reports = run_ablation(spec, cfg, seeds, train_and_eval)
    write_ablation_csv(os.path.join(out_dir, "summary.csv"), reports)
    summary = summarize_reports(reports)
    table = format_summary_table(summary)
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    write_manifest(out_dir, "ablate", cfg, extra={"rows": list(spec.rows), "seeds": seeds})
    return reports
