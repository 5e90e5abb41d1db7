"""Retrieval evaluation: Euclidean ranking, mAP / Rank@k, ablation runner.

Rankings sort gallery items by ascending Euclidean distance with stable ties.
When camera tags are present the standard cross-camera protocol applies:
gallery items sharing both identity and camera with the query are dropped
from that query's ranking and relevance. Average precision is the mean of
precision values at each relevant hit.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, EvaluationError, ShapeError

REPORT_SCHEMA = 1

# Published full-scale reference numbers (Market1501, mAP / Rank@1) for the
# strategy rows; not reproducible at desk scale, kept for orientation only.
FULL_SCALE_REFERENCE = {
    "LP": (89.60, 95.50),
    "LP+CP&VP": (95.50, 97.70),
}


@dataclass
class RankingResult:
    """Per-query gallery orderings plus relevance/validity masks.

    ``order`` rows are permutations of all gallery indices; ``kept`` marks the
    items that participate (same-id same-camera items are excluded when
    camera tags exist); ``relevant`` marks correct matches among kept items.
    """

    order: np.ndarray     # (Q, G) int
    relevant: np.ndarray  # (Q, G) bool, gallery-index space
    kept: np.ndarray      # (Q, G) bool, gallery-index space


def rank_gallery(query_embs: np.ndarray, gallery_embs: np.ndarray,
                 query_ids: np.ndarray, gallery_ids: np.ndarray,
                 query_cams: np.ndarray | None = None,
                 gallery_cams: np.ndarray | None = None) -> RankingResult:
    query_embs = np.asarray(query_embs, dtype=np.float64)
    gallery_embs = np.asarray(gallery_embs, dtype=np.float64)
    if query_embs.ndim != 2 or gallery_embs.ndim != 2:
        raise ShapeError("embeddings must be 2-d (N, D)")
    if query_embs.shape[1] != gallery_embs.shape[1]:
        raise ShapeError(
            f"query dim {query_embs.shape[1]} != gallery dim {gallery_embs.shape[1]}"
        )
    if gallery_embs.shape[0] == 0:
        raise ShapeError("gallery is empty")
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)

    d2 = (
        (query_embs * query_embs).sum(axis=1)[:, None]
        + (gallery_embs * gallery_embs).sum(axis=1)[None, :]
        - 2.0 * query_embs @ gallery_embs.T
    )
    distances = np.sqrt(np.maximum(d2, 0.0))
    order = np.argsort(distances, axis=1, kind="stable")

    same_id = query_ids[:, None] == gallery_ids[None, :]
    if query_cams is not None and gallery_cams is not None:
        same_cam = np.asarray(query_cams)[:, None] == np.asarray(gallery_cams)[None, :]
        kept = ~(same_id & same_cam)
        relevant = same_id & ~same_cam
    else:
        kept = np.ones_like(same_id, dtype=bool)
        relevant = same_id
    return RankingResult(order=order, relevant=relevant, kept=kept)


def average_precisions(result: RankingResult) -> np.ndarray:
    """AP per query; NaN for queries with no relevant gallery item."""
    num_queries = result.order.shape[0]
    aps = np.full(num_queries, np.nan)
    for q in range(num_queries):
        ranked = result.order[q][result.kept[q][result.order[q]]]
        hits = result.relevant[q][ranked]
        total = hits.sum()
        if total == 0:
            continue
        positions = np.nonzero(hits)[0] + 1
        precisions = np.arange(1, total + 1) / positions
        aps[q] = precisions.mean()
    return aps


def compute_map(result: RankingResult) -> float:
    aps = average_precisions(result)
    valid = ~np.isnan(aps)
    if not valid.any():
        raise EvaluationError("no query has a relevant gallery item")
    if not valid.all():
        warnings.warn(f"{(~valid).sum()} queries have no relevant item; excluded from mAP")
    return float(aps[valid].mean())


def compute_cmc(result: RankingResult, k: int) -> float:
    """Fraction of (valid) queries with a relevant item in the top k kept."""
    hits = []
    for q in range(result.order.shape[0]):
        ranked = result.order[q][result.kept[q][result.order[q]]]
        rel = result.relevant[q][ranked]
        if rel.sum() == 0:
            continue
        hits.append(bool(rel[:k].any()))
    if not hits:
        raise EvaluationError("no query has a relevant gallery item")
    return float(np.mean(hits))


@dataclass
class EvalReport:
    strategy: str
    seed: int
    config_hash: str
    map_score: float
    rank1: float
    rank5: float
    rank10: float
    per_query_ap: list = field(default_factory=list)
    schema_version: int = REPORT_SCHEMA

    def __post_init__(self):
        metrics = [self.map_score, self.rank1, self.rank5, self.rank10]
        if any(not (0.0 <= m <= 1.0) for m in metrics):
            raise EvaluationError(f"metrics outside [0, 1]: {metrics}")
        if not (self.rank1 <= self.rank5 + 1e-12 and self.rank5 <= self.rank10 + 1e-12):
            raise EvaluationError("Rank@k must be nondecreasing in k")

    def to_json(self) -> str:
        doc = {
            "strategy": self.strategy,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "mAP": self.map_score,
            "r1": self.rank1,
            "r5": self.rank5,
            "r10": self.rank10,
            "per_query_ap": list(self.per_query_ap),
            "schema_version": self.schema_version,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        return cls(
            strategy=doc["strategy"],
            seed=int(doc["seed"]),
            config_hash=doc["config_hash"],
            map_score=float(doc["mAP"]),
            rank1=float(doc["r1"]),
            rank5=float(doc["r5"]),
            rank10=float(doc["r10"]),
            per_query_ap=list(doc.get("per_query_ap", [])),
            schema_version=int(doc["schema_version"]),
        )


def evaluate_ranking(result: RankingResult, strategy: str, seed: int,
                     config_hash: str) -> EvalReport:
    aps = average_precisions(result)
    return EvalReport(
        strategy=strategy,
        seed=seed,
        config_hash=config_hash,
        map_score=compute_map(result),
        rank1=compute_cmc(result, 1),
        rank5=compute_cmc(result, 5),
        rank10=compute_cmc(result, 10),
        per_query_ap=[None if np.isnan(a) else float(a) for a in aps],
    )


@dataclass
class AblationSpec:
    """Strategy rows to run; the learnable-prompt baseline anchors every row."""

    rows: tuple = ("LP", "LP+AW", "LP+GC", "LP+VP", "LP+CP", "LP+CP&VP")

    def __post_init__(self):
        for row in self.rows:
            if row != "LP" and not row.startswith("LP+"):
                raise ConfigError(f"ablation row {row!r} must include the LP baseline")


def run_ablation(spec: AblationSpec, base_config, seeds, train_and_eval) -> list[EvalReport]:
    """One trained-and-evaluated report per (row, seed).

    ``train_and_eval(config) -> EvalReport`` hides the training stack so this
    module stays import-light; the CLI supplies the real implementation.
    """
    reports = []
    for row in spec.rows:
        for seed in seeds:
            config = replace(base_config, strategy=row, seed=int(seed))
            reports.append(train_and_eval(config))
    return reports


def summarize_reports(reports) -> list[dict]:
    """Per-strategy mean and spread, ordered as first seen."""
    reports = list(reports)
    versions = {r.schema_version for r in reports}
    if len(versions) > 1:
        raise ConfigError(f"refusing to aggregate mixed report schemas: {sorted(versions)}")
    grouped: dict[str, list[EvalReport]] = {}
    for report in reports:
        grouped.setdefault(report.strategy, []).append(report)
    rows = []
    for strategy, group in grouped.items():
        maps = np.array([r.map_score for r in group])
        r1 = np.array([r.rank1 for r in group])
        rows.append(
            {
                "strategy": strategy,
                "runs": len(group),
                "map_mean": float(maps.mean()),
                "map_std": float(maps.std()),
                "r1_mean": float(r1.mean()),
                "r1_std": float(r1.std()),
            }
        )
    return rows


def write_ablation_csv(path, reports) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "seed", "mAP", "r1", "r5", "r10"])
        for r in reports:
            writer.writerow(
                [r.strategy, r.seed, f"{r.map_score:.6f}", f"{r.rank1:.6f}",
                 f"{r.rank5:.6f}", f"{r.rank10:.6f}"]
            )


def format_summary_table(summary_rows) -> str:
    header = f"{'strategy':<12} {'runs':>4} {'mAP':>16} {'Rank@1':>16}"
    lines = [header, "-" * len(header)]
    for row in summary_rows:
        lines.append(
            f"{row['strategy']:<12} {row['runs']:>4} "
            f"{row['map_mean']:.4f} ± {row['map_std']:.4f} "
            f"{row['r1_mean']:.4f} ± {row['r1_std']:.4f}"
        )
    return "\n".join(lines)
