import dataclasses
import json

import numpy as np
import pytest

from promptreid import evaluation as ev
from promptreid import synthetic as syn
from promptreid.errors import ConfigError, EvaluationError, ShapeError

RNG = np.random.default_rng


# ---------------------------------------------------------------------------
# brute-force oracle, written against the AP definition (no argsort)
# ---------------------------------------------------------------------------


def brute_force_ap(distances, relevant, kept):
    """Positions via pairwise comparisons; precision at each relevant hit."""
    idx = np.nonzero(kept)[0]
    d = distances[idx]
    earlier = (d[None, :] < d[:, None]) | ((d[None, :] == d[:, None]) & (idx[None, :] < idx[:, None]))
    pos = 1 + earlier.sum(axis=1)
    rel = relevant[idx]
    if rel.sum() == 0:
        return np.nan
    rel_pos = pos[rel]
    hits_at_or_before = (rel_pos[None, :] <= rel_pos[:, None]).sum(axis=1)
    return float((hits_at_or_before / rel_pos).mean())


def brute_force_cmc(distances, relevant, kept, k):
    idx = np.nonzero(kept)[0]
    d = distances[idx]
    earlier = (d[None, :] < d[:, None]) | ((d[None, :] == d[:, None]) & (idx[None, :] < idx[:, None]))
    pos = 1 + earlier.sum(axis=1)
    rel = relevant[idx]
    if rel.sum() == 0:
        return None
    return bool((pos[rel] <= k).any())


# ---------------------------------------------------------------------------
# ranking basics
# ---------------------------------------------------------------------------


def test_query_in_gallery_ranks_first():
    gallery = RNG(0).normal(size=(10, 4))
    query = gallery[3][None, :]
    result = ev.rank_gallery(query, gallery, np.array([7]), np.full(10, 7))
    assert result.order[0, 0] == 3


def test_three_vector_hand_case():
    # distances from q=(0,0): a=(3,4)->5, b=(1,0)->1, c=(0,2)->2
    gallery = np.array([[3.0, 4.0], [1.0, 0.0], [0.0, 2.0]])
    result = ev.rank_gallery(np.zeros((1, 2)), gallery, np.array([0]), np.zeros(3))
    np.testing.assert_array_equal(result.order[0], [1, 2, 0])


def test_rank_gallery_dim_mismatch():
    with pytest.raises(ShapeError):
        ev.rank_gallery(np.zeros((1, 3)), np.zeros((2, 4)), np.zeros(1), np.zeros(2))


def test_permuting_gallery_does_not_change_metrics():
    rng = RNG(1)
    qe, ge = rng.normal(size=(6, 5)), rng.normal(size=(40, 5))
    qid = rng.integers(0, 5, size=6)
    gid = rng.integers(0, 5, size=40)
    base = ev.rank_gallery(qe, ge, qid, gid)
    perm = rng.permutation(40)
    shuffled = ev.rank_gallery(qe, ge[perm], qid, gid[perm])
    np.testing.assert_allclose(ev.compute_map(base), ev.compute_map(shuffled), atol=1e-12)
    for k in (1, 5, 10):
        np.testing.assert_allclose(
            ev.compute_cmc(base, k), ev.compute_cmc(shuffled, k), atol=1e-12
        )


def test_ap_hand_case_ranks_one_and_three():
    # one query; relevant items end up at ranks 1 and 3
    order_distances = np.array([0.1, 0.2, 0.3, 0.4])
    relevant = np.array([True, False, True, False])
    gallery = np.zeros((4, 1))
    gallery[:, 0] = order_distances
    result = ev.rank_gallery(
        np.zeros((1, 1)), gallery,
        np.array([1]), np.where(relevant, 1, 0),
    )
    aps = ev.average_precisions(result)
    np.testing.assert_allclose(aps[0], (1.0 + 2.0 / 3.0) / 2.0, atol=1e-12)


def test_perfect_ranking_gives_unit_metrics():
    gallery = np.vstack([np.full((3, 4), 0.01), RNG(2).normal(size=(20, 4)) + 5])
    gid = np.array([9] * 3 + [0] * 20)
    result = ev.rank_gallery(np.zeros((1, 4)), gallery, np.array([9]), gid)
    assert ev.compute_map(result) == 1.0
    assert ev.compute_cmc(result, 1) == 1.0


def test_cmc_monotone_in_k():
    rng = RNG(3)
    result = ev.rank_gallery(
        rng.normal(size=(8, 6)), rng.normal(size=(60, 6)),
        rng.integers(0, 6, size=8), rng.integers(0, 6, size=60),
    )
    values = [ev.compute_cmc(result, k) for k in (1, 2, 5, 10, 20)]
    assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))


def test_no_relevant_anywhere_raises():
    result = ev.rank_gallery(
        np.zeros((2, 3)), np.ones((4, 3)), np.array([0, 1]), np.full(4, 9)
    )
    with pytest.raises(EvaluationError):
        ev.compute_map(result)


def test_query_without_match_excluded_with_warning():
    qe = np.zeros((2, 3))
    ge = np.ones((4, 3))
    qid = np.array([0, 5])
    gid = np.array([0, 0, 1, 2])
    result = ev.rank_gallery(qe, ge, qid, gid)
    with pytest.warns(UserWarning, match="excluded"):
        value = ev.compute_map(result)
    assert 0.0 <= value <= 1.0


def test_cross_camera_exclusion():
    # one gallery item shares id+camera with the query: it must not count,
    # while the cross-camera positive must
    qe = np.array([[0.0, 0.0]])
    ge = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0]])
    qid, gid = np.array([1]), np.array([1, 1, 2])
    qcam, gcam = np.array([0]), np.array([0, 1, 0])
    result = ev.rank_gallery(qe, ge, qid, gid, qcam, gcam)
    assert not result.kept[0, 0]
    assert result.relevant[0, 1] and not result.relevant[0, 0]
    assert ev.compute_map(result) == 1.0


# ---------------------------------------------------------------------------
# oracle equivalence
# ---------------------------------------------------------------------------


def _distances(qe, ge):
    return np.sqrt(
        np.maximum(
            (qe * qe).sum(1)[:, None] + (ge * ge).sum(1)[None, :] - 2 * qe @ ge.T, 0
        )
    )


@pytest.mark.parametrize("instance_seed", range(20))
def test_map_and_cmc_match_brute_force_oracle(instance_seed):
    rng = RNG(1000 + instance_seed)
    qe = rng.normal(size=(50, 8))
    ge = rng.normal(size=(200, 8))
    qid = rng.integers(0, 30, size=50)
    gid = rng.integers(0, 30, size=200)
    qcam = rng.integers(0, 4, size=50)
    gcam = rng.integers(0, 4, size=200)
    result = ev.rank_gallery(qe, ge, qid, gid, qcam, gcam)
    distances = _distances(qe, ge)
    kept = ~((qid[:, None] == gid[None, :]) & (qcam[:, None] == gcam[None, :]))
    relevant = (qid[:, None] == gid[None, :]) & (qcam[:, None] != gcam[None, :])

    oracle_aps = np.array(
        [brute_force_ap(distances[q], relevant[q], kept[q]) for q in range(50)]
    )
    valid = ~np.isnan(oracle_aps)
    with np.testing.suppress_warnings() as sup:
        sup.filter(UserWarning)
        impl_map = ev.compute_map(result)
    assert abs(impl_map - oracle_aps[valid].mean()) <= 1e-12

    for k in (1, 5, 10):
        oracle_hits = [
            h for q in range(50)
            if (h := brute_force_cmc(distances[q], relevant[q], kept[q], k)) is not None
        ]
        assert abs(ev.compute_cmc(result, k) - np.mean(oracle_hits)) <= 1e-12


def test_raw_pixel_retrieval_is_perfect_within_one_camera():
    spec = syn.SyntheticDatasetSpec(
        identities=12, samples_per_identity=8, noise_sigma=0.0, cameras=4, seed=3
    )
    ds = syn.generate(spec)
    cam0 = [r for r in ds.train + ds.query + ds.gallery if r.camera == 0]
    by_id: dict[int, list] = {}
    for record in cam0:
        by_id.setdefault(record.identity, []).append(record)
    queries = [v[0] for v in by_id.values() if len(v) >= 2]
    gallery = [r for v in by_id.values() for r in v[1:]]
    assert queries, "need at least one identity with two camera-0 samples"
    qe = np.stack([q.image.reshape(-1) for q in queries])
    ge = np.stack([g.image.reshape(-1) for g in gallery])
    result = ev.rank_gallery(
        qe, ge,
        np.array([q.identity for q in queries]),
        np.array([g.identity for g in gallery]),
    )
    assert ev.compute_map(result) == 1.0


# ---------------------------------------------------------------------------
# reports and summaries
# ---------------------------------------------------------------------------


def make_report(strategy="LP", seed=0, m=0.5, schema=ev.REPORT_SCHEMA):
    return ev.EvalReport(
        strategy=strategy, seed=seed, config_hash="abc",
        map_score=m, rank1=m, rank5=min(1.0, m + 0.1), rank10=min(1.0, m + 0.2),
        per_query_ap=[m], schema_version=schema,
    )


def test_report_json_roundtrip():
    report = make_report()
    clone = ev.EvalReport.from_json(report.to_json())
    assert clone == report


def test_report_validates_metric_ranges():
    with pytest.raises(EvaluationError):
        ev.EvalReport("LP", 0, "x", map_score=1.5, rank1=0.5, rank5=0.5, rank10=0.5)
    with pytest.raises(EvaluationError):
        ev.EvalReport("LP", 0, "x", map_score=0.5, rank1=0.9, rank5=0.5, rank10=0.5)


def test_summarize_refuses_mixed_schema():
    reports = [make_report(seed=0), make_report(seed=1, schema=99)]
    with pytest.raises(ConfigError, match="schema"):
        ev.summarize_reports(reports)


def test_summary_and_csv(tmp_path):
    reports = [make_report("LP", 0, 0.4), make_report("LP", 1, 0.6),
               make_report("LP+CP&VP", 0, 0.8)]
    rows = ev.summarize_reports(reports)
    assert rows[0]["strategy"] == "LP"
    np.testing.assert_allclose(rows[0]["map_mean"], 0.5)
    table = ev.format_summary_table(rows)
    assert "LP+CP&VP" in table
    path = tmp_path / "summary.csv"
    ev.write_ablation_csv(path, reports)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "strategy,seed,mAP,r1,r5,r10"
    assert len(lines) == 4


def test_ablation_spec_requires_lp():
    with pytest.raises(ConfigError):
        ev.AblationSpec(rows=("CP",))


def test_run_ablation_cardinality():
    @dataclasses.dataclass
    class MiniConfig:
        strategy: str = "LP"
        seed: int = 0

    seen = []

    def fake_train_and_eval(config):
        seen.append((config.strategy, config.seed))
        return make_report(config.strategy, config.seed, 0.5)

    spec = ev.AblationSpec(rows=("LP", "LP+CP&VP"))
    reports = ev.run_ablation(spec, MiniConfig(), seeds=[0, 1, 2],
                              train_and_eval=fake_train_and_eval)
    assert len(reports) == 6
    assert ("LP+CP&VP", 2) in seen


def test_full_scale_reference_rows_present():
    assert ev.FULL_SCALE_REFERENCE["LP"] == (89.60, 95.50)
    assert ev.FULL_SCALE_REFERENCE["LP+CP&VP"] == (95.50, 97.70)
