import numpy as np
import pytest

from genret.evalbench import (
    format_report_table,
    linear_fit,
    merge_video_stores,
    recall_at_k,
    run_eval,
    scaling_bench,
)
from genret.features import DuplicateIdError, FeatureStore
from genret.search import build_engine


def test_recall_trivial_cases():
    rankings = [[1, 2, 3], [4, 5, 6]]
    assert recall_at_k(rankings, [1, 4], 1) == 100.0
    assert recall_at_k(rankings, [99, 98], 10) == 0.0
    assert recall_at_k(rankings, [2, 99], 5) == 50.0


def test_recall_requires_targets():
    with pytest.raises(ValueError):
        recall_at_k([[1]], [1, 2], 1)
    with pytest.raises(ValueError):
        recall_at_k([], [], 1)


def test_recall_matches_random_ranking_expectation():
    rng = np.random.default_rng(0)
    pool, n_queries = 50, 10_000
    rankings = [list(rng.permutation(pool) + 1) for _ in range(n_queries)]
    targets = [int(rng.integers(1, pool + 1)) for _ in range(n_queries)]
    for k in (1, 5, 10):
        expected = 100.0 * k / pool
        sigma = 100.0 * np.sqrt((k / pool) * (1 - k / pool) / n_queries)
        got = recall_at_k(rankings, targets, k)
        assert abs(got - expected) <= 3 * sigma


def _engine_and_queries(small_corpus, small_trained, pool="test"):
    videos = (
        small_corpus["test_videos"]
        if pool == "test"
        else merge_video_stores(small_corpus["train_videos"], small_corpus["test_videos"])
    )
    engine = build_engine(small_trained.model, videos)
    return engine, small_corpus["test_queries"]


def test_run_eval_monotone_and_deterministic(small_corpus, small_trained):
    engine, queries = _engine_and_queries(small_corpus, small_trained)
    report = run_eval(engine, queries, "inductive", beam_size=8, max_queries=120)
    m = report["metrics"]
    assert m["recall_at_1"] <= m["recall_at_5"] <= m["recall_at_10"]
    again = run_eval(engine, queries, "inductive", beam_size=8, max_queries=120)
    assert again["metrics"] == m
    assert report["latency"]["n_timed"] == 120 - report["latency"]["warmup_discarded"]
    mean_sum = (
        report["latency"]["t_recall_mean_ms"] + report["latency"]["t_rerank_mean_ms"]
    )
    assert report["latency"]["t_latency_mean_ms"] == pytest.approx(mean_sum, abs=1e-9)


def test_full_corpus_recall_no_better_than_inductive(small_corpus, small_trained):
    inductive, queries = _engine_and_queries(small_corpus, small_trained, "test")
    full, _ = _engine_and_queries(small_corpus, small_trained, "full")
    r_ind = run_eval(inductive, queries, "inductive", beam_size=8, max_queries=120)
    r_full = run_eval(full, queries, "full_corpus", beam_size=8, max_queries=120)
    for k in (1, 5, 10):
        assert (
            r_full["metrics"][f"recall_at_{k}"] <= r_ind["metrics"][f"recall_at_{k}"]
        )


def test_run_eval_rejects_unknown_setting(small_corpus, small_trained):
    engine, queries = _engine_and_queries(small_corpus, small_trained)
    with pytest.raises(ValueError):
        run_eval(engine, queries, "zero_shot", beam_size=4)


def test_full_corpus_requires_targets_in_pool(small_corpus, small_trained):
    engine, _ = _engine_and_queries(small_corpus, small_trained, "test")
    stray = FeatureStore(
        kind="query",
        dimension=small_corpus["test_queries"].dimension,
        ids=np.array([1], dtype=np.uint64),
        features=np.ones((1, small_corpus["test_queries"].dimension), dtype=np.float32),
        target_video_ids=np.array([10**9], dtype=np.uint64),
    )
    with pytest.raises(ValueError, match="missing"):
        run_eval(engine, stray, "full_corpus", beam_size=4)


def test_report_table_renders(small_corpus, small_trained):
    engine, queries = _engine_and_queries(small_corpus, small_trained)
    report = run_eval(engine, queries, "inductive", beam_size=8, max_queries=40)
    text = format_report_table(report)
    assert "recall_at_1" in text
    assert "storage.index_file_bytes" in text


def test_merge_video_stores_checks():
    a = FeatureStore(
        kind="video", dimension=4,
        ids=np.array([1], dtype=np.uint64), features=np.ones((1, 4), dtype=np.float32),
    )
    b = FeatureStore(
        kind="video", dimension=5,
        ids=np.array([2], dtype=np.uint64), features=np.ones((1, 5), dtype=np.float32),
    )
    with pytest.raises(ValueError):
        merge_video_stores(a, b)
    dup = FeatureStore(
        kind="video", dimension=4,
        ids=np.array([1], dtype=np.uint64), features=np.zeros((1, 4), dtype=np.float32),
    )
    with pytest.raises(DuplicateIdError):
        merge_video_stores(a, dup)


def test_linear_fit_recovers_line():
    xs = np.array([1.0, 2.0, 3.0, 4.0])
    slope, intercept, r2 = linear_fit(xs, 2.5 * xs + 1.0)
    assert slope == pytest.approx(2.5, abs=1e-9)
    assert intercept == pytest.approx(1.0, abs=1e-9)
    assert r2 == pytest.approx(1.0, abs=1e-12)


def test_scaling_bench_guards_and_shape(small_trained):
    from genret.synthgen import SynthConfig, generate

    with pytest.raises(ValueError):
        scaling_bench([], engine_factory=None)
    with pytest.raises(ValueError):
        scaling_bench([0], engine_factory=None)

    def factory(n):
        corpus = generate(
            SynthConfig(n_videos=n, facets_per_video=2, d_f=32, seed=1000 + n,
                        queries_per_facet=2)
        )
        return build_engine(small_trained.model, corpus.videos), corpus.queries.features

    result = scaling_bench([50, 100], factory, beam_size=4, queries_per_size=5, repeats=1)
    assert [row["n"] for row in result["rows"]] == [50, 100]
    assert all(row["t_dense_ms"] > 0 for row in result["rows"])
    assert "r_squared" in result["dense_fit"]
