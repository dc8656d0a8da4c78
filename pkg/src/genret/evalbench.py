"""Recall@K, latency and storage evaluation plus the corpus-size scaling bench.

Two pool settings: "inductive" searches held-out videos only,
"full_corpus" searches the union of training and test videos. Latency
is per-query, batch 1, monotonic clock, with a warm-up prefix excluded
from the statistics; metric fields are deterministic for a fixed
engine, latency fields are not.
"""

from __future__ import annotations

import logging
import time

import numpy as np

log = logging.getLogger(__name__)

from .features import FeatureStore
from .search import RetrievalEngine, beam_search, dedup_candidates, retrieve
from .trie import storage_report

SETTINGS = ("inductive", "full_corpus")
WARMUP_QUERIES = 10


def recall_at_k(rankings: list[list[int]], targets: list[int], k: int) -> float:
    """Percentage of queries whose target appears in the top k."""
    if len(rankings) != len(targets):
        raise ValueError("one target per query required")
    if not rankings:
        raise ValueError("no queries")
    hits = sum(1 for ranked, t in zip(rankings, targets) if t in ranked[:k])
    return 100.0 * hits / len(rankings)


def merge_video_stores(a: FeatureStore, b: FeatureStore) -> FeatureStore:
    if a.dimension != b.dimension:
        raise ValueError("cannot merge stores of different dimension")
    return FeatureStore(
        kind="video",
        dimension=a.dimension,
        ids=np.concatenate([a.ids, b.ids]),
        features=np.concatenate([a.features, b.features]),
        normalized=a.normalized and b.normalized,
    )


def run_eval(
    engine: RetrievalEngine,
    queries: FeatureStore,
    setting: str,
    beam_size: int,
    ks: tuple[int, ...] = (1, 5, 10),
    d_f: int | None = None,
    frame_count_assumption: int = 12,
    max_queries: int | None = None,
) -> dict:
    """Per-query retrieve over the engine's pool; returns the eval report.

    The report separates deterministic "metrics" from wall-clock
    "latency" so reports from identical runs compare equal on metrics.
    """
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}")
    for t in queries.target_video_ids:
        if setting == "full_corpus" and int(t) not in engine.videos:
            raise ValueError(f"query target {int(t)} missing from the search pool")
    n = len(queries)
    if max_queries is not None:
        n = min(n, max_queries)
    top_k = max(ks)
    rankings: list[list[int]] = []
    targets: list[int] = []
    pool_sizes: list[int] = []
    recall_ms: list[float] = []
    rerank_ms: list[float] = []
    for i in range(n):
        result = retrieve(
            queries.features[i],
            engine,
            beam_size=beam_size,
            top_k=top_k,
            query_id=int(queries.ids[i]),
        )
        rankings.append(result.video_ids)
        targets.append(int(queries.target_video_ids[i]))
        pool_sizes.append(result.candidate_count)
        if i >= WARMUP_QUERIES or n <= WARMUP_QUERIES:
            recall_ms.append(result.t_recall_ms)
            rerank_ms.append(result.t_rerank_ms)

    recalls = {f"recall_at_{k}": recall_at_k(rankings, targets, k) for k in ks}
    latency_ms = [a + b for a, b in zip(recall_ms, rerank_ms)]
    if len(latency_ms) < 100:
        log.warning(
            "latency statistics rest on %d timed queries; 100+ after warm-up "
            "is the reference protocol", len(latency_ms),
        )
    report = {
        "setting": setting,
        "pool_size": len(engine.videos),
        "n_queries": n,
        "beam_size": beam_size,
        "metrics": {
            **recalls,
            "candidate_pool_mean": float(np.mean(pool_sizes)),
            "candidate_pool_max": int(np.max(pool_sizes)),
            "storage": storage_report(
                engine.trie,
                engine.videos.dimension if d_f is None else d_f,
                frame_count_assumption,
            ),
        },
        "latency": {
            "n_timed": len(latency_ms),
            "warmup_discarded": min(WARMUP_QUERIES, max(n - len(latency_ms), 0)),
            "t_latency_mean_ms": float(np.mean(latency_ms)),
            "t_latency_median_ms": float(np.median(latency_ms)),
            "t_latency_p95_ms": float(np.percentile(latency_ms, 95)),
            "t_recall_mean_ms": float(np.mean(recall_ms)),
            "t_rerank_mean_ms": float(np.mean(rerank_ms)),
        },
    }
    return report


def format_report_table(report: dict) -> str:
    """Aligned plain-text rendering of an eval report."""
    rows = [
        ("setting", report["setting"]),
        ("pool size", report["pool_size"]),
        ("queries", report["n_queries"]),
        ("beam size", report["beam_size"]),
    ]
    for key, val in sorted(report["metrics"].items()):
        if key == "storage":
            continue
        rows.append((key, f"{val:.2f}" if isinstance(val, float) else val))
    for key, val in report["latency"].items():
        if isinstance(val, float):
            rows.append((key, f"{val:.3f}"))
    storage = report["metrics"]["storage"]
    for key in ("index_file_bytes", "id_payload_bytes", "dense_video_bytes",
                "video_payload_ratio", "video_index_ratio"):
        rows.append((f"storage.{key}", storage[key]))
    width = max(len(str(k)) for k, _ in rows)
    return "\n".join(f"{str(k):<{width}}  {v}" for k, v in rows)


def _timed_dense_scan(query: np.ndarray, unit_videos: np.ndarray, top_k: int) -> float:
    """Exhaustive cosine scan over the whole corpus; returns elapsed ms."""
    t0 = time.perf_counter()
    q = query / max(np.linalg.norm(query), 1e-30)
    scores = unit_videos @ q
    k = min(top_k, len(scores))
    part = np.argpartition(-scores, k - 1)[:k]
    part = part[np.argsort(-scores[part])]
    return (time.perf_counter() - t0) * 1000.0


def _timed_recall(query, engine: RetrievalEngine, beam_size: int) -> float:
    t0 = time.perf_counter()
    beams = beam_search(query, engine.model, engine.trie, beam_size)
    dedup_candidates([engine.trie.resolve(codes) for codes, _ in beams])
    return (time.perf_counter() - t0) * 1000.0


def linear_fit(xs, ys) -> tuple[float, float, float]:
    """Least-squares line fit; returns (slope, intercept, r_squared)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    slope, intercept = np.polyfit(xs, ys, 1)
    pred = slope * xs + intercept
    ss_res = float(((ys - pred) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


def scaling_bench(
    sizes: list[int],
    engine_factory,
    beam_size: int = 32,
    queries_per_size: int = 50,
    top_k: int = 10,
    repeats: int = 3,
) -> dict:
    """Generative recall vs exhaustive dense scan across corpus sizes.

    engine_factory(n) must return (engine, query_features) with at least
    queries_per_size query rows. Each latency is the mean over
    queries_per_size queries and `repeats` passes (best pass kept for the
    dense scan to suppress allocator noise).
    """
    if not sizes:
        raise ValueError("no corpus sizes given")
    if any(n <= 0 for n in sizes):
        raise ValueError("corpus sizes must be positive")
    rows = []
    for n in sizes:
        engine, query_feats = engine_factory(n)
        query_feats = np.asarray(query_feats, dtype=np.float64)[:queries_per_size]
        unit_videos = engine._unit_videos
        # warm-up both paths
        _timed_recall(query_feats[0], engine, beam_size)
        _timed_dense_scan(query_feats[0], unit_videos, top_k)
        recall_ms = min(
            float(np.mean([_timed_recall(q, engine, beam_size) for q in query_feats]))
            for _ in range(repeats)
        )
        dense_ms = min(
            float(np.mean([_timed_dense_scan(q, unit_videos, top_k) for q in query_feats]))
            for _ in range(repeats)
        )
        rows.append({"n": int(n), "t_recall_ms": recall_ms, "t_dense_ms": dense_ms})
    slope, intercept, r2 = linear_fit(
        [r["n"] for r in rows], [r["t_dense_ms"] for r in rows]
    )
    return {
        "rows": rows,
        "dense_fit": {"slope_ms_per_item": slope, "intercept_ms": intercept, "r_squared": r2},
        "recall_max_over_min": float(
            max(r["t_recall_ms"] for r in rows) / min(r["t_recall_ms"] for r in rows)
        ),
    }
