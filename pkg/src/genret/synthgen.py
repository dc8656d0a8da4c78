"""Synthetic polysemous corpora with controlled facet structure.

Each video is a bundle of F latent unit facets kept apart by a minimum
pairwise angle (rejection sampled); the stored video vector is the
unit-normalized mean of its facets. Queries are drawn around single
facets with Gaussian noise and unit-normalized, so one video serves
several well-separated query intents. Facet labels go to a diagnostics
sidecar only and are never part of the training inputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .features import FeatureStore


class InfeasibleAngleError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_videos: int = 100
    facets_per_video: int = 4
    d_f: int = 64
    facet_noise: float = 0.05
    queries_per_facet: int = 8
    min_angle_deg: float = 60.0
    seed: int = 0
    split_fraction: float = 0.5

    def validate(self) -> None:
        if self.n_videos < 1 or self.facets_per_video < 1 or self.queries_per_facet < 1:
            raise ValueError("counts must be >= 1")
        if self.d_f < self.facets_per_video:
            raise ValueError("d_f must be >= facets_per_video for separable facets")
        if self.facet_noise < 0:
            raise ValueError("facet_noise must be >= 0")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must lie in (0, 1)")
        if not 0.0 <= self.min_angle_deg < 180.0:
            raise ValueError("min_angle_deg must lie in [0, 180)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


@dataclass
class SynthCorpus:
    videos: FeatureStore
    queries: FeatureStore
    video_facets: dict[int, np.ndarray]  # video_id -> (F, d_f) unit facets
    query_facet: dict[int, int]  # query_id -> facet index within its video
    config: SynthConfig


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _sample_facets(
    rng: np.random.Generator, f: int, d: int, max_cos: float, attempts: int = 2000
) -> np.ndarray:
    facets = np.empty((f, d), dtype=np.float64)
    for i in range(f):
        for attempt in range(attempts):
            cand = _unit(rng.standard_normal(d))
            if i == 0 or np.max(facets[:i] @ cand) <= max_cos:
                facets[i] = cand
                break
        else:
            raise InfeasibleAngleError(
                f"could not place facet {i} with pairwise angle floor "
                f"(cos <= {max_cos:.3f}) in {attempts} attempts"
            )
    return facets


def generate(config: SynthConfig) -> SynthCorpus:
    """Deterministic per seed; facet pairs respect the configured angle floor."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    max_cos = float(np.cos(np.deg2rad(config.min_angle_deg)))
    f, d = config.facets_per_video, config.d_f

    video_ids = np.arange(1, config.n_videos + 1, dtype=np.uint64)
    video_feats = np.empty((config.n_videos, d), dtype=np.float32)
    video_facets: dict[int, np.ndarray] = {}
    for i, vid in enumerate(video_ids):
        facets = _sample_facets(rng, f, d, max_cos)
        video_facets[int(vid)] = facets
        video_feats[i] = _unit(facets.mean(axis=0)).astype(np.float32)

    n_queries = config.n_videos * f * config.queries_per_facet
    query_ids = np.arange(1, n_queries + 1, dtype=np.uint64)
    query_feats = np.empty((n_queries, d), dtype=np.float32)
    targets = np.empty(n_queries, dtype=np.uint64)
    query_facet: dict[int, int] = {}
    q = 0
    for i, vid in enumerate(video_ids):
        facets = video_facets[int(vid)]
        for j in range(f):
            for _ in range(config.queries_per_facet):
                noisy = facets[j] + config.facet_noise * rng.standard_normal(d)
                query_feats[q] = _unit(noisy).astype(np.float32)
                targets[q] = vid
                query_facet[int(query_ids[q])] = j
                q += 1

    videos = FeatureStore(
        kind="video", dimension=d, ids=video_ids, features=video_feats, normalized=True
    )
    queries = FeatureStore(
        kind="query",
        dimension=d,
        ids=query_ids,
        features=query_feats,
        target_video_ids=targets,
        normalized=True,
    )
    return SynthCorpus(videos, queries, video_facets, query_facet, config)


def split(
    corpus: SynthCorpus, fraction: float, seed: int
) -> tuple[FeatureStore, FeatureStore, FeatureStore, FeatureStore]:
    """Disjoint video split; queries follow their target video's side.

    Returns (train_videos, train_queries, test_videos, test_queries).
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n = len(corpus.videos)
    n_train = int(round(n * fraction))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} videos at {fraction} leaves one side empty")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 1))))
    perm = rng.permutation(n)
    train_rows = np.sort(perm[:n_train])
    test_rows = np.sort(perm[n_train:])

    def _video_side(rows):
        return FeatureStore(
            kind="video",
            dimension=corpus.videos.dimension,
            ids=corpus.videos.ids[rows],
            features=corpus.videos.features[rows],
            normalized=corpus.videos.normalized,
        )

    def _query_side(video_ids: set[int]):
        mask = np.array(
            [int(t) in video_ids for t in corpus.queries.target_video_ids], dtype=bool
        )
        return FeatureStore(
            kind="query",
            dimension=corpus.queries.dimension,
            ids=corpus.queries.ids[mask],
            features=corpus.queries.features[mask],
            target_video_ids=corpus.queries.target_video_ids[mask],
            texts=[t for t, keep in zip(corpus.queries.texts, mask) if keep],
            normalized=corpus.queries.normalized,
        )

    train_videos = _video_side(train_rows)
    test_videos = _video_side(test_rows)
    train_ids = {int(v) for v in train_videos.ids}
    test_ids = {int(v) for v in test_videos.ids}
    return train_videos, _query_side(train_ids), test_videos, _query_side(test_ids)


def write_diagnostics(corpus: SynthCorpus, path, config_hash: str | None = None) -> None:
    """Line-delimited JSON sidecar with the hidden facet structure."""
    with open(path, "w", encoding="utf-8") as fh:
        meta = {"type": "meta", "config": corpus.config.to_dict()}
        if config_hash is not None:
            meta["config_hash"] = config_hash
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for vid, facets in corpus.video_facets.items():
            fh.write(
                json.dumps(
                    {"type": "video", "video_id": vid, "facet_count": len(facets)},
                    sort_keys=True,
                )
                + "\n"
            )
        for qid in corpus.queries.ids:
            qid = int(qid)
            fh.write(
                json.dumps(
                    {
                        "type": "query",
                        "query_id": qid,
                        "video_id": int(
                            corpus.queries.target_video_ids[corpus.queries.row(qid)]
                        ),
                        "facet": corpus.query_facet[qid],
                    },
                    sort_keys=True,
                )
                + "\n"
            )
