"""Directional ablation suite on the synthetic polysemous corpus.

Each variant disables one mechanism via a config switch and trains with
the identical schedule on the identical seeded corpora. Evaluation
follows the reference protocol: the beam size is tuned per trained
variant so the mean deduped candidate pool lands in the 100-150 band
(otherwise variants with degraded quantization get collision-inflated
pools and the reranker masks recall quality), and reports exist for
both the inductive pool (held-out videos) and the full-corpus pool
(train + test), where single-ID ambiguity bites hardest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cotrain import TrainConfig, Trainer
from .evalbench import merge_video_stores, run_eval
from .features import FeatureStore
from .search import build_engine, tune_beam_size
from .synthgen import SynthConfig, generate, split

VARIANTS: dict[str, dict] = {
    "full": {},
    "single_view": {"n_views": 1},
    "no_cl": {"use_cl": False},
    "no_hc": {"use_hc": False},
    "no_rq": {"lambda_rq": 0.0},
    "no_rec": {"lambda_rec": 0.0},
}

LOSS_ABLATIONS = ("no_cl", "no_hc", "no_rq", "no_rec")


@dataclass
class SuiteSpec:
    """Operating point of the ablation suite (reference configuration)."""

    n_videos: int = 1000
    facets_per_video: int = 4
    queries_per_facet: int = 8
    d_f: int = 64
    facet_noise: float = 0.05
    min_angle_deg: float = 75.0
    split_fraction: float = 0.5
    n_views: int = 4
    m_layers: int = 3
    codebook_size: int = 128
    d_z: int = 32
    hidden: int = 64
    batch_size: int = 512
    learning_rate: float = 3e-3
    align_epochs: int = 3
    later_align_epochs: int = 1
    train_epochs: int = 4
    pool_low: int = 100
    pool_high: int = 150
    tune_queries: int = 100
    eval_queries: int = 1500
    data_seed_base: int = 900

    def synth_config(self, seed: int) -> SynthConfig:
        return SynthConfig(
            n_videos=self.n_videos,
            facets_per_video=self.facets_per_video,
            d_f=self.d_f,
            facet_noise=self.facet_noise,
            queries_per_facet=self.queries_per_facet,
            min_angle_deg=self.min_angle_deg,
            seed=self.data_seed_base + seed,
            split_fraction=self.split_fraction,
        )

    def train_config(self, seed: int, overrides: dict) -> TrainConfig:
        base = dict(
            n_views=self.n_views,
            m_layers=self.m_layers,
            codebook_size=self.codebook_size,
            d_z=self.d_z,
            hidden=self.hidden,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            align_epochs=self.align_epochs,
            later_align_epochs=self.later_align_epochs,
            train_epochs=self.train_epochs,
            seed=seed,
        )
        base.update(overrides)
        return TrainConfig(**base)


def _subsample_queries(queries: FeatureStore, seed: int, n: int) -> FeatureStore:
    if n >= len(queries):
        return queries
    idx = np.sort(np.random.default_rng(seed).choice(len(queries), size=n, replace=False))
    return FeatureStore(
        kind="query",
        dimension=queries.dimension,
        ids=queries.ids[idx],
        features=queries.features[idx],
        target_video_ids=queries.target_video_ids[idx],
        texts=[queries.texts[i] for i in idx],
        normalized=queries.normalized,
    )


@dataclass
class SuiteRunner:
    """Memoizing runner: corpora per seed, trained models per variant,
    metrics per (variant, seed, setting)."""

    spec: SuiteSpec = field(default_factory=SuiteSpec)
    _corpora: dict = field(default_factory=dict)
    _models: dict = field(default_factory=dict)
    _metrics: dict = field(default_factory=dict)

    def corpus(self, seed: int):
        if seed not in self._corpora:
            raw = generate(self.spec.synth_config(seed))
            train_v, train_q, test_v, test_q = split(
                raw, self.spec.split_fraction, self.spec.data_seed_base + seed
            )
            eval_q = _subsample_queries(test_q, seed, self.spec.eval_queries)
            self._corpora[seed] = (train_v, train_q, test_v, eval_q)
        return self._corpora[seed]

    def model(self, variant: str, seed: int):
        key = (variant, seed)
        if key not in self._models:
            train_v, train_q, _, _ = self.corpus(seed)
            trainer = Trainer(
                self.spec.train_config(seed, VARIANTS[variant]), train_v, train_q
            )
            trainer.run(None)
            self._models[key] = trainer.model
        return self._models[key]

    def metrics(self, variant: str, seed: int, setting: str) -> dict:
        key = (variant, seed, setting)
        if key not in self._metrics:
            train_v, _, test_v, eval_q = self.corpus(seed)
            model = self.model(variant, seed)
            pool = merge_video_stores(train_v, test_v) if setting == "full_corpus" else test_v
            engine = build_engine(model, pool)
            beam, _ = tune_beam_size(
                engine,
                eval_q.features[: self.spec.tune_queries],
                self.spec.pool_low,
                self.spec.pool_high,
            )
            report = run_eval(engine, eval_q, setting, beam_size=beam, ks=(1, 10))
            m = report["metrics"]
            self._metrics[key] = {
                "recall_at_1": m["recall_at_1"],
                "recall_at_10": m["recall_at_10"],
                "candidate_pool_mean": m["candidate_pool_mean"],
                "beam_size": beam,
            }
        return self._metrics[key]

    def mean_metric(self, variant: str, seeds, setting: str, metric: str) -> float:
        return float(
            np.mean([self.metrics(variant, s, setting)[metric] for s in seeds])
        )
