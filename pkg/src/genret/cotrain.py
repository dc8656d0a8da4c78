"""Progressive co-training of the tokenizer and retriever over shared codebooks.

One codebook layer is trained at a time. Per layer m:
    1. freeze codebook layers < m,
    2. alignment phase: contrastive loss between paired view latents and
       cumulative decoder features (+ hierarchical consistency when m > 1),
    3. initialize layer m by k-means over the current corpus residuals,
    4. co-training phase: weighted sum of code cross-entropy, hierarchical
       consistency, residual-quantization and reconstruction losses, with
       code targets recomputed from the live tokenizer each batch.

Checkpoints are written after each layer; RNG streams are derived from
(seed, layer, phase, epoch) so a resumed run replays the same shuffles.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import seeding
from .checkpoint import read_checkpoint, write_checkpoint
from .features import FeatureStore, normalize, validate_pairing
from .kmeans import kmeans
from .model import GenRetModel
from .retriever import ce_loss, cl_loss, clamp_temperature, decode_steps, hc_loss
from .tokenizer import (
    DTYPE,
    encode_views,
    gather_quantized,
    reconstruct,
    rq_loss,
    select_codes,
    straight_through,
)

log = logging.getLogger(__name__)

PHASE_ALIGN, PHASE_COTRAIN, PHASE_DONE = 0, 1, 2


class NumericalAbort(RuntimeError):
    """Raised when a training loss goes non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    """Engine training configuration.

    Defaults follow the reference operating point (4 views, 3 codebook
    layers of 128 entries, AdamW at 1e-4 with batch 512, 3 alignment
    epochs for the first layer then 1, 4 co-training epochs per layer).
    The loss weights and beta are engine defaults.
    """

    n_views: int = 4
    m_layers: int = 3
    codebook_size: int = 128
    d_z: int = 32
    hidden: int = 64
    beta: float = 0.25
    lambda_ce: float = 1.0
    lambda_hc: float = 0.5
    lambda_rq: float = 1.0
    lambda_rec: float = 1.0
    tau_init: float = 0.07
    align_epochs: int = 3
    later_align_epochs: int = 1
    train_epochs: int = 4
    batch_size: int = 512
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    seed: int = 0
    kmeans_iters: int = 25
    frozen_targets: bool = False
    use_cl: bool = True
    use_hc: bool = True
    two_stage: bool = False

    def validate(self) -> None:
        for name in ("n_views", "m_layers", "codebook_size", "d_z", "hidden",
                     "train_epochs", "batch_size", "kmeans_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("align_epochs", "later_align_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("beta", "learning_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("lambda_ce", "lambda_hc", "lambda_rq", "lambda_rec",
                     "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tau_init <= 0:
            raise ValueError("tau_init must be > 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


@dataclass
class ClusterAssignment:
    assignment: dict[int, int]  # query_id -> view index
    centroids: np.ndarray  # (n_views, d_f)


def cluster_queries(
    queries: FeatureStore, n_views: int, seed: int, iters: int = 25
) -> ClusterAssignment:
    """Hard-assign every query to one of n_views intent clusters.

    k-means runs on unit-normalized query features; empty clusters are
    re-seeded from the farthest point (see kmeans module). Deterministic
    for a fixed seed.
    """
    if len(queries) < n_views:
        raise ValueError(f"need at least {n_views} queries, got {len(queries)}")
    feats = queries.features.astype(np.float64)
    norms = np.linalg.norm(feats, axis=1)
    unit = feats / np.maximum(norms, 1e-30)[:, None]
    centroids, labels = kmeans(unit, n_views, seeding.rng_for(seed, seeding.CLUSTER), iters)
    assignment = {int(qid): int(lab) for qid, lab in zip(queries.ids, labels)}
    return ClusterAssignment(assignment=assignment, centroids=centroids)


def init_codebook_layer(
    residuals: np.ndarray, k: int, rng: np.random.Generator, iters: int = 25
) -> np.ndarray:
    """k-means++ centroids over residuals become a codebook layer (K, d_z).

    Fewer than K residuals are padded by resampling with Gaussian jitter
    (logged); an empty collection is an error.
    """
    residuals = np.asarray(residuals, dtype=np.float64)
    if residuals.size == 0:
        raise ValueError("cannot initialize a codebook layer from no residuals")
    if len(residuals) < k:
        log.warning(
            "padding %d residuals to %d with jittered resamples", len(residuals), k
        )
        scale = max(float(np.linalg.norm(residuals, axis=1).mean()), 1e-6) * 0.01
        picks = rng.integers(len(residuals), size=k - len(residuals))
        extra = residuals[picks] + rng.normal(0.0, scale, size=(len(picks), residuals.shape[1]))
        residuals = np.concatenate([residuals, extra], axis=0)
    centroids, _ = kmeans(residuals, k, rng, iters)
    return centroids


class Trainer:
    """Holds all learnable state plus the schedule position.

    The codebook instance is shared between the tokenizer and retriever
    paths by construction (a single module), which is what makes the
    retrieval loss reshape quantization boundaries.
    """

    def __init__(self, config: TrainConfig, videos: FeatureStore, queries: FeatureStore):
        config.validate()
        if not videos.normalized:
            videos = normalize(videos, replace_degenerate=True)
        if not queries.normalized:
            queries = normalize(queries, replace_degenerate=True)
        validate_pairing(videos, queries)
        self.config = config
        self.videos = videos
        self.queries = queries
        self.d_f = videos.dimension
        self.model = GenRetModel(
            d_f=self.d_f,
            n_views=config.n_views,
            m_layers=config.m_layers,
            k=config.codebook_size,
            d_z=config.d_z,
            hidden=config.hidden,
            tau_init=config.tau_init,
            seed=config.seed,
        )
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(),
            lr=config.learning_rate,
            weight_decay=config.weight_decay,
        )
        self.cluster = cluster_queries(queries, config.n_views, config.seed, config.kmeans_iters)
        self.completed_layers = 0
        self.last_phase = PHASE_DONE
        self.last_epoch = 0
        self.history: list[dict] = []
        self.extra_config: dict = {}  # provenance keys echoed into checkpoints

        self.q_feats = torch.as_tensor(queries.features, dtype=DTYPE)
        self.v_feats = torch.as_tensor(videos.features, dtype=DTYPE)
        self.pair_video_row = np.array(
            [videos.row(int(t)) for t in queries.target_video_ids], dtype=np.int64
        )
        self.pair_view = np.array(
            [self.cluster.assignment[int(q)] for q in queries.ids], dtype=np.int64
        )

    # ------------------------------------------------------------------
    # pieces
    # ------------------------------------------------------------------

    def _batches(self, rng: np.random.Generator):
        n = len(self.queries)
        perm = rng.permutation(n)
        bs = min(self.config.batch_size, n)
        starts = list(range(0, n, bs))
        # fold a trailing singleton into the previous batch (contrastive
        # loss needs >= 2 items)
        if len(starts) > 1 and n - starts[-1] == 1:
            starts.pop()
        for i, start in enumerate(starts):
            end = n if i == len(starts) - 1 else starts[i + 1]
            yield perm[start:end]

    def _step(self, loss: torch.Tensor) -> None:
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        clamp_temperature(self.model.tau)

    def _paired_codes(self, z_paired: torch.Tensor, upto: int) -> torch.Tensor:
        codes, _, _, _ = select_codes(
            z_paired.detach().cpu().numpy(), self.model.codebook.layer_arrays(), upto
        )
        return torch.as_tensor(codes, dtype=torch.int64)

    def corpus_latents(self) -> torch.Tensor:
        """(n_videos, n_views, d_z) latents for the whole training corpus."""
        with torch.no_grad():
            return encode_views(self.v_feats, self.model.encoders)

    def corpus_residuals(self, upto: int) -> np.ndarray:
        """Residuals after `upto` layers for all videos x views, flattened."""
        z = self.corpus_latents().cpu().numpy().reshape(-1, self.config.d_z)
        _, _, acc, _ = select_codes(z, self.model.codebook.layer_arrays(), upto)
        return z - acc

    def mean_pair_cosine(self) -> float:
        """Monitored alignment metric: mean cos(z_paired, h^(m)) over all pairs."""
        m = max(self.completed_layers, 1)
        with torch.no_grad():
            z_all = encode_views(self.v_feats[self.pair_video_row], self.model.encoders)
            z = z_all[torch.arange(len(self.queries)), torch.as_tensor(self.pair_view)]
            codes = self._paired_codes(z, m - 1)
            h = decode_steps(
                self.model.retriever, self.model.codebook, self.q_feats, codes, m
            ).sum(dim=1)
            cos = torch.nn.functional.cosine_similarity(z, h, dim=-1)
            return float(cos.mean())

    # ------------------------------------------------------------------
    # phases (layer argument is 1-based)
    # ------------------------------------------------------------------

    def align_phase(self, layer: int) -> None:
        cfg = self.config
        epochs = cfg.align_epochs if layer == 1 else cfg.later_align_epochs
        has_cl = cfg.use_cl
        has_hc = cfg.use_hc and layer > 1
        self.last_phase = PHASE_ALIGN
        if not has_cl and not has_hc:
            self.last_epoch = 0
            return
        arange = torch.arange
        for epoch in range(epochs):
            rng = seeding.rng_for(cfg.seed, seeding.SHUFFLE, layer, PHASE_ALIGN, epoch)
            epoch_loss = 0.0
            n_batches = 0
            for batch in self._batches(rng):
                qf = self.q_feats[batch]
                vf = self.v_feats[self.pair_video_row[batch]]
                view = torch.as_tensor(self.pair_view[batch])
                z_all = encode_views(vf, self.model.encoders)
                z = z_all[arange(len(batch)), view]
                codes = self._paired_codes(z, layer - 1)
                loss = qf.new_zeros(())
                if has_cl:
                    h_cum = decode_steps(
                        self.model.retriever, self.model.codebook, qf, codes, layer
                    ).sum(dim=1)
                    loss = loss + cl_loss(z, h_cum, self.model.tau)
                if has_hc:
                    loss = loss + hc_loss(
                        self.model.retriever, self.model.codebook, self.model.tau,
                        qf, z, codes, layer - 1,
                    )
                self._abort_if_nonfinite(loss, layer, PHASE_ALIGN, epoch)
                self._step(loss)
                epoch_loss += float(loss.detach())
                n_batches += 1
            self.last_epoch = epoch + 1
            self.history.append(
                {"layer": layer, "phase": "align", "epoch": epoch,
                 "loss": epoch_loss / max(n_batches, 1)}
            )

    def init_layer(self, layer: int) -> None:
        cfg = self.config
        residuals = self.corpus_residuals(layer - 1)
        rng = seeding.rng_for(cfg.seed, seeding.CODEBOOK, layer)
        values = init_codebook_layer(residuals, cfg.codebook_size, rng, cfg.kmeans_iters)
        self.model.codebook.set_layer(layer - 1, values)

    def cotrain_phase(self, layer: int, lambda_overrides: dict | None = None) -> None:
        cfg = self.config
        lam = {
            "ce": cfg.lambda_ce,
            "hc": cfg.lambda_hc if cfg.use_hc else 0.0,
            "rq": cfg.lambda_rq,
            "rec": cfg.lambda_rec,
        }
        if lambda_overrides:
            lam.update(lambda_overrides)
        arange = torch.arange
        self.last_phase = PHASE_COTRAIN
        for epoch in range(cfg.train_epochs):
            rng = seeding.rng_for(cfg.seed, seeding.SHUFFLE, layer, PHASE_COTRAIN, epoch)
            frozen_codes = None
            if cfg.frozen_targets:
                z = self.corpus_latents().cpu().numpy()
                flat = z.reshape(-1, cfg.d_z)
                codes, _, _, _ = select_codes(flat, self.model.codebook.layer_arrays(), layer)
                frozen_codes = torch.as_tensor(
                    codes.reshape(z.shape[0], cfg.n_views, layer), dtype=torch.int64
                )
            epoch_loss = 0.0
            parts = {"ce": 0.0, "hc": 0.0, "rq": 0.0, "rec": 0.0}
            n_batches = 0
            for batch in self._batches(rng):
                qf = self.q_feats[batch]
                vrow = self.pair_video_row[batch]
                vf = self.v_feats[vrow]
                view = torch.as_tensor(self.pair_view[batch])
                z_all = encode_views(vf, self.model.encoders)
                if frozen_codes is not None:
                    codes_all = frozen_codes[torch.as_tensor(vrow)]
                else:
                    flat = z_all.detach().cpu().numpy().reshape(-1, cfg.d_z)
                    codes, _, _, _ = select_codes(
                        flat, self.model.codebook.layer_arrays(), layer
                    )
                    codes_all = torch.as_tensor(
                        codes.reshape(len(batch), cfg.n_views, layer), dtype=torch.int64
                    )
                z_hat = gather_quantized(self.model.codebook, codes_all, layer)
                l_rq = rq_loss(z_hat, z_all, cfg.beta)
                _, l_rec = reconstruct(
                    straight_through(z_all, z_hat), self.model.decoders, vf
                )
                codes_paired = codes_all[arange(len(batch)), view]
                z_paired = z_all[arange(len(batch)), view]
                l_ce = ce_loss(
                    self.model.retriever, self.model.codebook, self.model.tau,
                    qf, codes_paired, layer - 1,
                )
                if layer > 1 and lam["hc"] != 0.0:
                    l_hc = hc_loss(
                        self.model.retriever, self.model.codebook, self.model.tau,
                        qf, z_paired, codes_paired, layer - 1,
                    )
                else:
                    l_hc = qf.new_zeros(())
                total = (
                    lam["ce"] * l_ce + lam["hc"] * l_hc
                    + lam["rq"] * l_rq + lam["rec"] * l_rec
                )
                self._abort_if_nonfinite(
                    total, layer, PHASE_COTRAIN, epoch,
                    ce=float(l_ce.detach()), hc=float(l_hc.detach()),
                    rq=float(l_rq.detach()), rec=float(l_rec.detach()),
                )
                self._step(total)
                epoch_loss += float(total.detach())
                for name, val in (("ce", l_ce), ("hc", l_hc), ("rq", l_rq), ("rec", l_rec)):
                    parts[name] += float(val.detach())
                n_batches += 1
            reseeded = self.model.codebook.reseed_collapsed(
                seeding.rng_for(cfg.seed, seeding.RESEED, layer, epoch)
            )
            if reseeded:
                log.warning("re-seeded %d collapsed codebook entries", reseeded)
            self.last_epoch = epoch + 1
            record = {"layer": layer, "phase": "cotrain", "epoch": epoch,
                      "loss": epoch_loss / max(n_batches, 1)}
            record.update({k: v / max(n_batches, 1) for k, v in parts.items()})
            self.history.append(record)

    def _abort_if_nonfinite(self, loss, layer, phase, epoch, **components) -> None:
        if bool(torch.isfinite(loss)):
            return
        snapshot = {
            "layer": layer, "phase": phase, "epoch": epoch,
            "loss": float(loss.detach()), "tau": float(self.model.tau.detach()),
            **components,
        }
        raise NumericalAbort(f"non-finite loss at layer {layer}", snapshot)

    # ------------------------------------------------------------------
    # schedule
    # ------------------------------------------------------------------

    def run_layer(self, layer: int) -> None:
        self.model.freeze_codebook_below(layer - 1)
        if self.config.two_stage:
            self.init_layer(layer)
            self.cotrain_phase(layer, lambda_overrides={"ce": 0.0, "hc": 0.0})
        else:
            self.align_phase(layer)
            self.init_layer(layer)
            self.cotrain_phase(layer)
        self.completed_layers = layer
        self.last_phase = PHASE_DONE

    def _retriever_only_stage(self) -> None:
        """Second stage of the decoupled-training ablation: CE/HC with the
        tokenizer and codebooks frozen."""
        cfg = self.config
        for p in self.model.parameters():
            p.requires_grad_(False)
        for p in self.model.retriever.parameters():
            p.requires_grad_(True)
        self.model.tau.requires_grad_(True)
        z_corpus = self.corpus_latents().cpu().numpy()
        flat = z_corpus.reshape(-1, cfg.d_z)
        codes, _, _, _ = select_codes(flat, self.model.codebook.layer_arrays(), cfg.m_layers)
        codes_corpus = torch.as_tensor(
            codes.reshape(len(self.videos), cfg.n_views, cfg.m_layers), dtype=torch.int64
        )
        z_corpus_t = torch.as_tensor(z_corpus)
        for layer in range(1, cfg.m_layers + 1):
            for epoch in range(cfg.train_epochs):
                rng = seeding.rng_for(cfg.seed, seeding.SHUFFLE, cfg.m_layers + layer,
                                      PHASE_COTRAIN, epoch)
                for batch in self._batches(rng):
                    qf = self.q_feats[batch]
                    vrow = torch.as_tensor(self.pair_video_row[batch])
                    view = torch.as_tensor(self.pair_view[batch])
                    codes_paired = codes_corpus[vrow, view, :layer]
                    l = ce_loss(self.model.retriever, self.model.codebook, self.model.tau,
                                qf, codes_paired, layer - 1)
                    if layer > 1 and cfg.use_hc:
                        z_paired = z_corpus_t[vrow, view]
                        l = l + cfg.lambda_hc * hc_loss(
                            self.model.retriever, self.model.codebook, self.model.tau,
                            qf, z_paired, codes_paired, layer - 1,
                        )
                    self._abort_if_nonfinite(l, layer, PHASE_COTRAIN, epoch)
                    self._step(l)
        for p in self.model.parameters():
            p.requires_grad_(True)

    def run(self, checkpoint_path=None) -> "Trainer":
        torch.set_num_threads(1)  # fixed reduction order -> reproducible runs
        for layer in range(self.completed_layers + 1, self.config.m_layers + 1):
            self.run_layer(layer)
            if checkpoint_path is not None:
                self.save(checkpoint_path)
        if self.config.two_stage:
            self._retriever_only_stage()
            if checkpoint_path is not None:
                self.save(checkpoint_path)
        return self

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def checkpoint_config(self) -> dict:
        return {**self.extra_config, "train": self.config.to_dict(), "d_f": self.d_f}

    def checkpoint_groups(self) -> list[tuple[str, np.ndarray]]:
        groups: list[tuple[str, np.ndarray]] = []
        named = self.model.parameter_groups()
        for name, p in named:
            groups.append((name, p.detach().cpu().numpy()))
        for name, p in named:
            state = self.optimizer.state.get(p, {})
            exp_avg = state.get("exp_avg")
            exp_avg_sq = state.get("exp_avg_sq")
            step = state.get("step")
            groups.append((
                f"opt.{name}.exp_avg",
                np.zeros(tuple(p.shape)) if exp_avg is None else exp_avg.cpu().numpy(),
            ))
            groups.append((
                f"opt.{name}.exp_avg_sq",
                np.zeros(tuple(p.shape)) if exp_avg_sq is None else exp_avg_sq.cpu().numpy(),
            ))
            groups.append((
                f"opt.{name}.step",
                np.array([0.0 if step is None else float(step)]),
            ))
        groups.append(("progress.layer", np.array([float(self.completed_layers)])))
        groups.append(("progress.phase", np.array([float(self.last_phase)])))
        groups.append(("progress.epoch", np.array([float(self.last_epoch)])))
        return groups

    def save(self, path) -> None:
        write_checkpoint(path, self.checkpoint_config(), self.checkpoint_groups())

    def load_groups(self, groups: dict[str, np.ndarray]) -> None:
        named = self.model.parameter_groups()
        with torch.no_grad():
            for name, p in named:
                p.copy_(torch.as_tensor(groups[name], dtype=DTYPE).reshape(p.shape))
        for name, p in named:
            step = float(groups[f"opt.{name}.step"][0])
            if step == 0.0:
                continue
            self.optimizer.state[p] = {
                "step": torch.tensor(step, dtype=torch.float32),
                "exp_avg": torch.as_tensor(
                    groups[f"opt.{name}.exp_avg"], dtype=DTYPE
                ).reshape(p.shape).clone(),
                "exp_avg_sq": torch.as_tensor(
                    groups[f"opt.{name}.exp_avg_sq"], dtype=DTYPE
                ).reshape(p.shape).clone(),
            }
        self.completed_layers = int(groups["progress.layer"][0])
        self.last_phase = int(groups["progress.phase"][0])
        self.last_epoch = int(groups["progress.epoch"][0])


def train(
    config: TrainConfig,
    videos: FeatureStore,
    queries: FeatureStore,
    checkpoint_path=None,
) -> Trainer:
    """Run the full progressive schedule; returns the Trainer as final state."""
    return Trainer(config, videos, queries).run(checkpoint_path)


def resume(checkpoint_path, videos: FeatureStore, queries: FeatureStore) -> Trainer:
    """Rebuild a Trainer from a checkpoint and continue from the recorded layer."""
    config_dict, groups = read_checkpoint(checkpoint_path)
    config = TrainConfig.from_dict(config_dict["train"])
    trainer = Trainer(config, videos, queries)
    trainer.extra_config = {
        k: v for k, v in config_dict.items() if k not in ("train", "d_f")
    }
    trainer.load_groups(groups)
    return trainer.run(checkpoint_path)


def load_model(checkpoint_path) -> tuple[GenRetModel, TrainConfig]:
    """Inference-side load: rebuild the model and overwrite all parameters."""
    config_dict, groups = read_checkpoint(checkpoint_path)
    config = TrainConfig.from_dict(config_dict["train"])
    model = GenRetModel(
        d_f=int(config_dict["d_f"]),
        n_views=config.n_views,
        m_layers=config.m_layers,
        k=config.codebook_size,
        d_z=config.d_z,
        hidden=config.hidden,
        tau_init=config.tau_init,
        seed=config.seed,
    )
    with torch.no_grad():
        for name, p in model.parameter_groups():
            p.copy_(torch.as_tensor(groups[name], dtype=DTYPE).reshape(p.shape))
    model.eval()
    return model, config


def mean_view_similarity(model: GenRetModel, videos: FeatureStore) -> float:
    """Mean pairwise cosine among each video's quantized view latents.

    Lower means the views have specialized; used as a diversity diagnostic.
    """
    if model.n_views < 2:
        raise ValueError("needs at least two views")
    with torch.no_grad():
        z = encode_views(
            torch.as_tensor(videos.features, dtype=DTYPE), model.encoders
        ).cpu().numpy()
    flat = z.reshape(-1, model.d_z)
    _, _, z_hat, _ = select_codes(flat, model.codebook.layer_arrays())
    z_hat = z_hat.reshape(z.shape)
    norms = np.maximum(np.linalg.norm(z_hat, axis=-1, keepdims=True), 1e-30)
    unit = z_hat / norms
    gram = np.einsum("nvd,nwd->nvw", unit, unit)
    v = model.n_views
    iu = np.triu_indices(v, k=1)
    return float(gram[:, iu[0], iu[1]].mean())
