import hashlib

import numpy as np
import pytest
import torch

from genret.checkpoint import read_checkpoint
from genret.cotrain import (
    NumericalAbort,
    TrainConfig,
    Trainer,
    cluster_queries,
    init_codebook_layer,
    load_model,
    mean_view_similarity,
    resume,
    train,
)
from genret.features import FeatureStore
from genret.kmeans import kmeans, quantization_error
from genret.retriever import code_probs, decode_step
from genret.seeding import rng_for
from genret.synthgen import SynthConfig, generate, split
from genret.tokenizer import DTYPE, encode_views, select_codes


def tiny_config(**overrides):
    base = dict(
        n_views=2,
        m_layers=2,
        codebook_size=8,
        d_z=8,
        hidden=16,
        batch_size=64,
        learning_rate=3e-3,
        align_epochs=1,
        later_align_epochs=1,
        train_epochs=2,
        seed=5,
    )
    base.update(overrides)
    return TrainConfig(**base)


def tiny_data(seed=9, n_videos=24, d_f=16):
    corpus = generate(
        SynthConfig(
            n_videos=n_videos,
            facets_per_video=2,
            d_f=d_f,
            facet_noise=0.05,
            queries_per_facet=3,
            min_angle_deg=60.0,
            seed=seed,
        )
    )
    return corpus.videos, corpus.queries


def query_store(features, targets=None):
    features = np.asarray(features, dtype=np.float32)
    n = len(features)
    return FeatureStore(
        kind="query",
        dimension=features.shape[1],
        ids=np.arange(1, n + 1, dtype=np.uint64),
        features=features,
        target_video_ids=np.ones(n, dtype=np.uint64)
        if targets is None
        else np.asarray(targets, dtype=np.uint64),
    )


def param_digest(model) -> dict[str, str]:
    return {
        name: hashlib.sha256(p.detach().numpy().tobytes()).hexdigest()
        for name, p in model.parameter_groups()
    }


# ----------------------------------------------------------------------
# cluster_queries
# ----------------------------------------------------------------------

def test_single_cluster_assigns_everything():
    rng = np.random.default_rng(0)
    store = query_store(rng.standard_normal((12, 4)))
    result = cluster_queries(store, n_views=1, seed=0)
    assert set(result.assignment.values()) == {0}
    unit = store.features.astype(np.float64)
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    assert np.allclose(result.centroids[0], unit.mean(axis=0), atol=1e-9)


def test_two_separated_blobs_recovered():
    rng = np.random.default_rng(1)
    a = np.array([10.0, 0.0, 0.0]) + 0.01 * rng.standard_normal((20, 3))
    b = np.array([0.0, 10.0, 0.0]) + 0.01 * rng.standard_normal((20, 3))
    store = query_store(np.concatenate([a, b]))
    result = cluster_queries(store, n_views=2, seed=0)
    labels = np.array([result.assignment[int(q)] for q in store.ids])
    first, second = labels[:20], labels[20:]
    assert len(set(first)) == 1 and len(set(second)) == 1
    assert first[0] != second[0]


def test_cluster_assignment_deterministic():
    rng = np.random.default_rng(2)
    store = query_store(rng.standard_normal((30, 6)))
    a = cluster_queries(store, n_views=3, seed=7)
    b = cluster_queries(store, n_views=3, seed=7)
    assert a.assignment == b.assignment
    assert np.array_equal(a.centroids, b.centroids)


def test_cluster_needs_enough_queries():
    store = query_store(np.ones((2, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        cluster_queries(store, n_views=3, seed=0)


# ----------------------------------------------------------------------
# init_codebook_layer
# ----------------------------------------------------------------------

def test_init_single_centroid_is_mean():
    rng = np.random.default_rng(3)
    residuals = rng.standard_normal((40, 5))
    layer = init_codebook_layer(residuals, k=1, rng=rng_for(0, 9))
    assert np.allclose(layer[0], residuals.mean(axis=0), atol=1e-9)


def test_init_recovers_duplicated_points():
    points = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    residuals = np.repeat(points, 5, axis=0)
    layer = init_codebook_layer(residuals, k=3, rng=rng_for(1, 9))
    found = {tuple(np.round(row, 9)) for row in layer}
    assert found == {tuple(row) for row in points}


def test_init_beats_random_entries():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        residuals = rng.standard_normal((200, 6))
        layer = init_codebook_layer(residuals, k=8, rng=rng_for(seed, 9))
        random_rows = residuals[rng.choice(200, size=8, replace=False)]
        assert quantization_error(residuals, layer) <= quantization_error(
            residuals, random_rows
        )


def test_init_pads_small_collections(caplog):
    rng = np.random.default_rng(4)
    layer = init_codebook_layer(rng.standard_normal((3, 4)), k=8, rng=rng_for(2, 9))
    assert layer.shape == (8, 4)


def test_init_rejects_empty():
    with pytest.raises(ValueError):
        init_codebook_layer(np.empty((0, 4)), k=2, rng=rng_for(3, 9))


def test_kmeans_requires_enough_points():
    with pytest.raises(ValueError):
        kmeans(np.ones((2, 3)), k=5, rng=rng_for(4, 9))


def test_kmeans_reseeds_empty_clusters():
    # two point clouds but three clusters: one starts empty and must be
    # re-seeded from the farthest point instead of persisting empty
    points = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]])
    centroids, labels = kmeans(points, k=3, rng=rng_for(5, 9))
    assert np.all(np.isfinite(centroids))
    assert set(labels) <= {0, 1, 2}
    d2 = ((points[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    assert np.array_equal(labels, d2.argmin(axis=1))


# ----------------------------------------------------------------------
# phases
# ----------------------------------------------------------------------

def test_align_with_zero_epochs_changes_nothing():
    videos, queries = tiny_data()
    trainer = Trainer(tiny_config(align_epochs=0), videos, queries)
    before = param_digest(trainer.model)
    trainer.align_phase(1)
    assert param_digest(trainer.model) == before


def test_align_improves_pair_cosine():
    videos, queries = tiny_data(n_videos=40)
    trainer = Trainer(tiny_config(align_epochs=3, learning_rate=5e-3), videos, queries)
    before = trainer.mean_pair_cosine()
    trainer.align_phase(1)
    assert trainer.mean_pair_cosine() > before


def test_frozen_layers_bitwise_unchanged():
    videos, queries = tiny_data()
    trainer = Trainer(tiny_config(), videos, queries)
    trainer.run_layer(1)
    layer0 = trainer.model.codebook.layers[0].detach().numpy().tobytes()
    trainer.run_layer(2)
    assert trainer.model.codebook.layers[0].detach().numpy().tobytes() == layer0


def test_decoupled_cotraining_leaves_retriever_at_chance():
    videos, queries = tiny_data(n_videos=30)
    cfg = tiny_config(m_layers=1, lambda_ce=0.0, lambda_hc=0.0, align_epochs=0,
                      train_epochs=3, codebook_size=8)
    trainer = train(cfg, videos, queries)
    q = trainer.q_feats
    with torch.no_grad():
        h = decode_step(trainer.model.retriever, trainer.model.codebook, q)
        probs = code_probs(h, trainer.model.codebook.layers[0], trainer.model.tau)
        predicted = probs.argmax(dim=1).numpy()
    z_all = trainer.corpus_latents().numpy()
    z = z_all[trainer.pair_video_row, trainer.pair_view]
    targets, _, _, _ = select_codes(z, trainer.model.codebook.layer_arrays(), 1)
    acc = float((predicted == targets[:, 0]).mean())
    n = len(queries)
    assert abs(acc - 1 / 8) <= 3 / np.sqrt(n)


def test_total_loss_decreases(small_trained):
    cotrain_l1 = [
        h for h in small_trained.history
        if h["phase"] == "cotrain" and h["layer"] == 1
    ]
    assert cotrain_l1[-1]["loss"] < cotrain_l1[0]["loss"]


def test_hc_contributes_zero_at_first_layer(small_trained):
    for record in small_trained.history:
        if record["phase"] == "cotrain" and record["layer"] == 1:
            assert record["hc"] == 0.0


def test_single_layer_schedule_has_no_hc():
    videos, queries = tiny_data()
    trainer = train(tiny_config(m_layers=1), videos, queries)
    assert trainer.completed_layers == 1
    assert all(h.get("hc", 0.0) == 0.0 for h in trainer.history)


def test_reference_schedule_epoch_counts():
    videos, queries = tiny_data(n_videos=16)
    cfg = tiny_config(align_epochs=3, later_align_epochs=1, train_epochs=4)
    trainer = train(cfg, videos, queries)

    def count(layer, phase):
        return sum(
            1 for h in trainer.history if h["layer"] == layer and h["phase"] == phase
        )

    assert count(1, "align") == 3
    assert count(1, "cotrain") == 4
    assert count(2, "align") == 1
    assert count(2, "cotrain") == 4


def test_same_seed_identical_checkpoints(tmp_path):
    videos, queries = tiny_data()
    cfg = tiny_config()
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    train(cfg, videos, queries).save(a)
    train(cfg, videos, queries).save(b)
    assert a.read_bytes() == b.read_bytes()


# ----------------------------------------------------------------------
# shared-codebook gradient flow
# ----------------------------------------------------------------------

def _one_cotrain_epoch(overrides):
    # no align phase first: the optimizer starts with zero moments, so any
    # parameter movement is attributable to the losses left enabled
    videos, queries = tiny_data()
    trainer = Trainer(tiny_config(train_epochs=1), videos, queries)
    trainer.init_layer(1)
    before = param_digest(trainer.model)
    trainer.cotrain_phase(1, lambda_overrides=overrides)
    return before, param_digest(trainer.model), trainer


def test_ce_alone_moves_codebook():
    before, after, _ = _one_cotrain_epoch({"rq": 0.0, "rec": 0.0, "hc": 0.0})
    assert after["codebook.layers.0"] != before["codebook.layers.0"]


def test_rq_alone_moves_codebook():
    before, after, _ = _one_cotrain_epoch({"ce": 0.0, "rec": 0.0, "hc": 0.0})
    assert after["codebook.layers.0"] != before["codebook.layers.0"]


def test_all_zero_weights_change_nothing():
    before, after, _ = _one_cotrain_epoch(
        {"ce": 0.0, "rq": 0.0, "rec": 0.0, "hc": 0.0}
    )
    assert after == before


# ----------------------------------------------------------------------
# view specialization and hierarchical-consistency retention
# ----------------------------------------------------------------------

def test_views_specialize_majority_of_seeds():
    # needs query-guided alignment at realistic scale; tiny corpora let the
    # quantization pull views toward shared codewords instead
    wins = 0
    for seed in range(10):
        corpus = generate(
            SynthConfig(
                n_videos=200, facets_per_video=4, d_f=64, facet_noise=0.05,
                queries_per_facet=4, min_angle_deg=75.0, seed=500 + seed,
            )
        )
        tv, tq, _, _ = split(corpus, 0.5, 500 + seed)
        cfg = TrainConfig(
            n_views=4, m_layers=2, codebook_size=32, d_z=32, hidden=64,
            batch_size=256, learning_rate=3e-3, seed=seed,
            align_epochs=3, later_align_epochs=1, train_epochs=4,
        )
        trainer = Trainer(cfg, tv, tq)
        trainer.init_layer(1)
        before = mean_view_similarity(trainer.model, trainer.videos)
        trainer = Trainer(cfg, tv, tq)
        trainer.run(None)
        after = mean_view_similarity(trainer.model, trainer.videos)
        wins += after < before
    assert wins > 5


def _layer1_greedy_accuracy(trainer, videos, queries):
    q = torch.as_tensor(queries.features, dtype=DTYPE)
    with torch.no_grad():
        h = decode_step(trainer.model.retriever, trainer.model.codebook, q)
        predicted = (
            code_probs(h, trainer.model.codebook.layers[0], trainer.model.tau)
            .argmax(dim=1)
            .numpy()
        )
        z_all = encode_views(
            torch.as_tensor(videos.features, dtype=DTYPE), trainer.model.encoders
        ).numpy()
    rows = np.array([videos.row(int(t)) for t in queries.target_video_ids])
    views = np.array([trainer.cluster.assignment[int(i)] for i in queries.ids])
    z = z_all[rows, views]
    targets, _, _, _ = select_codes(z, trainer.model.codebook.layer_arrays(), 1)
    return 100.0 * float((predicted == targets[:, 0]).mean())


def test_trained_layer1_accuracy_beats_uniform(small_trained):
    trainer = small_trained
    acc = _layer1_greedy_accuracy(trainer, trainer.videos, trainer.queries)
    assert acc / 100.0 > 1.0 / trainer.config.codebook_size


def test_hc_limits_layer1_drift():
    corpus = generate(
        SynthConfig(
            n_videos=60, facets_per_video=2, d_f=24, facet_noise=0.05,
            queries_per_facet=4, min_angle_deg=60.0, seed=21,
        )
    )
    drops = {}
    for use_hc in (True, False):
        cfg = tiny_config(
            n_views=2, m_layers=2, codebook_size=12, seed=13, use_hc=use_hc,
            align_epochs=2, train_epochs=3, learning_rate=5e-3,
        )
        trainer = Trainer(cfg, corpus.videos, corpus.queries)
        trainer.run_layer(1)
        acc_before = _layer1_greedy_accuracy(trainer, trainer.videos, trainer.queries)
        trainer.run_layer(2)
        acc_after = _layer1_greedy_accuracy(trainer, trainer.videos, trainer.queries)
        drops[use_hc] = acc_before - acc_after
    assert drops[True] < 2.0
    assert drops[False] >= drops[True]


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    videos, queries = tiny_data()
    trainer = train(tiny_config(), videos, queries)
    path = tmp_path / "state.ckpt"
    trainer.save(path)
    config, groups = read_checkpoint(path)
    assert config["train"]["m_layers"] == 2
    assert config["d_f"] == videos.dimension
    assert int(groups["progress.layer"][0]) == 2
    model, cfg = load_model(path)
    expected = trainer.model.codebook.layers[0].detach().numpy().astype(np.float32)
    assert np.array_equal(
        model.codebook.layers[0].detach().numpy().astype(np.float32), expected
    )


def test_resume_completes_remaining_layers(tmp_path):
    videos, queries = tiny_data()
    cfg = tiny_config()
    partial = Trainer(cfg, videos, queries)
    partial.run_layer(1)
    path = tmp_path / "partial.ckpt"
    partial.save(path)
    finished = resume(path, videos, queries)
    assert finished.completed_layers == cfg.m_layers


def test_optimizer_state_round_trip(tmp_path):
    videos, queries = tiny_data()
    trainer = train(tiny_config(m_layers=1), videos, queries)
    path = tmp_path / "s.ckpt"
    trainer.save(path)
    fresh = Trainer(trainer.config, videos, queries)
    _, groups = read_checkpoint(path)
    fresh.load_groups(groups)
    name, p = fresh.model.parameter_groups()[0]
    state = fresh.optimizer.state[p]
    assert float(state["step"]) > 0
    assert state["exp_avg"].shape == p.shape


def test_nan_loss_aborts_with_snapshot():
    videos, queries = tiny_data()
    trainer = Trainer(tiny_config(), videos, queries)
    trainer.align_phase(1)
    trainer.init_layer(1)
    bad = np.full((trainer.config.codebook_size, trainer.config.d_z), np.nan)
    trainer.model.codebook.set_layer(0, bad)
    with pytest.raises(NumericalAbort) as excinfo:
        trainer.cotrain_phase(1)
    assert excinfo.value.snapshot["layer"] == 1


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"n_views": 2, "mystery": 1})


def test_config_validates_ranges():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"m_layers": 0})
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": -1.0})
