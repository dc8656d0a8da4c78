"""Online retrieval: trie-constrained beam search, order-preserving dedup, rerank.

The recall stage does exactly M x B decode steps regardless of corpus
size; only the trie lookups and the rerank over the (small) candidate
pool touch corpus data. Per-query latency is measured batch-1 with a
monotonic clock.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .retriever import decode_step, log_code_probs
from .tokenizer import DTYPE, SemanticId, tokenize_corpus
from .trie import TrieIndex, build_trie


@dataclass
class RetrievalResult:
    query_id: int | None
    video_ids: list[int]
    scores: list[float]
    provenance: list[dict]
    candidate_count: int
    t_recall_ms: float
    t_rerank_ms: float

    @property
    def t_latency_ms(self) -> float:
        return self.t_recall_ms + self.t_rerank_ms

    def to_json_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "video_ids": self.video_ids,
            "scores": self.scores,
            "candidate_count": self.candidate_count,
            "t_recall_ms": self.t_recall_ms,
            "t_rerank_ms": self.t_rerank_ms,
            "t_latency_ms": self.t_latency_ms,
        }


class RetrievalEngine:
    """Immutable bundle of trained model, trie and rerank store."""

    def __init__(self, model, trie: TrieIndex, videos):
        if videos.dimension != model.d_f:
            raise ValueError("video store dimension does not match the model")
        self.model = model
        self.trie = trie
        self.videos = videos
        feats = videos.features.astype(np.float64)
        norms = np.maximum(np.linalg.norm(feats, axis=1), 1e-30)
        self._unit_videos = feats / norms[:, None]

    @property
    def m_layers(self) -> int:
        return self.trie.m_layers


def build_engine(model, videos, batch_size: int = 1024) -> RetrievalEngine:
    """Offline indexing: tokenize the corpus and build the prefix trie."""
    id_sets = tokenize_corpus(videos, model, batch_size=batch_size)
    trie = build_trie(id_sets, model.m_layers, model.k)
    return RetrievalEngine(model, trie, videos)


def beam_search(
    query_feature, model, trie: TrieIndex, beam_size: int
) -> list[tuple[SemanticId, float]]:
    """Constrained beam search of exactly M steps.

    Codes outside the trie are masked to -inf before top-B selection;
    ties break lexicographically on the code sequence. Returns at most
    beam_size complete IDs sorted by descending log-probability.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if not trie.root.children:
        raise ValueError("cannot search an empty trie")
    qf = torch.as_tensor(np.asarray(query_feature, dtype=np.float64), dtype=DTYPE)
    if qf.dim() == 1:
        qf = qf.unsqueeze(0)

    prefixes = np.zeros((1, 0), dtype=np.int64)
    scores = np.zeros(1, dtype=np.float64)
    nodes = [trie.root]
    k = model.k
    with torch.no_grad():
        for step in range(trie.m_layers):
            n_hyp = len(nodes)
            prefix_t = torch.as_tensor(prefixes) if step > 0 else None
            h = decode_step(
                model.retriever, model.codebook, qf.expand(n_hyp, -1), prefix_t
            )
            step_logp = (
                log_code_probs(h, model.codebook.layers[step], model.tau).cpu().numpy()
            )
            allowed = np.zeros((n_hyp, k), dtype=bool)
            for i, node in enumerate(nodes):
                for code in node.children:
                    allowed[i, code] = True
            cand = np.where(allowed, scores[:, None] + step_logp, -np.inf)
            flat = cand.reshape(-1)
            valid = np.flatnonzero(np.isfinite(flat))
            hyp_idx, code_idx = np.divmod(valid, k)
            # primary key descending score; ties by lexicographic code
            # sequence = (parent rank, code) since parents stay lex-sorted
            order = np.lexsort((code_idx, hyp_idx, -flat[valid]))
            keep = order[:beam_size]
            # restore lexicographic hypothesis order for the next step
            keep = keep[np.lexsort((code_idx[keep], hyp_idx[keep]))]
            sel_hyp = hyp_idx[keep]
            sel_code = code_idx[keep]
            prefixes = np.concatenate(
                [prefixes[sel_hyp], sel_code[:, None]], axis=1
            )
            scores = flat[valid][keep]
            nodes = [nodes[i].children[int(c)] for i, c in zip(sel_hyp, sel_code)]

    final = sorted(
        zip((tuple(int(c) for c in row) for row in prefixes), scores),
        key=lambda item: (-item[1], item[0]),
    )
    return [(codes, float(score)) for codes, score in final]


def dedup_candidates(posting_lists: list[list[tuple[int, int]]]) -> list[int]:
    """Flatten postings in beam order and keep each video's first occurrence."""
    seen: set[int] = set()
    out: list[int] = []
    for postings in posting_lists:
        for video_id, _view in postings:
            if video_id not in seen:
                seen.add(video_id)
                out.append(video_id)
    return out


def rerank(query_feature, candidate_ids, videos, top_k: int) -> list[tuple[int, float]]:
    """Sort candidates by cosine to the query; ties by ascending video id."""
    q = np.asarray(query_feature, dtype=np.float64)
    q = q / max(np.linalg.norm(q), 1e-30)
    rows = []
    for vid in candidate_ids:
        if vid not in videos:
            raise KeyError(f"candidate video {vid} missing from the store")
        rows.append(videos.row(vid))
    feats = videos.features[rows].astype(np.float64)
    norms = np.maximum(np.linalg.norm(feats, axis=1), 1e-30)
    cos = (feats @ q) / norms
    order = sorted(range(len(cos)), key=lambda i: (-cos[i], candidate_ids[i]))
    return [(int(candidate_ids[i]), float(cos[i])) for i in order[:top_k]]


def retrieve(
    query_feature,
    engine: RetrievalEngine,
    beam_size: int,
    top_k: int,
    query_id: int | None = None,
) -> RetrievalResult:
    """Full recall-then-rerank for one query, with per-stage timings."""
    t0 = time.perf_counter()
    beams = beam_search(query_feature, engine.model, engine.trie, beam_size)
    posting_lists = [engine.trie.resolve(codes) for codes, _ in beams]
    candidates = dedup_candidates(posting_lists)
    t1 = time.perf_counter()

    origin: dict[int, tuple[SemanticId, int, float]] = {}
    for (codes, logp), postings in zip(beams, posting_lists):
        for vid, view in postings:
            if vid not in origin:
                origin[vid] = (codes, view, logp)

    ranked = rerank(query_feature, candidates, engine.videos, top_k)
    t2 = time.perf_counter()

    t_recall = (t1 - t0) * 1000.0
    t_rerank = (t2 - t1) * 1000.0
    provenance = []
    for vid, score in ranked:
        codes, view, logp = origin[vid]
        provenance.append(
            {
                "video_id": vid,
                "semantic_id": list(codes),
                "view_id": view,
                "beam_log_prob": logp,
                "rerank_score": score,
            }
        )
    return RetrievalResult(
        query_id=query_id,
        video_ids=[vid for vid, _ in ranked],
        scores=[score for _, score in ranked],
        provenance=provenance,
        candidate_count=len(candidates),
        t_recall_ms=t_recall,
        t_rerank_ms=t_rerank,
    )


def tune_beam_size(
    engine: RetrievalEngine,
    query_features,
    target_low: int = 100,
    target_high: int = 150,
    max_beam: int = 2048,
) -> tuple[int, float]:
    """Find a beam size whose mean deduped pool size lands in the target band.

    Doubles the beam until the pool mean reaches the band (or the
    corpus/beam ceiling), then bisects. Returns (beam_size, mean_pool).
    """

    def mean_pool(b: int) -> float:
        sizes = []
        for q in query_features:
            beams = beam_search(q, engine.model, engine.trie, b)
            pool = dedup_candidates([engine.trie.resolve(c) for c, _ in beams])
            sizes.append(len(pool))
        return float(np.mean(sizes))

    lo, hi = 1, None
    b = 8
    while b <= max_beam:
        m = mean_pool(b)
        if m >= target_low:
            hi = b
            break
        lo = b
        b *= 2
    if hi is None:
        return max_beam, mean_pool(max_beam)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        m = mean_pool(mid)
        if m >= target_low:
            hi = mid
        else:
            lo = mid
    return hi, mean_pool(hi)
