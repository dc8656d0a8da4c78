"""Command-line entry point: gen-data / train / index / search / eval / bench.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numerical abort.
All JSON outputs embed the resolved config hash for provenance.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointFormatError, canonical_json, read_checkpoint
from .cotrain import NumericalAbort, TrainConfig, Trainer, load_model, resume
from .evalbench import format_report_table, merge_video_stores, run_eval, scaling_bench
from .features import StoreFormatError, load_store, normalize, save_store
from .search import RetrievalEngine, build_engine, retrieve
from .synthgen import SynthConfig, generate, split, write_diagnostics
from .tokenizer import dump_semantic_ids, tokenize_corpus
from .trie import TrieFormatError, TrieIndex, build_trie, storage_report


class ConfigError(Exception):
    pass


_SEARCH_DEFAULTS = {"beam_size": 100, "top_k": 10}
_EVAL_DEFAULTS = {"setting": "inductive", "ks": [1, 5, 10], "frame_count": 12}
_BENCH_DEFAULTS = {
    "sizes": [1000, 5000, 10000, 50000],
    "queries_per_size": 50,
    "beam_size": 32,
    "repeats": 3,
    "top_k": 10,
}


def _merge_section(name: str, raw: dict, defaults: dict) -> dict:
    unknown = set(raw) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {name} config keys: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(raw)
    return merged


def load_config(path) -> tuple[dict, str]:
    """Parse and fully resolve an engine config; returns (config, hash)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    known = {"synth", "train", "search", "eval", "bench"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown top-level keys: {sorted(unknown)}")
    try:
        synth = SynthConfig.from_dict(raw.get("synth", {}))
        train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    resolved = {
        "synth": synth.to_dict(),
        "train": train_cfg.to_dict(),
        "search": _merge_section("search", raw.get("search", {}), _SEARCH_DEFAULTS),
        "eval": _merge_section("eval", raw.get("eval", {}), _EVAL_DEFAULTS),
        "bench": _merge_section("bench", raw.get("bench", {}), _BENCH_DEFAULTS),
    }
    digest = hashlib.sha256(canonical_json(resolved).encode("utf-8")).hexdigest()
    return resolved, digest


def _load_normalized(path, kind: str):
    return normalize(load_store(path, kind), replace_degenerate=True)


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"required input missing: {p}")
    return p


def _checkpoint_hash(path) -> str:
    config, _ = read_checkpoint(path)
    if "config_hash" in config:
        return config["config_hash"]
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    config, digest = load_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    synth = SynthConfig.from_dict(config["synth"])
    corpus = generate(synth)
    train_v, train_q, test_v, test_q = split(corpus, synth.split_fraction, synth.seed)
    save_store(corpus.videos, out / "corpus_videos.feat")
    save_store(corpus.queries, out / "corpus_queries.feat")
    save_store(train_v, out / "train_videos.feat")
    save_store(train_q, out / "train_queries.feat")
    save_store(test_v, out / "test_videos.feat")
    save_store(test_q, out / "test_queries.feat")
    write_diagnostics(corpus, out / "diagnostics.jsonl", config_hash=digest)
    print(
        f"wrote {len(corpus.videos)} videos / {len(corpus.queries)} queries "
        f"(train {len(train_v)}/{len(train_q)}, test {len(test_v)}/{len(test_q)}) "
        f"to {out} [config {digest[:12]}]"
    )
    return 0


def cmd_train(args) -> int:
    config, digest = load_config(args.config)
    data_dir = Path(args.data_dir)
    videos = _load_normalized(_require(data_dir / "train_videos.feat"), "video")
    queries = _load_normalized(_require(data_dir / "train_queries.feat"), "query")
    train_cfg = TrainConfig.from_dict(config["train"])
    if args.resume and Path(args.out).exists():
        trainer = resume(args.out, videos, queries)
    else:
        trainer = Trainer(train_cfg, videos, queries)
        trainer.extra_config = {"config_hash": digest}
        trainer.run(args.out)
    print(
        f"trained {trainer.completed_layers}/{train_cfg.m_layers} layers "
        f"-> {args.out} [config {digest[:12]}]"
    )
    return 0


def cmd_index(args) -> int:
    model, _ = load_model(_require(args.checkpoint))
    videos = _load_normalized(_require(args.videos), "video")
    id_sets = tokenize_corpus(videos, model)
    trie = build_trie(id_sets, model.m_layers, model.k)
    trie.save(args.out)
    if args.dump_ids:
        dump_semantic_ids(id_sets, args.dump_ids)
    report = storage_report(trie, videos.dimension, args.frame_count)
    print(
        f"indexed {trie.video_count} videos, {report['distinct_ids']} distinct IDs, "
        f"{report['index_file_bytes']} bytes "
        f"(dense/payload ratio {report['video_payload_ratio']})"
    )
    return 0


def cmd_search(args) -> int:
    model, _ = load_model(_require(args.checkpoint))
    trie = TrieIndex.load(_require(args.index))
    videos = _load_normalized(_require(args.videos), "video")
    queries = _load_normalized(_require(args.queries), "query")
    engine = RetrievalEngine(model, trie, videos)
    digest = _checkpoint_hash(args.checkpoint)
    with open(args.out, "w", encoding="utf-8") as fh:
        for i in range(len(queries)):
            result = retrieve(
                queries.features[i],
                engine,
                beam_size=args.beam_size,
                top_k=args.top_k,
                query_id=int(queries.ids[i]),
            )
            line = result.to_json_dict()
            line["config_hash"] = digest
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    print(f"searched {len(queries)} queries -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    config, digest = load_config(args.config)
    eval_cfg = dict(config["eval"])
    if args.setting:
        eval_cfg["setting"] = args.setting
    model, _ = load_model(_require(args.checkpoint))
    data_dir = Path(args.data_dir)
    test_v = _load_normalized(_require(data_dir / "test_videos.feat"), "video")
    queries = _load_normalized(_require(data_dir / "test_queries.feat"), "query")
    if eval_cfg["setting"] == "full_corpus":
        train_v = _load_normalized(_require(data_dir / "train_videos.feat"), "video")
        pool = merge_video_stores(train_v, test_v)
    else:
        pool = test_v
    engine = build_engine(model, pool)
    report = run_eval(
        engine,
        queries,
        setting=eval_cfg["setting"],
        beam_size=args.beam_size or config["search"]["beam_size"],
        ks=tuple(eval_cfg["ks"]),
        frame_count_assumption=eval_cfg["frame_count"],
        max_queries=args.max_queries,
    )
    report["config_hash"] = digest
    Path(args.out).write_text(canonical_json(report) + "\n", encoding="utf-8")
    print(format_report_table(report))
    print(f"report -> {args.out} [config {digest[:12]}]")
    return 0


def cmd_bench(args) -> int:
    config, digest = load_config(args.config)
    bench_cfg = dict(config["bench"])
    if args.sizes:
        bench_cfg["sizes"] = [int(s) for s in args.sizes.split(",")]
    model, _ = load_model(_require(args.checkpoint))
    base_synth = SynthConfig.from_dict(config["synth"])

    def factory(n: int):
        synth = SynthConfig.from_dict(
            {
                **base_synth.to_dict(),
                "n_videos": int(n),
                "seed": base_synth.seed + int(n),
            }
        )
        if synth.d_f != model.d_f:
            raise ConfigError(
                f"bench synth d_f {synth.d_f} != model d_f {model.d_f}"
            )
        corpus = generate(synth)
        engine = build_engine(model, corpus.videos)
        need = bench_cfg["queries_per_size"]
        step = max(1, len(corpus.queries) // need)
        return engine, corpus.queries.features[::step][:need]

    result = scaling_bench(
        bench_cfg["sizes"],
        factory,
        beam_size=bench_cfg["beam_size"],
        queries_per_size=bench_cfg["queries_per_size"],
        top_k=bench_cfg["top_k"],
        repeats=bench_cfg["repeats"],
    )
    result["config_hash"] = digest
    Path(args.out).write_text(canonical_json(result) + "\n", encoding="utf-8")
    if args.emit_csv:
        with open(args.emit_csv, "w", encoding="utf-8") as fh:
            fh.write(f"# config_hash={digest}\n")
            fh.write("n,t_recall_ms,t_dense_ms\n")
            for row in result["rows"]:
                fh.write(f"{row['n']},{row['t_recall_ms']:.6f},{row['t_dense_ms']:.6f}\n")
    for row in result["rows"]:
        print(
            f"N={row['n']:>7}  recall {row['t_recall_ms']:8.3f} ms   "
            f"dense {row['t_dense_ms']:8.3f} ms"
        )
    fit = result["dense_fit"]
    print(f"dense fit: slope {fit['slope_ms_per_item']:.3e} ms/item, R^2 {fit['r_squared']:.4f}")
    return 0


# ----------------------------------------------------------------------
# argument plumbing
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genret",
        description="Generative recall + dense rerank retrieval engine.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus with train/test split")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run progressive co-training")
    p.add_argument("--config", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint at --out if present")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="tokenize a corpus and build the trie index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--videos", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-ids", default=None, help="also write the semantic-ID text dump")
    p.add_argument("--frame-count", type=int, default=12,
                   help="frames per video assumed for the dense frame-level comparison")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="retrieve for a query file, one JSON line per query")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--videos", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam-size", type=int, default=100)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--measure-latency", action="store_true",
                   help="force sequential batch-1 execution (the default mode)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="recall/latency/storage report for one pool setting")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--setting", choices=["inductive", "full_corpus"], default=None)
    p.add_argument("--beam-size", type=int, default=None)
    p.add_argument("--max-queries", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="corpus-size scaling benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sizes", default=None, help="comma-separated corpus sizes")
    p.add_argument("--out", required=True)
    p.add_argument("--emit-csv", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        print(json.dumps(exc.snapshot, sort_keys=True), file=sys.stderr)
        return 4
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except (StoreFormatError, TrieFormatError, CheckpointFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
