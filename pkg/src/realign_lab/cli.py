"""Command-line entry point: realign-lab {synth-corpus|synth-supervision|train|eval|diagnose|report}.

One JSON config file drives a run; command-line flags override config
values. Exit codes: 0 ok, 2 config/usage error, 3 I/O or data error,
4 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

from . import diagnostics as diag
from . import encoder as enc
from . import evalsuite, oracle, trainer
from .corpus import (
    CorpusManifest,
    QueryRecord,
    RecordParseError,
    SyntheticDocument,
    TripletRecord,
    generate_corpus,
    read_manifest,
    read_records,
    split_queries,
    write_manifest,
    write_records,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class ConfigError(Exception):
    pass


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "threads": 1,
    "paths": {"out_dir": "runs/out"},
    "corpus": {
        k: v for k, v in CorpusManifest().to_json_dict().items() if k != "seed"
    },
    "oracle": {
        "backend": "synthetic",
        "description_noise_rate": 0.0,
        "whole_page_budget": 32,
        "endpoint": {
            "base_url": "http://localhost:8000",
            "model": "local-vlm",
            "timeout_s": 30.0,
            "max_retries": 2,
            "max_parallel_requests": 1,
            "chat_path": "/v1/chat/completions",
            "image_mode": "path",
            "backoff_s": 0.5,
            "image_dir": "",
        },
    },
    "train": {
        k: v for k, v in trainer.TrainConfig().to_json_dict().items() if k != "seed"
    },
    "eval": {"k": [5, 10]},
    "diagnostics": {
        "top_fraction": 0.2,
        "coverage_denominator": "region",
        "heatmap_count": 0,
    },
}


def _merge_config(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path} must be a section")
            out[key] = _merge_config(base[key], value, prefix=f"{path}.")
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: config root must be an object")
    return _merge_config(DEFAULT_CONFIG, raw)


def _manifest_from_config(config: dict) -> CorpusManifest:
    payload = dict(config["corpus"])
    payload["seed"] = config["seed"]
    try:
        return CorpusManifest.from_json_dict(payload)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _train_config(config: dict, lambda_override: float | None = None) -> trainer.TrainConfig:
    payload = dict(config["train"])
    payload["seed"] = config["seed"]
    if lambda_override is not None:
        payload["lambda"] = lambda_override
    try:
        return trainer.TrainConfig.from_json_dict(payload)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---- corpus loading helpers -------------------------------------------------


def _load_corpus_dir(corpus_dir: Path):
    manifest = read_manifest(corpus_dir / "manifest.json")
    documents = read_records(corpus_dir / "documents.jsonl", SyntheticDocument)
    train_queries = read_records(corpus_dir / "queries.jsonl", QueryRecord)
    eval_path = corpus_dir / "queries_eval.jsonl"
    eval_queries = (
        read_records(eval_path, QueryRecord) if eval_path.exists() else []
    )
    return manifest, documents, train_queries, eval_queries


# ---- subcommands ------------------------------------------------------------


def cmd_synth_corpus(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    manifest = _manifest_from_config(config)
    out_dir = Path(args.out or config["paths"]["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    documents, queries = generate_corpus(manifest, threads=args.threads or config["threads"])
    train_queries, eval_queries = split_queries(queries, manifest)
    write_manifest(out_dir / "manifest.json", manifest)
    write_records(out_dir / "documents.jsonl", documents)
    write_records(out_dir / "queries.jsonl", train_queries)
    write_records(out_dir / "queries_eval.jsonl", eval_queries)
    print(
        f"corpus: {len(documents)} documents, {len(train_queries)} train / "
        f"{len(eval_queries)} eval queries -> {out_dir}"
    )
    return EXIT_OK


def _make_backend(name: str, config: dict, manifest: CorpusManifest, documents):
    section = config["oracle"]
    if name == "synthetic":
        return oracle.SyntheticOracle(
            documents,
            noise_rate=section["description_noise_rate"],
            noise_vocab=manifest.background_vocab,
            seed=config["seed"],
        )
    if name == "whole-page":
        return oracle.WholePageOracle(documents, budget=section["whole_page_budget"])
    if name == "external":
        ep = dict(section["endpoint"])
        image_dir = ep.pop("image_dir", "")
        cfg = oracle.EndpointConfig(**ep)
        return oracle.ExternalOracle(
            documents, cfg, vocab_size=manifest.vocab_size, image_dir=image_dir
        )
    raise ConfigError(f"unknown oracle backend: {name}")


def cmd_synth_supervision(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    corpus_dir = Path(args.corpus)
    manifest, documents, train_queries, _ = _load_corpus_dir(corpus_dir)
    backend = _make_backend(args.backend, config, manifest, documents)
    triplets, report = oracle.synthesize_dataset(
        train_queries, documents, backend, seed=config["seed"]
    )
    out_dir = Path(args.out or config["paths"]["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_records(out_dir / "triplets.jsonl", triplets)
    (out_dir / "synthesis_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    described = sum(1 for t in triplets if t.description_tokens is not None)
    print(f"supervision: {described}/{len(triplets)} triplets carry descriptions -> {out_dir}")
    return EXIT_OK


def _parse_lambda_list(raw: str) -> list[float]:
    try:
        values = [float(v) for v in raw.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad --lambda value: {raw!r}") from exc
    if not values:
        raise ConfigError("--lambda got no values")
    return values


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    corpus_dir = Path(args.corpus)
    manifest, documents, train_queries, _ = _load_corpus_dir(corpus_dir)
    triplets = read_records(Path(args.triplets), TripletRecord)

    lambdas: list[float | None]
    if args.lambda_ is not None:
        lambdas = list(_parse_lambda_list(args.lambda_))
    else:
        lambdas = [None]
    if args.objective == "infonce":
        lambdas = [0.0]

    out_dir = Path(args.out or config["paths"]["out_dir"])
    sweep = len(lambdas) > 1
    for lam in lambdas:
        cfg = _train_config(config, lambda_override=lam)
        run_dir = out_dir / (f"lambda_{cfg.lambda_:g}" if sweep else "")
        run_dir.mkdir(parents=True, exist_ok=True)
        resume = trainer.load_checkpoint(args.resume) if args.resume else None
        result = trainer.train(
            documents,
            train_queries,
            triplets,
            cfg,
            vocab_size=manifest.vocab_size,
            resume=resume,
            stop_after_steps=args.stop_after_steps,
        )
        ckpt_path = run_dir / "checkpoint.ckpt"
        trainer.save_checkpoint(ckpt_path, result.checkpoint)
        trainer.write_train_log(run_dir / "train_log.jsonl", result.log_records)
        print(
            f"train[{args.objective}, lambda={cfg.lambda_:g}]: "
            f"{result.checkpoint.step}/{result.total_steps} steps -> {ckpt_path}"
        )
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_config(args.config)
    corpus_dir = Path(args.corpus)
    _, documents, train_queries, eval_queries = _load_corpus_dir(corpus_dir)
    queries = eval_queries or train_queries
    ckpt = trainer.load_checkpoint(Path(args.checkpoint))
    k_values = (
        [int(v) for v in args.k.split(",")] if args.k else config["eval"]["k"]
    )
    report = evalsuite.evaluate_retriever(
        ckpt.params,
        documents,
        queries,
        k_values=k_values,
        checkpoint_hash=trainer.params_digest(ckpt.params),
    )
    out_dir = Path(args.out or config["paths"]["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path, _ = evalsuite.write_metrics(out_dir, report)
    summary = ", ".join(f"{k}={v:.4f}" for k, v in sorted(report.means.items()))
    print(f"eval[{len(queries)} queries]: {summary} -> {json_path}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    config = load_config(args.config)
    corpus_dir = Path(args.corpus)
    _, documents, train_queries, eval_queries = _load_corpus_dir(corpus_dir)
    queries = eval_queries or train_queries
    section = config["diagnostics"]
    top_fraction = args.top_fraction if args.top_fraction is not None else section["top_fraction"]
    out_root = Path(args.out or config["paths"]["out_dir"])
    for ckpt_path in args.checkpoint:
        ckpt = trainer.load_checkpoint(Path(ckpt_path))
        out_dir = out_root / Path(ckpt_path).stem if len(args.checkpoint) > 1 else out_root
        out_dir.mkdir(parents=True, exist_ok=True)
        space = diag.compute_space_stats(ckpt.params, documents, queries)
        attention = diag.compute_attention_report(
            ckpt.params,
            documents,
            queries,
            top_fraction=top_fraction,
            denominator=section["coverage_denominator"],
        )
        diag.write_diagnostics(out_dir / "diagnostics.json", space, attention)
        doc_by_id = {d.doc_id: d for d in documents}
        for query in queries[: section["heatmap_count"]]:
            doc = doc_by_id[query.positive_doc_id]
            out = enc.encode_document(doc, ckpt.params)
            diag.export_heatmap(
                out.attention_weights,
                doc.grid_rows,
                doc.grid_cols,
                out_dir / f"attention_{query.query_id}",
            )
            q_emb, _ = enc.encode_texts([query.token_ids], ckpt.params)
            relevance = diag.patch_relevance(q_emb[0], enc.patch_embeddings(doc, ckpt.params))
            diag.export_heatmap(
                relevance, doc.grid_rows, doc.grid_cols, out_dir / f"relevance_{query.query_id}"
            )
        print(
            f"diagnose[{Path(ckpt_path).name}]: alignment={space.mean_query_positive_distance:.4f} "
            f"uniformity={space.mean_pairwise_doc_distance:.4f} "
            f"coverage={attention.mean_coverage:.4f} iou={attention.mean_iou:.4f} -> {out_dir}"
        )
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    arms = sorted(p for p in run_dir.iterdir() if p.is_dir())
    if not arms:
        raise FileNotFoundError(f"no arm subdirectories under {run_dir}")
    rows = {}
    for arm in arms:
        metrics_path = arm / "metrics.json"
        if not metrics_path.exists():
            raise FileNotFoundError(f"arm {arm.name!r} is missing metrics.json")
        payload = json.loads(metrics_path.read_text(encoding="utf-8"))
        rows[arm.name] = payload["means"]
    baseline = "infonce" if "infonce" in rows else sorted(rows)[0]
    metric_names = sorted(next(iter(rows.values())))

    out_dir = Path(args.out or run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    md_lines = ["| arm | " + " | ".join(metric_names) + " |"]
    md_lines.append("|" + "---|" * (len(metric_names) + 1))
    csv_lines = ["arm," + ",".join(metric_names)]
    for arm_name in sorted(rows):
        vals = rows[arm_name]
        cells = []
        for name in metric_names:
            delta = vals[name] - rows[baseline][name]
            cells.append(f"{vals[name]:.4f} ({delta:+.4f})")
        md_lines.append(f"| {arm_name} | " + " | ".join(cells) + " |")
        csv_lines.append(
            arm_name + "," + ",".join(repr(vals[name]) for name in metric_names)
        )
    (out_dir / "report.md").write_text(
        f"# Run comparison (baseline: {baseline})\n\n" + "\n".join(md_lines) + "\n",
        encoding="utf-8",
    )
    (out_dir / "report.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    print(f"report: {len(rows)} arms, baseline {baseline} -> {out_dir / 'report.md'}")
    return EXIT_OK


# ---- argument parsing -------------------------------------------------------


def _add_common(sub) -> None:
    sub.add_argument("--config", help="JSON run config; flags override config values")
    sub.add_argument("--seed", type=int, help="override config seed")
    sub.add_argument("--threads", type=int, help="internal parallelism (default 1)")
    sub.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="realign-lab",
        description="Synthetic lab for contrastive document retrieval with "
        "region-description ranking alignment",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="generate a synthetic corpus")
    _add_common(p)
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("synth-supervision", help="synthesize training triplets")
    _add_common(p)
    p.add_argument(
        "--backend",
        choices=("synthetic", "whole-page", "external"),
        default="synthetic",
    )
    p.add_argument("--corpus", required=True, help="directory from synth-corpus")
    p.set_defaults(func=cmd_synth_supervision)

    p = sub.add_parser("train", help="train a retriever")
    _add_common(p)
    p.add_argument("--objective", choices=("realign", "infonce", "wopr"), default="realign")
    p.add_argument(
        "--lambda",
        dest="lambda_",
        help="KL weight; a comma list (e.g. 0,0.1,0.2,0.3) trains a sweep",
    )
    p.add_argument("--corpus", required=True)
    p.add_argument("--triplets", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--stop-after-steps", type=int, help="halt after N optimizer steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank the corpus and write metrics")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", help="comma list of cutoffs (default 5,10)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="embedding-space and attention diagnostics")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--top-fraction", type=float)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("report", help="consolidate arm metrics into a comparison")
    _add_common(p)
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except trainer.TrainingDiverged as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        FileNotFoundError,
        RecordParseError,
        trainer.CheckpointError,
        OSError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
