"""Command-line front door: generate corpora, run the funnel, run the random
baseline, and compare reports.

Exit codes: 0 success, 1 comparison floor not met, 2 config error,
3 runtime/stage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .corpus import (
    ConfigError,
    GeneratorConfig,
    corpus_content_hash,
    generate_corpus_detailed,
    load_corpus,
    save_corpus,
    save_labels,
)
from .labeling import SimulatedOracle
from .pipeline import (
    ActorParams,
    OracleParams,
    PipelineConfig,
    ScoreParams,
    run_pipeline_detailed,
    run_random_baseline,
)

EXIT_OK = 0
EXIT_FLOOR = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

METRICS_NAME = "metrics.json"
LABELS_NAME = "labels.jsonl"
AUDIT_NAME = "audit.jsonl"
MANIFEST_NAME = "manifest.json"

SCHEMA_VERSION = 1


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    return doc


def _check_envelope(doc: dict, kind: str) -> dict:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    if doc.get("kind") != kind:
        raise ConfigError(f"kind must be {kind!r}, got {doc.get('kind')!r}")
    body = dict(doc)
    body.pop("schema_version")
    body.pop("kind")
    return body


def _build(cls, doc: dict, context: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown {context} key {unknown[0]!r}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"invalid {context}: {exc}") from exc


def generator_config_from_doc(doc: dict) -> GeneratorConfig:
    body = _check_envelope(doc, "generator")
    cfg = _build(GeneratorConfig, body, "generator config")
    cfg.validate()
    return cfg


def pipeline_config_from_doc(doc: dict) -> PipelineConfig:
    body = _check_envelope(doc, "pipeline")
    for key, cls in (("oracle", OracleParams), ("actor", ActorParams)):
        if key in body:
            if not isinstance(body[key], dict):
                raise ConfigError(f"{key} must be an object")
            body[key] = _build(cls, body[key], key)
    if "score" in body and body["score"] is not None:
        if not isinstance(body["score"], dict):
            raise ConfigError("score must be an object or null")
        body["score"] = _build(ScoreParams, body["score"], "score")
    cfg = _build(PipelineConfig, body, "pipeline config")
    cfg.validate()
    return cfg


def pipeline_config_to_doc(config: PipelineConfig) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, "kind": "pipeline"}
    doc.update(dataclasses.asdict(config))
    return doc


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def cmd_generate(args) -> int:
    cfg = generator_config_from_doc(_load_json(args.config))
    items, truth, clusters = generate_corpus_detailed(cfg)
    save_corpus(items, args.out)
    positives = sum(1 for v in truth.values() if v)
    rate = positives / len(items) if items else 0.0
    dup_pairs = sum(
        (len(c.dup_ids) + 1) * len(c.dup_ids) // 2 for c in clusters
    )
    print(
        f"generated {len(items)} items in {len(clusters)} clusters; "
        f"positive rate {rate:.4f}; near-duplicate pairs {dup_pairs}"
    )
    return EXIT_OK


def _resolve_run_inputs(args) -> tuple[PipelineConfig, str]:
    doc = _load_json(args.config)
    if doc.get("kind") == "run_manifest":
        config = pipeline_config_from_doc(doc["config"])
        corpus_path = args.corpus or doc.get("corpus", {}).get("path")
        if not corpus_path:
            raise ConfigError("manifest has no corpus path; pass --corpus")
    else:
        config = pipeline_config_from_doc(doc)
        if not args.corpus:
            raise ConfigError("--corpus is required")
        corpus_path = args.corpus
    if args.graph_mode:
        config = dataclasses.replace(config, graph_mode=args.graph_mode)
    if args.seed is not None:
        config = dataclasses.replace(config, rng_seed=args.seed)
    return config, corpus_path


def cmd_run(args) -> int:
    config, corpus_path = _resolve_run_inputs(args)
    items = load_corpus(corpus_path)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "run_manifest",
        "artifact_version": __version__,
        "status": "running",
        "error": None,
        "started_at": _utc_now(),
        "finished_at": None,
        "corpus": {
            "path": str(corpus_path),
            "content_hash": corpus_content_hash(items),
            "items": len(items),
        },
        "config": pipeline_config_to_doc(config),
        "outputs": {
            "metrics": METRICS_NAME,
            "labels": LABELS_NAME,
            "audit": AUDIT_NAME,
        },
    }
    manifest_path = out_dir / MANIFEST_NAME
    _write_json(manifest_path, manifest)

    try:
        report, state = run_pipeline_detailed(items, config)
    except Exception as exc:
        manifest["status"] = "failed"
        manifest["error"] = str(exc)
        manifest["finished_at"] = _utc_now()
        _write_json(manifest_path, manifest)
        raise

    (out_dir / METRICS_NAME).write_text(report.to_json() + "\n", encoding="utf-8")
    save_labels(state.store.records(), out_dir / LABELS_NAME)
    with open(out_dir / AUDIT_NAME, "w", encoding="utf-8") as fh:
        for round_metrics in report.rounds:
            for stage in round_metrics.stages:
                fh.write(
                    json.dumps(stage.audit_entry(round_metrics.round),
                               separators=(",", ":"))
                    + "\n"
                )
    manifest["status"] = "completed"
    manifest["finished_at"] = _utc_now()
    _write_json(manifest_path, manifest)

    for rm in report.rounds:
        recall = (
            f"{rm.cumulative_recall:.4f}" if rm.cumulative_recall is not None else "n/a"
        )
        print(
            f"round {rm.round}: reviews={rm.oracle_reviews} "
            f"positives={rm.positives_oracle}/{rm.positives_propagated} "
            f"(oracle/propagated) cumulative_recall={recall}"
        )
    return EXIT_OK


def cmd_baseline(args) -> int:
    items = load_corpus(args.corpus)
    if args.budget is None:
        raise ConfigError("--budget is required")
    oracle_params = OracleParams()
    if args.config:
        doc = _load_json(args.config)
        if doc.get("kind") == "run_manifest":
            doc = doc["config"]
        oracle_params = pipeline_config_from_doc(doc).oracle
    truth = {
        item.item_id: item.ground_truth
        for item in items
        if item.ground_truth is not None
    }
    oracle = SimulatedOracle(
        oracle_params.tpr,
        oracle_params.tnr,
        oracle_params.seed,
        truth,
        oracle_params.unit_cost,
    )
    report = run_random_baseline(items, args.budget, oracle, args.trials, args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / METRICS_NAME).write_text(report.to_json() + "\n", encoding="utf-8")
    recall = f"{report.recall:.6f}" if report.recall is not None else "n/a"
    print(
        f"baseline: budget={args.budget} trials={args.trials} recall={recall} "
        f"review_fraction={report.review_fraction:.6f}"
    )
    return EXIT_OK


def cmd_compare(args) -> int:
    run_doc = _load_json(args.run_report)
    base_doc = _load_json(args.baseline_report)
    if run_doc.get("corpus_hash") != base_doc.get("corpus_hash"):
        raise RuntimeError(
            "corpus hash mismatch: reports were produced from different corpora"
        )
    run_recall = run_doc.get("recall")
    base_recall = base_doc.get("recall")
    ratio: float | None
    if run_recall is None:
        ratio = None
    elif not base_recall:
        ratio = float("inf") if run_recall > 0 else None
    else:
        ratio = run_recall / base_recall
    ratio_text = "inf" if ratio == float("inf") else (
        "n/a" if ratio is None else f"{ratio:.4f}"
    )
    print(f"recall_ratio={ratio_text} (run={run_recall} baseline={base_recall})")
    print(
        f"review_fraction: run={run_doc.get('review_fraction')} "
        f"baseline={base_doc.get('review_fraction')}"
    )
    print(f"amplification: run={run_doc.get('amplification')}")
    if ratio is not None and ratio >= args.floor:
        return EXIT_OK
    return EXIT_FLOOR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reviewfunnel",
        description="Budgeted content-review funnel over embedding corpora.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="generate a synthetic corpus")
    p_gen.add_argument("--config", required=True, help="generator config JSON")
    p_gen.add_argument("--out", required=True, help="output corpus file (JSONL)")
    p_gen.set_defaults(func=cmd_generate)

    p_run = sub.add_parser("run", help="run the multi-round pipeline")
    p_run.add_argument("--corpus", help="corpus file (JSONL)")
    p_run.add_argument(
        "--config", required=True, help="pipeline config JSON (or a run manifest)"
    )
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--graph-mode", choices=["exact", "blocked"], default=None)
    p_run.add_argument("--seed", type=int, default=None, help="override rng_seed")
    p_run.set_defaults(func=cmd_run)

    p_base = sub.add_parser("baseline", help="budget-matched random-review baseline")
    p_base.add_argument("--corpus", required=True)
    p_base.add_argument("--budget", type=int, default=None, help="total reviews")
    p_base.add_argument("--trials", type=int, default=5)
    p_base.add_argument("--seed", type=int, default=0)
    p_base.add_argument("--config", help="pipeline config to borrow oracle params from")
    p_base.add_argument("--out", required=True, help="output directory")
    p_base.set_defaults(func=cmd_baseline)

    p_cmp = sub.add_parser("compare", help="compare a run report to a baseline")
    p_cmp.add_argument("run_report")
    p_cmp.add_argument("baseline_report")
    p_cmp.add_argument(
        "--floor", type=float, default=2.0, help="minimum acceptable recall ratio"
    )
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
