"""Command-line interface: one subcommand per stage plus mixture building,
dataset statistics, and full configured runs."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .analytics import distribution_report, length_stats, read_efficiency_csv
from .client import EndpointError, ModelClient, ReplayMiss
from .dedup import DEFAULT_NGRAM_SIZE, build_ngram_index, load_benchmark_sets
from .mixture import InfeasibleBudget, MixtureError, build_mixture, load_embedding_sidecar, load_plan
from .pipeline import (
    PipelineError,
    StageContext,
    StageSpec,
    StaleOutputError,
    _execute_stage,
    load_run_config,
    run_pipeline,
)
from .records import RecordError, file_digest, read_records, write_records

KNOWN_ERRORS = (
    PipelineError,
    RecordError,
    MixtureError,
    ReplayMiss,
    EndpointError,
    ValueError,
    OSError,
)


def _add_io_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="input JSONL of records")
    p.add_argument("--output", required=True, help="output JSONL path")


def _add_client_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config supplying role endpoints (JSON/YAML)")
    p.add_argument("--cache-dir", help="read/write completion cache directory")
    p.add_argument("--replay", help="read-only replay store directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)


def _make_client(args: argparse.Namespace) -> ModelClient:
    endpoints = {}
    rate_limits = {}
    if getattr(args, "config", None):
        cfg = load_run_config(args.config)
        endpoints = cfg.roles
        rate_limits = cfg.rate_limits
    return ModelClient(
        cache_dir=getattr(args, "cache_dir", None),
        replay_dir=getattr(args, "replay", None),
        endpoints=endpoints,
        rate_limits=rate_limits,
    )


def _run_single_stage(args: argparse.Namespace, name: str, params: dict) -> int:
    client = _make_client(args)
    try:
        ctx = StageContext(
            client=client,
            workers=getattr(args, "workers", 1),
            seed=getattr(args, "seed", 0),
            base_dir=Path.cwd(),
        )
        manifest = _execute_stage(
            StageSpec(name=name, params=params),
            Path(args.input),
            Path(args.output),
            file_digest(args.input),
            ctx,
        )
    finally:
        client.close()
    print(
        f"{manifest.stage}: {manifest.input_count} in, {manifest.output_count} out, "
        f"{manifest.removed_count} removed -> {args.output}"
    )
    return 0


# --- subcommand handlers ---


def cmd_ingest(args) -> int:
    return _run_single_stage(args, "ingest", {"strict": args.strict})


def cmd_dedup(args) -> int:
    return _run_single_stage(args, "dedup", {})


def cmd_decontam(args) -> int:
    return _run_single_stage(args, "decontam", {"benchmarks": args.benchmarks, "n": args.n})


def cmd_filter(args) -> int:
    gates = [g.strip() for g in args.gates.split(",") if g.strip()]
    return _run_single_stage(args, "filter", {"gates": gates})


def cmd_extract_answer(args) -> int:
    return _run_single_stage(args, "extract-answer", {})


def cmd_select(args) -> int:
    params = {} if args.k is None else {"k": args.k}
    return _run_single_stage(args, f"stage{args.stage}", params)


def cmd_distill(args) -> int:
    return _run_single_stage(args, "distill", {"k": args.k})


def cmd_verify(args) -> int:
    return _run_single_stage(args, "verify", {})


def cmd_finalize(args) -> int:
    return _run_single_stage(args, "finalize", {"policy": args.policy})


def cmd_mix(args) -> int:
    plan = load_plan(args.plan)
    if args.seed is not None:
        plan.seed = args.seed
    records = list(read_records(args.input, strict=True))
    sources: dict[str, list] = {}
    for rec in records:
        sources.setdefault(rec.source or "", []).append(rec)
    embeddings = load_embedding_sidecar(args.embeddings) if args.embeddings else None
    index = None
    if args.benchmarks:
        index = build_ngram_index(load_benchmark_sets(args.benchmarks), n=args.n)
    client = _make_client(args) if embeddings is None else None
    try:
        selected, manifest = build_mixture(
            plan, sources, embeddings=embeddings, client=client, index=index
        )
    finally:
        if client is not None:
            client.close()
    write_records(
        selected,
        args.output,
        stage=manifest.stage,
        params=manifest.params,
        input_count=manifest.input_count,
        input_digest=file_digest(args.input),
        seed=plan.seed,
    )
    shares = ", ".join(f"{k}={v}" for k, v in manifest.params["per_source"].items())
    print(f"mix: {manifest.output_count} records ({shares}) -> {args.output}")
    return 0


def cmd_stats(args) -> int:
    records = list(read_records(args.input, strict=False))
    report = {
        "lengths": length_stats(records, tokenizer_mode=args.tokenizer_mode),
        "domains": distribution_report(records, "domain"),
        "difficulty": distribution_report(records, "difficulty"),
        "sources": distribution_report(records, "source"),
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_efficiency(args) -> int:
    rows = read_efficiency_csv(args.scores)
    if args.json:
        print(
            json.dumps(
                [
                    {
                        "dataset_name": r.dataset_name,
                        "size": r.size,
                        "s_base": r.s_base,
                        "s_sft": r.s_sft,
                        "efficiency": r.efficiency,
                    }
                    for r in rows
                ],
                indent=2,
            )
        )
        return 0
    width = max([len(r.dataset_name) for r in rows] + [7])
    print(f"{'dataset':<{width}}  {'size':>8}  {'base':>6}  {'sft':>6}  {'eff/1k':>7}")
    for r in rows:
        print(
            f"{r.dataset_name:<{width}}  {r.size:>8}  {r.s_base:>6.1f}  {r.s_sft:>6.1f}  "
            f"{r.formatted():>7}"
        )
    return 0


def cmd_run(args) -> int:
    config = load_run_config(args.config)
    result = run_pipeline(config, force=args.force)
    for stage in result.stages:
        state = "skipped" if stage.skipped else "ran"
        print(
            f"{stage.name}: {state}, {stage.manifest.input_count} in, "
            f"{stage.manifest.output_count} out -> {stage.output_path}"
        )
    print(f"network calls: {result.network_calls}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corpusforge",
        description="Stage-based curation, distillation, and mixture building for reasoning corpora.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="read raw JSONL into canonical records")
    _add_io_args(p)
    p.add_argument("--strict", action="store_true", help="fail on malformed lines instead of skipping")
    _add_client_args(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("dedup", help="drop exact duplicates by normalized question")
    _add_io_args(p)
    _add_client_args(p)
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("decontam", help="drop records overlapping benchmark questions")
    _add_io_args(p)
    p.add_argument("--benchmarks", required=True, help="benchmark questions JSONL")
    p.add_argument("--n", type=int, default=DEFAULT_NGRAM_SIZE, help="n-gram size")
    _add_client_args(p)
    p.set_defaults(func=cmd_decontam)

    p = sub.add_parser("filter", help="apply model-backed quality gates")
    _add_io_args(p)
    p.add_argument(
        "--gates",
        default="domain,validity,problem_type",
        help="comma-separated gate names in canonical order",
    )
    _add_client_args(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("extract-answer", help="extract final answers from solutions")
    _add_io_args(p)
    _add_client_args(p)
    p.set_defaults(func=cmd_extract_answer)

    p = sub.add_parser("select", help="pass-rate based difficulty selection")
    _add_io_args(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--k", type=int, default=None, help="samples per record (defaults: 4 / 5)")
    _add_client_args(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("distill", help="sample teacher traces for each record")
    _add_io_args(p)
    p.add_argument("--k", type=int, default=5, help="teacher samples per record")
    _add_client_args(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("verify", help="verify teacher traces against reference answers")
    _add_io_args(p)
    _add_client_args(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("finalize", help="assemble the final dataset from verified traces")
    _add_io_args(p)
    p.add_argument("--policy", choices=("first_verified", "all_verified"), default="first_verified")
    _add_client_args(p)
    p.set_defaults(func=cmd_finalize)

    p = sub.add_parser("mix", help="build an anchor-and-patch mixture")
    _add_io_args(p)
    p.add_argument("--plan", required=True, help="mixture plan (JSON/YAML)")
    p.add_argument("--embeddings", help="precomputed embedding sidecar JSONL")
    p.add_argument("--benchmarks", help="benchmark questions JSONL for decontamination")
    p.add_argument("--n", type=int, default=DEFAULT_NGRAM_SIZE, help="n-gram size")
    p.add_argument("--seed", type=int, default=None, help="override the plan seed")
    p.add_argument("--config", help="run config supplying role endpoints (JSON/YAML)")
    p.add_argument("--cache-dir", help="read/write completion cache directory")
    p.add_argument("--replay", help="read-only replay store directory")
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("stats", help="length and label statistics for a dataset")
    p.add_argument("--input", required=True)
    p.add_argument(
        "--tokenizer-mode",
        default="question+solution",
        choices=("question", "solution", "question+solution"),
    )
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("efficiency", help="benchmark points gained per 1000 samples")
    p.add_argument("--scores", required=True, help="CSV of name,size,s_base,s_sft")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_efficiency)

    p = sub.add_parser("run", help="run all configured stages with resume")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true", help="rebuild stale stage outputs")
    p.set_defaults(func=cmd_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StaleOutputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("hint: pass --force to rebuild, or remove the stale outputs", file=sys.stderr)
        return 1
    except InfeasibleBudget as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KNOWN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
