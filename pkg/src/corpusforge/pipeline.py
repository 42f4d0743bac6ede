"""Stage orchestration: declarative run configs, digest-chained manifests, and
skip-or-refuse resume semantics."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .client import Endpoint, ModelClient
from .dedup import (
    DEFAULT_NGRAM_SIZE,
    build_ngram_index,
    decontaminate,
    exact_dedup,
    load_benchmark_sets,
)
from .distill import build_final, distill_records, final_dataset_view, verify_records
from .gates import DEFAULT_SOLUTION_TAIL_CHARS, run_gate, run_gates
from .passrate import stage1_filter, stage2_filter
from .records import (
    ReadStats,
    Record,
    StageManifest,
    file_digest,
    load_manifest,
    manifest_path,
    read_records,
    save_manifest,
    write_jsonl,
    write_records,
)


class PipelineError(RuntimeError):
    pass


class StaleOutputError(PipelineError):
    """Existing stage output does not match the current input digest."""


@dataclass
class StageSpec:
    name: str
    params: dict[str, Any] = field(default_factory=dict)


@dataclass
class RunConfig:
    input: Path
    out_dir: Path
    stages: list[StageSpec] = field(default_factory=list)
    roles: dict[str, Endpoint] = field(default_factory=dict)
    rate_limits: dict[str, float] = field(default_factory=dict)
    cache_dir: Path | None = None
    replay_dir: Path | None = None
    seed: int = 0
    workers: int = 1
    base_dir: Path | None = None  # directory relative stage params resolve against


@dataclass
class StageResult:
    name: str
    manifest: StageManifest
    output_path: Path
    skipped: bool


@dataclass
class RunResult:
    stages: list[StageResult]
    network_calls: int

    @property
    def executed(self) -> int:
        return sum(1 for s in self.stages if not s.skipped)


def load_run_config(path: str | Path) -> RunConfig:
    """Read a run config from JSON or YAML; relative paths resolve against it."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yaml", ".yml"):
        import yaml

        obj = yaml.safe_load(text)
    else:
        obj = json.loads(text)
    base = path.parent

    def resolve(p: str | None) -> Path | None:
        if not p:
            return None
        candidate = Path(p)
        return candidate if candidate.is_absolute() else base / candidate

    roles = {
        name: Endpoint(
            url=spec["url"], model=spec.get("model", name), api_key_env=spec.get("api_key_env")
        )
        for name, spec in obj.get("roles", {}).items()
    }
    stages = [
        StageSpec(name=s["name"], params=dict(s.get("params", {}))) for s in obj.get("stages", [])
    ]
    input_path = resolve(obj.get("input"))
    out_dir = resolve(obj.get("out_dir"))
    if input_path is None or out_dir is None:
        raise PipelineError("run config needs 'input' and 'out_dir'")
    return RunConfig(
        input=input_path,
        out_dir=out_dir,
        stages=stages,
        roles=roles,
        rate_limits={k: float(v) for k, v in obj.get("rate_limits", {}).items()},
        cache_dir=resolve(obj.get("cache_dir")),
        replay_dir=resolve(obj.get("replay_dir")),
        seed=int(obj.get("seed", 0)),
        workers=int(obj.get("workers", 1)),
        base_dir=base,
    )


def build_client(config: RunConfig) -> ModelClient:
    return ModelClient(
        cache_dir=config.cache_dir,
        replay_dir=config.replay_dir,
        endpoints=config.roles,
        rate_limits=config.rate_limits,
    )


@dataclass
class StageContext:
    client: ModelClient
    workers: int
    seed: int
    base_dir: Path


Sidecars = dict[str, list[dict[str, Any]]]
StageRunner = Callable[[list[Record], dict[str, Any], StageContext], tuple[list[Record], StageManifest, Sidecars]]


def _stage_dedup(records, params, ctx):
    kept, manifest = exact_dedup(records)
    return kept, manifest, {}


def _load_index(params: dict[str, Any], ctx: StageContext):
    bench_path = params.get("benchmarks")
    if not bench_path:
        raise PipelineError("decontam stage needs params.benchmarks (a JSONL path)")
    bench_path = Path(bench_path)
    if not bench_path.is_absolute():
        bench_path = ctx.base_dir / bench_path
    n = int(params.get("n", DEFAULT_NGRAM_SIZE))
    return build_ngram_index(load_benchmark_sets(bench_path), n=n)


def _stage_decontam(records, params, ctx):
    index = _load_index(params, ctx)
    kept, manifest, removals = decontaminate(records, index)
    return kept, manifest, {"removals": removals}


def _stage_filter(records, params, ctx):
    gates = [g.replace("-", "_") for g in params.get("gates", ["domain", "validity", "problem_type"])]
    tail_chars = int(params.get("solution_tail_chars", DEFAULT_SOLUTION_TAIL_CHARS))
    kept, manifest, results = run_gates(
        records, gates, ctx.client, workers=ctx.workers, tail_chars=tail_chars
    )
    quarantine = [row for res in results for row in res.quarantined]
    return kept, manifest, {"quarantine": quarantine}


def _stage_extract(records, params, ctx):
    tail_chars = int(params.get("solution_tail_chars", DEFAULT_SOLUTION_TAIL_CHARS))
    res = run_gate(records, "answer_extraction", ctx.client, workers=ctx.workers, tail_chars=tail_chars)
    manifest = StageManifest(
        stage="extract-answer",
        params={
            "solution_tail_chars": tail_chars,
            "dropped": dict(res.dropped_by_label),
            "quarantined": len(res.quarantined),
        },
        input_count=res.input_count,
        output_count=len(res.kept),
        removed_count=res.input_count - len(res.kept),
        duration_s=res.duration_s,
    ).validate()
    return res.kept, manifest, {"quarantine": res.quarantined}


def _stage_select(stage_num: int):
    def runner(records, params, ctx):
        if stage_num == 1:
            k = int(params.get("k", 4))
            kept, manifest, results = stage1_filter(records, ctx.client, k=k, workers=ctx.workers)
        else:
            k = int(params.get("k", 5))
            kept, manifest, results = stage2_filter(records, ctx.client, k=k, workers=ctx.workers)
        return kept, manifest, {"passrates": [r.to_obj() for r in results]}

    return runner


def _stage_distill(records, params, ctx):
    out, manifest = distill_records(records, ctx.client, k=int(params.get("k", 5)), workers=ctx.workers)
    return out, manifest, {}


def _stage_verify(records, params, ctx):
    updated, manifest, audit, quarantined = verify_records(records, ctx.client, workers=ctx.workers)
    return updated, manifest, {"verdicts": audit, "quarantine": quarantined}


def _stage_finalize(records, params, ctx):
    final, manifest = build_final(records, policy=params.get("policy", "first_verified"))
    return final_dataset_view(final), manifest, {}


STAGE_RUNNERS: dict[str, StageRunner] = {
    "dedup": _stage_dedup,
    "decontam": _stage_decontam,
    "filter": _stage_filter,
    "extract-answer": _stage_extract,
    "stage1": _stage_select(1),
    "stage2": _stage_select(2),
    "distill": _stage_distill,
    "verify": _stage_verify,
    "finalize": _stage_finalize,
}


def _execute_stage(
    spec: StageSpec,
    in_path: Path,
    out_path: Path,
    input_digest: str,
    ctx: StageContext,
) -> StageManifest:
    start = time.perf_counter()
    if spec.name == "ingest":
        stats = ReadStats()
        strict = bool(spec.params.get("strict", False))
        records = list(read_records(in_path, strict=strict, stats=stats))
        manifest = StageManifest(
            stage="ingest",
            params={"strict": strict, "skipped_lines": stats.skipped},
            input_count=stats.lines,
            output_count=len(records),
            removed_count=stats.lines - len(records),
        )
        sidecars: Sidecars = {}
    else:
        runner = STAGE_RUNNERS.get(spec.name)
        if runner is None:
            raise PipelineError(f"unknown stage {spec.name!r}")
        records_in = list(read_records(in_path, strict=True))
        records, manifest, sidecars = runner(records_in, spec.params, ctx)
    for suffix, rows in sidecars.items():
        write_jsonl(rows, out_path.with_name(out_path.name + f".{suffix}.jsonl"))
    write_manifest = write_records(
        records,
        out_path,
        stage=manifest.stage,
        params=manifest.params,
        input_count=manifest.input_count,
        input_digest=input_digest,
        seed=ctx.seed,
        emit_manifest=False,
    )
    final = StageManifest(
        stage=manifest.stage,
        params=manifest.params,
        input_count=manifest.input_count,
        output_count=write_manifest.output_count,
        removed_count=write_manifest.removed_count,
        input_digest=input_digest,
        output_digest=write_manifest.output_digest,
        seed=ctx.seed,
        duration_s=time.perf_counter() - start,
    ).validate()
    save_manifest(final, manifest_path(out_path))  # manifest last: it marks completion
    return final


def run_pipeline(config: RunConfig, force: bool = False) -> RunResult:
    """Run configured stages in order, skipping stages whose outputs are
    already consistent with the current input chain."""
    if not config.stages:
        raise PipelineError("run config has no stages")
    config.out_dir.mkdir(parents=True, exist_ok=True)
    client = build_client(config)
    ctx = StageContext(
        client=client,
        workers=config.workers,
        seed=config.seed,
        base_dir=config.base_dir or config.out_dir,
    )
    results: list[StageResult] = []
    prev_path = Path(config.input)
    try:
        for pos, spec in enumerate(config.stages):
            out_path = config.out_dir / f"{pos:02d}_{spec.name}.jsonl"
            mpath = manifest_path(out_path)
            input_digest = file_digest(prev_path)
            if out_path.exists() and mpath.exists():
                manifest = load_manifest(mpath)
                if (
                    manifest.stage == spec.name
                    and manifest.input_digest == input_digest
                    and manifest.output_digest == file_digest(out_path)
                ):
                    results.append(StageResult(spec.name, manifest, out_path, skipped=True))
                    prev_path = out_path
                    continue
                if not force:
                    raise StaleOutputError(
                        f"stage {spec.name!r}: existing output at {out_path} does not match "
                        "the current input chain; pass force to rebuild"
                    )
            manifest = _execute_stage(spec, prev_path, out_path, input_digest, ctx)
            results.append(StageResult(spec.name, manifest, out_path, skipped=False))
            prev_path = out_path
    finally:
        client.close()
    return RunResult(stages=results, network_calls=client.network_calls)
