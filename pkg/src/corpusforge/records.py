"""Canonical record model, JSONL round-trip I/O, text normalization, and the
per-stage manifests that make pipeline runs resumable and auditable."""

from __future__ import annotations

import hashlib
import json
import os
import time
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

# Fixed serialization order; changing it changes output digests.
RECORD_KEYS = (
    "id",
    "source",
    "question",
    "solution",
    "answer",
    "domain",
    "difficulty",
    "responses",
    "pass_rate",
    "scores",
    "meta",
)
RESPONSE_KEYS = ("text", "extracted_answer", "verified", "sampler_params_digest")


class RecordError(ValueError):
    """A record violates the schema or one of its invariants."""


class DuplicateIdError(RecordError):
    """Two records written to the same output share an id."""


@dataclass(frozen=True)
class GeneratedResponse:
    """One sampled model response attached to a record."""

    text: str
    extracted_answer: str | None = None
    verified: bool | None = None
    sampler_params_digest: str = ""


@dataclass(frozen=True)
class Record:
    """One dataset item. Immutable; stages derive new records instead of mutating."""

    id: str
    source: str = ""
    question: str = ""
    solution: str | None = None
    answer: str | None = None
    domain: str | None = None
    difficulty: int | None = None
    responses: tuple[GeneratedResponse, ...] = ()
    pass_rate: float | None = None
    scores: dict[str, float] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)


@dataclass
class BenchmarkSet:
    """A named evaluation set whose items must never leak into training data."""

    name: str
    items: list[str] = field(default_factory=list)  # normalized question texts
    n: int = 0  # n-gram size stamped at index build time


# --- text normalization ---

_KEEP_PUNCT = frozenset("+-*/=^(){}\\.,%")


def normalize_text(raw: str) -> str:
    """Normalization used for dedup/decontamination matching.

    Unicode NFC, lowercase, punctuation outside the keep-set removed,
    whitespace runs collapsed to single spaces, ends stripped. Idempotent.
    """
    text = unicodedata.normalize("NFC", raw).lower()
    kept: list[str] = []
    for ch in text:
        if ch.isalnum() or ch in _KEEP_PUNCT:
            kept.append(ch)
        elif ch.isspace():
            kept.append(" ")
        # everything else is dropped
    return " ".join("".join(kept).split())


# --- record <-> JSON object conversion ---


def _response_to_obj(resp: GeneratedResponse) -> dict[str, Any]:
    obj: dict[str, Any] = {"text": resp.text}
    if resp.extracted_answer is not None:
        obj["extracted_answer"] = resp.extracted_answer
    if resp.verified is not None:
        obj["verified"] = resp.verified
    if resp.sampler_params_digest:
        obj["sampler_params_digest"] = resp.sampler_params_digest
    return obj


def _response_from_obj(obj: dict[str, Any]) -> GeneratedResponse:
    if not isinstance(obj, dict) or "text" not in obj:
        raise RecordError("response entries need a 'text' field")
    verified = obj.get("verified")
    if verified is not None and not isinstance(verified, bool):
        raise RecordError("response 'verified' must be a boolean when present")
    return GeneratedResponse(
        text=str(obj["text"]),
        extracted_answer=obj.get("extracted_answer"),
        verified=verified,
        sampler_params_digest=str(obj.get("sampler_params_digest", "")),
    )


def record_to_obj(rec: Record) -> dict[str, Any]:
    """Canonical JSON object: fixed key order, empty optional fields omitted."""
    obj: dict[str, Any] = {"id": rec.id, "source": rec.source, "question": rec.question}
    if rec.solution is not None:
        obj["solution"] = rec.solution
    if rec.answer is not None:
        obj["answer"] = rec.answer
    if rec.domain is not None:
        obj["domain"] = rec.domain
    if rec.difficulty is not None:
        obj["difficulty"] = rec.difficulty
    if rec.responses:
        obj["responses"] = [_response_to_obj(r) for r in rec.responses]
    if rec.pass_rate is not None:
        obj["pass_rate"] = rec.pass_rate
    if rec.scores:
        obj["scores"] = dict(rec.scores)
    if rec.meta:
        obj["meta"] = dict(rec.meta)
    return obj


def validate_record(rec: Record) -> Record:
    if not rec.id:
        raise RecordError("record id must be non-empty")
    if not normalize_text(rec.question):
        raise RecordError(f"record {rec.id!r}: question empty after normalization")
    if rec.difficulty is not None:
        if not isinstance(rec.difficulty, int) or isinstance(rec.difficulty, bool):
            raise RecordError(f"record {rec.id!r}: difficulty must be an integer")
        if not 1 <= rec.difficulty <= 10:
            raise RecordError(f"record {rec.id!r}: difficulty {rec.difficulty} outside 1..10")
    if rec.pass_rate is not None and not 0.0 <= rec.pass_rate <= 1.0:
        raise RecordError(f"record {rec.id!r}: pass_rate {rec.pass_rate} outside [0, 1]")
    return rec


def record_from_obj(obj: dict[str, Any]) -> Record:
    """Build a Record from a parsed JSON object. Unknown keys are ignored."""
    if not isinstance(obj, dict):
        raise RecordError("record line must be a JSON object")
    if "question" not in obj:
        raise RecordError("missing required field 'question'")
    if "id" not in obj:
        raise RecordError("missing required field 'id'")
    difficulty = obj.get("difficulty")
    if difficulty is not None:
        if isinstance(difficulty, bool) or not isinstance(difficulty, int):
            raise RecordError("difficulty must be an integer")
    pass_rate = obj.get("pass_rate")
    if pass_rate is not None:
        pass_rate = float(pass_rate)
    responses = tuple(_response_from_obj(r) for r in obj.get("responses", []))
    scores = obj.get("scores", {})
    if not isinstance(scores, dict):
        raise RecordError("scores must be an object")
    meta = obj.get("meta", {})
    if not isinstance(meta, dict):
        raise RecordError("meta must be an object")
    rec = Record(
        id=str(obj["id"]),
        source=str(obj.get("source", "")),
        question=str(obj["question"]),
        solution=obj.get("solution"),
        answer=obj.get("answer"),
        domain=obj.get("domain"),
        difficulty=difficulty,
        responses=responses,
        pass_rate=pass_rate,
        scores={str(k): float(v) for k, v in scores.items()},
        meta=meta,
    )
    return validate_record(rec)


def dumps_record(rec: Record) -> str:
    return json.dumps(record_to_obj(rec), ensure_ascii=False, separators=(",", ":"))


# --- JSONL I/O ---


@dataclass
class ReadStats:
    """Counters filled in by read_records while streaming."""

    lines: int = 0
    records: int = 0
    skipped: int = 0


def read_records(
    path: str | Path, strict: bool = False, stats: ReadStats | None = None
) -> Iterator[Record]:
    """Stream records from a JSONL file.

    strict=True aborts on the first malformed line; otherwise malformed lines
    are counted in stats.skipped and skipped.
    """
    stats = stats if stats is not None else ReadStats()
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            stats.lines += 1
            try:
                obj = json.loads(line)
                rec = record_from_obj(obj)
            except (json.JSONDecodeError, RecordError, TypeError, ValueError) as exc:
                if strict:
                    raise RecordError(f"{path}:{lineno}: {exc}") from exc
                stats.skipped += 1
                continue
            stats.records += 1
            yield rec


# --- stage manifests ---


@dataclass
class StageManifest:
    """Accounting for one pipeline stage: counts, digests, params, timing."""

    stage: str
    params: dict[str, Any] = field(default_factory=dict)
    input_count: int = 0
    output_count: int = 0
    removed_count: int = 0
    input_digest: str = ""
    output_digest: str = ""
    seed: int | None = None
    duration_s: float = 0.0

    def validate(self) -> "StageManifest":
        if min(self.input_count, self.output_count, self.removed_count) < 0:
            raise RecordError(f"stage {self.stage!r}: negative manifest count")
        if self.output_count != self.input_count - self.removed_count:
            raise RecordError(
                f"stage {self.stage!r}: output_count {self.output_count} != "
                f"input_count {self.input_count} - removed_count {self.removed_count}"
            )
        return self

    def to_obj(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "params": self.params,
            "input_count": self.input_count,
            "output_count": self.output_count,
            "removed_count": self.removed_count,
            "input_digest": self.input_digest,
            "output_digest": self.output_digest,
            "seed": self.seed,
            "duration_s": self.duration_s,
        }

    @classmethod
    def from_obj(cls, obj: dict[str, Any]) -> "StageManifest":
        return cls(
            stage=obj["stage"],
            params=obj.get("params", {}),
            input_count=obj.get("input_count", 0),
            output_count=obj.get("output_count", 0),
            removed_count=obj.get("removed_count", 0),
            input_digest=obj.get("input_digest", ""),
            output_digest=obj.get("output_digest", ""),
            seed=obj.get("seed"),
            duration_s=obj.get("duration_s", 0.0),
        )


def manifest_path(data_path: str | Path) -> Path:
    data_path = Path(data_path)
    return data_path.with_name(data_path.name + ".manifest.json")


def save_manifest(manifest: StageManifest, path: str | Path) -> Path:
    """Write a manifest atomically. Callers write it only after the data file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(
        json.dumps(manifest.to_obj(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    os.replace(tmp, path)
    return path


def load_manifest(path: str | Path) -> StageManifest:
    return StageManifest.from_obj(json.loads(Path(path).read_text(encoding="utf-8")))


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_records(
    records: Iterable[Record],
    path: str | Path,
    *,
    stage: str = "write",
    params: dict[str, Any] | None = None,
    input_count: int | None = None,
    input_digest: str = "",
    seed: int | None = None,
    emit_manifest: bool = True,
) -> StageManifest:
    """Write records as canonical JSONL and return the stage manifest.

    The data file is written atomically (temp + rename) and the manifest file
    `<output>.manifest.json` is written strictly after it. Duplicate ids abort
    the write. The output digest covers exactly the emitted bytes.
    """
    start = time.perf_counter()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    digest = hashlib.sha256()
    count = 0
    seen: set[str] = set()
    with tmp.open("w", encoding="utf-8") as fh:
        for rec in records:
            if rec.id in seen:
                raise DuplicateIdError(f"duplicate record id {rec.id!r} during write")
            seen.add(rec.id)
            line = dumps_record(rec) + "\n"
            fh.write(line)
            digest.update(line.encode("utf-8"))
            count += 1
    os.replace(tmp, path)
    manifest = StageManifest(
        stage=stage,
        params=dict(params or {}),
        input_count=count if input_count is None else input_count,
        output_count=count,
        removed_count=0 if input_count is None else input_count - count,
        input_digest=input_digest,
        output_digest=digest.hexdigest(),
        seed=seed,
        duration_s=time.perf_counter() - start,
    ).validate()
    if emit_manifest:
        save_manifest(manifest, manifest_path(path))
    return manifest


def write_jsonl(rows: Iterable[dict[str, Any]], path: str | Path) -> int:
    """Plain JSONL writer for sidecar files (removal logs, quarantines, audits)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    count = 0
    with tmp.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")) + "\n")
            count += 1
    os.replace(tmp, path)
    return count


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    rows = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows
