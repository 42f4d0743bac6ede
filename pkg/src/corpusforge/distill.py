"""Teacher-trace synthesis and verifier-gated assembly of the final dataset:
only pairs a verifier marks correct survive."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Iterable

from .client import ModelClient, request_for_role, sampler_params_digest
from .gates import load_prompt, render_prompt
from .passrate import extract_final_answer
from .records import GeneratedResponse, Record, StageManifest

DEFAULT_TEACHER_SAMPLES = 5

# Verdict tokens accepted at the tail of verifier output, case-insensitive.
_TRUE_TOKENS = {"1", "true", "yes"}
_FALSE_TOKENS = {"0", "false", "no"}


@dataclass(frozen=True)
class VerifiedPair:
    record_id: str
    question: str
    response: str
    gold: str
    verdict: bool


def teacher_prompt(question: str) -> str:
    return render_prompt(load_prompt("teacher"), instruction=question)


def verifier_prompt(question: str, response: str, reference: str) -> str:
    return render_prompt(
        load_prompt("verifier"), question=question, response=response, reference=reference
    )


def synthesize(rec: Record, k: int, client: ModelClient) -> list[GeneratedResponse]:
    """Sample k teacher traces for the record's question."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not rec.answer:
        raise ValueError(f"record {rec.id!r} has no gold answer; distillation needs one")
    req = request_for_role("teacher", (("user", teacher_prompt(rec.question)),), n_samples=k)
    digest = sampler_params_digest(req)
    return [
        GeneratedResponse(
            text=text,
            extracted_answer=extract_final_answer(text),
            sampler_params_digest=digest,
        )
        for text in client.complete(req)
    ]


def parse_verdict(output: str) -> bool | None:
    """Binary verdict from the tail of verifier output; None if unparsable."""
    words = output.strip().split()
    if not words:
        return None
    tail = words[-1].strip(".,!:;\"'`").lower()
    if tail in _TRUE_TOKENS:
        return True
    if tail in _FALSE_TOKENS:
        return False
    return None


def verify(
    rec: Record, client: ModelClient
) -> tuple[Record, list[VerifiedPair], list[dict[str, Any]]]:
    """Run the verifier over every attached response.

    Returns the record with verdicts recorded on its responses, the parsable
    pairs, and quarantine rows for unparsable verdicts (never assumed false).
    """
    if not rec.responses:
        raise ValueError(f"record {rec.id!r} has no responses to verify")
    if not rec.answer:
        raise ValueError(f"record {rec.id!r} has no gold answer to verify against")
    pairs: list[VerifiedPair] = []
    quarantined: list[dict[str, Any]] = []
    updated: list[GeneratedResponse] = []
    for idx, resp in enumerate(rec.responses):
        prompt = verifier_prompt(rec.question, resp.text, rec.answer)
        req = request_for_role("verifier", (("user", prompt),))
        out = client.complete(req)[0]
        verdict = parse_verdict(out)
        if verdict is None:
            quarantined.append(
                {
                    "id": rec.id,
                    "sample_index": idx,
                    "error": "unparsable verifier verdict",
                    "raw_output": out,
                }
            )
            updated.append(replace(resp, verified=None))
            continue
        pairs.append(VerifiedPair(rec.id, rec.question, resp.text, rec.answer, verdict))
        updated.append(replace(resp, verified=verdict))
    return replace(rec, responses=tuple(updated)), pairs, quarantined


def distill_records(
    records: Iterable[Record], client: ModelClient, k: int = DEFAULT_TEACHER_SAMPLES, workers: int = 1
) -> tuple[list[Record], StageManifest]:
    """Attach k teacher traces to every record; record count is unchanged."""
    records = list(records)
    start = time.perf_counter()

    def attach(rec: Record) -> Record:
        return replace(rec, responses=tuple(synthesize(rec, k, client)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(attach, records))
    else:
        out = [attach(rec) for rec in records]
    manifest = StageManifest(
        stage="distill",
        params={"k": k, "role": "teacher"},
        input_count=len(records),
        output_count=len(out),
        removed_count=0,
        duration_s=time.perf_counter() - start,
    ).validate()
    return out, manifest


def verify_records(
    records: Iterable[Record], client: ModelClient, workers: int = 1
) -> tuple[list[Record], StageManifest, list[dict[str, Any]], list[dict[str, Any]]]:
    """Verify every response of every record.

    Returns updated records, the stage manifest, an audit log with one row per
    (record, sample) verdict, and quarantine rows for unparsable verdicts.
    """
    records = list(records)
    start = time.perf_counter()

    def check(rec: Record) -> tuple[Record, list[VerifiedPair], list[dict[str, Any]]]:
        return verify(rec, client)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(check, records))
    else:
        outcomes = [check(rec) for rec in records]

    updated: list[Record] = []
    audit: list[dict[str, Any]] = []
    quarantined: list[dict[str, Any]] = []
    for rec, pairs, quarantine in outcomes:
        updated.append(rec)
        for idx, resp in enumerate(rec.responses):
            audit.append({"id": rec.id, "sample_index": idx, "verdict": resp.verified})
        quarantined.extend(quarantine)
    manifest = StageManifest(
        stage="verify",
        params={"role": "verifier", "quarantined_pairs": len(quarantined)},
        input_count=len(records),
        output_count=len(updated),
        removed_count=0,
        duration_s=time.perf_counter() - start,
    ).validate()
    return updated, manifest, audit, quarantined


def build_final(
    records: Iterable[Record], policy: str = "first_verified"
) -> tuple[list[Record], StageManifest]:
    """Assemble the final dataset from verified responses.

    first_verified keeps one record per input, using the lowest-index verified
    response as its solution; all_verified emits one record per verified
    response with a suffixed id. Records with no verified response are dropped.
    """
    if policy not in ("first_verified", "all_verified"):
        raise ValueError(f"unknown selection policy {policy!r}")
    records = list(records)
    start = time.perf_counter()
    final: list[Record] = []
    no_verified = 0
    for rec in records:
        verified_idx = [i for i, r in enumerate(rec.responses) if r.verified]
        if not verified_idx:
            no_verified += 1
            continue
        if policy == "first_verified":
            chosen = verified_idx[0]
            final.append(replace(rec, solution=rec.responses[chosen].text))
        else:
            for i in verified_idx:
                final.append(replace(rec, id=f"{rec.id}#{i}", solution=rec.responses[i].text))
    params = {"policy": policy, "input_records": len(records), "records_without_verified": no_verified}
    if policy == "first_verified":
        input_count, removed = len(records), no_verified
    else:
        # all_verified expands records, so the count invariant runs on pairs;
        # true record counts live in params.
        input_count, removed = len(final), 0
    manifest = StageManifest(
        stage="finalize",
        params=params,
        input_count=input_count,
        output_count=len(final),
        removed_count=removed,
        duration_s=time.perf_counter() - start,
    ).validate()
    return final, manifest


def final_dataset_view(records: Iterable[Record]) -> list[Record]:
    """Project records to the five exported fields (id, source, question,
    solution, answer); everything else is cleared."""
    return [
        Record(id=r.id, source=r.source, question=r.question, solution=r.solution, answer=r.answer)
        for r in records
    ]
