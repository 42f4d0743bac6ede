"""Exact question dedup and word n-gram decontamination against benchmark sets."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .records import BenchmarkSet, Record, StageManifest, normalize_text

DEFAULT_NGRAM_SIZE = 10


def hash64(text: str) -> int:
    """Stable 64-bit hash of a string (process-independent, unlike hash())."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")


@dataclass
class NGramIndex:
    """Hashed n-gram index over benchmark questions.

    grams holds hashes of space-joined n-token windows; benchmark items with
    fewer than n tokens land in short_items as whole-question hashes, since
    they can produce no window of their own.
    """

    n: int
    grams: set[int] = field(default_factory=set)
    short_items: set[int] = field(default_factory=set)
    source_names: list[str] = field(default_factory=list)


def word_ngrams(tokens: list[str], n: int) -> Iterable[str]:
    for i in range(len(tokens) - n + 1):
        yield " ".join(tokens[i : i + n])


def load_benchmark_sets(path: str | Path) -> list[BenchmarkSet]:
    """Load benchmark sets from JSONL of {"name": ..., "question": ...}."""
    sets: dict[str, BenchmarkSet] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if "name" not in obj or "question" not in obj:
                raise ValueError(f"{path}:{lineno}: benchmark lines need 'name' and 'question'")
            bench = sets.setdefault(str(obj["name"]), BenchmarkSet(name=str(obj["name"])))
            bench.items.append(normalize_text(str(obj["question"])))
    return list(sets.values())


def build_ngram_index(benchmarks: list[BenchmarkSet], n: int = DEFAULT_NGRAM_SIZE) -> NGramIndex:
    if n < 1:
        raise ValueError(f"n-gram size must be >= 1, got {n}")
    if not benchmarks:
        raise ValueError("no benchmark sets given")
    index = NGramIndex(n=n, source_names=[b.name for b in benchmarks])
    for bench in benchmarks:
        bench.n = n
        for item in bench.items:
            norm = normalize_text(item)  # idempotent; tolerates pre-normalized input
            tokens = norm.split()
            if not tokens:
                continue
            if len(tokens) < n:
                index.short_items.add(hash64(norm))
            else:
                for gram in word_ngrams(tokens, n):
                    index.grams.add(hash64(gram))
    return index


def exact_dedup(records: Iterable[Record]) -> tuple[list[Record], StageManifest]:
    """Keep the first record per normalized question; order is preserved.

    Digest fields of the returned manifest are filled in at write time.
    """
    start = time.perf_counter()
    seen: set[str] = set()
    kept: list[Record] = []
    total = 0
    for rec in records:
        total += 1
        key = normalize_text(rec.question)
        if key in seen:
            continue
        seen.add(key)
        kept.append(rec)
    manifest = StageManifest(
        stage="dedup",
        input_count=total,
        output_count=len(kept),
        removed_count=total - len(kept),
        duration_s=time.perf_counter() - start,
    ).validate()
    return kept, manifest


def find_contamination(question: str, index: NGramIndex) -> tuple[str, str] | None:
    """Return (reason, matched_span) if the question hits the index, else None."""
    norm = normalize_text(question)
    tokens = norm.split()
    for gram in word_ngrams(tokens, index.n):
        if hash64(gram) in index.grams:
            return "ngram-match", gram
    if hash64(norm) in index.short_items:
        return "short-item-match", norm
    return None


def decontaminate(
    records: Iterable[Record], index: NGramIndex
) -> tuple[list[Record], StageManifest, list[dict[str, Any]]]:
    """Drop records whose question overlaps the benchmark index.

    A record is removed iff any n-gram of its normalized question is in the
    index, or its whole normalized question matches a short benchmark item.
    Kept records pass through unchanged; removals are returned as log rows
    of {"id", "reason", "matched_span"}.
    """
    start = time.perf_counter()
    kept: list[Record] = []
    removals: list[dict[str, Any]] = []
    total = 0
    for rec in records:
        total += 1
        hit = find_contamination(rec.question, index)
        if hit is None:
            kept.append(rec)
        else:
            reason, span = hit
            removals.append({"id": rec.id, "reason": reason, "matched_span": span})
    manifest = StageManifest(
        stage="decontam",
        params={"n": index.n, "benchmarks": list(index.source_names)},
        input_count=total,
        output_count=len(kept),
        removed_count=len(removals),
        duration_s=time.perf_counter() - start,
    ).validate()
    return kept, manifest, removals
