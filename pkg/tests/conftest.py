"""Shared test helpers: record factories and replay-store seeding.

Seeding goes through the package's own prompt builders and role presets, so
stored entries land under the same keys the pipeline will compute.
"""

from __future__ import annotations

from pathlib import Path

import pytest

from corpusforge.client import ModelClient, request_for_role, seed_completion, seed_embedding
from corpusforge.client import EmbedRequest
from corpusforge.distill import teacher_prompt, verifier_prompt
from corpusforge.gates import (
    DEFAULT_SOLUTION_TAIL_CHARS,
    difficulty_prompt,
    domain_prompt,
    extraction_prompt,
    solution_tail,
    validity_prompt,
)
from corpusforge.passrate import MODE_ROLES, solver_prompt
from corpusforge.records import Record


def mk_record(i: int, question: str | None = None, **kw) -> Record:
    defaults = {
        "id": f"r{i:03d}",
        "source": "unit",
        "question": question or f"Compute the value of {i} plus {i + 1}.",
    }
    defaults.update(kw)
    return Record(**defaults)


# --- replay-store seeding, one helper per model role ---


def seed_domain(store: Path, rec: Record, label: str = "Algebra", raw: str | None = None) -> None:
    req = request_for_role("domain-classifier", (("user", domain_prompt(rec.question)),))
    seed_completion(store, req, [raw if raw is not None else f"<answer>{label}</answer>"])


def seed_validity(store: Path, rec: Record, verdict: str = "YES", raw: str | None = None) -> None:
    req = request_for_role("problem-validator", (("user", validity_prompt(rec.question)),))
    seed_completion(store, req, [raw if raw is not None else f"<answer>{verdict}</answer>"])


def seed_extraction(
    store: Path,
    rec: Record,
    answer: str,
    raw: str | None = None,
    tail_chars: int = DEFAULT_SOLUTION_TAIL_CHARS,
) -> None:
    prompt = extraction_prompt(rec.question, solution_tail(rec.solution or "", tail_chars))
    req = request_for_role("answer-extractor", (("user", prompt),))
    seed_completion(store, req, [raw if raw is not None else f"<answer>{answer}</answer>"])


def seed_difficulty(store: Path, rec: Record, score: int = 5, raw: str | None = None) -> None:
    req = request_for_role("difficulty-scorer", (("user", difficulty_prompt(rec.question)),))
    seed_completion(store, req, [raw if raw is not None else f"<score>{score}</score>"])


def seed_solver(store: Path, rec: Record, mode: str, texts: list[str]) -> None:
    role = MODE_ROLES[mode]
    req = request_for_role(role, (("user", solver_prompt(rec.question)),), n_samples=len(texts))
    seed_completion(store, req, texts)


def seed_teacher(store: Path, rec: Record, texts: list[str]) -> None:
    req = request_for_role("teacher", (("user", teacher_prompt(rec.question)),), n_samples=len(texts))
    seed_completion(store, req, texts)


def seed_verifier(store: Path, rec: Record, response_text: str, verdict_text: str) -> None:
    prompt = verifier_prompt(rec.question, response_text, rec.answer or "")
    req = request_for_role("verifier", (("user", prompt),))
    seed_completion(store, req, [verdict_text])


def seed_vector(store: Path, role: str, text: str, vector: list[float]) -> None:
    seed_embedding(store, EmbedRequest(role, text, len(vector)), vector)


def correct_text(rec: Record) -> str:
    return f"After working through it, the result is \\boxed{{{rec.answer}}}."


def wrong_text(salt: int = 0) -> str:
    return f"A quick estimate suggests \\boxed{{987654321{salt}}}."


@pytest.fixture()
def replay_client(tmp_path):
    """A replay-only client over tmp_path/store; misses raise ReplayMiss."""
    store = tmp_path / "store"
    store.mkdir(parents=True, exist_ok=True)
    client = ModelClient(replay_dir=store)
    client.store = store  # convenience handle for tests that keep seeding
    yield client
    client.close()
