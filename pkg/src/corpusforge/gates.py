"""Per-record quality gates: prompted domain/validity/extraction/difficulty
checks plus a rule-based problem-type filter, with quarantine for unparsable
model output (a failed parse is never a silent drop)."""

from __future__ import annotations

import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from typing import Any, Callable, Iterable

from .client import ModelClient, request_for_role
from .records import Record, StageManifest, normalize_text

DOMAIN_LABELS = (
    "Algebra",
    "Geometry",
    "Calculus",
    "Discrete & Probability",
    "Number Theory",
    "Other",
    "Non-Math",
)

DEFAULT_SOLUTION_TAIL_CHARS = 4000

KEEP, DROP, ANNOTATE = "keep", "drop", "annotate"


class TagParseError(ValueError):
    """Model output did not contain exactly one well-formed tag."""


@dataclass(frozen=True)
class GateDecision:
    record_id: str
    gate: str
    verdict: str  # keep | drop | annotate
    label: str | None = None
    raw_model_output: str | None = None


def parse_single_tag(output: str, tag: str = "answer") -> str:
    """Return the content of exactly one <tag>...</tag>; zero or more than one fail."""
    matches = re.findall(rf"<{tag}>(.*?)</{tag}>", output, flags=re.DOTALL)
    if len(matches) != 1:
        raise TagParseError(f"expected exactly one <{tag}> tag, found {len(matches)}")
    return matches[0]


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    return (resources.files("corpusforge") / "prompts" / f"{name}.txt").read_text(encoding="utf-8")


def render_prompt(template: str, **slots: str) -> str:
    # str.format would trip over literal LaTeX braces, so substitute directly.
    out = template
    for key, value in slots.items():
        out = out.replace("{" + key + "}", value)
    return out


def domain_prompt(question: str) -> str:
    return render_prompt(load_prompt("domain_classifier"), instruction=question)


def validity_prompt(question: str) -> str:
    return render_prompt(load_prompt("problem_validator"), instruction=question)


def extraction_prompt(question: str, solution_tail: str) -> str:
    return render_prompt(
        load_prompt("answer_extractor"), instruction=question, output_tail=solution_tail
    )


def difficulty_prompt(question: str) -> str:
    return render_prompt(load_prompt("difficulty_scorer"), instruction=question)


def solution_tail(solution: str, tail_chars: int = DEFAULT_SOLUTION_TAIL_CHARS) -> str:
    if tail_chars <= 0:
        return solution
    return solution[-tail_chars:]


# --- individual gates ---


def classify_domain(rec: Record, client: ModelClient) -> GateDecision:
    """Label the record's math domain; Non-Math is a drop, anything else annotates."""
    req = request_for_role("domain-classifier", (("user", domain_prompt(rec.question)),))
    out = client.complete(req)[0]
    label = parse_single_tag(out).strip()
    if label not in DOMAIN_LABELS:
        raise TagParseError(f"domain label {label!r} outside the closed label set")
    verdict = DROP if label == "Non-Math" else ANNOTATE
    return GateDecision(rec.id, "domain", verdict, label, out)


def validate_problem(rec: Record, client: ModelClient) -> GateDecision:
    """Well-posedness gate; only uppercase YES/NO verdicts are accepted."""
    req = request_for_role("problem-validator", (("user", validity_prompt(rec.question)),))
    out = client.complete(req)[0]
    verdict = parse_single_tag(out).strip()
    if verdict not in ("YES", "NO"):
        raise TagParseError(f"validator verdict {verdict!r} is not YES or NO")
    return GateDecision(rec.id, "validity", KEEP if verdict == "YES" else DROP, verdict, out)


_PROOF_RE = re.compile(r"^(?:prove|show that|demonstrate that)\b")
_CHOICE_PAREN_RE = re.compile(r"\(([a-e])\)")
_CHOICE_BARE_RE = re.compile(r"(?:^| )([a-e])\)")
_BINARY_RES = (
    re.compile(r"\btrue or false\b"),
    re.compile(r"\byes or no\b"),
    re.compile(r"\bdetermine whether\b.*\bis true\b"),
)


def classify_problem_type(rec: Record) -> GateDecision:
    """Rule-based filter for proofs, multiple-choice, and binary-verdict items.

    Patterns run case-insensitively over the normalized question text.
    """
    text = normalize_text(rec.question)
    if _PROOF_RE.search(text):
        return GateDecision(rec.id, "problem_type", DROP, "proof")
    markers = set(_CHOICE_PAREN_RE.findall(text)) | set(_CHOICE_BARE_RE.findall(text))
    if len(markers) >= 3:
        return GateDecision(rec.id, "problem_type", DROP, "multiple-choice")
    if any(rx.search(text) for rx in _BINARY_RES):
        return GateDecision(rec.id, "problem_type", DROP, "binary")
    return GateDecision(rec.id, "problem_type", KEEP)


def _clean_extracted_answer(raw: str) -> str:
    # Trim and collapse inner whitespace runs; LaTeX content stays verbatim.
    return re.sub(r"\s+", " ", raw).strip()


def extract_answer(
    rec: Record, client: ModelClient, tail_chars: int = DEFAULT_SOLUTION_TAIL_CHARS
) -> GateDecision:
    """Extract the gold answer from the record's solution; empty tag is a drop."""
    if rec.solution is None:
        raise ValueError(f"record {rec.id!r} has no solution to extract from")
    prompt = extraction_prompt(rec.question, solution_tail(rec.solution, tail_chars))
    req = request_for_role("answer-extractor", (("user", prompt),))
    out = client.complete(req)[0]
    raw = parse_single_tag(out)
    answer = _clean_extracted_answer(raw)
    if not answer:
        return GateDecision(rec.id, "answer_extraction", DROP, "empty-answer", out)
    return GateDecision(rec.id, "answer_extraction", ANNOTATE, answer, out)


def score_difficulty(rec: Record, client: ModelClient) -> GateDecision:
    """Assign a 1..10 difficulty level; anything unparsable or out of range fails."""
    req = request_for_role("difficulty-scorer", (("user", difficulty_prompt(rec.question)),))
    out = client.complete(req)[0]
    content = parse_single_tag(out, tag="score").strip()
    if not re.fullmatch(r"-?\d+", content):
        raise TagParseError(f"difficulty score {content!r} is not an integer")
    score = int(content)
    if not 1 <= score <= 10:
        raise TagParseError(f"difficulty score {score} outside 1..10")
    return GateDecision(rec.id, "difficulty", ANNOTATE, str(score), out)


# --- gate composition ---

# Funnel order is fixed; config may select a subset but never reorder.
GATE_ORDER = ("domain", "validity", "problem_type", "answer_extraction", "difficulty")


def _apply_annotation(rec: Record, decision: GateDecision) -> Record:
    if decision.gate == "domain":
        return replace(rec, domain=decision.label)
    if decision.gate == "answer_extraction":
        return replace(rec, answer=decision.label)
    if decision.gate == "difficulty":
        return replace(rec, difficulty=int(decision.label or 0))
    return rec


@dataclass
class GateRunResult:
    gate: str
    kept: list[Record] = field(default_factory=list)
    decisions: list[GateDecision] = field(default_factory=list)
    dropped_by_label: dict[str, int] = field(default_factory=dict)
    quarantined: list[dict[str, Any]] = field(default_factory=list)
    input_count: int = 0
    duration_s: float = 0.0

    def validate(self) -> "GateRunResult":
        dropped = sum(self.dropped_by_label.values())
        if len(self.kept) + dropped + len(self.quarantined) != self.input_count:
            raise ValueError(
                f"gate {self.gate!r} accounting broken: "
                f"{len(self.kept)} kept + {dropped} dropped + "
                f"{len(self.quarantined)} quarantined != {self.input_count} input"
            )
        return self


def run_gate(
    records: Iterable[Record],
    gate: str,
    client: ModelClient | None = None,
    *,
    workers: int = 1,
    tail_chars: int = DEFAULT_SOLUTION_TAIL_CHARS,
) -> GateRunResult:
    """Apply one gate to every record. Output order follows input order.

    Every input record lands in exactly one of kept / dropped / quarantined.
    """
    if gate not in GATE_ORDER:
        raise ValueError(f"unknown gate {gate!r}")
    records = list(records)
    start = time.perf_counter()

    def decide(rec: Record) -> tuple[Record, GateDecision | None, Exception | None]:
        try:
            if gate == "domain":
                return rec, classify_domain(rec, client), None
            if gate == "validity":
                return rec, validate_problem(rec, client), None
            if gate == "problem_type":
                return rec, classify_problem_type(rec), None
            if gate == "answer_extraction":
                return rec, extract_answer(rec, client, tail_chars), None
            return rec, score_difficulty(rec, client), None
        except (TagParseError, ValueError) as exc:
            return rec, None, exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(decide, records))
    else:
        outcomes = [decide(rec) for rec in records]

    result = GateRunResult(gate=gate, input_count=len(records))
    for rec, decision, exc in outcomes:
        if exc is not None:
            result.quarantined.append(
                {"id": rec.id, "gate": gate, "error": str(exc), "record": _as_obj(rec)}
            )
            continue
        result.decisions.append(decision)
        if decision.verdict == DROP:
            label = decision.label or "dropped"
            result.dropped_by_label[label] = result.dropped_by_label.get(label, 0) + 1
        else:
            result.kept.append(_apply_annotation(rec, decision))
    result.duration_s = time.perf_counter() - start
    return result.validate()


def _as_obj(rec: Record) -> dict[str, Any]:
    from .records import record_to_obj

    return record_to_obj(rec)


def run_gates(
    records: Iterable[Record],
    gates: Iterable[str],
    client: ModelClient | None = None,
    *,
    workers: int = 1,
    tail_chars: int = DEFAULT_SOLUTION_TAIL_CHARS,
) -> tuple[list[Record], StageManifest, list[GateRunResult]]:
    """Chain gates in canonical order and roll their accounting into one manifest."""
    requested = set(gates)
    unknown = requested - set(GATE_ORDER)
    if unknown:
        raise ValueError(f"unknown gates: {sorted(unknown)}")
    ordered = [g for g in GATE_ORDER if g in requested]
    current = list(records)
    input_count = len(current)
    results: list[GateRunResult] = []
    for gate in ordered:
        res = run_gate(current, gate, client, workers=workers, tail_chars=tail_chars)
        results.append(res)
        current = res.kept
    params: dict[str, Any] = {"gates": ordered}
    for res in results:
        params[res.gate] = {
            "dropped": dict(res.dropped_by_label),
            "quarantined": len(res.quarantined),
        }
    manifest = StageManifest(
        stage="filter",
        params=params,
        input_count=input_count,
        output_count=len(current),
        removed_count=input_count - len(current),
        duration_s=sum(r.duration_s for r in results),
    ).validate()
    return current, manifest, results
