"""Answer matching, per-record pass rates, and the two selection filters:
stage 1 keeps problems a weak solver never cracks, stage 2 keeps problems a
strong reasoner cracks at least once."""

from __future__ import annotations

import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Iterable

from .client import ModelClient, request_for_role
from .gates import load_prompt, render_prompt
from .records import Record, StageManifest

MODE_ROLES = {"direct": "stage1-solver", "thinking": "stage2-solver"}

REL_TOL = 1e-9


@dataclass(frozen=True)
class PassRateResult:
    record_id: str
    k: int
    correct: int
    pass_rate: float
    stage: int

    def to_obj(self) -> dict:
        return {
            "record_id": self.record_id,
            "k": self.k,
            "correct": self.correct,
            "pass_rate": self.pass_rate,
            "stage": self.stage,
        }


def solver_prompt(question: str) -> str:
    return render_prompt(load_prompt("solver"), instruction=question)


# --- final-answer extraction from model output ---


def extract_last_boxed(text: str) -> str | None:
    """Inner content of the last \\boxed{...}, with balanced-brace scanning."""
    start = text.rfind("\\boxed{")
    if start == -1:
        return None
    i = start + len("\\boxed{")
    depth = 1
    out = []
    while i < len(text):
        ch = text[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return "".join(out)
        out.append(ch)
        i += 1
    return None  # unbalanced box


_NUMBER_RE = re.compile(r"[-+]?\d[\d,]*(?:\.\d+)?%?|[-+]?\.\d+%?")


def extract_final_answer(text: str) -> str | None:
    """Candidate answer from a model response.

    Priority: final boxed expression, then a trailing <answer> tag, then the
    last number-like token.
    """
    text = text.replace("\u2212", "-")
    boxed = extract_last_boxed(text)
    if boxed is not None:
        return boxed.strip()
    tags = re.findall(r"<answer>(.*?)</answer>", text, flags=re.DOTALL)
    if tags:
        return tags[-1].strip()
    numbers = _NUMBER_RE.findall(text)
    if numbers:
        return numbers[-1]
    return None


# --- answer equivalence ---


def _norm_answer(ans: str) -> str:
    s = ans.strip().replace("\u2212", "-")
    while len(s) >= 2 and s.startswith("$") and s.endswith("$"):
        s = s[1:-1].strip()
    s = re.sub(r"\s+", " ", s)
    return s.lower()


_THOUSANDS_COMMA = re.compile(r"(?<=\d),(?=\d{3}\b)")
_FRAC_RE = re.compile(r"\\[dt]?frac\{([-+]?\d+(?:\.\d+)?)\}\{([-+]?\d+(?:\.\d+)?)\}")


def _parse_number(s: str) -> Fraction | None:
    """Parse rationals, decimals, and percents to an exact value; None otherwise."""
    s = s.strip()
    percent = s.endswith("%")
    if percent:
        s = s[:-1].strip()
    m = _FRAC_RE.fullmatch(s)
    if m:
        try:
            value = Fraction(m.group(1)) / Fraction(m.group(2))
        except (ValueError, ZeroDivisionError):
            return None
    else:
        try:
            value = Fraction(_THOUSANDS_COMMA.sub("", s))
        except (ValueError, ZeroDivisionError):
            return None
    return value / 100 if percent else value


def _num_close(a: Fraction, b: Fraction) -> bool:
    if a == b:
        return True
    try:
        return math.isclose(float(a), float(b), rel_tol=REL_TOL, abs_tol=1e-12)
    except OverflowError:
        return False


def _split_parts(s: str) -> list[str]:
    """Split on commas outside any brace/paren/bracket nesting."""
    parts: list[str] = []
    depth = 0
    cur: list[str] = []
    for ch in s:
        if ch in "{([":
            depth += 1
        elif ch in "})]":
            depth = max(0, depth - 1)
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur).strip())
    return [p for p in parts if p]


def answers_equal(pred: str, gold: str) -> bool:
    """Equivalence ladder: exact normalized, numeric within rel tol, then
    multiset comparison of comma-separated parts (each part recursively)."""
    na, nb = _norm_answer(pred), _norm_answer(gold)
    if na == nb:
        return True
    va, vb = _parse_number(na), _parse_number(nb)
    if va is not None and vb is not None:
        return _num_close(va, vb)
    pa, pb = _split_parts(na), _split_parts(nb)
    if len(pa) > 1 and len(pa) == len(pb):
        return _multiset_match(pa, pb)
    return False


def _multiset_match(pa: list[str], pb: list[str]) -> bool:
    used = [False] * len(pb)

    def backtrack(i: int) -> bool:
        if i == len(pa):
            return True
        for j in range(len(pb)):
            if not used[j] and answers_equal(pa[i], pb[j]):
                used[j] = True
                if backtrack(i + 1):
                    return True
                used[j] = False
        return False

    return backtrack(0)


def match_answer(predicted: str, gold: str) -> bool:
    """True iff the response's final answer is equivalent to the gold answer."""
    if not gold:
        raise ValueError("gold answer is required for matching")
    candidate = extract_final_answer(predicted)
    if candidate is None:
        return False
    return answers_equal(candidate, gold)


# --- pass-rate computation and selection filters ---


def pass_rate(rec: Record, k: int, mode: str, client: ModelClient) -> PassRateResult:
    """Sample k solutions under the mode's role and count answer matches."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if mode not in MODE_ROLES:
        raise ValueError(f"mode must be one of {sorted(MODE_ROLES)}, got {mode!r}")
    if not rec.answer:
        raise ValueError(f"record {rec.id!r} has no gold answer; selection needs one")
    role = MODE_ROLES[mode]
    req = request_for_role(role, (("user", solver_prompt(rec.question)),), n_samples=k)
    texts = client.complete(req)
    correct = sum(1 for t in texts if match_answer(t, rec.answer))
    stage = 1 if mode == "direct" else 2
    return PassRateResult(rec.id, k, correct, correct / k, stage)


def _run_selection(
    records: Iterable[Record],
    client: ModelClient,
    *,
    k: int,
    mode: str,
    keep_if: Callable[[PassRateResult], bool],
    criterion: str,
    workers: int = 1,
) -> tuple[list[Record], StageManifest, list[PassRateResult]]:
    records = list(records)
    start = time.perf_counter()

    def score(rec: Record) -> PassRateResult:
        return pass_rate(rec, k, mode, client)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(score, records))
    else:
        results = [score(rec) for rec in records]

    kept = [
        replace(rec, pass_rate=res.pass_rate)
        for rec, res in zip(records, results)
        if keep_if(res)
    ]
    stage = 1 if mode == "direct" else 2
    manifest = StageManifest(
        stage=f"stage{stage}",
        params={"k": k, "mode": mode, "role": MODE_ROLES[mode], "criterion": criterion},
        input_count=len(records),
        output_count=len(kept),
        removed_count=len(records) - len(kept),
        duration_s=time.perf_counter() - start,
    ).validate()
    return kept, manifest, results


def stage1_filter(
    records: Iterable[Record], client: ModelClient, k: int = 4, workers: int = 1
) -> tuple[list[Record], StageManifest, list[PassRateResult]]:
    """Keep records the direct-mode solver never answers correctly in k tries."""
    return _run_selection(
        records,
        client,
        k=k,
        mode="direct",
        keep_if=lambda r: r.correct == 0,
        criterion=f"pass@{k} == 0",
        workers=workers,
    )


def stage2_filter(
    records: Iterable[Record], client: ModelClient, k: int = 5, workers: int = 1
) -> tuple[list[Record], StageManifest, list[PassRateResult]]:
    """Keep records the thinking-mode solver answers correctly at least once in k tries."""
    return _run_selection(
        records,
        client,
        k=k,
        mode="thinking",
        keep_if=lambda r: r.correct > 0,
        criterion=f"pass@{k} > 0",
        workers=workers,
    )
