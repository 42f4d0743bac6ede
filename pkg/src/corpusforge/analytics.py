"""Dataset accounting: data-efficiency scores, length statistics, label
distribution reports, and weighted min-max score aggregation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .records import Record

FRACTION_SUM_TOL = 1e-12
UNLABELED = "unlabeled"
DISTRIBUTION_AXES = ("domain", "difficulty", "source")


@dataclass(frozen=True)
class EfficiencyRecord:
    """Benchmark points gained per 1000 training samples."""

    dataset_name: str
    size: int
    s_base: float
    s_sft: float
    efficiency: float

    def formatted(self) -> str:
        # display rounding only; the stored value keeps full precision
        return f"{self.efficiency:+.3f}"


def data_efficiency(name: str, size: int, s_base: float, s_sft: float) -> EfficiencyRecord:
    """Efficiency = (s_sft - s_base) / size * 1000, i.e. points per 1000 samples."""
    if size <= 0:
        raise ValueError(f"dataset size must be positive, got {size}")
    eff = (s_sft - s_base) / size * 1000.0
    return EfficiencyRecord(name, size, s_base, s_sft, eff)


def read_efficiency_csv(path: str | Path) -> list[EfficiencyRecord]:
    """Rows of (name, size, s_base, s_sft); a header row is skipped if present."""
    out: list[EfficiencyRecord] = []
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if not row or not any(cell.strip() for cell in row):
                continue
            if len(row) < 4:
                raise ValueError(
                    f"expected 4 columns (name, size, s_base, s_sft), got {len(row)}: {row!r}"
                )
            name, size, s_base, s_sft = (cell.strip() for cell in row[:4])
            try:
                parsed_size = int(size)
            except ValueError:
                continue  # header row
            out.append(data_efficiency(name, parsed_size, float(s_base), float(s_sft)))
    return out


# --- length statistics ---

TOKENIZER_MODES = ("question", "solution", "question+solution")


def _token_length(rec: Record, mode: str) -> int:
    if mode == "question":
        text = rec.question
    elif mode == "solution":
        text = rec.solution or ""
    else:
        text = (rec.question or "") + " " + (rec.solution or "")
    return len(text.split())


def length_stats(
    records: Iterable[Record],
    tokenizer_mode: str = "question+solution",
    bin_edges: list[float] | None = None,
    n_bins: int = 10,
) -> dict[str, Any]:
    """Whitespace token-length summary plus a histogram, JSON-shaped."""
    if tokenizer_mode not in TOKENIZER_MODES:
        raise ValueError(f"tokenizer_mode must be one of {TOKENIZER_MODES}")
    lengths = [_token_length(rec, tokenizer_mode) for rec in records]
    if not lengths:
        return {"count": 0, "tokenizer_mode": tokenizer_mode}
    arr = np.asarray(lengths, dtype=np.float64)
    counts, edges = (
        np.histogram(arr, bins=bin_edges) if bin_edges else np.histogram(arr, bins=n_bins)
    )
    return {
        "count": len(lengths),
        "tokenizer_mode": tokenizer_mode,
        "min": float(arr.min()),
        "p25": float(np.percentile(arr, 25)),
        "median": float(np.percentile(arr, 50)),
        "p75": float(np.percentile(arr, 75)),
        "p95": float(np.percentile(arr, 95)),
        "max": float(arr.max()),
        "mean": float(arr.mean()),
        "histogram": {
            "bin_edges": [float(e) for e in edges],
            "counts": [int(c) for c in counts],
        },
    }


# --- label distributions ---


def distribution_report(records: Iterable[Record], axis: str) -> dict[str, dict[str, float]]:
    """Counts and fractions per label; missing labels fall into 'unlabeled'.

    Fractions sum to 1 within 1e-12 for non-empty input.
    """
    if axis not in DISTRIBUTION_AXES:
        raise ValueError(f"axis must be one of {DISTRIBUTION_AXES}, got {axis!r}")
    counts: dict[str, int] = {}
    total = 0
    for rec in records:
        value = getattr(rec, axis)
        label = UNLABELED if value in (None, "") else str(value)
        counts[label] = counts.get(label, 0) + 1
        total += 1
    if total == 0:
        return {}
    report = {
        label: {"count": n, "fraction": n / total} for label, n in sorted(counts.items())
    }
    assert abs(sum(v["fraction"] for v in report.values()) - 1.0) <= FRACTION_SUM_TOL
    return report


# --- weighted score aggregation ---


def aggregate_scores(
    records: Iterable[Record], weights: dict[str, float]
) -> tuple[list[Record], int]:
    """Min-max normalize each weighted metric over the population, then attach
    a weighted average as scores["aggregate"].

    Records missing any weighted metric are excluded (and counted). Weights are
    renormalized to sum to 1, so the result is invariant under positive
    rescaling. A metric constant across the population normalizes to 0.5.
    """
    if not weights:
        raise ValueError("need at least one weighted metric")
    for metric, w in weights.items():
        if w <= 0:
            raise ValueError(f"weight for {metric!r} must be positive, got {w}")
    records = list(records)
    eligible = [r for r in records if all(m in r.scores for m in weights)]
    excluded = len(records) - len(eligible)
    if not eligible:
        return [], excluded
    total_w = sum(weights.values())
    spans: dict[str, tuple[float, float]] = {}
    for metric in weights:
        vals = [r.scores[metric] for r in eligible]
        spans[metric] = (min(vals), max(vals))

    def norm(metric: str, value: float) -> float:
        lo, hi = spans[metric]
        if hi == lo:
            return 0.5
        return (value - lo) / (hi - lo)

    out = []
    for rec in eligible:
        agg = sum((w / total_w) * norm(m, rec.scores[m]) for m, w in weights.items())
        out.append(replace(rec, scores={**rec.scores, "aggregate": agg}))
    return out, excluded
