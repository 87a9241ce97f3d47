"""Rejection-pattern statistics: pair frequencies and probability-ratio spectra.

Ratios are ``p_target(draft token) / p_target(correction token)`` under the
target at temperature 1 and are kept as log10 values.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .sd import LOG_SCHEMA

Pair = tuple[int, int]


class LogFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass(frozen=True)
class RejectionRecord:
    draft_tok: int
    target_tok: int
    p_draft_T1: float
    p_star_T1: float
    round: int = 0
    position: int = 0

    def __post_init__(self):
        if not self.p_star_T1 > 0:
            raise ValueError("p_star_T1 must be positive")

    @property
    def log10_ratio(self) -> float:
        if self.p_draft_T1 <= 0:
            return -math.inf
        return math.log10(self.p_draft_T1) - math.log10(self.p_star_T1)


@dataclass
class PatternStats:
    counts: dict[Pair, int] = field(default_factory=dict)
    samples: dict[Pair, list[float]] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def n_patterns(self) -> int:
        return len(self.counts)

    def ranked(self) -> list[tuple[Pair, int]]:
        return sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0]))

    def merge(self, other: "PatternStats") -> "PatternStats":
        counts = dict(self.counts)
        samples = {k: list(v) for k, v in self.samples.items()}
        for k, n in other.counts.items():
            counts[k] = counts.get(k, 0) + n
            samples.setdefault(k, []).extend(other.samples.get(k, []))
        for v in samples.values():
            v.sort()
        return PatternStats(counts, samples)


def collect(records: Iterable[RejectionRecord]) -> PatternStats:
    counts: dict[Pair, int] = {}
    samples: dict[Pair, list[float]] = {}
    for rec in records:
        key = (rec.draft_tok, rec.target_tok)
        counts[key] = counts.get(key, 0) + 1
        samples.setdefault(key, []).append(rec.log10_ratio)
    # Sorted samples make the result independent of stream order.
    for v in samples.values():
        v.sort()
    return PatternStats(counts, samples)


def head_size(n_patterns: int, head_fraction: float) -> int:
    # The epsilon keeps products such as 0.2 * 15 = 3.0000000000000004 at 3.
    return max(1, math.ceil(head_fraction * n_patterns - 1e-9))


def head_coverage(stats: PatternStats, head_fraction: float) -> float:
    """Share of all rejections covered by the most frequent patterns."""
    if not 0 < head_fraction <= 1:
        raise ValueError(f"head_fraction must be in (0, 1], got {head_fraction}")
    if not stats.counts:
        raise ValueError("no rejection patterns collected")
    ranked = stats.ranked()
    k = head_size(len(ranked), head_fraction)
    return sum(n for _, n in ranked[:k]) / stats.total


@dataclass(frozen=True)
class Histogram:
    edges: tuple[float, ...]
    counts: tuple[int, ...]
    underflow: int
    overflow: int


def ratio_histogram(stats: PatternStats, pair: Pair, bin_edges: Sequence[float]) -> Histogram:
    if pair not in stats.counts:
        raise KeyError(f"pair {pair} not present in the statistics")
    edges = [float(e) for e in bin_edges]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bin edges must be strictly increasing with at least 2 values")
    counts = [0] * (len(edges) - 1)
    under = over = 0
    for v in stats.samples[pair]:
        if v < edges[0]:
            under += 1
        elif v >= edges[-1]:
            over += 1
        else:
            counts[bisect.bisect_right(edges, v) - 1] += 1
    return Histogram(tuple(edges), tuple(counts), under, over)


_EVENT_KEYS = ("position", "draft", "target", "p_draft_t1", "p_star_t1")


def read_log(path) -> Iterable[RejectionRecord]:
    """Yield rejection records from a JSON-lines round log."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogFormatError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or rec.get("schema") != LOG_SCHEMA:
                raise LogFormatError(path, lineno, f"expected schema {LOG_SCHEMA!r}")
            events = rec.get("rejections")
            if not isinstance(events, list) or not isinstance(rec.get("round"), int):
                raise LogFormatError(path, lineno, "missing 'round' or 'rejections'")
            for ev in events:
                if not isinstance(ev, dict) or any(k not in ev for k in _EVENT_KEYS):
                    raise LogFormatError(path, lineno, "rejection event is missing fields")
                try:
                    yield RejectionRecord(int(ev["draft"]), int(ev["target"]),
                                          float(ev["p_draft_t1"]), float(ev["p_star_t1"]),
                                          rec["round"], int(ev["position"]))
                except (TypeError, ValueError) as exc:
                    raise LogFormatError(path, lineno, f"bad rejection event: {exc}") from None


def analyze_log(event_log_path) -> PatternStats:
    return collect(read_log(event_log_path))


def records_from_events(events, round_index: int = 0) -> list[RejectionRecord]:
    return [RejectionRecord(e.draft_tok, e.target_tok, e.p_draft_T1, e.p_star_T1,
                            round_index, e.position) for e in events]


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def patterns_table(stats: PatternStats, vocab=None) -> str:
    lines = ["draft\ttarget\tcount\tshare\tcumulative_share"]
    total = stats.total
    cum = 0
    for (d, t), n in stats.ranked():
        cum += n
        dn, tn = (vocab.symbol(d), vocab.symbol(t)) if vocab is not None else (d, t)
        lines.append(f"{dn}\t{tn}\t{n}\t{_fmt(n / total)}\t{_fmt(cum / total)}")
    return "\n".join(lines) + "\n"


def coverage_table(stats: PatternStats, fractions: Sequence[float]) -> str:
    lines = ["head_fraction\thead_patterns\tcoverage"]
    for f in fractions:
        if stats.counts:
            lines.append(f"{f:g}\t{head_size(stats.n_patterns, f)}\t{_fmt(head_coverage(stats, f))}")
    return "\n".join(lines) + "\n"


def histogram_table(stats: PatternStats, pairs: Sequence[Pair], bin_edges: Sequence[float],
                    vocab=None) -> str:
    edges = [float(e) for e in bin_edges]
    labels = ([f"<{edges[0]:g}"] + [f"[{a:g},{b:g})" for a, b in zip(edges, edges[1:])]
              + [f">={edges[-1]:g}"])
    lines = ["draft\ttarget\t" + "\t".join(labels)]
    for pair in pairs:
        h = ratio_histogram(stats, pair, edges)
        d, t = (vocab.symbol(pair[0]), vocab.symbol(pair[1])) if vocab is not None else pair
        row = [h.underflow, *h.counts, h.overflow]
        lines.append(f"{d}\t{t}\t" + "\t".join(map(str, row)))
    return "\n".join(lines) + "\n"


def write_report(stats: PatternStats, out_dir, head_fraction: float = 0.2,
                 bin_edges: Sequence[float] = (-10, -8, -6, -4, -2, 0), top: int = 10,
                 vocab=None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "patterns.tsv", out / "coverage.tsv", out / "ratios.tsv"]
    paths[0].write_text(patterns_table(stats, vocab), encoding="utf-8")
    fractions = sorted({head_fraction, 0.1, 0.2, 0.5, 1.0})
    paths[1].write_text(coverage_table(stats, fractions), encoding="utf-8")
    top_pairs = [k for k, _ in stats.ranked()[:top]]
    paths[2].write_text(histogram_table(stats, top_pairs, bin_edges, vocab), encoding="utf-8")
    return paths
