"""Calibrated verification: correction memory plus logit-space gating.

On a rejection at draft position ``i`` the verifier still samples the
residual correction ``t*``.  The rejected draft token is then rescued (kept,
and verification continues at ``i + 1``) when

* the correction memory has already seen the divergence ``(draft, t*)`` at
  least ``lam`` times, counted *before* this event is recorded, and
* the target's raw logits satisfy ``z(draft) - z(t*) >= ln(tau)``.

Every rejection event is recorded in the memory, rescued or not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import EngineInvariantError, RngStream, sample
from .sd import (DraftBatch, RoundLog, RunMetrics, TargetEval, VerifyOutcome, acceptance_prob,
                 make_event, residual_dist, speculative_generate)
from .models import LanguageModel

MEMORY_MAGIC = "#csd-ocm"

DEFAULT_LAMBDA = 6
DEFAULT_TAU = 0.01
LOSSY_TAU = 0.6


class MemoryFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


class CorrectionMemory:
    """Counts of ordered (draft token, target token) divergences.

    With ``capacity`` set, inserting a new pair into a full table first evicts
    the pair with the smallest count (ties: smallest key).
    """

    def __init__(self, lam: int = DEFAULT_LAMBDA, capacity: int | None = None,
                 counts: dict[tuple[int, int], int] | None = None):
        if not isinstance(lam, (int, np.integer)) or lam < 1:
            raise ValueError(f"lambda must be a positive integer, got {lam!r}")
        if capacity is not None and capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity!r}")
        self.lam = int(lam)
        self.capacity = capacity
        self.table: dict[tuple[int, int], int] = {}
        for key, n in (counts or {}).items():
            if n < 0:
                raise ValueError(f"negative count for pair {key}")
            self.table[(int(key[0]), int(key[1]))] = int(n)
        if capacity is not None:
            while len(self.table) > capacity:
                self._evict()

    def count(self, draft_tok: int, target_tok: int) -> int:
        return self.table.get((draft_tok, target_tok), 0)

    def should_propose(self, draft_tok: int, target_tok: int) -> bool:
        return self.count(draft_tok, target_tok) >= self.lam

    def _evict(self) -> None:
        victim = min(self.table, key=lambda k: (self.table[k], k))
        del self.table[victim]

    def update(self, draft_tok: int, target_tok: int, by: int = 1) -> None:
        key = (int(draft_tok), int(target_tok))
        if key not in self.table and self.capacity is not None and len(self.table) >= self.capacity:
            self._evict()
        self.table[key] = self.table.get(key, 0) + by

    @property
    def total(self) -> int:
        return sum(self.table.values())

    def __len__(self) -> int:
        return len(self.table)

    def items(self) -> list[tuple[tuple[int, int], int]]:
        """Pairs ordered by descending count, then ascending key."""
        return sorted(self.table.items(), key=lambda kv: (-kv[1], kv[0]))

    def top(self, k: int) -> list[tuple[int, int]]:
        return [key for key, _ in self.items()[:k]]

    def copy(self, lam: int | None = None) -> "CorrectionMemory":
        return CorrectionMemory(self.lam if lam is None else lam, self.capacity, dict(self.table))

    def merge(self, other: "CorrectionMemory") -> "CorrectionMemory":
        merged = self.copy()
        for key, n in other.table.items():
            merged.table[key] = merged.table.get(key, 0) + n
        if merged.capacity is not None:
            while len(merged.table) > merged.capacity:
                merged._evict()
        return merged

    def __eq__(self, other):
        return (isinstance(other, CorrectionMemory) and self.lam == other.lam
                and self.capacity == other.capacity and self.table == other.table)

    def __repr__(self):
        return f"CorrectionMemory(lam={self.lam}, capacity={self.capacity}, pairs={len(self)})"

    def dumps(self) -> str:
        cap = "none" if self.capacity is None else str(self.capacity)
        lines = [f"{MEMORY_MAGIC} v1 lambda={self.lam} capacity={cap}"]
        lines += [f"{d}\t{t}\t{n}" for (d, t), n in self.items()]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_bytes(self.dumps().encode("utf-8"))

    @classmethod
    def loads(cls, text: str, path="<memory>") -> "CorrectionMemory":
        lines = text.splitlines()
        if not lines:
            raise MemoryFormatError(path, 1, "empty memory file")
        parts = lines[0].split()
        if len(parts) < 2 or parts[0] != MEMORY_MAGIC or parts[1] != "v1":
            raise MemoryFormatError(path, 1, f"expected header '{MEMORY_MAGIC} v1 ...'")
        fields = dict(p.partition("=")[::2] for p in parts[2:])
        if "lambda" not in fields:
            raise MemoryFormatError(path, 1, "header is missing lambda=")
        try:
            lam = int(fields["lambda"])
            cap_text = fields.get("capacity", "none")
            capacity = None if cap_text == "none" else int(cap_text)
        except ValueError:
            raise MemoryFormatError(path, 1, "lambda/capacity must be integers") from None
        if lam < 1 or (capacity is not None and capacity < 1):
            raise MemoryFormatError(path, 1, "lambda and capacity must be positive")
        counts: dict[tuple[int, int], int] = {}
        for lineno, line in enumerate(lines[1:], start=2):
            cols = line.split("\t")
            if len(cols) != 3:
                raise MemoryFormatError(path, lineno, "expected <draft>\\t<target>\\t<count>")
            try:
                d, t, n = (int(c) for c in cols)
            except ValueError:
                raise MemoryFormatError(path, lineno, "fields must be integers") from None
            if d < 0 or t < 0:
                raise MemoryFormatError(path, lineno, "token ids must be non-negative")
            if n < 0:
                raise MemoryFormatError(path, lineno, f"negative count {n}")
            if (d, t) in counts:
                raise MemoryFormatError(path, lineno, f"duplicate pair ({d}, {t})")
            counts[(d, t)] = n
        if capacity is not None and len(counts) > capacity:
            raise MemoryFormatError(path, 1, f"{len(counts)} pairs exceed capacity {capacity}")
        return cls(lam, capacity, counts)

    @classmethod
    def load(cls, path) -> "CorrectionMemory":
        return cls.loads(Path(path).read_text(encoding="utf-8"), path)


def memory_save(memory: CorrectionMemory, path) -> None:
    memory.save(path)


def memory_load(path) -> CorrectionMemory:
    return CorrectionMemory.load(path)


def ocm_should_propose(memory: CorrectionMemory, draft_tok: int, target_tok: int) -> bool:
    return memory.should_propose(draft_tok, target_tok)


def ocm_update(memory: CorrectionMemory, draft_tok: int, target_tok: int) -> None:
    memory.update(draft_tok, target_tok)


@dataclass(frozen=True)
class ScgConfig:
    tau: float = DEFAULT_TAU
    log_tau: float = field(init=False)

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        object.__setattr__(self, "log_tau", math.log(self.tau))


def scg_gate(target_logits_T1: np.ndarray, draft_tok: int, target_star_tok: int,
             scg: ScgConfig) -> bool:
    # Raw logits only; the session temperature never enters.
    return float(target_logits_T1[draft_tok] - target_logits_T1[target_star_tok]) >= scg.log_tau


@dataclass(frozen=True)
class CsdConfig:
    """Which rescue gates are active.

    A disabled gate counts as passed, so a single enabled gate decides alone.
    With both disabled there is no rescue path at all (standard verification,
    though rejections are still recorded in the memory).
    """

    ocm_enabled: bool = True
    scg_enabled: bool = True
    scg: ScgConfig = ScgConfig()
    max_rescues: int | None = None

    @property
    def rescue_enabled(self) -> bool:
        return self.ocm_enabled or self.scg_enabled

    @classmethod
    def full(cls, tau: float = DEFAULT_TAU) -> "CsdConfig":
        return cls(True, True, ScgConfig(tau))

    @classmethod
    def standard(cls) -> "CsdConfig":
        return cls(False, False)

    @classmethod
    def ocm_only(cls) -> "CsdConfig":
        return cls(True, False)

    @classmethod
    def scg_only(cls, tau: float = DEFAULT_TAU) -> "CsdConfig":
        return cls(False, True, ScgConfig(tau))

    @classmethod
    def static_lossy(cls, tau: float = LOSSY_TAU) -> "CsdConfig":
        return cls(False, True, ScgConfig(tau))


def csd_verify_round(batch: DraftBatch, ev: TargetEval, temperature: float, rng: RngStream,
                     cfg: CsdConfig, memory: CorrectionMemory | None) -> VerifyOutcome:
    if cfg.ocm_enabled and memory is None:
        raise ValueError("the correction-memory gate needs a memory")
    gamma = batch.gamma
    n = 0
    rescued: list[int] = []
    events = []
    for i in range(gamma):
        x = batch.tokens[i]
        p, q = ev.target_dists[i], batch.draft_dists[i]
        r = rng.uniform()
        alpha = acceptance_prob(p[x], q[x])
        if r <= alpha:
            n += 1
            continue
        t_star = sample(residual_dist(p, q), rng)
        if t_star == x:
            raise EngineInvariantError(f"correction token equals rejected draft token {x}")
        is_freq = memory.should_propose(x, t_star) if cfg.ocm_enabled else True
        is_safe = scg_gate(ev.target_logits_T1[i], x, t_star, cfg.scg) if cfg.scg_enabled else True
        if memory is not None:
            memory.update(x, t_star)
        ok = cfg.rescue_enabled and is_freq and is_safe
        if ok and cfg.max_rescues is not None and len(rescued) >= cfg.max_rescues:
            ok = False
        events.append(make_event(ev, i, x, t_star, rescued=ok))
        if ok:
            n += 1
            rescued.append(i)
            continue
        return VerifyOutcome(n, tuple(rescued), t_star, None, batch.tokens[:n] + (t_star,),
                             tuple(events), i + 1)
    t = sample(ev.target_dists[gamma], rng)
    return VerifyOutcome(n, tuple(rescued), None, t, batch.tokens + (t,), tuple(events), gamma)


def csd_generate(draft: LanguageModel, target: LanguageModel, prompt: Sequence[int], gamma: int,
                 temperature: float, max_tokens: int, rng: RngStream, cfg: CsdConfig,
                 memory: CorrectionMemory | None, eos_id: int | None = None,
                 log: RoundLog | None = None) -> tuple[list[int], RunMetrics]:
    """Generation loop with calibrated verification; ``memory`` is updated in place."""

    def verify(batch, ev, temperature, rng):
        return csd_verify_round(batch, ev, temperature, rng, cfg, memory)

    return speculative_generate(draft, target, prompt, gamma, temperature, max_tokens, rng,
                                verify, eos_id, log)


def merge_memories(memories: Iterable[CorrectionMemory]) -> CorrectionMemory:
    memories = list(memories)
    if not memories:
        raise ValueError("nothing to merge")
    out = memories[0].copy()
    for m in memories[1:]:
        out = out.merge(m)
    return out
