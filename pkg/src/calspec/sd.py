"""Standard speculative decoding: draft, parallel target evaluation, rejection sampling.

RNG consumption is part of the contract so that runs can be replayed:

* drafting consumes one uniform per drafted token;
* verification consumes one uniform per examined position, then one more
  for the correction (residual) or bonus token.  Positions after a terminal
  rejection are never examined and consume nothing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import EngineInvariantError, RngStream, sample, softmax_with_temperature
from .models import LanguageModel

LOG_SCHEMA = "calspec.round/v1"


@dataclass(frozen=True)
class DraftBatch:
    tokens: tuple[int, ...]
    draft_dists: tuple[np.ndarray, ...]
    draft_logits: tuple[np.ndarray, ...]

    @property
    def gamma(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class TargetEval:
    """Target distributions at the session temperature plus raw logits.

    Both lists have ``gamma + 1`` entries; the last one is the bonus position.
    """

    target_dists: tuple[np.ndarray, ...]
    target_logits_T1: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class RejectionEvent:
    position: int
    draft_tok: int
    target_tok: int
    p_draft_T1: float
    p_star_T1: float
    logit_gap: float
    rescued: bool = False

    def to_json(self) -> dict:
        return {"position": self.position, "draft": self.draft_tok, "target": self.target_tok,
                "p_draft_t1": self.p_draft_T1, "p_star_t1": self.p_star_T1,
                "logit_gap": self.logit_gap, "rescued": self.rescued}


@dataclass(frozen=True)
class VerifyOutcome:
    accepted_len: int
    rescued_positions: tuple[int, ...]
    correction: int | None
    bonus: int | None
    emitted: tuple[int, ...]
    rejection_events: tuple[RejectionEvent, ...]
    examined: int

    def __post_init__(self):
        if (self.correction is None) == (self.bonus is None):
            raise EngineInvariantError("exactly one of correction/bonus must be set")


@dataclass
class RunMetrics:
    """Counters accumulated over verification rounds.

    ``drafted`` counts positions examined by the verifier, so trailing draft
    tokens after a terminal rejection are not part of the denominator.
    """

    drafted: int = 0
    accepted: int = 0
    rescued: int = 0
    rejections: int = 0
    target_calls: int = 0
    emitted_tokens: int = 0
    wall_time_s: float = field(default=0.0, compare=False)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.drafted if self.drafted else float("nan")

    @property
    def mean_accepted_len(self) -> float:
        return self.accepted / self.target_calls if self.target_calls else float("nan")

    @property
    def tokens_per_call(self) -> float:
        return self.emitted_tokens / self.target_calls if self.target_calls else float("nan")

    def add_round(self, outcome: VerifyOutcome, emitted: int) -> None:
        self.drafted += outcome.examined
        self.accepted += outcome.accepted_len
        self.rescued += len(outcome.rescued_positions)
        self.rejections += len(outcome.rejection_events)
        self.target_calls += 1
        self.emitted_tokens += emitted

    def merge(self, other: "RunMetrics") -> "RunMetrics":
        return RunMetrics(self.drafted + other.drafted, self.accepted + other.accepted,
                          self.rescued + other.rescued, self.rejections + other.rejections,
                          self.target_calls + other.target_calls,
                          self.emitted_tokens + other.emitted_tokens,
                          self.wall_time_s + other.wall_time_s)

    def as_dict(self) -> dict:
        return {"drafted": self.drafted, "accepted": self.accepted, "rescued": self.rescued,
                "rejections": self.rejections, "target_calls": self.target_calls,
                "emitted_tokens": self.emitted_tokens,
                "acceptance_rate": self.acceptance_rate,
                "mean_accepted_len": self.mean_accepted_len}


def draft_propose(draft: LanguageModel, context: Sequence[int], gamma: int,
                  temperature: float, rng: RngStream) -> DraftBatch:
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    ctx = list(context)
    tokens, dists, logits = [], [], []
    for _ in range(gamma):
        z = draft.logits(ctx)
        q = softmax_with_temperature(z, temperature)
        tok = sample(q, rng)
        tokens.append(tok)
        dists.append(q)
        logits.append(z)
        ctx.append(tok)
    return DraftBatch(tuple(tokens), tuple(dists), tuple(logits))


def target_evaluate(target: LanguageModel, context: Sequence[int], batch: DraftBatch,
                    temperature: float) -> TargetEval:
    """Score every drafted prefix; stands in for one batched forward pass."""
    ctx = list(context) + list(batch.tokens)
    base = len(context)
    raw = tuple(target.logits(ctx[:base + i]) for i in range(batch.gamma + 1))
    dists = tuple(softmax_with_temperature(z, temperature) for z in raw)
    return TargetEval(dists, raw)


def acceptance_prob(p_tok: float, q_tok: float) -> float:
    if q_tok <= 0:
        raise EngineInvariantError(
            f"drafted token has draft probability {q_tok!r}; it could not have been sampled")
    return min(1.0, p_tok / q_tok)


def residual_dist(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``norm(max(0, p - q))``; raises if there is no positive residual mass."""
    r = np.maximum(0.0, np.asarray(p) - np.asarray(q))
    total = r.sum()
    if not total > 0:
        raise EngineInvariantError("residual distribution is empty (p <= q everywhere)")
    return r / total


def softmax_T1_at(logits: np.ndarray, *tokens: int) -> list[float]:
    z = np.asarray(logits)
    zmax = z.max()
    log_norm = zmax + np.log(np.exp(z - zmax).sum())
    return [float(np.exp(z[t] - log_norm)) for t in tokens]


def make_event(ev: TargetEval, position: int, draft_tok: int, target_tok: int,
               rescued: bool = False) -> RejectionEvent:
    z = ev.target_logits_T1[position]
    p_d, p_s = softmax_T1_at(z, draft_tok, target_tok)
    return RejectionEvent(position, draft_tok, target_tok, p_d, p_s,
                          float(z[draft_tok] - z[target_tok]), rescued)


def sd_verify_round(batch: DraftBatch, ev: TargetEval, temperature: float,
                    rng: RngStream) -> VerifyOutcome:
    gamma = batch.gamma
    for i in range(gamma):
        x = batch.tokens[i]
        p, q = ev.target_dists[i], batch.draft_dists[i]
        r = rng.uniform()
        if r <= acceptance_prob(p[x], q[x]):
            continue
        t_star = sample(residual_dist(p, q), rng)
        if t_star == x:
            raise EngineInvariantError(f"correction token equals rejected draft token {x}")
        return VerifyOutcome(i, (), t_star, None, batch.tokens[:i] + (t_star,),
                             (make_event(ev, i, x, t_star),), i + 1)
    bonus = sample(ev.target_dists[gamma], rng)
    return VerifyOutcome(gamma, (), None, bonus, batch.tokens + (bonus,), (), gamma)


Verifier = Callable[[DraftBatch, TargetEval, float, RngStream], VerifyOutcome]


class RoundLog:
    """JSON-lines writer, one record per verification round.

    Record keys: ``schema``, ``round``, ``context_len``, ``drafted``,
    ``accepted_len``, ``rescued``, ``correction``, ``bonus``, ``emitted``,
    ``rejections`` (list of objects with ``position``, ``draft``, ``target``,
    ``p_draft_t1``, ``p_star_t1``, ``logit_gap``, ``rescued``).
    """

    def __init__(self, fh, policy: str | None = None):
        self.fh = fh
        self.policy = policy
        self.rounds = 0

    def write(self, context_len: int, batch: DraftBatch, outcome: VerifyOutcome,
              emitted: Sequence[int]) -> None:
        rec = {"schema": LOG_SCHEMA, "round": self.rounds}
        if self.policy is not None:
            rec["policy"] = self.policy
        rec.update({
            "context_len": context_len,
            "drafted": list(batch.tokens),
            "accepted_len": outcome.accepted_len,
            "rescued": list(outcome.rescued_positions),
            "correction": outcome.correction,
            "bonus": outcome.bonus,
            "emitted": list(emitted),
            "rejections": [e.to_json() for e in outcome.rejection_events],
        })
        self.fh.write(json.dumps(rec, sort_keys=False) + "\n")
        self.rounds += 1


def speculative_generate(draft: LanguageModel, target: LanguageModel, prompt: Sequence[int],
                         gamma: int, temperature: float, max_tokens: int, rng: RngStream,
                         verify: Verifier = sd_verify_round, eos_id: int | None = None,
                         log: RoundLog | None = None) -> tuple[list[int], RunMetrics]:
    """Propose/evaluate/verify until ``max_tokens`` are generated or EOS appears."""
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    context = list(prompt)
    out: list[int] = []
    metrics = RunMetrics()
    while len(out) < max_tokens:
        batch = draft_propose(draft, context, gamma, temperature, rng)
        ev = target_evaluate(target, context, batch, temperature)
        outcome = verify(batch, ev, temperature, rng)
        emitted = list(outcome.emitted[:max_tokens - len(out)])
        stop = False
        if eos_id is not None and eos_id in emitted:
            emitted = emitted[:emitted.index(eos_id) + 1]
            stop = True
        metrics.add_round(outcome, len(emitted))
        if log is not None:
            log.write(len(context), batch, outcome, emitted)
        context.extend(emitted)
        out.extend(emitted)
        if stop:
            break
    return out, metrics


def sd_generate(draft: LanguageModel, target: LanguageModel, prompt: Sequence[int], gamma: int,
                temperature: float, max_tokens: int, rng: RngStream, eos_id: int | None = None,
                log: RoundLog | None = None) -> tuple[list[int], RunMetrics]:
    return speculative_generate(draft, target, prompt, gamma, temperature, max_tokens, rng,
                                sd_verify_round, eos_id, log)


def vanilla_generate(target: LanguageModel, prompt: Sequence[int], temperature: float,
                     max_tokens: int, rng: RngStream,
                     eos_id: int | None = None) -> tuple[list[int], RunMetrics]:
    """Plain autoregressive sampling from the target: one target call per token."""
    context = list(prompt)
    out: list[int] = []
    metrics = RunMetrics()
    while len(out) < max_tokens:
        tok = sample(softmax_with_temperature(target.logits(context), temperature), rng)
        out.append(tok)
        context.append(tok)
        metrics.target_calls += 1
        metrics.emitted_tokens += 1
        if tok == eos_id:
            break
    return out, metrics
