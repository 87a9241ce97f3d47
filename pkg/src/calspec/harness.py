"""Policy comparison, parameter sweeps and the cost-model speedup proxy."""

from __future__ import annotations

import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

from .calibration import CalibrationConfig, calibrate
from .core import RngStream, derive_seed
from .csd import DEFAULT_LAMBDA, DEFAULT_TAU, LOSSY_TAU, CorrectionMemory, CsdConfig, ScgConfig, csd_generate
from .models import LanguageModel
from .sd import RoundLog, RunMetrics, vanilla_generate

DEFAULT_C_DRAFT = 1 / 70
DEFAULT_GAMMA = 6
EVAL_TEMPERATURE = 0.0


@dataclass(frozen=True)
class CostModel:
    """Cost of one draft forward pass relative to one target forward pass."""

    c_draft: float = DEFAULT_C_DRAFT
    gamma: int = DEFAULT_GAMMA

    def __post_init__(self):
        if not self.c_draft > 0:
            raise ValueError(f"c_draft must be positive, got {self.c_draft}")


def estimate_speedup(metrics: RunMetrics, cost: CostModel) -> float:
    """Tokens per unit cost relative to vanilla decoding (one target call per token)."""
    if metrics.target_calls == 0:
        raise ValueError("no verification rounds recorded")
    return metrics.emitted_tokens / (metrics.target_calls * (1 + cost.gamma * cost.c_draft))


@dataclass(frozen=True)
class Policy:
    name: str
    config: CsdConfig | None  # None: vanilla autoregressive decoding

    @property
    def is_vanilla(self) -> bool:
        return self.config is None


POLICY_NAMES = ("vanilla", "sd", "csd", "ocm-only", "scg-only", "lossy")


def make_policy(name: str, tau: float | None = None) -> Policy:
    """Build a named policy; ``tau`` overrides the gate threshold where one applies."""
    if name == "vanilla":
        return Policy(name, None)
    if name == "sd":
        return Policy(name, CsdConfig.standard())
    if name == "csd":
        return Policy(name, CsdConfig.full(DEFAULT_TAU if tau is None else tau))
    if name == "ocm-only":
        return Policy(name, CsdConfig.ocm_only())
    if name == "scg-only":
        return Policy(name, CsdConfig.scg_only(DEFAULT_TAU if tau is None else tau))
    if name == "lossy":
        return Policy(name, CsdConfig.static_lossy(LOSSY_TAU if tau is None else tau))
    raise ValueError(f"unknown policy {name!r}; valid names: {', '.join(POLICY_NAMES)}")


@dataclass
class PolicyResult:
    policy: str
    seed: int
    metrics: RunMetrics
    memory: CorrectionMemory | None
    outputs: list[list[int]]
    rescued_pairs: Counter

    def row(self, cost: CostModel) -> dict:
        m = self.metrics
        vanilla = m.drafted == 0
        return {
            "policy": self.policy, "seed": self.seed,
            "drafted": m.drafted, "accepted": m.accepted, "rescued": m.rescued,
            "rejections": m.rejections, "target_calls": m.target_calls,
            "emitted_tokens": m.emitted_tokens,
            "acceptance_rate": None if vanilla else m.acceptance_rate,
            "mean_accepted_len": None if vanilla else m.mean_accepted_len,
            "speedup": 1.0 if vanilla else estimate_speedup(m, cost),
        }


class _Tally:
    """Round observer: counts rescued (draft, correction) pairs, forwards to a log."""

    def __init__(self, log: RoundLog | None):
        self.log = log
        self.rescued: Counter = Counter()

    def write(self, context_len, batch, outcome, emitted):
        for e in outcome.rejection_events:
            if e.rescued:
                self.rescued[(e.draft_tok, e.target_tok)] += 1
        if self.log is not None:
            self.log.write(context_len, batch, outcome, emitted)


def run_policy(draft: LanguageModel, target: LanguageModel, prompts: Sequence[Sequence[int]],
               policy: Policy, gamma: int = DEFAULT_GAMMA, temperature: float = EVAL_TEMPERATURE,
               seed: int = 0, max_tokens: int = 64, memory: CorrectionMemory | None = None,
               lam: int = DEFAULT_LAMBDA, eos_id: int | None = None,
               log_fh=None) -> PolicyResult:
    """Run one policy over all prompts, prompt ``k`` seeded by ``(seed, k)``.

    ``memory`` is copied, never mutated; the copy evolves online across the
    prompts in order and is returned with the result.
    """
    mem = memory.copy() if memory is not None else CorrectionMemory(lam)
    total = RunMetrics()
    outputs = []
    tally = _Tally(RoundLog(log_fh, policy.name) if log_fh is not None else None)
    start = time.perf_counter()
    for k, prompt in enumerate(prompts):
        rng = RngStream(derive_seed(seed, "prompt", k))
        if policy.is_vanilla:
            out, m = vanilla_generate(target, prompt, temperature, max_tokens, rng, eos_id)
        else:
            out, m = csd_generate(draft, target, prompt, gamma, temperature, max_tokens, rng,
                                  policy.config, mem, eos_id=eos_id, log=tally)
        total = total.merge(m)
        outputs.append(out)
    total.wall_time_s = time.perf_counter() - start
    return PolicyResult(policy.name, seed, total, None if policy.is_vanilla else mem, outputs,
                        tally.rescued)


def _run_job(args):
    return run_policy(*args[0], **args[1])


def compare_policies(draft: LanguageModel, target: LanguageModel, prompts,
                     policies: Sequence[Policy], gamma: int = DEFAULT_GAMMA,
                     temperature: float = EVAL_TEMPERATURE, seeds: Sequence[int] = (0,),
                     max_tokens: int = 64, memory: CorrectionMemory | None = None,
                     lam: int = DEFAULT_LAMBDA, eos_id: int | None = None,
                     workers: int = 1) -> list[PolicyResult]:
    """Every policy sees the same prompts, seeds and starting memory."""
    if not policies:
        raise ValueError("need at least one policy")
    jobs = [((draft, target, prompts, pol, gamma, temperature, seed, max_tokens, memory, lam,
              eos_id), {}) for seed in seeds for pol in policies]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(j) for j in jobs]


SWEEP_PARAMS = ("tau", "lam", "calibration_size")


@dataclass
class SweepPoint:
    param: str
    value: float
    result: PolicyResult


def sweep(param: str, values: Sequence, draft: LanguageModel, target: LanguageModel,
          prompts, base: Policy | None = None, gamma: int = DEFAULT_GAMMA,
          temperature: float = EVAL_TEMPERATURE, seed: int = 0, max_tokens: int = 64,
          memory: CorrectionMemory | None = None, lam: int = DEFAULT_LAMBDA,
          calibration_prompts=None,
          calibration: CalibrationConfig | None = None) -> list[SweepPoint]:
    """Vary one knob of ``base`` (full CSD by default), all else fixed.

    ``calibration_size`` values are prompt counts drawn from the front of
    ``calibration_prompts``; the memory is rebuilt for each value.
    """
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; valid: {', '.join(SWEEP_PARAMS)}")
    if not values:
        raise ValueError("sweep needs at least one value")
    base = base or make_policy("csd")
    if base.is_vanilla:
        raise ValueError("cannot sweep the vanilla policy")
    points = []
    for v in values:
        pol, mem, lam_v = base, memory, lam
        if param == "tau":
            pol = Policy(base.name, replace(base.config, scg=ScgConfig(float(v))))
        elif param == "lam":
            lam_v = int(v)
            mem = memory.copy(lam=lam_v) if memory is not None else None
        else:
            if calibration_prompts is None:
                raise ValueError("calibration_size sweep needs calibration_prompts")
            cal = calibration or CalibrationConfig(gamma=gamma, lam=lam, seed=seed)
            size = int(v)
            mem = (calibrate(draft, target, calibration_prompts[:size], cal) if size > 0
                   else CorrectionMemory(cal.lam, cal.capacity))
        res = run_policy(draft, target, prompts, pol, gamma, temperature, seed, max_tokens,
                         mem, lam_v)
        points.append(SweepPoint(param, v, res))
    return points


ROW_FIELDS = ("policy", "seed", "drafted", "accepted", "rescued", "rejections", "target_calls",
              "emitted_tokens", "acceptance_rate", "mean_accepted_len", "speedup")


def format_rows(rows: Sequence[dict], fields: Sequence[str] = ROW_FIELDS) -> str:
    def cell(v):
        if v is None:
            return "n/a"
        if isinstance(v, float):
            return f"{v:.6f}"
        return str(v)
    lines = ["\t".join(fields)]
    lines += ["\t".join(cell(r[f]) for f in fields) for r in rows]
    return "\n".join(lines) + "\n"
