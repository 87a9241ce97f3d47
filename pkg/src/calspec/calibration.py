"""Offline prior calibration of the correction memory.

Standard speculative decoding (no rescues) is run over a prompt corpus and
every rejection ``(draft token, correction token)`` is counted.  Models are
only read.  Each prompt gets its own RNG stream derived from the base seed and
the prompt's global index, so a corpus can be calibrated in pieces or in
parallel with the same result.
"""

from __future__ import annotations

import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .core import RngStream, derive_seed
from .csd import DEFAULT_LAMBDA, CorrectionMemory, CsdConfig, csd_generate, merge_memories
from .models import LanguageModel


CALIBRATION_TEMPERATURE = 0.6
DEFAULT_MAX_TOKENS_PER_PROMPT = 64


@dataclass(frozen=True)
class CalibrationConfig:
    gamma: int = 6
    temperature: float = CALIBRATION_TEMPERATURE
    max_tokens_per_prompt: int = DEFAULT_MAX_TOKENS_PER_PROMPT
    seed: int = 0
    lam: int = DEFAULT_LAMBDA
    capacity: int | None = None
    eos_id: int | None = None


def prompt_seed(seed: int, index: int) -> int:
    return derive_seed(seed, "calibrate", index)


def _calibrate_range(draft, target, prompts, start, cfg: CalibrationConfig,
                     memory: CorrectionMemory, progress: bool = False) -> CorrectionMemory:
    std = CsdConfig.standard()
    for k, prompt in enumerate(prompts):
        rng = RngStream(prompt_seed(cfg.seed, start + k))
        csd_generate(draft, target, prompt, cfg.gamma, cfg.temperature,
                     cfg.max_tokens_per_prompt, rng, std, memory, eos_id=cfg.eos_id)
        if progress and (k + 1) % 50 == 0:
            print(f"calibrate: {k + 1}/{len(prompts)} prompts, {memory.total} rejections",
                  file=sys.stderr)
    return memory


def _worker(args):
    draft, target, prompts, start, cfg = args
    return _calibrate_range(draft, target, prompts, start, cfg,
                            CorrectionMemory(cfg.lam, None))


def calibrate(draft: LanguageModel, target: LanguageModel, corpus: Sequence[Sequence[int]],
              cfg: CalibrationConfig = CalibrationConfig(), workers: int = 1,
              progress: bool = False) -> CorrectionMemory:
    """Build a fresh memory from ``corpus`` (a list of prompts)."""
    if not corpus:
        raise ValueError("calibration corpus is empty")
    return calibrate_incremental(CorrectionMemory(cfg.lam, cfg.capacity), draft, target, corpus,
                                 cfg, start_index=0, workers=workers, progress=progress)


def calibrate_incremental(memory: CorrectionMemory, draft: LanguageModel,
                          target: LanguageModel, prompts: Sequence[Sequence[int]],
                          cfg: CalibrationConfig = CalibrationConfig(), start_index: int = 0,
                          workers: int = 1, progress: bool = False) -> CorrectionMemory:
    """Add counts for ``prompts`` onto ``memory`` (in place) and return it.

    ``start_index`` is the global index of ``prompts[0]``; pass the number of
    prompts already calibrated to reproduce a one-shot run exactly.
    """
    if memory.lam != cfg.lam:
        raise ValueError(f"memory lambda {memory.lam} does not match config lambda {cfg.lam}")
    prompts = [list(p) for p in prompts]
    if not prompts:
        return memory
    if workers <= 1 or len(prompts) < 2:
        return _calibrate_range(draft, target, prompts, start_index, cfg, memory, progress)
    # Rejection counts of one prompt do not depend on any other prompt, so
    # per-worker tables can be summed.
    chunk = -(-len(prompts) // workers)
    jobs = [(draft, target, prompts[s:s + chunk], start_index + s, cfg)
            for s in range(0, len(prompts), chunk)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_worker, jobs))
    merged = merge_memories([memory] + parts)
    memory.table = merged.table
    return memory
