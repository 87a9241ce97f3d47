"""Speculative decoding with calibrated verification at desk scale."""

__version__ = "0.1.0"

from .core import (EngineInvariantError, RngStream, Vocabulary, derive_seed, sample,
                   softmax_with_temperature)
from .models import (LanguageModel, NGramModel, PerturbedDraft, TableModel, load_model,
                     make_perturbed_draft, train_ngram)
from .sd import (DraftBatch, RunMetrics, TargetEval, VerifyOutcome, acceptance_prob,
                 draft_propose, residual_dist, sd_generate, sd_verify_round, target_evaluate)
from .csd import (CorrectionMemory, CsdConfig, ScgConfig, csd_generate, csd_verify_round,
                  memory_load, memory_save, ocm_should_propose, ocm_update, scg_gate)
from .calibration import CalibrationConfig, calibrate, calibrate_incremental
from .analysis import (PatternStats, RejectionRecord, analyze_log, collect, head_coverage,
                       ratio_histogram)
from .harness import CostModel, compare_policies, estimate_speedup, make_policy, sweep

__all__ = [
    "EngineInvariantError",
    "RngStream",
    "Vocabulary",
    "derive_seed",
    "sample",
    "softmax_with_temperature",
    "LanguageModel",
    "NGramModel",
    "PerturbedDraft",
    "TableModel",
    "load_model",
    "make_perturbed_draft",
    "train_ngram",
    "DraftBatch",
    "RunMetrics",
    "TargetEval",
    "VerifyOutcome",
    "acceptance_prob",
    "draft_propose",
    "residual_dist",
    "sd_generate",
    "sd_verify_round",
    "target_evaluate",
    "CorrectionMemory",
    "CsdConfig",
    "ScgConfig",
    "csd_generate",
    "csd_verify_round",
    "memory_load",
    "memory_save",
    "ocm_should_propose",
    "ocm_update",
    "scg_gate",
    "CalibrationConfig",
    "calibrate",
    "calibrate_incremental",
    "PatternStats",
    "RejectionRecord",
    "analyze_log",
    "collect",
    "head_coverage",
    "ratio_histogram",
    "CostModel",
    "compare_policies",
    "estimate_speedup",
    "make_policy",
    "sweep",
]
