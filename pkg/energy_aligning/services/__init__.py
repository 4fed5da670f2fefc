"""Service layer for energy aligning runs."""

from __future__ import annotations

from .rehearsal import RehearsalBuffer, rehearsal_quotas, rehearsal_update
from .sampling import EaConfig, EaSampleSet, build_ea_sampleset, jitter_sigma
from .lt_harness import LtConfig, LtResult, run_lt
from .cil_harness import CilResult, StepResult, old_to_new_mass, run_cil
from .run_store import RunStore

__all__ = [
    "RehearsalBuffer",
    "rehearsal_quotas",
    "rehearsal_update",
    "EaConfig",
    "EaSampleSet",
    "build_ea_sampleset",
    "jitter_sigma",
    "LtConfig",
    "LtResult",
    "run_lt",
    "CilResult",
    "StepResult",
    "old_to_new_mass",
    "run_cil",
    "RunStore",
]
