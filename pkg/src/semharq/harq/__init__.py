"""Retransmission criterion, transmission plans, sessions and bounds."""
from .bounds import gamma_margin, mi_upper_bound, task_information
from .criterion import RetxCriterion, entropy, should_retransmit, uncertainty
from .plan import TransmissionPlan, build_plan, cap_retransmissions
from .session import (
    MODES,
    BatchOutcome,
    HarqConfig,
    HarqSession,
    IdealChannel,
    PerItemNoise,
    SessionResult,
    SharedNoise,
    TrainOptions,
    combine_received,
    run_batch,
    run_session,
    session_results,
)

__all__ = [
    "MODES", "BatchOutcome", "HarqConfig", "HarqSession", "IdealChannel", "PerItemNoise",
    "RetxCriterion", "SessionResult", "SharedNoise", "TrainOptions", "TransmissionPlan",
    "build_plan", "cap_retransmissions", "combine_received", "entropy", "gamma_margin",
    "mi_upper_bound", "run_batch", "run_session", "session_results", "should_retransmit",
    "task_information", "uncertainty",
]
