"""Serving pipelines: PD handoff, MoE-attention timeline, MTP decode loop and throughput."""

from .ma import IterationTimeline, MaLatencies, Segment, closed_form_forward_ms, ma_pipeline, persistent_moe_worker
from .metrics import ThroughputReport, kernel_breakdown, throughput_report
from .mtp import (AcceptanceSampler, DecodeTiming, MtpConfig, decode_iteration, expected_tokens_per_step,
                  measure_tokens_per_step, solve_next_acceptance, tpot_ms)
from .pd import (DeadlockError, KvBlock, KvLedger, PdCluster, PdConfig, PdResult, PrefillProfile, TransferTask,
                 make_workload, pd_workflow, workload_from_spec)

__all__ = ["IterationTimeline", "MaLatencies", "Segment", "closed_form_forward_ms", "ma_pipeline",
           "persistent_moe_worker", "ThroughputReport", "kernel_breakdown", "throughput_report",
           "AcceptanceSampler", "DecodeTiming", "MtpConfig", "decode_iteration", "expected_tokens_per_step",
           "measure_tokens_per_step", "solve_next_acceptance", "tpot_ms", "DeadlockError", "KvBlock", "KvLedger",
           "PdCluster", "PdConfig", "PdResult", "PrefillProfile", "TransferTask", "make_workload", "pd_workflow",
           "workload_from_spec"]
