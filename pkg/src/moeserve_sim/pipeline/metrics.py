"""Throughput arithmetic and the dispatch/combine latency breakdown."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..fabric import ConfigError
from ..xccl.collectives import CollectiveCostModel, all_to_all_timing, combine_timing, uniform_counts


@dataclass
class ThroughputReport:
    tpot_ms: Optional[float]
    tokens_per_step: float
    forward_ms: float
    gap_ms: float
    batch_per_die: int
    dies: int
    dies_per_chip: int
    global_batch: int
    tokens_per_s_per_chip: Optional[float]
    total_tokens_per_s: Optional[float]
    breakdown: List[Dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def throughput_report(forward_ms: float, gap_ms: float, tokens_per_step: float, *, batch_per_die: int,
                      dies: int, dies_per_chip: int = 2, domains: int = 1,
                      breakdown: Optional[List[Dict[str, float]]] = None) -> ThroughputReport:
    """TPOT = (forward + gap) / tokens_per_step; chip rate = dies_per_chip x batch x 1000 / TPOT.

    ``dies`` counts the dies that hold decode batches; with several DP domains
    each domain contributes ``dies`` x ``batch_per_die`` to the global batch.
    """
    if dies < 1 or dies_per_chip < 1 or batch_per_die < 0 or domains < 1:
        raise ConfigError("throughput_report: dies, dies_per_chip and domains must be >= 1")
    if tokens_per_step <= 0:
        raise ConfigError("tokens_per_step must be > 0")
    tpot = (forward_ms + gap_ms) / tokens_per_step
    per_chip = dies_per_chip * batch_per_die * 1000.0 / tpot if tpot > 0 else None
    chips = dies * domains / dies_per_chip
    total = per_chip * chips if per_chip is not None else None
    return ThroughputReport(tpot, tokens_per_step, forward_ms, gap_ms, batch_per_die, dies, dies_per_chip,
                            batch_per_die * dies * domains, per_chip, total, list(breakdown or []))


def _stats(name: str, samples_us: np.ndarray) -> Dict[str, float]:
    return {"op": name, "avg_us": round(float(samples_us.mean()), 3), "min_us": round(float(samples_us.min()), 3),
            "max_us": round(float(samples_us.max()), 3)}


def kernel_breakdown(*, ranks: int = 32, iterations: int = 20, batch: int = 60, k: int = 8, hidden: int = 7168,
                     mla_sigma_us: float = 100.0, moe_sigma_us: float = 100.0, moe_us: float = 60.0,
                     cost: Optional[CollectiveCostModel] = None, seed: int = 0) -> List[Dict[str, float]]:
    """Per-rank dispatch and combine latency statistics over several iterations.

    Each rank enters dispatch after its own attention, drawn with a half-normal
    spread of ``mla_sigma_us``; a rank's dispatch lasts until the slowest rank's
    tokens have arrived, so early ranks absorb the spread.  Combine likewise
    absorbs the spread of per-rank expert compute (``moe_sigma_us``).
    """
    cost = cost or CollectiveCostModel()
    rng = np.random.default_rng(seed)
    counts = uniform_counts(ranks, batch, k)
    tok = hidden * 2
    disp, comb = [], []
    for _ in range(iterations):
        mla = np.abs(rng.normal(0.0, mla_sigma_us, ranks))
        start = [int(round(x * 1000)) for x in mla]
        d = all_to_all_timing("dispatch", counts, tok, cost, quantize=True, start_ns=start)
        disp.extend((e - s) / 1000.0 for s, e in zip(d.rank_start_ns, d.rank_end_ns))
        moe = moe_us + np.abs(rng.normal(0.0, moe_sigma_us, ranks))
        cstart = [int(e + round(m * 1000)) for e, m in zip(d.rank_end_ns, moe)]
        c = combine_timing(counts, tok, cost, start_ns=cstart)
        comb.extend((e - s) / 1000.0 for s, e in zip(c.rank_start_ns, c.rank_end_ns))
    return [_stats("Dispatch", np.array(disp)), _stats("Combine", np.array(comb))]


def max_min_ratio(row: Dict[str, float]) -> float:
    return row["max_us"] / row["min_us"]
