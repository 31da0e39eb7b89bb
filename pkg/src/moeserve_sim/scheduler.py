"""DP-group scheduling: prefill placement, decode routing, domain rotation and jitter.

Every decision is a pure function of the snapshot it is given, so a run can
be replayed from its audit log.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .fabric import ConfigError
from .requests import Request

BACKPRESSURE = "backpressure"


@dataclass
class DpGroupState:
    id: int
    batch_limit: int
    kv_total_blocks: int
    pending_requests: int = 0
    active_batch: int = 0
    kv_used_blocks: int = 0
    prefix_cache: set = field(default_factory=set)
    queued_tokens: int = 0
    token_budget: Optional[int] = None  # prefill tokens per step

    def __post_init__(self):
        if self.active_batch > self.batch_limit:
            raise ConfigError(f"group {self.id}: active_batch above batch_limit")
        if self.kv_used_blocks > self.kv_total_blocks:
            raise ConfigError(f"group {self.id}: kv_used above kv_total")

    @property
    def kv_usage(self) -> float:
        return self.kv_used_blocks / self.kv_total_blocks if self.kv_total_blocks else 1.0

    @property
    def full(self) -> bool:
        return self.active_batch >= self.batch_limit


@dataclass
class DpDomain:
    id: int
    member_groups: List[DpGroupState] = field(default_factory=list)
    token: bool = False


@dataclass
class CostModel:
    weight_prefix_hit: float = 1.0
    weight_length: float = 1.0
    weight_load: float = 1.0
    max_len: int = 32_768

    def __post_init__(self):
        if min(self.weight_prefix_hit, self.weight_length, self.weight_load) < 0:
            raise ConfigError("cost weights must be >= 0")

    @classmethod
    def from_config(cls, cfg: dict) -> "CostModel":
        return cls(**{k: cfg[k] for k in cls.__dataclass_fields__ if k in cfg})


class DecisionLog:
    """Audit log of scheduling decisions, one JSON object per line."""

    def __init__(self):
        self.records: List[dict] = []

    def add(self, time, request, candidates, scores, chosen) -> None:
        self.records.append({"time": int(time), "request": int(request), "candidates": [int(c) for c in candidates],
                             "scores": [round(float(s), 9) for s in scores],
                             "chosen": chosen if isinstance(chosen, str) else int(chosen)})

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


# -- prefill ----------------------------------------------------------------------------

@dataclass
class PrefillAssignment:
    assigned: Dict[int, int]
    deferred: List[int]
    batches: Dict[int, List[int]]


def prefill_cost(req: Request, group: DpGroupState, batch_lens: Sequence[int], cost: CostModel,
                 max_queued: int) -> float:
    """Linear cost of placing ``req`` on ``group`` given the batch already formed there.

    The length term measures how far the request's normalized length sits
    from the lengths already batched on that DP (zero for an empty batch),
    which keeps long prompts away from short ones.
    """
    hit = req.prefix_hit_rate(group.prefix_cache)
    norm_len = min(1.0, req.prompt_len / cost.max_len)
    if batch_lens:
        mean = sum(min(1.0, n / cost.max_len) for n in batch_lens) / len(batch_lens)
        length_term = abs(norm_len - mean)
    else:
        length_term = 0.0
    norm_load = (group.queued_tokens + sum(batch_lens)) / max(1, max_queued)
    return cost.weight_prefix_hit * (1.0 - hit) + cost.weight_length * length_term + cost.weight_load * norm_load


def prefill_schedule_step(leader_view: Sequence[DpGroupState], queue: Sequence[Request], cost: CostModel,
                          *, log: Optional[DecisionLog] = None, now: int = 0) -> PrefillAssignment:
    """One leader step: place each queued request (FIFO) on the cheapest DP that can take it."""
    assigned: Dict[int, int] = {}
    deferred: List[int] = []
    batches: Dict[int, List[int]] = {g.id: [] for g in leader_view}
    lens: Dict[int, List[int]] = {g.id: [] for g in leader_view}
    if not queue:
        return PrefillAssignment(assigned, deferred, batches)
    max_queued = max([g.queued_tokens for g in leader_view] + [sum(r.prompt_len for r in queue)])
    for req in queue:
        cands, scores = [], []
        for g in leader_view:
            if g.active_batch + len(batches[g.id]) >= g.batch_limit:
                continue
            if g.token_budget is not None and sum(lens[g.id]) + req.prompt_len > g.token_budget \
                    and lens[g.id]:
                continue
            cands.append(g.id)
            scores.append(prefill_cost(req, g, lens[g.id], cost, max_queued))
        if not cands:
            deferred.append(req.id)
            if log is not None:
                log.add(now, req.id, [], [], "deferred")
            continue
        best = cands[int(np.argmin(scores))]
        assigned[req.id] = best
        batches[best].append(req.id)
        lens[best].append(req.prompt_len)
        if log is not None:
            log.add(now, req.id, cands, scores, best)
    return PrefillAssignment(assigned, deferred, batches)


@dataclass
class PrefillSimResult:
    makespan_us: float
    idle_us: float
    steps: int
    finish_us: Dict[int, float]


def simulate_prefill(requests: Sequence[Request], num_dps: int, policy: str = "single", *,
                     cost: Optional[CostModel] = None, token_budget: int = 16_384, batch_limit: int = 64,
                     per_token_us: float = 1.0, step_overhead_us: float = 0.0) -> PrefillSimResult:
    """Barrier-synchronized prefill steps: each step lasts as long as its slowest DP.

    ``single``: the leader re-plans the shared queue every step.
    ``two_level``: requests are dealt round-robin to per-DP queues up front and
    each DP fills its own batch FIFO under the token budget.
    """
    cost = cost or CostModel()
    finish: Dict[int, float] = {}
    t = 0.0
    idle = 0.0
    steps = 0
    if policy == "two_level":
        queues = [deque() for _ in range(num_dps)]
        for i, r in enumerate(requests):
            queues[i % num_dps].append(r)
    elif policy == "single":
        shared = list(requests)
    else:
        raise ConfigError(f"unknown prefill policy {policy!r}")
    while True:
        batches: List[List[Request]] = [[] for _ in range(num_dps)]
        if policy == "two_level":
            for d, q in enumerate(queues):
                used = 0
                while q and len(batches[d]) < batch_limit and (not batches[d] or used + q[0].prompt_len <= token_budget):
                    r = q.popleft()
                    batches[d].append(r)
                    used += r.prompt_len
        else:
            if not shared:
                break
            view = [DpGroupState(d, batch_limit, 1, token_budget=token_budget) for d in range(num_dps)]
            plan = prefill_schedule_step(view, shared, cost)
            by_id = {r.id: r for r in shared}
            for d, ids in plan.batches.items():
                batches[d] = [by_id[i] for i in ids]
            shared = [r for r in shared if r.id not in plan.assigned]
        if not any(batches):
            break
        times = [sum(r.prompt_len for r in b) * per_token_us + (step_overhead_us if b else 0.0) for b in batches]
        step = max(times)
        idle += sum(step - x for x in times)
        t += step
        steps += 1
        for b in batches:
            for r in b:
                finish[r.id] = t
    return PrefillSimResult(t, idle, steps, finish)


# -- decode ----------------------------------------------------------------------------

def reserve_blocks_for(max_output_len: int, block_size: int) -> int:
    return math.ceil(max_output_len / block_size)


def route_decode(request: Request, groups: Sequence[DpGroupState], reserve_blocks: int, *,
                 log: Optional[DecisionLog] = None, now: int = 0) -> Union[int, str]:
    """Lowest projected KV usage among groups with batch room and enough free blocks.

    Groups that cannot hold ``reserve_blocks`` more blocks are excluded too,
    so a decision never overfills a group's KV cache.
    """
    cands, scores = [], []
    for g in groups:
        if g.full or g.kv_used_blocks + reserve_blocks > g.kv_total_blocks:
            continue
        cands.append(g.id)
        scores.append((g.kv_used_blocks + reserve_blocks) / g.kv_total_blocks)
    chosen: Union[int, str] = BACKPRESSURE
    if cands:
        best = min(range(len(cands)), key=lambda i: (scores[i], cands[i]))
        chosen = cands[best]
    if log is not None:
        log.add(now, request.id, cands, scores, chosen)
    return chosen


# -- DP domain rotation ------------------------------------------------------------------------

@dataclass
class DomainWindow:
    attention_ns: int
    a2e_ns: int
    moe_ns: int
    e2a_ns: int

    @property
    def window_ns(self) -> int:
        return self.a2e_ns + self.moe_ns + self.e2a_ns


@dataclass
class RotationSchedule:
    holds: List[Tuple[int, int, int]]  # (domain, t_acquire, t_release)
    handoffs: List[Tuple[int, int, int]]  # (time, from, to)
    end_ns: int
    num_domains: int = 1

    def busy_fraction(self, skip: int = 0) -> float:
        """Token-held share of time over whole rotation rounds after the first ``skip`` holds."""
        holds = self.holds[skip:]
        rounds = (len(holds) - 1) // self.num_domains
        holds = holds[:rounds * self.num_domains + 1]
        if len(holds) < 2:
            return 1.0 if holds else 0.0
        span = holds[-1][1] - holds[0][1]
        return sum(r - a for _, a, r in holds[:-1]) / span if span else 1.0

    def holder_at(self, t: int) -> List[int]:
        return [d for d, a, r in self.holds if a <= t < r]

    def exclusive(self) -> bool:
        spans = sorted((a, r) for _, a, r in self.holds)
        return all(spans[i][1] <= spans[i + 1][0] for i in range(len(spans) - 1))


def domain_rotate(domains: Sequence[DomainWindow], iterations: int = 10, start_ns: Sequence[int] = ()) -> RotationSchedule:
    """Round-robin MoE access token across DP domains.

    A domain holds the token for its A2E+MoE+E2A window and hands it over at
    E2A completion; its next window needs its attention phase to finish first.
    """
    if not domains:
        raise ConfigError("domain_rotate needs at least one domain")
    n = len(domains)
    ready = [int(start_ns[d]) if d < len(start_ns) else 0 for d in range(n)]
    free_at = 0
    holds, handoffs = [], []
    prev = None
    for _ in range(iterations):
        for d, dom in enumerate(domains):
            acquire = max(free_at, ready[d])
            release = acquire + dom.window_ns
            if prev is not None and prev != d:
                handoffs.append((free_at, prev, d))
            holds.append((d, acquire, release))
            free_at = release
            ready[d] = release + dom.attention_ns
            prev = d
    return RotationSchedule(holds, handoffs, free_at, n)


def analytic_busy_fraction(num_domains: int, window_ns: float, attention_ns: float) -> float:
    """Steady-state MoE occupancy for identical domains: min(1, D*w / (a + w))."""
    return min(1.0, num_domains * window_ns / (attention_ns + window_ns))


# -- jitter ----------------------------------------------------------------------------

@dataclass
class JitterConfig:
    core_pinning: bool = False
    graph_caching: bool = False
    gc_every: Optional[int] = None  # forced GC every N forward passes
    dies: int = 288
    sched_noise_median_ms: float = 0.05
    sched_noise_sigma: float = 1.2
    guard_ms: float = 1.5
    guard_jitter_ms: float = 0.5
    gc_prob: float = 0.002
    gc_pause_scale_ms: float = 15.0
    gc_pause_alpha: float = 1.3
    forced_gc_ms: float = 3.0


def first_dispatch_delays(cfg: JitterConfig, passes: int, seed: int = 0) -> np.ndarray:
    """Per-pass delay (ms) at the first global dispatch barrier: the slowest die's extra launch time."""
    rng = np.random.default_rng(seed)
    delay = np.zeros((passes, cfg.dies))
    if not cfg.core_pinning:
        delay += cfg.sched_noise_median_ms * rng.lognormal(0.0, cfg.sched_noise_sigma, (passes, cfg.dies))
    if not cfg.graph_caching:
        delay += cfg.guard_ms + cfg.guard_jitter_ms * rng.random((passes, cfg.dies))
    if cfg.gc_every is None:
        hits = rng.random((passes, cfg.dies)) < cfg.gc_prob
        pauses = cfg.gc_pause_scale_ms * (1.0 + rng.pareto(cfg.gc_pause_alpha, (passes, cfg.dies)))
        delay += np.where(hits, pauses, 0.0)
    else:
        if cfg.gc_every < 1:
            raise ConfigError("gc_every must be >= 1")
        forced = (np.arange(passes) % cfg.gc_every) == cfg.gc_every - 1
        delay[forced] += cfg.forced_gc_ms
    return delay.max(axis=1)
