"""Disaggregated MoE-attention iteration timeline and the persistent expert worker.

Attention dies of each DP domain run their layers serially; expert dies
expose three streams (A2E receive, MoE compute, E2A send) shared by every
domain.  Two microbatches per domain let one microbatch's attention hide the
other's expert round trip, so only the last microbatch of the last layer
pays for its A2E/MoE/E2A in full.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from ..engine import Trace, ms_to_ns, ns_to_us, us_to_ns
from ..fabric import ConfigError

ATTENTION_PARTS = ("MLAProlog", "MLA", "Gating", "A2E")
EXPERT_PARTS = ("A2E'", "MoE", "E2A")
EXPERT_STREAMS = {"A2E'": "moe_recv", "MoE": "moe_compute", "E2A": "moe_send"}


@dataclass
class MaLatencies:
    """Per-segment costs in ms.

    ``attention_ms_per_layer`` covers MLAProlog, MLA, Gating and the first A2E
    stage for one microbatch and is split evenly across those four parts.
    """

    gap_ms: float = 2.0
    mtp_ms: float = 5.0
    attention_ms_per_layer: float = 0.7
    a2e_ms: float = 0.17
    moe_ms: float = 0.12
    e2a_ms: float = 0.19
    # optional all-to-all after a TP>1 output projection, off by default
    mla_a2a_ms: float = 0.0

    def __post_init__(self):
        vals = [self.gap_ms, self.mtp_ms, self.attention_ms_per_layer, self.a2e_ms, self.moe_ms, self.e2a_ms,
                self.mla_a2a_ms]
        if min(vals) < 0:
            raise ConfigError("MA latencies must be >= 0")

    @classmethod
    def from_config(cls, cfg: dict) -> "MaLatencies":
        return cls(**{k: cfg[k] for k in cls.__dataclass_fields__ if k in cfg})


@dataclass
class Segment:
    name: str
    domain: int
    microbatch: int
    layer: int
    resource: str
    start_ns: int
    end_ns: int
    deps: Tuple[int, ...] = ()

    @property
    def duration_ns(self) -> int:
        return self.end_ns - self.start_ns


@dataclass
class IterationTimeline:
    segments: List[Segment]
    domains: int
    microbatches: int
    layers: int
    gap_ns: int
    mtp_ns: int

    @property
    def total_ns(self) -> int:
        return max(s.end_ns for s in self.segments)

    @property
    def total_ms(self) -> float:
        return self.total_ns / 1e6

    @property
    def forward_ms(self) -> float:
        """Total minus the scheduler gap."""
        return (self.total_ns - self.gap_ns) / 1e6

    def select(self, name: Optional[str] = None, domain: Optional[int] = None) -> List[Segment]:
        return [s for s in self.segments
                if (name is None or s.name == name) and (domain is None or s.domain == domain)]

    def violations(self) -> List[str]:
        """Dependency and resource-exclusivity breaches; empty for a legal timeline."""
        out = []
        for i, s in enumerate(self.segments):
            for d in s.deps:
                if self.segments[d].end_ns > s.start_ns:
                    out.append(f"segment {i} ({s.name}) starts before dependency {d} ends")
        by_res: Dict[str, List[Segment]] = {}
        for s in self.segments:
            by_res.setdefault(s.resource, []).append(s)
        for res, segs in by_res.items():
            segs = sorted(segs, key=lambda s: (s.start_ns, s.end_ns))
            for a, b in zip(segs, segs[1:]):
                if b.start_ns < a.end_ns:
                    out.append(f"{res}: overlap between {a.name}@{a.domain} and {b.name}@{b.domain}")
        return out

    def busy_ns(self, resource: str) -> int:
        return sum(s.duration_ns for s in self.segments if s.resource == resource)

    def utilization(self, resource: str = "moe_compute") -> float:
        return self.busy_ns(resource) / self.total_ns if self.total_ns else 0.0


def ma_pipeline(domains: int, microbatches_per_domain: int = 2, layer_count: int = 61,
                latencies: Optional[MaLatencies] = None,
                domain_start_ns: Sequence[int] = ()) -> IterationTimeline:
    """List-schedule one decode iteration over all domains.

    Each segment starts once its dependencies have ended and its resource is
    free; ready segments are taken earliest-first, ties broken by domain.
    """
    if domains < 1 or microbatches_per_domain < 1 or layer_count < 1:
        raise ConfigError("ma_pipeline needs >= 1 domain, microbatch and layer")
    lat = latencies or MaLatencies()
    gap, mtp = ms_to_ns(lat.gap_ms), ms_to_ns(lat.mtp_ms)
    attn = ms_to_ns(lat.attention_ms_per_layer)
    parts = [attn // 4 + (1 if i < attn % 4 else 0) for i in range(4)]
    expert_cost = {"A2E'": ms_to_ns(lat.a2e_ms), "MoE": ms_to_ns(lat.moe_ms), "E2A": ms_to_ns(lat.e2a_ms)}
    mla_a2a = ms_to_ns(lat.mla_a2a_ms)

    # build the DAG: (name, domain, mb, layer, resource, duration, deps)
    nodes: List[list] = []

    def add(name, d, m, layer, res, dur, deps):
        nodes.append([name, d, m, layer, res, dur, tuple(deps)])
        return len(nodes) - 1

    for d in range(domains):
        start = int(domain_start_ns[d]) if d < len(domain_start_ns) else 0
        res = f"attn{d}"
        g = add("gap", d, -1, -1, res, start + gap, [])
        prev = add("MTP", d, -1, -1, res, mtp, [g])
        last_e2a: Dict[int, int] = {}
        for layer in range(layer_count):
            for m in range(microbatches_per_domain):
                deps = [prev] + ([last_e2a[m]] if m in last_e2a else [])
                for name, dur in zip(ATTENTION_PARTS, parts):
                    prev = add(name, d, m, layer, res, dur, deps)
                    deps = [prev]
                if mla_a2a:
                    prev = add("MLA_A2A", d, m, layer, res, mla_a2a, deps)
                dep = prev
                for name in EXPERT_PARTS:
                    dep = add(name, d, m, layer, EXPERT_STREAMS[name], expert_cost[name], [dep])
                last_e2a[m] = dep

    children: Dict[int, List[int]] = {}
    missing = [len(n[6]) for n in nodes]
    for i, n in enumerate(nodes):
        for dep in n[6]:
            children.setdefault(dep, []).append(i)
    free: Dict[str, int] = {}
    start_of = [0] * len(nodes)
    end_of = [0] * len(nodes)
    ready = [(0, nodes[i][1], i) for i in range(len(nodes)) if missing[i] == 0]
    heapq.heapify(ready)
    while ready:
        t_ready, _, i = heapq.heappop(ready)
        res, dur = nodes[i][4], nodes[i][5]
        s = max(t_ready, free.get(res, 0))
        start_of[i], end_of[i] = s, s + dur
        free[res] = s + dur
        for c in children.get(i, []):
            missing[c] -= 1
            if missing[c] == 0:
                heapq.heappush(ready, (max(end_of[p] for p in nodes[c][6]), nodes[c][1], c))
    segs = [Segment(n[0], n[1], n[2], n[3], n[4], start_of[i], end_of[i], n[6]) for i, n in enumerate(nodes)]
    return IterationTimeline(segs, domains, microbatches_per_domain, layer_count, gap, mtp)


def closed_form_forward_ms(lat: MaLatencies, microbatches: int = 2, layers: int = 61) -> float:
    """gap + MTP + attention x microbatches x layers + one exposed expert round trip.

    Valid while the attention of the other microbatches covers the expert
    round trip; with one microbatch nothing overlaps and every layer pays it.
    """
    trip = lat.a2e_ms + lat.moe_ms + lat.e2a_ms
    attn = lat.attention_ms_per_layer + lat.mla_a2a_ms
    if microbatches == 1:
        return lat.gap_ms + lat.mtp_ms + layers * (attn + trip)
    return lat.gap_ms + lat.mtp_ms + attn * microbatches * layers + trip


# -- persistent expert worker ------------------------------------------------------------

@dataclass
class StreamInterval:
    stream: str
    batch: int
    start_ns: int
    end_ns: int


@dataclass
class WorkerTrace:
    intervals: List[StreamInterval]
    host_events: List[Tuple[int, str, int]] = field(default_factory=list)  # (time, stream, batch)
    trace: Trace = field(default_factory=Trace)

    @property
    def makespan_ns(self) -> int:
        return max(i.end_ns for i in self.intervals) if self.intervals else 0

    def stream(self, name: str) -> List[StreamInterval]:
        return [i for i in self.intervals if i.stream == name]

    def overlaps(self, a: str, batch_a: int, b: str, batch_b: int) -> bool:
        x = next(i for i in self.intervals if i.stream == a and i.batch == batch_a)
        y = next(i for i in self.intervals if i.stream == b and i.batch == batch_b)
        return max(x.start_ns, y.start_ns) < min(x.end_ns, y.end_ns)


def persistent_moe_worker(node: int, batches: int, *, a2e_us: float = 170.0, moe_us: float = 120.0,
                          e2a_us: float = 190.0, arrivals_ns: Sequence[int] = (),
                          host_dispatch: bool = False, host_launch_us: float = 1000.0,
                          handoff_ns: int = 0) -> WorkerTrace:
    """Three streams on one expert die, each a persistent kernel spinning on flags.

    Batch n moves recv -> compute -> send; a stream picks up the next batch
    as soon as it is free and the upstream flag is set, so receiving batch
    n+1 overlaps computing batch n.  With ``host_dispatch`` every kernel must
    first be launched by a single host thread, which serializes the launches.
    """
    if batches < 0:
        raise ConfigError("batches must be >= 0")
    cost = {"a2e_recv": us_to_ns(a2e_us), "moe_compute": us_to_ns(moe_us), "e2a_send": us_to_ns(e2a_us)}
    order = ("a2e_recv", "moe_compute", "e2a_send")
    launch = us_to_ns(host_launch_us)
    free = {s: 0 for s in order}
    host_free = 0
    out = WorkerTrace([])
    for b in range(batches):
        ready = int(arrivals_ns[b]) if b < len(arrivals_ns) else 0
        for s in order:
            t = max(ready, free[s])
            if host_dispatch:
                launch_at = max(host_free, free[s])
                host_free = launch_at + launch
                out.host_events.append((launch_at, s, b))
                out.trace.add(launch_at, node, "host_dispatch", -1, 0, f"stream={s} batch={b}")
                t = max(t, host_free)
            end = t + cost[s]
            out.intervals.append(StreamInterval(s, b, t, end))
            out.trace.add(t, node, s, -1, 0, f"batch={b} start")
            out.trace.add(end, node, s, -1, 0, f"batch={b} end")
            free[s] = end
            ready = end + handoff_ns
    return out


def host_overhead_per_iteration_us(batches: int = 8, **kw) -> float:
    """Extra makespan per batch when kernels are host-launched instead of persistent."""
    base = persistent_moe_worker(0, batches, **kw).makespan_ns
    host = persistent_moe_worker(0, batches, host_dispatch=True, **kw).makespan_ns
    return ns_to_us(host - base) / batches
