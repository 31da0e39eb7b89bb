"""All-to-all collectives for expert parallelism.

``dispatch``/``combine`` are the pull-based colocated primitives: every rank
writes token data into its managed area partitioned by destination,
publishes per-destination token counts, waits until counts from all ranks are
visible, then pulls.  ``a2e``/``e2a`` are the disaggregated variants that
relay through trampoline expert nodes so that attention nodes only fan out to
as many peers as there are attention nodes.

Routing is computed exactly (hidden vectors are carried through); timing is
computed per rank from the fabric latency model.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..engine import Trace, ceil_div, next_tick, us_to_ns
from ..fabric import ConfigError, LatencyModel

PRECISION_BYTES = {"fp16": 2, "bf16": 2, "int8": 1}


class IncompleteCombineError(RuntimeError):
    """An expert output required by a combine is missing."""


@dataclass
class GatingOutput:
    expert_ids: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.expert_ids = np.asarray(self.expert_ids, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.expert_ids.ndim != 2 or self.expert_ids.shape != self.scores.shape:
            raise ConfigError("gating ids and scores must both be [tokens, k]")
        if self.expert_ids.shape[1] < 1:
            raise ConfigError("gating needs k >= 1")
        if not np.all(np.isfinite(self.scores)):
            raise ConfigError("gating scores must be finite")
        if self.expert_ids.size and self.expert_ids.min() < 0:
            raise ConfigError("negative expert id")

    @property
    def num_tokens(self) -> int:
        return self.expert_ids.shape[0]

    @property
    def k(self) -> int:
        return self.expert_ids.shape[1]

    def check_experts(self, num_experts: int) -> None:
        if self.expert_ids.size and self.expert_ids.max() >= num_experts:
            raise ConfigError(f"expert id {self.expert_ids.max()} >= {num_experts} experts")


@dataclass
class TokenPayload:
    token_index: int
    hidden: np.ndarray
    precision: str = "fp16"
    src_rank: int = 0

    @property
    def nbytes(self) -> int:
        return int(np.asarray(self.hidden).size) * PRECISION_BYTES[self.precision]


@dataclass
class EpConfig:
    num_ranks: int
    experts_per_rank: int
    rank_of_expert: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.num_ranks < 1 or self.experts_per_rank < 1:
            raise ConfigError("EpConfig needs >= 1 rank and >= 1 expert per rank")
        if self.rank_of_expert is None:
            self.rank_of_expert = np.arange(self.num_experts) // self.experts_per_rank
        self.rank_of_expert = np.asarray(self.rank_of_expert, dtype=np.int64)
        per_rank = np.bincount(self.rank_of_expert, minlength=self.num_ranks)
        if self.rank_of_expert.shape != (self.num_experts,) or per_rank.shape[0] != self.num_ranks \
                or not np.all(per_rank == self.experts_per_rank):
            raise ConfigError("rank_of_expert must place exactly experts_per_rank slots on every rank")

    @property
    def num_experts(self) -> int:
        return self.num_ranks * self.experts_per_rank


@dataclass
class Delivery:
    token_index: int
    expert: int
    choice: int
    src: int
    hidden: np.ndarray
    precision: str
    via: Optional[int] = None
    row: int = -1


@dataclass
class CollectiveTiming:
    """Per-collective summary; ``rank_end_ns`` is None for ranks that stalled."""

    collective: str
    participants: int
    bytes: int
    t_start: int
    t_end: Optional[int]
    straggler_node: Optional[int]
    rank_start_ns: List[int] = field(default_factory=list)
    rank_end_ns: List[Optional[int]] = field(default_factory=list)
    meta_ready_ns: List[Optional[int]] = field(default_factory=list)
    pull_start_ns: List[Optional[int]] = field(default_factory=list)
    metadata_updates: int = 0

    @property
    def latency_us(self) -> Optional[float]:
        return None if self.t_end is None else (self.t_end - self.t_start) / 1000.0

    def rank_latency_us(self) -> np.ndarray:
        return np.array([(e - s) / 1000.0 for s, e in zip(self.rank_start_ns, self.rank_end_ns)
                         if e is not None])

    def summary(self) -> dict:
        return {"collective": self.collective, "participants": self.participants, "bytes": self.bytes,
                "t_start": self.t_start, "t_end": self.t_end, "straggler_node": self.straggler_node}

    def to_json_line(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


@dataclass
class CollectiveCostModel:
    """Timing knobs for the all-to-all kernels on top of the fabric model."""

    latency: LatencyModel = field(default_factory=LatencyModel)
    cores: int = 24
    meta_issue_ns: float = 40.0
    # fixed cost of the fused quantization pass; see calibrate_quantize_overhead
    quantize_fixed_us: float = 16.03
    quantize_per_token_ns: float = 0.0
    reduce_per_token_ns: float = 2.0
    kernel_launch_us: float = 3.0
    # per-hop synchronisation cost of the trampoline collectives
    hop_overhead_us: float = 0.0

    def stream_ns(self, nbytes: int) -> int:
        return self.latency.stream_ns(int(nbytes), self.cores)

    def bulk_ns(self, nbytes: int, semantics: str) -> int:
        if semantics == "dma":
            return self.latency.dma_ns(int(nbytes))
        return us_to_ns(self.latency.mem_startup_us) + self.stream_ns(nbytes)

    def meta_fanout_ns(self, fanout: int) -> int:
        return int(math.ceil(self.meta_issue_ns * fanout / self.cores)) + self.latency.meta_ns


@dataclass
class DispatchResult:
    received: Dict[int, List[Delivery]]
    counts: np.ndarray
    payload_bytes: int
    metadata_bytes: int
    timing: Optional[CollectiveTiming] = None

    @property
    def bytes_on_wire(self) -> int:
        return self.payload_bytes + self.metadata_bytes


def _pull_phase(name: str, start_ns: Sequence[int], ready_ns: Sequence[Optional[int]],
                senders: Sequence[Sequence[int]], bytes_in: Sequence[int], cost: CollectiveCostModel,
                semantics: str, tail_ns: Sequence[int], trace: Optional[Trace],
                node_ids: Sequence[int]) -> Tuple[List[Optional[int]], List[Optional[int]], List[Optional[int]], Optional[int]]:
    """Barrier then bulk pull for each receiver; returns (barrier, pull start, end, straggler)."""
    poll_ns = cost.latency.poll_ns
    barrier: List[Optional[int]] = []
    pulls: List[Optional[int]] = []
    ends: List[Optional[int]] = []
    worst = (-1, None)
    for d, peers in enumerate(senders):
        arrivals = [ready_ns[p] for p in peers]
        if any(a is None for a in arrivals):
            barrier.append(None)
            pulls.append(None)
            ends.append(None)
            continue
        last = max(arrivals) if arrivals else start_ns[d]
        if arrivals:
            culprit = peers[int(np.argmax(arrivals))]
            if last > worst[0]:
                worst = (last, culprit)
        b = next_tick(start_ns[d], max(last, start_ns[d]), poll_ns)
        barrier.append(b)
        pulls.append(b)
        end = b + (cost.bulk_ns(bytes_in[d], semantics) if bytes_in[d] else 0) + tail_ns[d]
        ends.append(end)
        if trace is not None:
            trace.add(b, node_ids[d], f"{name}_barrier", -1, 0, f"peers={len(peers)}")
            trace.add(b, node_ids[d], f"{name}_pull", -1, int(bytes_in[d]), semantics)
            trace.add(end, node_ids[d], f"{name}_done", -1, int(bytes_in[d]), "")
    straggler = worst[1]
    if straggler is not None:
        straggler = node_ids[straggler] if straggler < len(node_ids) else straggler
    return barrier, pulls, ends, straggler


def all_to_all_timing(name: str, counts: np.ndarray, token_bytes: int, cost: CollectiveCostModel, *,
                      quantize: bool = False, reduce_tokens: Optional[Sequence[int]] = None,
                      start_ns: Optional[Sequence[int]] = None, failed_ranks: Iterable[int] = (),
                      semantics: str = "memory", trace: Optional[Trace] = None) -> CollectiveTiming:
    """Time a pull-based all-to-all given ``counts[src, dst]`` token copies.

    Every rank publishes a count field to every rank (zero counts included) so
    the barrier at each receiver waits on all participants.
    """
    counts = np.asarray(counts, dtype=np.int64)
    n = counts.shape[0]
    start = [0] * n if start_ns is None else [int(s) for s in start_ns]
    failed = set(int(r) for r in failed_ranks)
    per_tok = token_bytes // 2 if quantize else token_bytes
    bytes_out = counts.sum(axis=1) * per_tok
    bytes_in = counts.sum(axis=0) * per_tok
    ready: List[Optional[int]] = []
    for r in range(n):
        t = start[r] + us_to_ns(cost.kernel_launch_us)
        if quantize:
            t += us_to_ns(cost.quantize_fixed_us) + int(cost.quantize_per_token_ns * counts[r].sum())
        t += cost.stream_ns(bytes_out[r])
        if trace is not None:
            trace.add(t, r, f"{name}_stage", -1, int(bytes_out[r]), "int8" if quantize else "fp16")
        if r in failed:
            ready.append(None)
            continue
        t_meta = t + cost.meta_fanout_ns(n)
        ready.append(t_meta)
        if trace is not None:
            trace.add(t_meta, r, f"{name}_meta", -1, 32 * n, f"fanout={n}")
    tail = [int(cost.reduce_per_token_ns * reduce_tokens[d]) if reduce_tokens is not None else 0
            for d in range(n)]
    senders = [list(range(n))] * n
    barrier, pulls, ends, straggler = _pull_phase(name, start, ready, senders, bytes_in, cost,
                                                  semantics, tail, trace, list(range(n)))
    if failed:
        straggler = min(failed)
    done = [e for e in ends if e is not None]
    t_end = max(done) if len(done) == n else None
    return CollectiveTiming(name, n, int(bytes_in.sum()) + 32 * n * n, min(start), t_end, straggler,
                            start, ends, barrier, pulls, metadata_updates=n * n)


def dispatch(tokens: Sequence[TokenPayload], gating: GatingOutput, cfg: EpConfig, quantize: bool = False,
             *, cost: Optional[CollectiveCostModel] = None, start_ns: Optional[Sequence[int]] = None,
             failed_ranks: Iterable[int] = (), trace: Optional[Trace] = None) -> DispatchResult:
    """Route every token to the ranks hosting its top-k experts."""
    if len(tokens) != gating.num_tokens:
        raise ConfigError("gating must cover every token")
    gating.check_experts(cfg.num_experts)
    received: Dict[int, List[Delivery]] = {r: [] for r in range(cfg.num_ranks)}
    counts = np.zeros((cfg.num_ranks, cfg.num_ranks), dtype=np.int64)
    payload_bytes = 0
    token_bytes = 0
    for t, tok in enumerate(tokens):
        if not 0 <= tok.src_rank < cfg.num_ranks:
            raise ConfigError(f"token {tok.token_index} from unknown rank {tok.src_rank}")
        precision = "int8" if quantize else tok.precision
        nbytes = int(np.asarray(tok.hidden).size) * PRECISION_BYTES[precision]
        token_bytes = max(token_bytes, int(np.asarray(tok.hidden).size) * PRECISION_BYTES[tok.precision])
        for j in range(gating.k):
            e = int(gating.expert_ids[t, j])
            r = int(cfg.rank_of_expert[e])
            # values stay at full precision; int8 only changes the byte count
            received[r].append(Delivery(tok.token_index, e, j, tok.src_rank,
                                        np.asarray(tok.hidden), precision, row=t))
            counts[tok.src_rank, r] += 1
            payload_bytes += nbytes
    metadata_bytes = 32 * cfg.num_ranks * cfg.num_ranks
    timing = None
    if cost is not None:
        timing = all_to_all_timing("dispatch", counts, token_bytes, cost, quantize=quantize,
                                   start_ns=start_ns, failed_ranks=failed_ranks, trace=trace)
    return DispatchResult(received, counts, payload_bytes, metadata_bytes, timing)


def _gather(expert_outputs: Mapping[int, Sequence[np.ndarray]],
            received: Mapping[int, Sequence[Delivery]]) -> Dict[Tuple[int, int], Tuple[Delivery, np.ndarray]]:
    contrib = {}
    for node, deliveries in received.items():
        outs = expert_outputs.get(node)
        if outs is None:
            outs = ()
        if len(outs) < len(deliveries):
            raise IncompleteCombineError(f"node {node} returned {len(outs)} of {len(deliveries)} outputs")
        for d, out in zip(deliveries, outs):
            contrib[(d.row, d.choice)] = (d, np.asarray(out, dtype=np.float64))
    return contrib


def _reduce_row(contrib, gating: GatingOutput, t: int):
    acc = None
    src = None
    for j in range(gating.k):
        entry = contrib.get((t, j))
        if entry is None:
            raise IncompleteCombineError(f"missing expert output for token row {t} choice {j}")
        d, vec = entry
        src = d.src
        term = gating.scores[t, j] * vec
        acc = term if acc is None else acc + term
    return src, acc


def combine(expert_outputs: Mapping[int, Sequence[np.ndarray]], gating: GatingOutput,
            dispatched: DispatchResult) -> np.ndarray:
    """Weighted sum of expert outputs per token, using the dispatch gating scores.

    ``expert_outputs[rank][i]`` is the output for ``dispatched.received[rank][i]``.
    Row ``t`` of the result belongs to token ``t`` of the dispatched list.
    """
    contrib = _gather(expert_outputs, dispatched.received)
    rows = [_reduce_row(contrib, gating, t)[1] for t in range(gating.num_tokens)]
    return np.vstack(rows) if rows else np.zeros((0, 0))


def combine_timing(counts: np.ndarray, token_bytes: int, cost: CollectiveCostModel, **kw) -> CollectiveTiming:
    """Combine moves expert outputs back along the transposed routing at full precision."""
    counts = np.asarray(counts).T
    reduce_tokens = counts.sum(axis=0)
    return all_to_all_timing("combine", counts, token_bytes, cost, quantize=False,
                             reduce_tokens=reduce_tokens, **kw)


def uniform_counts(num_ranks: int, batch_per_rank: int, k: int) -> np.ndarray:
    """Balanced routing: each rank's ``batch*k`` copies spread evenly across ranks."""
    total = batch_per_rank * k
    base, extra = divmod(total, num_ranks)
    counts = np.full((num_ranks, num_ranks), base, dtype=np.int64)
    for r in range(num_ranks):
        for i in range(extra):
            counts[r, (r + i) % num_ranks] += 1
    return counts


def calibrate_quantize_overhead(cost: CollectiveCostModel, num_ranks: int, hidden: int, k: int,
                                crossover_batch: float) -> float:
    """Fixed quantization cost (us) at which dispatch and combine tie at ``crossover_batch``.

    Both latencies are affine in batch size, so the tie point is solved from
    the two slopes measured at two batch sizes.
    """
    token_bytes = hidden * PRECISION_BYTES["fp16"]
    probe = CollectiveCostModel(**{**asdict_shallow(cost), "quantize_fixed_us": 0.0})

    def gap(b: int) -> float:
        counts = uniform_counts(num_ranks, b, k)
        d = all_to_all_timing("dispatch", counts, token_bytes, probe, quantize=True).latency_us
        c = combine_timing(counts, token_bytes, probe).latency_us
        return c - d  # savings from halving the bytes, before the fixed cost

    b1, b2 = 64, 128
    slope = (gap(b2) - gap(b1)) / (b2 - b1)
    intercept = gap(b1) - slope * b1
    return intercept + slope * crossover_batch


def asdict_shallow(obj) -> dict:
    return {f: getattr(obj, f) for f in obj.__dataclass_fields__}


# -- disaggregated attention <-> expert ------------------------------------------------

@dataclass
class TrampolineMap:
    attention_nodes: List[int]
    expert_nodes: List[int]
    second_stage: Dict[int, List[int]]

    @property
    def trampolines(self) -> List[int]:
        return self.expert_nodes[:len(self.attention_nodes)]

    @classmethod
    def build(cls, attention_nodes: Sequence[int], expert_nodes: Sequence[int]) -> "TrampolineMap":
        attention_nodes, expert_nodes = list(attention_nodes), list(expert_nodes)
        a, e = len(attention_nodes), len(expert_nodes)
        if a < 1 or a > e:
            raise ConfigError("need 1 <= |attention nodes| <= |expert nodes|")
        rest = expert_nodes[a:]
        block = ceil_div(len(rest), a) if rest else 0
        stage = {t: rest[i * block:(i + 1) * block] for i, t in enumerate(expert_nodes[:a])}
        return cls(attention_nodes, expert_nodes, stage)

    def trampoline_of(self, expert_node: int) -> int:
        if expert_node in self.second_stage:
            return expert_node
        for t, members in self.second_stage.items():
            if expert_node in members:
                return t
        raise KeyError(expert_node)

    def check(self) -> None:
        members = [m for ms in self.second_stage.values() for m in ms]
        if sorted(members) != sorted(self.expert_nodes[len(self.attention_nodes):]) \
                or len(set(members)) != len(members):
            raise ConfigError("second-stage sets must partition the non-trampoline expert nodes")


@dataclass
class A2EResult:
    received: Dict[int, List[Delivery]]
    stage1: Counter
    stage2: Counter
    stalled: List[Delivery]
    metadata_updates: Dict[str, int]
    node_of_expert: np.ndarray
    timing: Optional[CollectiveTiming] = None

    def placement(self) -> Counter:
        return Counter((d.token_index, d.expert, node) for node, ds in self.received.items() for d in ds)


def default_node_of_expert(num_experts: int, tmap: TrampolineMap) -> np.ndarray:
    nodes = np.asarray(tmap.expert_nodes)
    return nodes[np.arange(num_experts) % len(nodes)]


def a2e(tokens: Sequence[TokenPayload], gating: GatingOutput, tmap: TrampolineMap, *,
        node_of_expert: Optional[np.ndarray] = None, quantize: bool = False,
        failed_trampolines: Iterable[int] = (), cost: Optional[CollectiveCostModel] = None,
        start_ns: Optional[Sequence[int]] = None, trace: Optional[Trace] = None,
        token_bytes: Optional[int] = None) -> A2EResult:
    """Two-stage attention-to-expert routing through trampoline expert nodes.

    ``TokenPayload.src_rank`` indexes ``tmap.attention_nodes``.
    """
    tmap.check()
    if len(tokens) != gating.num_tokens:
        raise ConfigError("gating must cover every token")
    num_experts = int(gating.expert_ids.max()) + 1 if gating.expert_ids.size else 0
    if node_of_expert is None:
        node_of_expert = default_node_of_expert(max(num_experts, len(tmap.expert_nodes)), tmap)
    node_of_expert = np.asarray(node_of_expert)
    gating.check_experts(len(node_of_expert))
    failed = set(int(t) for t in failed_trampolines)
    received: Dict[int, List[Delivery]] = {n: [] for n in tmap.expert_nodes}
    stage1: Counter = Counter()
    stage2: Counter = Counter()
    stalled: List[Delivery] = []
    for t, tok in enumerate(tokens):
        src = tmap.attention_nodes[tok.src_rank]
        precision = "int8" if quantize else tok.precision
        for j in range(gating.k):
            e = int(gating.expert_ids[t, j])
            dest = int(node_of_expert[e])
            tramp = tmap.trampoline_of(dest)
            d = Delivery(tok.token_index, e, j, src, np.asarray(tok.hidden), precision, via=tramp, row=t)
            stage1[(src, tramp)] += 1
            if tramp in failed:
                stalled.append(d)
                continue
            if dest != tramp:
                stage2[(tramp, dest)] += 1
            received[dest].append(d)
    a, tr = len(tmap.attention_nodes), len(tmap.trampolines)
    meta = {"stage1": a * tr, "stage2": sum(len(v) for v in tmap.second_stage.values()),
            "naive": a * len(tmap.expert_nodes), "attention_facing": a * tr}
    timing = None
    if cost is not None:
        if token_bytes is None:
            token_bytes = max((tok.nbytes for tok in tokens), default=0)
        timing = _two_stage_timing("a2e", tmap, stage1, stage2, token_bytes // 2 if quantize else token_bytes,
                                   cost, start_ns, failed, trace, forward=True)
    return A2EResult(received, stage1, stage2, stalled, meta, node_of_expert, timing)


def e2a(expert_outputs: Mapping[int, Sequence[np.ndarray]], gating: GatingOutput, tmap: TrampolineMap,
        routed: A2EResult, *, cost: Optional[CollectiveCostModel] = None,
        start_ns: Optional[Sequence[int]] = None, trace: Optional[Trace] = None,
        token_bytes: Optional[int] = None) -> Tuple[Dict[int, Dict[int, np.ndarray]], Optional[CollectiveTiming]]:
    """Return weighted expert outputs to attention nodes via the trampolines.

    ``expert_outputs[node][i]`` pairs with ``routed.received[node][i]``.
    Returns ``{attention_node: {token_index: vector}}`` and the timing record.
    """
    if routed.stalled:
        raise IncompleteCombineError(f"{len(routed.stalled)} deliveries stalled behind failed trampolines")
    contrib = _gather(expert_outputs, routed.received)
    back1: Counter = Counter()
    back2: Counter = Counter()
    for d, _ in contrib.values():
        node = int(routed.node_of_expert[d.expert])
        if node != d.via:
            back1[(node, d.via)] += 1
        back2[(d.via, d.src)] += 1
    result: Dict[int, Dict[int, np.ndarray]] = {n: {} for n in tmap.attention_nodes}
    for t in range(gating.num_tokens):
        d0 = contrib.get((t, 0))
        src, acc = _reduce_row(contrib, gating, t)
        result[src][d0[0].token_index] = acc
    timing = None
    if cost is not None:
        if token_bytes is None:
            token_bytes = max((np.asarray(v).size * 2 for outs in expert_outputs.values() for v in outs),
                              default=0)
        reduce_tokens = Counter({src: len(toks) for src, toks in result.items()})
        timing = _two_stage_timing("e2a", tmap, back1, back2, token_bytes, cost, start_ns, set(), trace,
                                   forward=False, reduce_tokens=reduce_tokens)
    return result, timing


def _two_stage_timing(name: str, tmap: TrampolineMap, hop1: Counter, hop2: Counter, token_bytes: int,
                      cost: CollectiveCostModel, start_ns, failed: set, trace: Optional[Trace], *,
                      forward: bool, reduce_tokens: Optional[Counter] = None) -> CollectiveTiming:
    """Time the two hops of a2e (attention->trampoline->expert) or e2a (expert->trampoline->attention).

    Bulk data moves with DMA semantics, metadata with memory semantics.
    """
    att = list(tmap.attention_nodes)
    tramps = list(tmap.trampolines)
    launch = us_to_ns(cost.kernel_launch_us)
    hop = us_to_ns(cost.hop_overhead_us)
    poll = cost.latency.poll_ns
    nodes = sorted(set(att) | set(tmap.expert_nodes))
    start = {n: 0 for n in nodes}
    if start_ns is not None:
        for n, s in zip(att if forward else tmap.expert_nodes, start_ns):
            start[n] = int(s)
    ends: Dict[int, Optional[int]] = {}
    meta_ready: Dict[int, Optional[int]] = {}
    straggler = None
    updates = 0
    hop_bytes = 0

    if forward:
        # hop 1: every attention node publishes counts to every trampoline
        ready = {}
        for s in att:
            out_bytes = sum(c for (a_, _), c in hop1.items() if a_ == s) * token_bytes
            ready[s] = start[s] + launch + cost.stream_ns(out_bytes) + cost.meta_fanout_ns(len(tramps))
            updates += len(tramps)
        tramp_done = {}
        last_att = max(ready, key=lambda n: (ready[n], -n))
        straggler = last_att
        for t in tramps:
            if t in failed:
                tramp_done[t] = None
                continue
            b = next_tick(start[t], max(ready.values()), poll)
            inb = sum(c for (_, t_), c in hop1.items() if t_ == t) * token_bytes
            hop_bytes += inb
            tramp_done[t] = (b + cost.bulk_ns(inb, "dma") if inb else b) + hop
            meta_ready[t] = b
            if trace is not None:
                trace.add(b, t, f"{name}_barrier", -1, 0, f"peers={len(att)}")
                trace.add(tramp_done[t], t, f"{name}_pull", -1, inb, "dma")
        # hop 2 (A2E'): trampolines forward to their second-stage sets
        for t in tramps:
            members = tmap.second_stage[t]
            if tramp_done[t] is None:
                ends[t] = None
                for m in members:
                    ends[m] = None
                continue
            ends[t] = tramp_done[t]
            if not members:
                continue
            fwd_ready = tramp_done[t] + cost.meta_fanout_ns(len(members))
            updates += len(members)
            for m in members:
                inb = hop2.get((t, m), 0) * token_bytes
                hop_bytes += inb
                b = next_tick(start[m], fwd_ready, poll)
                ends[m] = (b + cost.bulk_ns(inb, "dma") if inb else b) + hop
                if trace is not None:
                    trace.add(ends[m], m, f"{name}_forward", t, inb, "dma")
        participants = tmap.expert_nodes
    else:
        # hop 1 (E2A): non-trampolines send outputs to their trampoline
        tramp_ready = {}
        for t in tramps:
            members = tmap.second_stage[t]
            arrivals = []
            for m in members:
                out_bytes = hop1.get((m, t), 0) * token_bytes
                arrivals.append(start[m] + launch + cost.stream_ns(out_bytes) + cost.meta_fanout_ns(1))
                updates += 1
            base = start[t] + launch
            if arrivals:
                b = next_tick(start[t], max(max(arrivals), base), poll)
                inb = sum(hop1.get((m, t), 0) for m in members) * token_bytes
                hop_bytes += inb
                base = b + (cost.bulk_ns(inb, "dma") if inb else 0)
            tramp_ready[t] = base + hop + cost.meta_fanout_ns(len(att))
            updates += len(att)
            if trace is not None:
                trace.add(tramp_ready[t], t, f"{name}_meta", -1, 32 * len(att), f"fanout={len(att)}")
        straggler = max(tramp_ready, key=lambda n: (tramp_ready[n], -n))
        # hop 2 (E2A'): attention nodes wait on every trampoline then pull and reduce
        for s in att:
            b = next_tick(start[s], max(tramp_ready.values()), poll)
            inb = sum(c for (t_, a_), c in hop2.items() if a_ == s) * token_bytes
            hop_bytes += inb
            reduce_ns = int(cost.reduce_per_token_ns * (reduce_tokens or {}).get(s, 0))
            ends[s] = b + (cost.bulk_ns(inb, "dma") if inb else 0) + reduce_ns + hop
            meta_ready[s] = b
            if trace is not None:
                trace.add(b, s, f"{name}_barrier", -1, 0, f"peers={len(tramps)}")
                trace.add(ends[s], s, f"{name}_done", -1, inb, "dma")
        participants = att
    done = [ends.get(n) for n in participants]
    t0 = min(start[n] for n in (att if forward else tmap.expert_nodes))
    t_end = None if any(e is None for e in done) else max(done)
    return CollectiveTiming(name, len(nodes), hop_bytes, t0, t_end, straggler,
                            [start[n] for n in participants], done,
                            [meta_ready.get(n) for n in participants], [meta_ready.get(n) for n in participants],
                            metadata_updates=updates)


def dense_oracle(gating: GatingOutput, src_of_token: Sequence[int], dest_of_expert: Sequence[int]) -> Counter:
    """Direct enumeration of (token, expert, destination) triples."""
    out: Counter = Counter()
    for t in range(gating.num_tokens):
        for j in range(gating.k):
            e = int(gating.expert_ids[t, j])
            out[(t, e, int(dest_of_expert[e]))] += 1
    return out


# -- calibration of the disaggregated collectives --------------------------------------

DISAGG_TARGETS_US = (172.0, 193.0)


def disaggregated_latencies(cost: CollectiveCostModel, attention: int = 160, experts: int = 288,
                            domains: int = 3, batch: int = 96, k: int = 8, hidden: int = 7168,
                            num_logical: int = 256, seed: int = 0) -> Tuple[float, float]:
    """Modeled (A2E, E2A) latency in us for one DP domain's micro-batch.

    Token vectors are carried as 1-element placeholders; byte counts use ``hidden``.
    """
    rng = np.random.default_rng(seed)
    tmap = TrampolineMap.build(range(attention), range(attention, attention + experts))
    n_tok = attention * batch // domains
    toks = [TokenPayload(i, np.zeros(1), src_rank=i % attention) for i in range(n_tok)]
    ids = np.argsort(rng.random((n_tok, num_logical)), axis=1)[:, :k]
    gating = GatingOutput(ids, np.full((n_tok, k), 1.0 / k))
    fwd = a2e(toks, gating, tmap, cost=cost, quantize=True, token_bytes=hidden * 2)
    outs = {n: [d.hidden for d in ds] for n, ds in fwd.received.items()}
    _, back = e2a(outs, gating, tmap, fwd, cost=cost, token_bytes=hidden * 2)
    return fwd.timing.latency_us, back.latency_us


def calibrate_disaggregated(base: Optional[CollectiveCostModel] = None,
                            targets: Tuple[float, float] = DISAGG_TARGETS_US, **layout) -> CollectiveCostModel:
    """Fit ``hop_overhead_us`` and ``reduce_per_token_ns`` so the model hits the target latencies.

    A2E is affine in the hop overhead and independent of the reduction cost;
    E2A is affine in both, so two probes per knob solve it exactly.
    """
    base = base or CollectiveCostModel()
    zero = replace_cost(base, hop_overhead_us=0.0, reduce_per_token_ns=0.0)
    a0, e0 = disaggregated_latencies(zero, **layout)
    a1, e1 = disaggregated_latencies(replace_cost(zero, hop_overhead_us=1.0), **layout)
    _, e2 = disaggregated_latencies(replace_cost(zero, reduce_per_token_ns=1.0), **layout)
    hop = (targets[0] - a0) / (a1 - a0)
    red = (targets[1] - e0 - hop * (e1 - e0)) / (e2 - e0)
    return replace_cost(base, hop_overhead_us=round(hop, 3), reduce_per_token_ns=round(red, 3))


def replace_cost(cost: CollectiveCostModel, **changes) -> CollectiveCostModel:
    return CollectiveCostModel(**{**asdict_shallow(cost), **changes})


def disaggregated_cost() -> CollectiveCostModel:
    """Cost model with the trampoline knobs frozen at ``calibrate_disaggregated()``."""
    return replace_cost(CollectiveCostModel(), hop_overhead_us=66.851, reduce_per_token_ns=335.063)
