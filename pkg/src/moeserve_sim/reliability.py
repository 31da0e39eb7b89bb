"""Failure detection and recovery.

Detection: tiered heartbeats (control plane -> TE, TE -> DP) and a link probe
that pushes a dummy payload through a suspect channel.  Recovery, coarse to
fine: restart everything, fail over prefill or decode independently, or roll
back a single iteration / mask a faulty memory region.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .engine import Clock, ms_to_ns, next_tick, us_to_ns
from .eplb import ReplicaAssignment
from .fabric import DIRECTION_ACK, ConfigError, Fabric, KiB, LatencyModel, MetadataField, MiB, build_topology
from .pipeline.mtp import AcceptanceSampler, MtpConfig, decode_iteration
from .xccl.p2p import PENDING, TransferRequest, XcclP2P

FAULT_KINDS = ("crash", "stuck_loop", "kv_stall", "net_transient", "mem_fault")
STAGES = ("restart_world", "pd_failover", "fine_grained")

HEALTHY = "healthy"
DECODE_SATURATION = "decode_saturation"
LINK_FAULT = "link_fault"


@dataclass
class HeartbeatConfig:
    control_to_te_ms: float = 1000.0
    te_to_dp_ms: float = 200.0
    miss_threshold: int = 3

    def __post_init__(self):
        if self.control_to_te_ms <= 0 or self.te_to_dp_ms <= 0:
            raise ConfigError("heartbeat intervals must be > 0")
        if self.miss_threshold < 1:
            raise ConfigError("miss_threshold must be >= 1")


@dataclass
class FaultEvent:
    kind: str
    location: str  # actor id, e.g. "te0", "te0/dp3", "die17"
    inject_time_ns: int = 0
    detail: str = ""

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ConfigError(f"unknown fault kind {self.kind!r}")
        if self.inject_time_ns < 0:
            raise ConfigError("inject_time_ns must be >= 0")


def load_fault_schedule(text: str) -> List[FaultEvent]:
    """Parse a JSON list of fault records."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"fault schedule line {e.lineno}: {e.msg}") from None
    if not isinstance(raw, list):
        raise ConfigError("fault schedule must be a JSON list")
    out = []
    for i, r in enumerate(raw):
        try:
            out.append(FaultEvent(r["kind"], str(r["location"]), int(r.get("inject_time_ns", 0)), r.get("detail", "")))
        except KeyError as e:
            raise ConfigError(f"fault record {i}: missing {e.args[0]}") from None
    return out


@dataclass
class RecoveryPolicy:
    stage: str = "fine_grained"
    kill_p_to_preserve_d: bool = False
    min_replicas_per_expert: int = 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown recovery stage {self.stage!r}")
        if self.min_replicas_per_expert < 1:
            raise ConfigError("min_replicas_per_expert must be >= 1")


@dataclass
class RecoveryRecord:
    time: int
    event: str
    action: str
    stage: str
    affected: List = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# -- heartbeats ------------------------------------------------------------------------

@dataclass
class Detection:
    time_ns: int
    tier: str  # "te_to_dp" | "control_to_te"
    actor: str
    misses: int


def heartbeat_monitor(config: HeartbeatConfig, actors: Dict[str, Sequence[str]], faults: Iterable[FaultEvent] = (),
                      horizon_ns: Optional[int] = None, ticks: Optional[int] = None,
                      clock: Optional[Clock] = None) -> List[Detection]:
    """Run both heartbeat tiers until ``horizon_ns`` (or ``ticks`` DP intervals).

    ``actors`` maps each TE to its DP masters.  A DP answers a heartbeat only
    while its event loop is running, so a hang and a crash look the same here.
    A TE that crashes or hangs stops answering the control plane and stops
    pinging its DPs.
    """
    clock = clock or Clock()
    env = clock.env
    dp_ns = ms_to_ns(config.te_to_dp_ms)
    te_ns = ms_to_ns(config.control_to_te_ms)
    if horizon_ns is None:
        horizon_ns = (ticks if ticks is not None else 100) * dp_ns
    dead_at: Dict[str, int] = {}
    for f in faults:
        if f.kind in ("crash", "stuck_loop"):
            dead_at[f.location] = min(dead_at.get(f.location, f.inject_time_ns), f.inject_time_ns)
    detections: List[Detection] = []

    def alive(actor: str, t: int) -> bool:
        return t < dead_at.get(actor, math.inf)

    def watch(tier, owner, members, interval):
        misses = {m: 0 for m in members}
        flagged = set()
        t = interval
        while t <= horizon_ns:
            yield env.timeout(t - env.now)
            if owner is not None and not alive(owner, t):
                return  # a dead TE no longer pings its DPs
            for m in members:
                if m in flagged:
                    continue
                if alive(m, t):
                    misses[m] = 0
                    continue
                misses[m] += 1
                if misses[m] >= config.miss_threshold:
                    flagged.add(m)
                    detections.append(Detection(env.now, tier, m, misses[m]))
                    clock.trace.add(env.now, -1, "heartbeat_detect", -1, 0, f"tier={tier} actor={m}")
            t += interval

    for te, dps in actors.items():
        env.process(watch("te_to_dp", te, list(dps), dp_ns))
    env.process(watch("control_to_te", None, list(actors), te_ns))
    env.run(until=horizon_ns + 1)
    return sorted(detections, key=lambda d: (d.time_ns, d.actor))


# -- link probe ----------------------------------------------------------------------------

PROBE_OFFSET = 512 * MiB  # app-area scratch region for dummy payloads


@dataclass
class ProbeResult:
    classification: str
    kv_stalled: bool
    probe_rtt_ns: Optional[int]


def link_probe(fabric: Fabric, src: int, dst: int, *, kv_stalled: bool, handler_interval_ns: int,
               probe_bytes: int = 4 * KiB, timeout_us: float = 5000.0, slow_us: float = 500.0,
               probe_core: Optional[int] = None) -> ProbeResult:
    """Push a dummy payload from ``src`` to ``dst`` and classify the channel.

    The receiver's handler notices the dummy at its next check (every
    ``handler_interval_ns``; a saturated decode die checks rarely) and writes
    an acknowledgment back.  No acknowledgment within the timeout means the
    link itself is blocked; a slow one, or stalled KV traffic with a live
    link, means the decode side is saturated.  The acknowledgment uses the
    metadata field of the last core so it never collides with a data channel.
    """
    env = fabric.env
    t0 = fabric.now
    core = fabric.topology.cores_per_die - 1 if probe_core is None else probe_core
    ack_index = fabric.topology.field_index(dst, core, DIRECTION_ACK)
    ack_off = fabric.memory(src).layout.field_offset(ack_index)
    marker = int(t0) + 1
    out: Dict[str, Optional[int]] = {"rtt": None}

    def handler(landed):
        yield landed
        tick = next_tick(t0, fabric.now, handler_interval_ns)
        if tick > fabric.now:
            yield env.timeout(tick - fabric.now)
        fabric.write_field(dst, src, ack_index, MetadataField(marker, 1, probe_bytes))

    def prober():
        landed = fabric.mem_write(src, dst, PROBE_OFFSET, bytes(probe_bytes), 1)
        env.process(handler(landed))
        res = yield fabric.poll(src, ack_off, lambda _m: fabric.read_field(src, ack_index).event_id == marker,
                                us_to_ns(timeout_us), busy=False)
        if res.satisfied:
            out["rtt"] = res.time_ns - t0

    proc = env.process(prober())
    env.run(until=proc)
    rtt = out["rtt"]
    if rtt is None:
        cls = LINK_FAULT
    elif kv_stalled or rtt > us_to_ns(slow_us):
        cls = DECODE_SATURATION
    else:
        cls = HEALTHY
    fabric.trace.add(fabric.now, src, "link_probe", dst, probe_bytes, f"class={cls} rtt={rtt}")
    return ProbeResult(cls, kv_stalled, rtt)


def probe_scenario(label: str, seed: int) -> ProbeResult:
    """Build a labeled channel situation with real KV traffic, then probe it.

    ``healthy``: the decode side posts its RECV and polls often.
    ``decode_saturation``: no KV capacity, so the RECV is never posted and the
    handler only checks between long decode iterations.
    ``link_fault``: the link is cut before traffic starts.
    """
    rng = np.random.default_rng(seed)
    lat = LatencyModel(jitter_sigma=float(rng.uniform(0.0, 0.3)))
    fab = Fabric(build_topology(1, 2, 8), lat, seed=seed)
    p2p = XcclP2P(fab, timeout_us=1000.0, max_ack_timeouts=None)
    src, dst = 0, 1
    if label == LINK_FAULT:
        fab.cut_link(src, dst)
    size = int(rng.integers(4 * KiB, 2 * 1024 * KiB))
    chan = p2p.channel(src, dst)
    req = TransferRequest(1, size, int(rng.integers(1, 9)), "async")
    send = p2p.send_async(chan, req, bytes(size))
    if label == HEALTHY:
        p2p.receive_async(chan, req, 64 * MiB)
    # observe the KV channel for a while before probing
    fab.env.run(until=us_to_ns(float(rng.uniform(2000.0, 4000.0))))
    stalled = send.status == PENDING
    if label == DECODE_SATURATION:
        interval = ms_to_ns(float(rng.uniform(5.0, 100.0)))
        timeout_us = 250_000.0
    else:
        interval = max(1, us_to_ns(float(rng.uniform(0.1, 5.0))))
        timeout_us = 250_000.0
    return link_probe(fab, src, dst, kv_stalled=stalled, handler_interval_ns=interval,
                      probe_bytes=int(rng.integers(64, 64 * KiB)), timeout_us=timeout_us)


def probe_fuzz(n: int = 1000, seed: int = 0) -> Tuple[int, List[Tuple[str, str]]]:
    """Classify ``n`` random labeled scenarios; returns (#correct, [(truth, got)])."""
    rng = np.random.default_rng(seed)
    labels = (HEALTHY, DECODE_SATURATION, LINK_FAULT)
    pairs = []
    for i in range(n):
        truth = labels[int(rng.integers(3))]
        got = probe_scenario(truth, int(rng.integers(1 << 31))).classification
        pairs.append((truth, got))
    return sum(t == g for t, g in pairs), pairs


# -- recovery -------------------------------------------------------------------------

@dataclass
class ClusterState:
    prefill_tes: List[str]
    decode_tes: List[str]
    assignment: ReplicaAssignment
    dp_groups: int
    ep_ranks: int
    lost_nodes: List[int] = field(default_factory=list)


def expert_deployment(num_routed: int = 256, num_shared: int = 32, redundant_per_node: int = 1,
                      fill_redundant: bool = True, seed: int = 0) -> ReplicaAssignment:
    """One logical expert per die plus redundant slots, optionally filled with replicas.

    Shared experts get logical ids after the routed ones.
    """
    n = num_routed + num_shared
    asg = ReplicaAssignment.initial(n, n, redundant_per_node)
    if not fill_redundant:
        return asg
    rng = np.random.default_rng(seed)
    slots = {e: list(ss) for e, ss in asg.slots.items()}
    for s in asg.redundant_slots:
        node = asg.slot_node[s]
        # replicate some expert that does not already live on this node
        while True:
            e = int(rng.integers(n))
            if all(asg.slot_node[x] != node for x in slots[e]):
                break
        slots[e].append(s)
    return ReplicaAssignment(slots, dict(asg.slot_node), asg.budget, list(asg.redundant_slots))


def vertical_scale(asg: ReplicaAssignment, lost_nodes: Iterable[int],
                   min_replicas: int = 1) -> Optional[ReplicaAssignment]:
    """Drop every slot on ``lost_nodes`` and re-home experts left below ``min_replicas``.

    Orphans take free redundant slots on surviving nodes first, then evict a
    redundant copy of the expert with the most live replicas.  Returns None
    when the floor cannot be met, which means escalation.
    """
    lost = set(int(x) for x in lost_nodes)
    slots = {e: [s for s in ss if asg.slot_node[s] not in lost] for e, ss in asg.slots.items()}
    live_redundant = [s for s in asg.redundant_slots if asg.slot_node[s] not in lost]
    used = {s for ss in slots.values() for s in ss}
    free = sorted(s for s in live_redundant if s not in used)
    short = sorted((e for e, ss in slots.items() if len(ss) < min_replicas), key=lambda e: (len(slots[e]), e))
    for e in short:
        while len(slots[e]) < min_replicas:
            if free:
                slots[e].append(free.pop(0))
                continue
            donor = max((d for d in slots if len(slots[d]) > min_replicas),
                        key=lambda d: (len(slots[d]), -d), default=None)
            if donor is None:
                return None
            s = next(x for x in reversed(slots[donor]) if x in live_redundant)
            slots[donor].remove(s)
            slots[e].append(s)
    node_of = {s: n for s, n in asg.slot_node.items() if n not in lost}
    return ReplicaAssignment(slots, node_of, asg.budget, live_redundant)


def restart_world(state: ClusterState, *, decode_load_ms: Sequence[float] = (), prefill_load_ms: Sequence[float] = (),
                  start_ns: int = 0) -> Tuple[List[RecoveryRecord], int, int]:
    """Stop everything, bring decode TEs back first, then prefill.

    Returns the records plus the times at which all decode and all prefill
    TEs were ready.
    """
    recs = [RecoveryRecord(start_ns, "restart_world", "stop_all", "restart_world",
                           state.decode_tes + state.prefill_tes)]
    t_dec = start_ns
    for i, te in enumerate(state.decode_tes):
        ready = start_ns + ms_to_ns(decode_load_ms[i] if i < len(decode_load_ms) else 30_000.0)
        recs.append(RecoveryRecord(ready, "restart_world", "decode_ready", "restart_world", [te]))
        t_dec = max(t_dec, ready)
    t_pre = t_dec
    for i, te in enumerate(state.prefill_tes):
        ready = t_dec + ms_to_ns(prefill_load_ms[i] if i < len(prefill_load_ms) else 20_000.0)
        recs.append(RecoveryRecord(ready, "restart_world", "prefill_ready", "restart_world", [te]))
        t_pre = max(t_pre, ready)
    return sorted(recs, key=lambda r: r.time), t_dec, t_pre


def recover(event: FaultEvent, policy: RecoveryPolicy, state: ClusterState, *,
            affected_requests: Sequence[int] = ()) -> List[RecoveryRecord]:
    """Apply ``policy`` to ``event``; unreachable recoveries escalate to restart_world."""
    t = event.inject_time_ns
    recs: List[RecoveryRecord] = []
    stage = policy.stage
    if stage == "fine_grained":
        if event.kind == "net_transient":
            return [RecoveryRecord(t, event.kind, "rollback_one_iteration", stage, ["all_dp_groups"])]
        if event.kind == "mem_fault":
            return [RecoveryRecord(t, event.kind, "mask_region", stage, [event.location]),
                    RecoveryRecord(t, event.kind, "fail_requests", stage, list(affected_requests))]
        stage = "pd_failover"  # nothing finer applies
    if stage == "pd_failover":
        loc = event.location
        if loc in state.prefill_tes:
            return recs + [RecoveryRecord(t, event.kind, "restart_prefill_te", stage, [loc])]
        if loc in state.decode_tes or loc.startswith("die"):
            if policy.kill_p_to_preserve_d and state.prefill_tes:
                victim = state.prefill_tes[-1]
                state.prefill_tes = state.prefill_tes[:-1]
                return recs + [RecoveryRecord(t, event.kind, "kill_prefill_for_decode", stage, [victim, loc])]
            lost = [int(loc[3:])] if loc.startswith("die") else []
            new = vertical_scale(state.assignment, state.lost_nodes + lost, policy.min_replicas_per_expert)
            if new is not None:
                state.assignment = new
                state.lost_nodes = sorted(set(state.lost_nodes + lost))
                state.ep_ranks -= len(lost)
                state.dp_groups -= len(lost)
                return recs + [RecoveryRecord(t, event.kind, "vertical_scale", stage,
                                              [f"ep_ranks={state.ep_ranks}", f"dp_groups={state.dp_groups}"])]
            recs.append(RecoveryRecord(t, event.kind, "escalate", stage, ["replica floor unreachable"]))
        else:
            recs.append(RecoveryRecord(t, event.kind, "escalate", stage, [f"unknown actor {loc}"]))
    rw, _, _ = restart_world(state, start_ns=t)
    return recs + rw


# -- iteration rollback ------------------------------------------------------------------

@dataclass
class RollbackResult:
    tokens: Dict[int, List[int]]
    executed: List[int]  # iteration index of every execution, re-runs included
    rollbacks: List[int]
    time_ms: float
    records: List[RecoveryRecord]


def decode_with_rollback(requests: Sequence[int], iterations: int, mtp: MtpConfig, *,
                         transient_at: Iterable[int] = (), dp_groups: int = 4, iteration_ms: float = 95.0,
                         broadcast_us: float = 50.0) -> RollbackResult:
    """Decode ``iterations`` steps; a network transient aborts that step everywhere.

    Tokens are produced (sampler advanced, positions moved) before the
    failure surfaces at the collective, so recovery must restore the
    pre-iteration sampler state and positions and re-run the step.
    """
    faults = set(int(i) for i in transient_at)
    sampler = AcceptanceSampler(mtp)
    positions: Dict[int, int] = {}
    tokens: Dict[int, List[int]] = {r: [] for r in requests}
    groups = [list(requests[g::dp_groups]) for g in range(dp_groups)]
    executed, rollbacks, recs = [], [], []
    t = 0.0
    i = 0
    while i < iterations:
        snap = (sampler.snapshot(), dict(positions))
        out: Dict[int, List[int]] = {}
        for g in groups:
            if g:
                out.update(decode_iteration(g, positions, mtp, sampler).tokens)
        executed.append(i)
        t += iteration_ms
        if i in faults:
            faults.discard(i)
            sampler.restore(snap[0])
            positions = dict(snap[1])
            t += broadcast_us / 1000.0
            rollbacks.append(i)
            recs.append(RecoveryRecord(ms_to_ns(t), "net_transient", "rollback_one_iteration", "fine_grained",
                                       [f"iteration={i}", f"groups={dp_groups}"]))
            continue
        for r, toks in out.items():
            tokens[r].extend(toks)
        i += 1
    return RollbackResult(tokens, executed, rollbacks, t, recs)


# -- memory-fault masking ----------------------------------------------------------------

@dataclass
class MaskResult:
    failed: List[int]
    masked_blocks: List[int]
    tokens: Dict[int, List[int]]
    time_ms: float


def mem_fault_masking(num_requests: int = 60, blocks_per_request: int = 4, iterations: int = 20, *,
                      fault_blocks: Sequence[int] = (), fault_at: int = 5, mtp: Optional[MtpConfig] = None,
                      iteration_ms: float = 95.0, mask_pause_ms: float = 5.0) -> MaskResult:
    """One DP's KV pool with contiguous per-request blocks; a fault hits ``fault_blocks``.

    At iteration ``fault_at`` the faulty blocks are masked (never handed out
    again), their owners fail, and decoding continues for everyone else
    after a short pause.
    """
    mtp = mtp or MtpConfig()
    owner = {r * blocks_per_request + b: r for r in range(num_requests) for b in range(blocks_per_request)}
    bad = sorted(set(int(b) for b in fault_blocks))
    unknown = [b for b in bad if b not in owner]
    if unknown:
        raise ConfigError(f"fault blocks outside the pool: {unknown}")
    victims = sorted({owner[b] for b in bad})
    sampler = AcceptanceSampler(mtp)
    positions: Dict[int, int] = {}
    tokens: Dict[int, List[int]] = {r: [] for r in range(num_requests)}
    live = list(range(num_requests))
    t = 0.0
    for i in range(iterations):
        if i == fault_at and bad:
            live = [r for r in live if r not in victims]
            t += mask_pause_ms
        if not live:
            break
        res = decode_iteration(live, positions, mtp, sampler)
        for r, toks in res.tokens.items():
            tokens[r].extend(toks)
        t += iteration_ms
    return MaskResult(victims, bad, tokens, t)
