"""Disaggregated prefill/decode serving with KV-cache handoff over the p2p library.

Each request walks eight numbered steps:

1. pick a prefill TE (cache, load and length aware)
2. the TE places it on one of its DP groups, which computes the prefill
3. the DP registers a transfer task holding only block addresses
4. pick a decode TE by live load
5. the decode TE routes to a DP group by projected KV usage
6. capacity check: with too few free KV blocks the RECV is deferred
7. the KV bytes move with asynchronous send/recv
8. both sides poll completion; prefill frees its blocks, decode enqueues

Every KV block goes through a ledger so that leaks and double frees show up
in an audit.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import simpy

from ..engine import Clock, ms_to_ns, us_to_ns
from ..fabric import ConfigError, Fabric, GiB, KiB, LatencyModel, build_topology
from ..requests import DECODING, DONE, KV_READY, PREFILLING, TRANSFERRING, Request
from ..scheduler import BACKPRESSURE, CostModel, DecisionLog, DpGroupState, prefill_cost, route_decode
from ..xccl.p2p import COMPLETE, TransferRequest, XcclP2P
from .mtp import AcceptanceSampler, DecodeTiming, MtpConfig, decode_iteration

REGISTERED = "registered"
RECEIVING = "receiving"
TRANSFER_COMPLETE = "complete"

SCALE_UP = "scale-up"
SCALE_OUT = "scale-out"

KV_POOL_BASE = 1 * GiB
STAGING_BASE = 8 * GiB


class DeadlockError(RuntimeError):
    """The event queue drained while requests were still in flight."""

    def __init__(self, stuck: List[dict]):
        super().__init__(f"{len(stuck)} request(s) stuck with no pending events")
        self.stuck = stuck


@dataclass
class KvBlock:
    id: int
    owner: Tuple[str, int]  # ("prefill" | "decode", die)
    size: int
    address: int
    request: int


@dataclass
class TransferTask:
    request_id: int
    src_die: int
    addresses: List[int]
    block_bytes: int
    path: str = SCALE_UP
    status: str = REGISTERED

    @property
    def nbytes(self) -> int:
        return len(self.addresses) * self.block_bytes


class KvLedger:
    """Every block is allocated once and then either released or reclaimed once."""

    def __init__(self):
        self.blocks: Dict[int, KvBlock] = {}
        self.state: Dict[int, str] = {}
        self.events: List[Tuple[int, str, int, int]] = []  # (time, op, block, request)
        self.bad_ops = 0
        self._next = 0

    def allocate(self, owner, addresses: Sequence[int], size: int, request: int, now: int) -> List[KvBlock]:
        out = []
        for addr in addresses:
            b = KvBlock(self._next, owner, size, addr, request)
            self._next += 1
            self.blocks[b.id] = b
            self.state[b.id] = "live"
            self.events.append((now, "allocate", b.id, request))
            out.append(b)
        return out

    def _end(self, blocks: Sequence[KvBlock], op: str, now: int) -> None:
        for b in blocks:
            if self.state.get(b.id) != "live":
                self.bad_ops += 1
                continue
            self.state[b.id] = op
            self.events.append((now, op, b.id, b.request))

    def release(self, blocks: Sequence[KvBlock], now: int) -> None:
        self._end(blocks, "released", now)

    def reclaim(self, blocks: Sequence[KvBlock], now: int) -> None:
        self._end(blocks, "reclaimed", now)

    def audit(self) -> dict:
        c = Counter(self.state.values())
        allocated = len(self.blocks)
        return {"allocated": allocated, "released": c["released"], "reclaimed": c["reclaimed"],
                "live": c["live"], "bad_ops": self.bad_ops,
                "balanced": c["live"] == 0 and self.bad_ops == 0 and c["released"] + c["reclaimed"] == allocated}


class BlockPool:
    """Fixed block slots on one die; waiters block on ``changed`` until slots come back."""

    def __init__(self, env: simpy.Environment, die: int, capacity: int, block_bytes: int):
        self.env = env
        self.die = die
        self.capacity = capacity
        self.block_bytes = block_bytes
        self.free_slots = list(range(capacity))
        self.changed = env.event()

    @property
    def free(self) -> int:
        return len(self.free_slots)

    def take(self, n: int) -> List[int]:
        if n > len(self.free_slots):
            raise RuntimeError(f"die {self.die}: take {n} with {len(self.free_slots)} free")
        taken, self.free_slots = self.free_slots[:n], self.free_slots[n:]
        return [KV_POOL_BASE + s * self.block_bytes for s in taken]

    def give(self, addresses: Sequence[int]) -> None:
        self.free_slots.extend((a - KV_POOL_BASE) // self.block_bytes for a in addresses)
        self.free_slots.sort()
        old, self.changed = self.changed, self.env.event()
        old.succeed()


@dataclass
class PrefillProfile:
    """Compute speed and KV path of one prefill deployment."""

    name: str = "supernode"
    per_token_us: float = 1.0
    step_overhead_us: float = 200.0
    path: str = SCALE_UP
    # only used on the scale-out path
    latency: LatencyModel = field(default_factory=lambda: LatencyModel(
        mem_startup_us=25.0, dma_startup_us=30.0, bandwidth_gbps=12.5, core_efficiency=1.0, cores_max=1))

    def __post_init__(self):
        if self.path not in (SCALE_UP, SCALE_OUT):
            raise ConfigError(f"unknown KV path {self.path!r}")
        if self.per_token_us < 0 or self.step_overhead_us < 0:
            raise ConfigError("prefill costs must be >= 0")


@dataclass
class PdConfig:
    prefill_profiles: List[PrefillProfile] = field(default_factory=lambda: [PrefillProfile()])
    dps_per_prefill_te: int = 2
    decode_tes: int = 1
    dps_per_decode_te: int = 4
    block_tokens: int = 128
    block_bytes: int = 4 * KiB
    prefill_blocks_per_dp: int = 1024
    decode_blocks_per_dp: int = 512
    decode_batch_limit: int = 16
    max_prompt_len: int = 32_768
    # how long a request may wait for decode capacity; None waits forever
    capacity_deadline_ms: Optional[float] = 60_000.0
    transfer_cores: int = 2
    transfer_timeout_us: float = 10_000.0
    cost: CostModel = field(default_factory=CostModel)
    mtp: MtpConfig = field(default_factory=MtpConfig)
    decode_timing: DecodeTiming = field(default_factory=lambda: DecodeTiming.from_forward(93.0, 2.0))

    def __post_init__(self):
        if not self.prefill_profiles or self.decode_tes < 1:
            raise ConfigError("need at least one prefill TE and one decode TE")
        if min(self.dps_per_prefill_te, self.dps_per_decode_te, self.block_tokens, self.block_bytes,
               self.prefill_blocks_per_dp, self.decode_blocks_per_dp, self.decode_batch_limit) < 1:
            raise ConfigError("PD sizes must be >= 1")

    @property
    def prefill_tes(self) -> int:
        return len(self.prefill_profiles)

    @property
    def stage_stride(self) -> int:
        return math.ceil(self.max_prompt_len / self.block_tokens) * self.block_bytes


@dataclass
class PdResult:
    requests: List[Request]
    steps: Dict[int, List[Tuple[int, int, str]]]  # request -> [(step, time, detail)]
    ledger: dict
    causes: Dict[str, int]
    bytes_moved: int
    mismatched_transfers: int
    backpressure_events: int
    unreserved_recvs: int
    decisions: DecisionLog
    end_ns: int

    @property
    def completed(self) -> int:
        return sum(r.state == DONE for r in self.requests)

    @property
    def failed(self) -> int:
        return sum(r.fail_cause is not None for r in self.requests)

    def ttft_ms(self) -> List[float]:
        return [(r.t_first_token - r.arrival_ns) / 1e6 for r in self.requests if r.t_first_token is not None]

    def tpot_ms(self) -> List[float]:
        out = []
        for r in self.requests:
            if r.state == DONE and len(r.tokens) > 1:
                out.append((r.t_done - r.t_first_token) / 1e6 / len(r.tokens))
        return out


def kv_pattern(request: int, nbytes: int) -> bytes:
    rng = np.random.default_rng(request)
    return rng.integers(0, 256, nbytes, dtype=np.uint8).tobytes()


class PdCluster:
    """Prefill and decode TEs sharing one fabric, driven by the simulation clock."""

    def __init__(self, cfg: PdConfig, clock: Optional[Clock] = None, *, seed: int = 0,
                 latency: Optional[LatencyModel] = None):
        self.cfg = cfg
        p_dies = cfg.prefill_tes * cfg.dps_per_prefill_te
        d_dies = cfg.decode_tes * cfg.dps_per_decode_te
        n = p_dies + d_dies
        self.fabric = Fabric(build_topology(max(1, math.ceil(n / 2)), 2, 8), latency, clock, seed=seed)
        self.env = self.fabric.env
        self.p2p = XcclP2P(self.fabric, timeout_us=cfg.transfer_timeout_us, max_ack_timeouts=2)
        if STAGING_BASE + cfg.stage_stride > self.fabric.app_bytes:
            raise ConfigError("staging region does not fit the app area")
        self.ledger = KvLedger()
        self.log = DecisionLog()
        env = self.env
        self.prefill_die = {(te, dp): te * cfg.dps_per_prefill_te + dp
                            for te in range(cfg.prefill_tes) for dp in range(cfg.dps_per_prefill_te)}
        self.decode_die = {(te, dp): p_dies + te * cfg.dps_per_decode_te + dp
                           for te in range(cfg.decode_tes) for dp in range(cfg.dps_per_decode_te)}
        self.prefill_pool = {d: BlockPool(env, d, cfg.prefill_blocks_per_dp, cfg.block_bytes)
                             for d in self.prefill_die.values()}
        self.prefill_lock = {d: simpy.Resource(env, 1) for d in self.prefill_die.values()}
        self.prefill_queued: Dict[int, List[int]] = defaultdict(list)
        self.prefix_cache: Dict[int, set] = defaultdict(set)
        self.decode_pool = {d: BlockPool(env, d, cfg.decode_blocks_per_dp, cfg.block_bytes)
                            for d in self.decode_die.values()}
        # decode-side views used by route_decode; ids are die numbers
        self.groups = {d: DpGroupState(d, cfg.decode_batch_limit, cfg.decode_blocks_per_dp)
                       for d in self.decode_die.values()}
        self.capacity_changed = {te: env.event() for te in range(cfg.decode_tes)}
        self.active: Dict[int, Dict[int, Request]] = {d: {} for d in self.decode_die.values()}
        self.wake: Dict[int, simpy.Event] = {d: env.event() for d in self.decode_die.values()}
        self.done_evt: Dict[int, simpy.Event] = {}
        self.reserved: Dict[int, Tuple[int, List[KvBlock]]] = {}
        self.positions: Dict[int, int] = {}
        self.sampler = AcceptanceSampler(cfg.mtp)
        self.steps: Dict[int, List[Tuple[int, int, str]]] = defaultdict(list)
        self.causes: Counter = Counter()
        self.bytes_moved = 0
        self.mismatched = 0
        self.backpressure_events = 0
        self.unreserved_recvs = 0
        self.requests: List[Request] = []
        for d in self.decode_die.values():
            env.process(self._decode_loop(d))

    @property
    def now(self) -> int:
        return self.fabric.now

    def _step(self, req: Request, n: int, detail: str = "") -> None:
        self.steps[req.id].append((n, self.now, detail))
        self.fabric.trace.add(self.now, -1, f"pd_step{n}", -1, req.prompt_len, f"req={req.id} {detail}".strip())

    def _fail(self, req: Request, cause: str, blocks=(), decode_die: Optional[int] = None) -> None:
        now = self.now
        if blocks:
            self.ledger.reclaim(blocks, now)
            self.prefill_pool[blocks[0].owner[1]].give([b.address for b in blocks])
        if decode_die is not None:
            self._drop_reservation(req, decode_die, reclaim=True)
        req.fail(cause, now)
        self.causes[cause] += 1

    # -- steps 1 and 2 -------------------------------------------------------------------
    def _prefill_view(self, die: int) -> DpGroupState:
        g = DpGroupState(die, 1 << 30, 1, prefix_cache=self.prefix_cache[die])
        return g

    def _choose_prefill(self, req: Request, dies: Sequence[int]) -> Tuple[int, List[float]]:
        queued = {d: self.prefill_queued[d] for d in dies}
        max_q = max([sum(q) for q in self.prefill_queued.values()] + [req.prompt_len])
        scores = [prefill_cost(req, self._prefill_view(d), queued[d], self.cfg.cost, max_q) for d in dies]
        best = min(range(len(dies)), key=lambda i: (scores[i], dies[i]))
        return dies[best], scores

    def _choose_prefill_te(self, req: Request) -> int:
        best_te, best = 0, math.inf
        for te in range(self.cfg.prefill_tes):
            dies = [self.prefill_die[(te, dp)] for dp in range(self.cfg.dps_per_prefill_te)]
            _, scores = self._choose_prefill(req, dies)
            # slower deployments look proportionally more loaded
            s = min(scores) * self.cfg.prefill_profiles[te].per_token_us
            if s < best - 1e-12:
                best_te, best = te, s
        return best_te

    # -- steps 4 to 6 -------------------------------------------------------------------
    def _decode_load(self, te: int) -> float:
        gs = [self.groups[self.decode_die[(te, dp)]] for dp in range(self.cfg.dps_per_decode_te)]
        return sum(g.active_batch for g in gs) / sum(g.batch_limit for g in gs) + \
            sum(g.kv_used_blocks for g in gs) / sum(g.kv_total_blocks for g in gs)

    def _reserve_blocks(self, req: Request) -> int:
        return math.ceil((req.prompt_len + req.max_output_len) / self.cfg.block_tokens)

    def _drop_reservation(self, req: Request, die: int, reclaim: bool) -> None:
        n, blocks = self.reserved.pop(req.id, (0, []))
        if not n:
            return
        if reclaim:
            self.ledger.reclaim(blocks, self.now)
        else:
            self.ledger.release(blocks, self.now)
        self.decode_pool[die].give([b.address for b in blocks])
        g = self.groups[die]
        g.kv_used_blocks -= n
        g.active_batch -= 1
        te = next(t for (t, _), d in self.decode_die.items() if d == die)
        old, self.capacity_changed[te] = self.capacity_changed[te], self.env.event()
        old.succeed()

    # -- whole request ------------------------------------------------------------------
    def submit(self, req: Request) -> simpy.Process:
        if req.prompt_len > self.cfg.max_prompt_len:
            raise ConfigError(f"request {req.id}: prompt above max_prompt_len")
        self.requests.append(req)
        return self.env.process(self._request_proc(req))

    def _request_proc(self, req: Request):
        cfg, env, fab = self.cfg, self.env, self.fabric
        if req.arrival_ns > self.now:
            yield env.timeout(req.arrival_ns - self.now)
        # 1
        te = self._choose_prefill_te(req)
        req.prefill_te = te
        self._step(req, 1, f"prefill_te={te}")
        # 2
        dies = [self.prefill_die[(te, dp)] for dp in range(cfg.dps_per_prefill_te)]
        pdie, scores = self._choose_prefill(req, dies)
        self.log.add(self.now, req.id, dies, scores, pdie)
        self._step(req, 2, f"prefill_die={pdie}")
        n_blocks = math.ceil(req.prompt_len / cfg.block_tokens)
        pool = self.prefill_pool[pdie]
        if n_blocks > pool.capacity:
            self._fail(req, "prompt_exceeds_kv_pool")
            return
        self.prefill_queued[pdie].append(req.prompt_len)
        prof = cfg.prefill_profiles[te]
        with self.prefill_lock[pdie].request() as lock:
            yield lock
            while pool.free < n_blocks:  # upstream backpressure: wait for our own blocks
                yield pool.changed
            addrs = pool.take(n_blocks)
            blocks = self.ledger.allocate(("prefill", pdie), addrs, cfg.block_bytes, req.id, self.now)
            req.advance(PREFILLING, self.now)
            hit = req.prefix_hit_rate(self.prefix_cache[pdie])
            dt = prof.step_overhead_us + req.prompt_len * (1.0 - hit) * prof.per_token_us
            yield env.timeout(us_to_ns(dt))
        self.prefill_queued[pdie].remove(req.prompt_len)
        self.prefix_cache[pdie].update(req.prefix_blocks)
        payload = kv_pattern(req.id, n_blocks * cfg.block_bytes)
        for i, a in enumerate(addrs):
            fab.store(pdie, a, payload[i * cfg.block_bytes:(i + 1) * cfg.block_bytes])
        req.t_first_token = self.now
        # 3: metadata only, no bytes move yet
        task = TransferTask(req.id, pdie, list(addrs), cfg.block_bytes, prof.path)
        req.advance(KV_READY, self.now)
        self._step(req, 3, f"blocks={n_blocks}")
        # 4
        loads = [self._decode_load(t) for t in range(cfg.decode_tes)]
        dte = min(range(cfg.decode_tes), key=lambda t: (loads[t], t))
        self._step(req, 4, f"decode_te={dte}")
        # 5 and 6
        reserve = self._reserve_blocks(req)
        group_ids = [self.decode_die[(dte, dp)] for dp in range(cfg.dps_per_decode_te)]
        if reserve > cfg.decode_blocks_per_dp:
            self._fail(req, "kv_reservation_exceeds_dp", blocks)
            return
        deadline = None if cfg.capacity_deadline_ms is None else self.now + ms_to_ns(cfg.capacity_deadline_ms)
        while True:
            choice = route_decode(req, [self.groups[g] for g in group_ids], reserve, log=self.log, now=self.now)
            self._step(req, 5, f"decode_die={choice}")
            if choice != BACKPRESSURE:
                break
            self.backpressure_events += 1
            self._step(req, 6, "deferred")
            waits = [self.capacity_changed[dte]]
            if deadline is not None:
                if self.now >= deadline:
                    self._fail(req, "decode_capacity_deadline", blocks)
                    return
                waits.append(env.timeout(deadline - self.now))
            yield env.any_of(waits)
        ddie = int(choice)
        g = self.groups[ddie]
        daddrs = self.decode_pool[ddie].take(reserve)
        dblocks = self.ledger.allocate(("decode", ddie), daddrs, cfg.block_bytes, req.id, self.now)
        self.reserved[req.id] = (reserve, dblocks)
        g.kv_used_blocks += reserve
        g.active_batch += 1
        req.decode_group = ddie
        self._step(req, 6, f"reserved={reserve}")
        # 7
        # backpressure safety: the RECV is only posted against a live reservation
        if req.id not in self.reserved or g.kv_used_blocks > g.kv_total_blocks or \
                self.decode_pool[ddie].free + g.kv_used_blocks != g.kv_total_blocks:
            self.unreserved_recvs += 1
        req.advance(TRANSFERRING, self.now)
        task.status = RECEIVING
        self._step(req, 7, task.path)
        stage = STAGING_BASE + (req.id % max(1, (fab.app_bytes - STAGING_BASE) // cfg.stage_stride)) * cfg.stage_stride
        data = b"".join(fab.load(pdie, a, cfg.block_bytes) for a in task.addresses)
        ok = yield from self._move(task, pdie, ddie, data, stage)
        # 8
        self._step(req, 8, "complete" if ok else "failed")
        if not ok:
            self._fail(req, "transfer_timeout", blocks, ddie)
            return
        if fab.load(ddie, stage, len(data)) != data:
            self.mismatched += 1
        for i, b in enumerate(dblocks[:n_blocks]):
            fab.store(ddie, b.address, data[i * cfg.block_bytes:(i + 1) * cfg.block_bytes])
        self.bytes_moved += len(data)
        task.status = TRANSFER_COMPLETE
        self.ledger.release(blocks, self.now)
        pool.give(addrs)
        req.advance(DECODING, self.now)
        done = env.event()
        self.done_evt[req.id] = done
        self.active[ddie][req.id] = req
        if not self.wake[ddie].triggered:
            self.wake[ddie].succeed()
        yield done
        self._drop_reservation(req, ddie, reclaim=False)
        req.t_done = self.now
        req.advance(DONE, self.now)

    def _move(self, task: TransferTask, src: int, dst: int, data: bytes, stage: int):
        """Step 7 on the task's path; returns True when both sides completed."""
        if task.path == SCALE_OUT:
            prof_lat = next(p.latency for p in self.cfg.prefill_profiles if p.path == SCALE_OUT)
            yield self.env.timeout(prof_lat.mem_ns(len(data), 1))
            if not self.fabric.link_up(src, dst):
                return False
            self.fabric.store(dst, stage, data)
            self.fabric.trace.add(self.now, src, "kv_scaleout", dst, len(data), f"req={task.request_id}")
            return True
        chan = self.p2p.channel(src, dst)
        req = TransferRequest(task.request_id + 1, len(data), self.cfg.transfer_cores, "async")
        recv = self.p2p.receive_async(chan, req, stage)
        send = self.p2p.send_async(chan, req, data)
        yield recv.event & send.event
        return XcclP2P.poll_completion(recv) == COMPLETE and XcclP2P.poll_completion(send) == COMPLETE

    def _decode_loop(self, die: int):
        cfg, env = self.cfg, self.env
        while True:
            if not self.active[die]:
                self.wake[die] = env.event()
                yield self.wake[die]
                continue
            batch = sorted(self.active[die])
            res = decode_iteration(batch, self.positions, cfg.mtp, self.sampler, cfg.decode_timing)
            yield env.timeout(ms_to_ns(res.duration_ms))
            for rid in batch:
                req = self.active[die][rid]
                room = req.max_output_len - len(req.tokens)
                req.tokens.extend(res.tokens[rid][:room])
                if len(req.tokens) >= req.max_output_len:
                    del self.active[die][rid]
                    self.done_evt.pop(rid).succeed()

    def run(self, until: Optional[int] = None) -> PdResult:
        self.env.run(until=until)
        stuck = [{"request": r.id, "state": r.state, "last_step": self.steps[r.id][-1] if self.steps[r.id] else None}
                 for r in self.requests if not r.finished]
        if stuck and until is None:
            raise DeadlockError(stuck)
        return PdResult(self.requests, dict(self.steps), self.ledger.audit(), dict(self.causes), self.bytes_moved,
                        self.mismatched, self.backpressure_events, self.unreserved_recvs, self.log, self.now)


def pd_workflow(requests: Sequence[Request], cfg: Optional[PdConfig] = None, *, seed: int = 0,
                clock: Optional[Clock] = None) -> PdResult:
    cluster = PdCluster(cfg or PdConfig(), clock, seed=seed)
    for r in requests:
        cluster.submit(r)
    return cluster.run()


def make_workload(n: int, *, seed: int = 0, prompt_range=(128, 4096), output_range=(16, 256),
                  arrival: str = "poisson", rate_per_s: float = 200.0, prefix_pool: int = 8) -> List[Request]:
    """Random requests; prompts share a few prefix-block chains so caching matters."""
    if arrival not in ("poisson", "fixed"):
        raise ConfigError(f"unknown arrival process {arrival!r}")
    if n and rate_per_s <= 0:
        raise ConfigError("rate must be > 0")
    rng = np.random.default_rng(seed)
    t = 0.0
    out = []
    for i in range(n):
        if i:
            t += rng.exponential(1.0 / rate_per_s) if arrival == "poisson" else 1.0 / rate_per_s
        plen = int(rng.integers(prompt_range[0], prompt_range[1] + 1))
        chain = int(rng.integers(prefix_pool))
        depth = int(rng.integers(0, 4))
        prefix = tuple(chain * 100 + j for j in range(depth))
        out.append(Request(i, plen, int(rng.integers(output_range[0], output_range[1] + 1)),
                           arrival_ns=int(round(t * 1e9)), prefix_blocks=prefix))
    return out


def workload_from_spec(spec: dict, seed: int = 0) -> List[Request]:
    """``{requests: [{prompt_len, max_output}], arrival: poisson|fixed, rate}``."""
    arrival = spec.get("arrival", "fixed")
    rate = float(spec.get("rate", 100.0))
    if arrival not in ("poisson", "fixed"):
        raise ConfigError(f"unknown arrival process {arrival!r}")
    rng = np.random.default_rng(seed)
    t = 0.0
    out = []
    for i, r in enumerate(spec.get("requests", [])):
        if i:
            t += rng.exponential(1.0 / rate) if arrival == "poisson" else 1.0 / rate
        out.append(Request(i, int(r["prompt_len"]), int(r.get("max_output", 256)), arrival_ns=int(round(t * 1e9))))
    return out
