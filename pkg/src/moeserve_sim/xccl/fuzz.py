"""Randomized send/receive workload that checks the p2p protocol invariants.

Payloads are windows into one seeded random buffer with the event id stamped
in front, so every transfer is distinct without generating gigabytes of noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..engine import Clock, Trace
from ..fabric import MiB, Fabric, LatencyModel, build_topology
from .p2p import COMPLETE, TransferRequest, XcclP2P

DEFAULT_CHANNELS = ((0, 1), (1, 0), (2, 3), (3, 2), (0, 2), (1, 3))


@dataclass
class FuzzReport:
    transfers: int = 0
    bytes: int = 0
    mismatched: List[int] = field(default_factory=list)
    fifo_violations: List[Tuple[int, int]] = field(default_factory=list)
    ack_order_violations: List[int] = field(default_factory=list)
    chunk_id_violations: List[int] = field(default_factory=list)
    not_complete: List[int] = field(default_factory=list)
    overwrite_violations: int = 0
    sim_time_ns: int = 0

    @property
    def ok(self) -> bool:
        return self.transfers > 0 and not (self.mismatched or self.fifo_violations or self.ack_order_violations
                                           or self.chunk_id_violations or self.not_complete
                                           or self.overwrite_violations)


def log_uniform_sizes(rng: np.random.Generator, n: int, lo: int = 1, hi: int = 9 * 1_000_000) -> np.ndarray:
    return np.exp(rng.uniform(math.log(lo), math.log(hi), n)).astype(np.int64)


def fuzz_p2p(n_transfers: int = 10_000, seed: int = 0, *, channels: Sequence[Tuple[int, int]] = DEFAULT_CHANNELS,
             outstanding: int = 3, max_bytes: int = 9 * 1_000_000, zero_copy: bool = False,
             jitter_sigma: float = 0.0) -> FuzzReport:
    rng = np.random.default_rng(seed)
    clock = Clock(trace=Trace(enabled=False))
    fab = Fabric(build_topology(2, 2, 48), LatencyModel(jitter_sigma=jitter_sigma), clock=clock, seed=seed)
    # bounded ack waits turn a wedged channel into a reported failure instead of a hang
    p2p = XcclP2P(fab, zero_copy=zero_copy, max_ack_timeouts=20)
    noise = rng.integers(0, 256, 2 * max_bytes + 8, dtype=np.uint8).tobytes()
    sizes = log_uniform_sizes(rng, n_transfers, 1, max_bytes)
    chan_of = rng.integers(0, len(channels), n_transfers)
    modes = ["sync" if b else "async" for b in rng.integers(0, 2, len(channels))]
    cores = rng.integers(1, 9, n_transfers)
    region = 16 * MiB
    report = FuzzReport()
    env = fab.env

    def payload_for(ev: int, size: int) -> bytes:
        start = (ev * 7919) % max_bytes
        stamp = ev.to_bytes(8, "little")
        body = stamp + noise[start:start + size]
        return body[:size]

    def one(chan, ci: int, slot: int, ev: int, size: int, cpu: int, mode: str, log: List[Tuple[int, int]]):
        payload = payload_for(ev, size)
        req = TransferRequest(ev, size, int(cpu), mode)
        # regions are unique per channel and slot since channels share dies
        dst = src = (ci * outstanding + slot) * region
        fab.store(chan.src, src, payload)
        recv = p2p.receive(chan, req, dst)
        send = p2p.send(chan, req, payload)
        yield recv.event & send.event
        log.append((ev, recv.t_complete))
        report.transfers += 1
        report.bytes += size
        if recv.status != COMPLETE or send.status != COMPLETE:
            report.not_complete.append(ev)
            return
        if fab.load(chan.dst, dst, size) != payload:
            report.mismatched.append(ev)
        if send.t_complete < recv.t_complete:
            report.ack_order_violations.append(ev)
        if recv.chunk_ids != list(range(1, recv.chunks + 1)):
            report.chunk_id_violations.append(ev)

    def driver(ci: int, evs: List[int]):
        chan = p2p.channel(*channels[ci])
        log: List[Tuple[int, int]] = []
        active: Dict[int, object] = {}
        for ev in evs:
            while len(active) >= outstanding:
                yield env.any_of(list(active.values()))
                active = {s: p for s, p in active.items() if not p.triggered}
            slot = next(s for s in range(outstanding) if s not in active)
            active[slot] = env.process(one(chan, ci, slot, ev, int(sizes[ev - 1]), cores[ev - 1], modes[ci], log))
        if active:
            yield env.all_of(list(active.values()))
        # the receive side must complete in posting order
        order = [ev for ev, _ in sorted(log, key=lambda x: (x[1], x[0]))]
        for a, b in zip(order, sorted(order)):
            if a != b:
                report.fifo_violations.append((a, b))
                break

    for ci in range(len(channels)):
        evs = [i + 1 for i in range(n_transfers) if chan_of[i] == ci]
        env.process(driver(ci, evs))
    env.run()
    report.sim_time_ns = fab.now
    report.overwrite_violations = sum(ch.ring.overwrite_violations for ch in p2p.channels)
    return report
