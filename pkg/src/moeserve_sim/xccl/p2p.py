"""Point-to-point send/receive over the shared-memory fabric.

Sender: stage chunks through core buffers, write them into the receiver's
ring for this pair, publish ``tail_ptr`` in the receiver's metadata field,
then wait for the acknowledgment in its own metadata field.  Receiver: poll
its field, copy ring slots into the app area, acknowledge each consumed slot
and finally the whole transfer.

Usage inside a simpy process::

    h = p2p.send(chan, req, payload)
    yield h.event
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Tuple

import simpy

from ..engine import ceil_div, us_to_ns
from ..fabric import (DIRECTION_ACK, DIRECTION_DATA, ConfigError, Fabric, FabricError,
                      MetadataField, RingBuffer, chunk_sizes)

log = logging.getLogger(__name__)

PENDING = "pending"
COMPLETE = "complete"
FAULT = "fault"
TIMEOUT = "timeout"


class UsageError(RuntimeError):
    """API misuse: mixed modes on a channel, re-polling a consumed handle, ..."""


@dataclass
class TransferRequest:
    event_id: int
    payload_len: int
    cores: int = 2
    mode: str = "sync"
    semantics: str = "memory"

    def __post_init__(self):
        if self.cores < 1:
            raise ConfigError("TransferRequest.cores must be >= 1")
        if self.mode not in ("sync", "async"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.semantics not in ("memory", "dma"):
            raise ConfigError(f"unknown semantics {self.semantics!r}")
        if self.payload_len < 0:
            raise ConfigError("payload_len must be >= 0")


@dataclass
class Channel:
    src: int
    dst: int
    ring: RingBuffer
    local_meta_index: int
    remote_meta_index: int
    send_lock: simpy.Resource
    recv_lock: simpy.Resource
    mode: Optional[str] = None
    posted_recvs: Deque["TransferHandle"] = field(default_factory=deque)
    rendezvous: Optional[simpy.Event] = None
    completions: List[Tuple[str, int, int]] = field(default_factory=list)


@dataclass
class TransferHandle:
    kind: str
    channel: Channel
    request: TransferRequest
    event: simpy.Event
    t_post: int
    status: str = PENDING
    t_complete: Optional[int] = None
    chunks: int = 0
    stall_ns: int = 0
    core_ns: int = 0
    dst_offset: int = 0
    fault: Optional[str] = None
    consumed: bool = False
    chunk_ids: List[int] = field(default_factory=list)

    @property
    def latency_ns(self) -> Optional[int]:
        return None if self.t_complete is None else self.t_complete - self.t_post


class XcclP2P:
    """Send/receive engine for every ordered die pair on one fabric."""

    def __init__(self, fabric: Fabric, *, window: Optional[int] = None, zero_copy: bool = False,
                 timeout_us: float = 10_000.0, lead_core: int = 0,
                 max_ack_timeouts: Optional[int] = None):
        self.fabric = fabric
        self.zero_copy = zero_copy
        self.window = window if window is not None else fabric.ring_slots // 2
        if not 1 <= self.window < fabric.ring_slots:
            raise ConfigError("window must lie in 1..ring_slots-1")
        if fabric.ring_slot_bytes > fabric.staging_bytes:
            raise ConfigError("ring slot larger than the core staging buffer")
        self.timeout_ns = us_to_ns(timeout_us)
        self.lead_core = lead_core
        # None: a sender without acknowledgment stays blocked (reporting each timeout)
        self.max_ack_timeouts = max_ack_timeouts
        self._channels: Dict[Tuple[int, int], Channel] = {}

    @property
    def env(self):
        return self.fabric.env

    def channel(self, src, dst) -> Channel:
        src, dst = int(src), int(dst)
        if src == dst:
            raise ConfigError("a channel needs two distinct dies")
        key = (src, dst)
        chan = self._channels.get(key)
        if chan is None:
            topo = self.fabric.topology
            ring = self.fabric.memory(dst).layout.ring(src)
            chan = Channel(src, dst, ring,
                           local_meta_index=topo.field_index(dst, self.lead_core, DIRECTION_ACK),
                           remote_meta_index=topo.field_index(src, self.lead_core, DIRECTION_DATA),
                           send_lock=simpy.Resource(self.env, 1), recv_lock=simpy.Resource(self.env, 1))
            self._channels[key] = chan
        return chan

    @property
    def channels(self) -> List[Channel]:
        return list(self._channels.values())

    def _bind_mode(self, chan: Channel, mode: str) -> None:
        if chan.mode is None:
            chan.mode = mode
        elif chan.mode != mode:
            raise UsageError(f"channel {chan.src}->{chan.dst} is {chan.mode}; cannot mix in {mode}")

    def _chunk_plan(self, length: int) -> List[int]:
        sizes = list(chunk_sizes(length, self.fabric.ring_slot_bytes))
        return sizes or [0]  # an empty transfer still moves one (empty) slot

    # -- public API ---------------------------------------------------------------
    def send(self, chan: Channel, req: TransferRequest, payload) -> TransferHandle:
        payload = bytes(payload)
        if len(payload) != req.payload_len:
            raise ConfigError("payload length does not match request")
        self.fabric.check_cores(req.cores)
        self._bind_mode(chan, req.mode)
        h = TransferHandle("send", chan, req, self.env.event(), self.fabric.now)
        self.env.process(self._send_proc(h, payload))
        return h

    def receive(self, chan: Channel, req: TransferRequest, dst_offset: int) -> TransferHandle:
        self.fabric.check_cores(req.cores)
        self._bind_mode(chan, req.mode)
        layout = self.fabric.memory(chan.dst).layout
        if dst_offset < 0 or dst_offset + req.payload_len > layout.app_bytes:
            raise FabricError("receive region outside destination app area")
        h = TransferHandle("recv", chan, req, self.env.event(), self.fabric.now, dst_offset=dst_offset)
        chan.posted_recvs.append(h)
        if chan.rendezvous is not None and not chan.rendezvous.triggered:
            chan.rendezvous.succeed()
        self.env.process(self._recv_proc(h))
        return h

    def send_async(self, chan: Channel, req: TransferRequest, payload) -> TransferHandle:
        if req.mode != "async":
            req = TransferRequest(req.event_id, req.payload_len, req.cores, "async", req.semantics)
        return self.send(chan, req, payload)

    def receive_async(self, chan: Channel, req: TransferRequest, dst_offset: int) -> TransferHandle:
        if req.mode != "async":
            req = TransferRequest(req.event_id, req.payload_len, req.cores, "async", req.semantics)
        return self.receive(chan, req, dst_offset)

    @staticmethod
    def poll_completion(handle: TransferHandle) -> str:
        """Non-blocking status check; a finished handle may be observed once."""
        if handle.consumed:
            raise UsageError("handle already consumed")
        if handle.status != PENDING:
            handle.consumed = True
        return handle.status

    # -- sender -----------------------------------------------------------------------
    def _finish(self, h: TransferHandle, status: str, fault: Optional[str] = None) -> None:
        h.status = status
        h.fault = fault
        h.t_complete = self.fabric.now
        h.channel.completions.append((h.kind, h.request.event_id, h.t_complete))
        h.event.succeed(h)

    def _send_proc(self, h: TransferHandle, payload: bytes):
        fab, env, chan, req = self.fabric, self.env, h.channel, h.request
        lat = fab.latency
        sync = req.mode == "sync"
        pool = fab.cores(chan.src)
        with chan.send_lock.request() as slot:
            yield slot
            if self.zero_copy:
                while not any(r.request.event_id == req.event_id for r in chan.posted_recvs):
                    chan.rendezvous = env.event()
                    yield chan.rendezvous
                target = next(r for r in chan.posted_recvs if r.request.event_id == req.event_id)
            yield pool.get(req.cores)
            t_cores = fab.now
            dma = req.semantics == "dma"
            startup = lat.dma_startup_us if dma else lat.mem_startup_us
            yield env.timeout(fab._jit(us_to_ns(startup)))
            sizes = self._chunk_plan(len(payload))
            h.chunks = len(sizes)
            ring = chan.ring
            sent = 0
            view = memoryview(payload)
            for chunk_id, n in enumerate(sizes, start=1):
                if ring.tail - self._acked(chan) >= self.window:
                    t_block = fab.now
                    ok = yield from self._await_ack(chan, req, busy=sync,
                                                    pred=lambda: ring.tail - self._acked(chan) < self.window,
                                                    limit=self.max_ack_timeouts)
                    if not ok:
                        pool.put(req.cores)
                        self._finish(h, TIMEOUT, "ack_timeout")
                        return
                    h.stall_ns += fab.now - t_block
                dt = int(-(-n // lat.dma_bandwidth_gbps)) if dma else lat.stream_ns(n, req.cores)
                if dt:
                    yield env.timeout(fab._jit(dt))
                offset = ring.produce()
                if self.zero_copy:
                    fab.store(chan.dst, target.dst_offset + sent, view[sent:sent + n])
                else:
                    fab.store(chan.dst, offset, view[sent:sent + n])
                fab.trace.add(fab.now, chan.src, "send_stage", chan.dst, n, f"ev={req.event_id} chunk={chunk_id}")
                sent += n
                # publish only after the chunk bytes are in place
                fab.write_field(chan.src, chan.dst, chan.remote_meta_index,
                                MetadataField(req.event_id, chunk_id, ring.tail_ptr))
                fab.trace.add(fab.now, chan.src, "send_publish", chan.dst, n,
                              f"ev={req.event_id} chunk={chunk_id} tail={ring.tail_ptr}")
            if not sync:
                pool.put(req.cores)
                h.core_ns += (fab.now - t_cores) * req.cores
            n_chunks = h.chunks
            done = lambda: self._ack_complete(chan, req.event_id, n_chunks)
            acked = yield from self._await_ack(chan, req, busy=sync, pred=done,
                                               limit=self.max_ack_timeouts)
            if sync:
                pool.put(req.cores)
                h.core_ns += (fab.now - t_cores) * req.cores
            if acked:
                self._finish(h, COMPLETE)
            else:
                self._finish(h, TIMEOUT, "ack_timeout")

    def _acked(self, chan: Channel) -> int:
        ring = chan.ring
        ack = self.fabric.read_field(chan.src, chan.local_meta_index)
        head_idx = ack.tail_ptr // ring.slot_bytes
        outstanding = (ring.tail - head_idx) % ring.slots
        return ring.tail - outstanding

    def _ack_complete(self, chan: Channel, event_id: int, n_chunks: int) -> bool:
        ack = self.fabric.read_field(chan.src, chan.local_meta_index)
        return ack.event_id == event_id and ack.chunk_id == n_chunks and self._acked(chan) == chan.ring.tail

    def _await_ack(self, chan: Channel, req: TransferRequest, busy: bool, pred,
                   limit: Optional[int] = None):
        fab = self.fabric
        offset = fab.memory(chan.src).layout.field_offset(chan.local_meta_index)
        misses = 0
        while True:
            res = yield fab.poll(chan.src, offset, lambda _m: pred(), self.timeout_ns, busy=busy)
            if res.satisfied:
                return True
            # no progress within the timeout: surface it and keep waiting
            fab.clock.fault("kv_stall", chan.src, chan.dst, f"ack_timeout ev={req.event_id}")
            misses += 1
            if limit is not None and misses >= limit:
                return False

    # -- receiver -----------------------------------------------------------------------
    def _recv_proc(self, h: TransferHandle):
        fab, env, chan, req = self.fabric, self.env, h.channel, h.request
        lat = fab.latency
        sync = req.mode == "sync"
        pool = fab.cores(chan.dst)
        ring = chan.ring
        with chan.recv_lock.request() as slot:
            yield slot
            yield pool.get(req.cores)
            t_cores = fab.now
            yield env.timeout(fab._jit(us_to_ns(lat.mem_startup_us)))
            if not sync:
                pool.put(req.cores)
                h.core_ns += (fab.now - t_cores) * req.cores
            sizes = self._chunk_plan(req.payload_len)
            h.chunks = len(sizes)
            field_off = fab.memory(chan.dst).layout.field_offset(chan.remote_meta_index)
            done_bytes = 0
            next_chunk = 1
            while next_chunk <= len(sizes):
                res = yield fab.poll(chan.dst, field_off,
                                     lambda _m: fab.read_field(chan.dst, chan.remote_meta_index).tail_ptr != ring.head_ptr,
                                     self.timeout_ns, busy=sync)
                if not res.satisfied:
                    fab.clock.fault("kv_stall", chan.dst, chan.src, f"recv_timeout ev={req.event_id}")
                    self._release_recv(h, pool, t_cores, sync)
                    self._finish(h, TIMEOUT, "recv_timeout")
                    return
                meta = fab.read_field(chan.dst, chan.remote_meta_index)
                if meta.event_id != req.event_id:
                    fab.clock.fault("protocol", chan.dst, chan.src,
                                    f"event_id mismatch expected={req.event_id} got={meta.event_id}")
                    self._release_recv(h, pool, t_cores, sync)
                    self._finish(h, FAULT, "event_id_mismatch")
                    return
                avail = ((meta.tail_ptr - ring.head_ptr) % ring.capacity_bytes) // ring.slot_bytes
                if not sync:
                    yield pool.get(req.cores)
                    t_busy = fab.now
                for _ in range(avail):
                    if next_chunk > len(sizes):
                        break
                    n = sizes[next_chunk - 1]
                    if not self.zero_copy:
                        dt = lat.stream_ns(n, req.cores)
                        if dt:
                            yield env.timeout(fab._jit(dt))
                        src_off = ring.slot_offset(ring.head)
                        fab.store(chan.dst, h.dst_offset + done_bytes, fab.load(chan.dst, src_off, n))
                    ring.consume()
                    h.chunk_ids.append(next_chunk)
                    fab.trace.add(fab.now, chan.dst, "recv_copy", chan.src, n,
                                  f"ev={req.event_id} chunk={next_chunk}")
                    fab.write_field(chan.dst, chan.src, chan.local_meta_index,
                                    MetadataField(req.event_id, next_chunk, ring.head_ptr))
                    done_bytes += n
                    next_chunk += 1
                if not sync:
                    pool.put(req.cores)
                    h.core_ns += (fab.now - t_busy) * req.cores
            fab.trace.add(fab.now, chan.dst, "recv_ack", chan.src, req.payload_len,
                          f"ev={req.event_id} chunks={len(sizes)}")
            self._release_recv(h, pool, t_cores, sync)
            if h in chan.posted_recvs:
                chan.posted_recvs.remove(h)
            self._finish(h, COMPLETE)

    def _release_recv(self, h: TransferHandle, pool, t_cores: int, sync: bool) -> None:
        if sync:
            pool.put(h.request.cores)
            h.core_ns += (self.fabric.now - t_cores) * h.request.cores


def expected_chunks(length: int, slot_bytes: int) -> int:
    return max(1, ceil_div(length, slot_bytes))
