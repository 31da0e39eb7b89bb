"""Simulation clock helpers, trace recording and fault records.

Simulated time is kept as integer nanoseconds on a ``simpy.Environment`` so
that identical schedules produce bit-identical traces.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional

import simpy

NS_PER_US = 1_000
NS_PER_MS = 1_000_000


def us_to_ns(value_us: float) -> int:
    return int(round(value_us * NS_PER_US))


def ms_to_ns(value_ms: float) -> int:
    return int(round(value_ms * NS_PER_MS))


def ns_to_us(value_ns: int) -> float:
    return value_ns / NS_PER_US


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class TraceRecord:
    time_ns: int
    node: int
    op: str
    peer: int = -1
    size: int = 0
    detail: str = ""


class Trace:
    """Append-only event log exportable as ``time_ns,node,op,peer,size,detail`` CSV."""

    COLUMNS = ("time_ns", "node", "op", "peer", "size", "detail")

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.records: List[TraceRecord] = []

    def add(self, time_ns: int, node: int, op: str, peer: int = -1,
            size: int = 0, detail: str = "") -> None:
        if self.enabled:
            self.records.append(TraceRecord(int(time_ns), int(node), op, int(peer), int(size), detail))

    def extend(self, records: Iterable[TraceRecord]) -> None:
        if self.enabled:
            self.records.extend(records)

    def select(self, op: Optional[str] = None, node: Optional[int] = None) -> List[TraceRecord]:
        return [r for r in self.records
                if (op is None or r.op == op) and (node is None or r.node == node)]

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for r in self.records:
            writer.writerow((r.time_ns, r.node, r.op, r.peer, r.size, r.detail))
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "Trace":
        trace = cls()
        for row in csv.DictReader(io.StringIO(text)):
            trace.add(int(row["time_ns"]), int(row["node"]), row["op"],
                      int(row["peer"]), int(row["size"]), row["detail"])
        return trace


@dataclass
class FaultRecord:
    """A fault observed by the data plane; consumed by the reliability layer."""

    time_ns: int
    kind: str
    location: int
    peer: int = -1
    detail: str = ""


@dataclass
class Clock:
    """Bundle of the simpy environment and shared sinks used by all actors."""

    env: simpy.Environment = field(default_factory=simpy.Environment)
    trace: Trace = field(default_factory=Trace)
    faults: List[FaultRecord] = field(default_factory=list)

    @property
    def now(self) -> int:
        return int(self.env.now)

    def fault(self, kind: str, location: int, peer: int = -1, detail: str = "") -> FaultRecord:
        rec = FaultRecord(self.now, kind, int(location), int(peer), detail)
        self.faults.append(rec)
        self.trace.add(self.now, location, "fault", peer, 0, f"{kind}:{detail}" if detail else kind)
        return rec


def next_tick(start_ns: int, now_ns: int, interval_ns: int) -> int:
    """First polling instant at or after ``now_ns`` for a poller started at ``start_ns``."""
    if interval_ns <= 0 or now_ns <= start_ns:
        return max(now_ns, start_ns)
    return start_ns + math.ceil((now_ns - start_ns) / interval_ns) * interval_ns
