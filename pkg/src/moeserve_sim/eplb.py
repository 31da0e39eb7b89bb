"""Expert placement load balancing.

Load collection into a ``[layer][expert][slice]`` table, greedy redundant
expert selection against the per-slice hottest-expert load, least-loaded
replica placement, position-rotated mapping tables and the four-phase live
reconfiguration.  Ties break toward the lowest index everywhere.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .engine import NS_PER_MS, Trace
from .fabric import ConfigError

SLICE_NS_DEFAULT = 60_000 * NS_PER_MS  # one minute


class PlacementError(RuntimeError):
    def __init__(self, unplaced):
        super().__init__(f"no free redundant slot for experts {list(unplaced)}")
        self.unplaced = list(unplaced)


@dataclass
class LoadTable:
    counts: np.ndarray  # [layer, expert, slice]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 3:
            raise ConfigError("LoadTable counts must be [layers][experts][slices]")
        if self.counts.size and self.counts.min() < 0:
            raise ConfigError("LoadTable counts must be non-negative")

    @property
    def num_layers(self) -> int:
        return self.counts.shape[0]

    @property
    def num_experts(self) -> int:
        return self.counts.shape[1]

    @property
    def num_slices(self) -> int:
        return self.counts.shape[2]

    @classmethod
    def zeros(cls, layers: int, experts: int, slices: int) -> "LoadTable":
        return cls(np.zeros((layers, experts, slices), dtype=np.int64))

    def to_json(self) -> str:
        return json.dumps({"layers": self.num_layers, "experts": self.num_experts, "slices": self.num_slices,
                           "counts": self.counts.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "LoadTable":
        raw = json.loads(text)
        table = cls(np.asarray(raw["counts"], dtype=np.int64).reshape(raw["layers"], raw["experts"], raw["slices"]))
        return table


def collect_load(routings: Iterable[Tuple[int, int, int]], slice_ns: int = SLICE_NS_DEFAULT, *,
                 num_layers: Optional[int] = None, num_experts: Optional[int] = None,
                 num_slices: Optional[int] = None) -> LoadTable:
    """Count ``(time_ns, layer, expert)`` routing events per fixed-width slice.

    Slices are wall-clock windows ``[k*slice_ns, (k+1)*slice_ns)`` counted
    from the window holding the first event.
    """
    rows = [(int(t), int(l), int(e)) for t, l, e in routings]
    for a, b in zip(rows, rows[1:]):
        if b[0] < a[0]:
            raise ConfigError("routing trace timestamps must be non-decreasing")
    if not rows:
        return LoadTable.zeros(num_layers or 1, num_experts or 1, num_slices or 1)
    first = rows[0][0] // slice_ns
    layers = num_layers or max(r[1] for r in rows) + 1
    experts = num_experts or max(r[2] for r in rows) + 1
    slices = num_slices or rows[-1][0] // slice_ns - first + 1
    counts = np.zeros((layers, experts, slices), dtype=np.int64)
    for t, l, e in rows:
        counts[l, e, t // slice_ns - first] += 1
    return LoadTable(counts)


def read_routing_csv(text: str) -> List[Tuple[int, int, int]]:
    """Parse ``time_ns,layer,expert[,count]`` rows; ``count`` repeats the event."""
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        n = int(row.get("count") or 1)
        out.extend([(int(row["time_ns"]), int(row["layer"]), int(row["expert"]))] * n)
    return out


def hottest_expert(load: LoadTable, layer: int, slc: int) -> int:
    return int(np.argmax(load.counts[layer, :, slc]))  # argmax returns the first maximum


def split_evenly(count: int, replicas: int) -> List[int]:
    """Integer split with the remainder going to the lowest-index replicas."""
    base, extra = divmod(int(count), replicas)
    return [base + 1 if i < extra else base for i in range(replicas)]


def effective_counts(counts: np.ndarray, replicas: np.ndarray) -> np.ndarray:
    """Per-replica token count of each expert per slice (the largest share)."""
    return -(-counts // replicas[:, None])


def simulated_load(counts: np.ndarray, replicas: np.ndarray) -> int:
    """Sum over slices of the hottest per-replica count, for one layer's ``[expert, slice]`` counts."""
    if counts.size == 0:
        return 0
    return int(effective_counts(counts, replicas).max(axis=0).sum())


def layer_load(load: LoadTable, layer: int, replicas: Optional[Sequence[int]] = None) -> int:
    reps = np.ones(load.num_experts, dtype=np.int64) if replicas is None else np.asarray(replicas, dtype=np.int64)
    return simulated_load(load.counts[layer], reps)


@dataclass
class Selection:
    experts: List[int]
    replicas: np.ndarray
    history: List[int]  # L after 0..R iterations


def select_redundant(load: LoadTable, layer: int, budget: int) -> Selection:
    """Greedy choice of ``budget`` redundant replicas for one layer.

    Candidates are experts that are hottest in at least one slice under the
    current split; the one whose extra replica gives the lowest simulated
    load wins (lowest id on ties).
    """
    if budget < 0:
        raise ConfigError("redundancy budget must be >= 0")
    counts = load.counts[layer]
    replicas = np.ones(load.num_experts, dtype=np.int64)
    chosen: List[int] = []
    history = [simulated_load(counts, replicas)]
    for _ in range(budget):
        eff = effective_counts(counts, replicas)
        candidates = sorted(set(int(e) for e in np.argmax(eff, axis=0))) if eff.size else []
        best, best_load = None, None
        for c in candidates:
            replicas[c] += 1
            value = simulated_load(counts, replicas)
            replicas[c] -= 1
            if best_load is None or value < best_load:
                best, best_load = c, value
        if best is None:
            break
        replicas[best] += 1
        chosen.append(best)
        history.append(best_load)
    return Selection(chosen, replicas, history)


def exhaustive_best(load: LoadTable, layer: int, budget: int) -> Tuple[int, np.ndarray]:
    """Optimal allocation of ``budget`` extra replicas by enumerating multisets."""
    counts = load.counts[layer]
    best = None
    for combo in itertools.combinations_with_replacement(range(load.num_experts), budget):
        reps = np.ones(load.num_experts, dtype=np.int64)
        for e in combo:
            reps[e] += 1
        value = simulated_load(counts, reps)
        if best is None or value < best[0]:
            best = (value, reps)
    return best


# -- placement ------------------------------------------------------------------------

@dataclass
class Placement:
    expert: int
    node: int
    load: float


def place_replicas(replicas: Sequence[Tuple[int, float]], node_loads: Sequence[float],
                   free_slots: Sequence[int]) -> Tuple[List[Placement], List[float]]:
    """Heaviest replica first onto the least-loaded node that still has a free slot."""
    loads = [float(x) for x in node_loads]
    free = [int(x) for x in free_slots]
    if len(loads) != len(free):
        raise ConfigError("node_loads and free_slots must have one entry per node")
    order = sorted(range(len(replicas)), key=lambda i: (-replicas[i][1], replicas[i][0], i))
    placed: List[Placement] = []
    unplaced = []
    for i in order:
        expert, weight = replicas[i]
        open_nodes = [n for n in range(len(loads)) if free[n] > 0]
        if not open_nodes:
            unplaced.append(expert)
            continue
        node = min(open_nodes, key=lambda n: (loads[n], n))
        loads[node] += weight
        free[node] -= 1
        placed.append(Placement(int(expert), node, float(weight)))
    if unplaced:
        raise PlacementError(unplaced)
    return placed, loads


def place_round_robin(replicas: Sequence[Tuple[int, float]], node_loads: Sequence[float],
                      free_slots: Sequence[int]) -> Tuple[List[Placement], List[float]]:
    """Baseline: replicas in given order onto nodes cyclically, skipping full nodes."""
    loads = [float(x) for x in node_loads]
    free = [int(x) for x in free_slots]
    placed = []
    node = 0
    for expert, weight in replicas:
        for _ in range(len(loads)):
            if free[node] > 0:
                break
            node = (node + 1) % len(loads)
        else:
            raise PlacementError([expert])
        loads[node] += weight
        free[node] -= 1
        placed.append(Placement(int(expert), node, float(weight)))
        node = (node + 1) % len(loads)
    return placed, loads


@dataclass
class ReplicaAssignment:
    """Logical expert -> physical slots (primary first) for one layer."""

    slots: Dict[int, List[int]]
    slot_node: Dict[int, int]
    budget: int = 0
    redundant_slots: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        used = [s for ss in self.slots.values() for s in ss]
        if len(used) != len(set(used)):
            raise ConfigError("a physical slot hosts two experts")
        if any(not ss for ss in self.slots.values()):
            raise ConfigError("every logical expert needs at least one slot")
        if any(s not in self.slot_node for s in used):
            raise ConfigError("slot without a node")
        if self.redundant_used > self.budget:
            raise ConfigError(f"{self.redundant_used} redundant replicas exceed budget {self.budget}")

    @property
    def num_experts(self) -> int:
        return len(self.slots)

    @property
    def redundant_used(self) -> int:
        return sum(len(ss) - 1 for ss in self.slots.values())

    def primary(self, expert: int) -> int:
        return self.slots[expert][0]

    def replica_count(self) -> np.ndarray:
        return np.array([len(self.slots[e]) for e in range(self.num_experts)], dtype=np.int64)

    def free_slots(self) -> List[int]:
        used = {s for ss in self.slots.values() for s in ss}
        return [s for s in self.redundant_slots if s not in used]

    def free_per_node(self, num_nodes: int) -> List[int]:
        free = [0] * num_nodes
        for s in self.free_slots():
            free[self.slot_node[s]] += 1
        return free

    def primaries_only(self) -> "ReplicaAssignment":
        return ReplicaAssignment({e: ss[:1] for e, ss in self.slots.items()}, dict(self.slot_node),
                                 self.budget, list(self.redundant_slots))

    @classmethod
    def initial(cls, num_experts: int, num_nodes: int, redundant_per_node: int = 1,
                budget: Optional[int] = None) -> "ReplicaAssignment":
        """Experts spread evenly over nodes; each node then reserves redundant slots.

        Slot ids run node by node: primaries first, redundant slots after.
        """
        per_node = -(-num_experts // num_nodes)
        slots, slot_node, redundant = {}, {}, []
        sid = 0
        for n in range(num_nodes):
            for i in range(per_node):
                e = n * per_node + i
                if e < num_experts:
                    slots[e] = [sid]
                    slot_node[sid] = n
                    sid += 1
            for _ in range(redundant_per_node):
                slot_node[sid] = n
                redundant.append(sid)
                sid += 1
        if budget is None:
            budget = num_nodes * redundant_per_node
        return cls(slots, slot_node, budget, redundant)

    def with_placements(self, placements: Sequence[Placement]) -> "ReplicaAssignment":
        """New assignment where each placement takes the lowest free redundant slot on its node."""
        base = self.primaries_only()
        slots = {e: list(ss) for e, ss in base.slots.items()}
        free = sorted(base.free_slots())
        for p in placements:
            sid = next((s for s in free if base.slot_node[s] == p.node), None)
            if sid is None:
                raise PlacementError([p.expert])
            free.remove(sid)
            slots[p.expert].append(sid)
        return ReplicaAssignment(slots, dict(self.slot_node), self.budget, list(self.redundant_slots))

    def to_json(self) -> str:
        return json.dumps({"slots": {str(e): ss for e, ss in sorted(self.slots.items())},
                           "slot_node": {str(s): n for s, n in sorted(self.slot_node.items())},
                           "budget": self.budget, "redundant_slots": self.redundant_slots}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ReplicaAssignment":
        raw = json.loads(text)
        return cls({int(e): list(ss) for e, ss in raw["slots"].items()},
                   {int(s): int(n) for s, n in raw["slot_node"].items()},
                   int(raw["budget"]), list(raw["redundant_slots"]))


def plan_layer(load: LoadTable, layer: int, base: ReplicaAssignment, num_nodes: int,
               budget: Optional[int] = None, placer=place_replicas) -> Tuple[Selection, ReplicaAssignment]:
    """Select redundant experts for one layer and place them on nodes."""
    budget = min(base.budget if budget is None else budget, len(base.redundant_slots))
    sel = select_redundant(load, layer, budget)
    totals = load.counts[layer].sum(axis=1).astype(float)
    reps = sel.replicas
    share = totals / reps
    node_loads = [0.0] * num_nodes
    for e, ss in base.slots.items():
        node_loads[base.slot_node[ss[0]]] += share[e]
    items = [(e, float(share[e])) for e in sel.experts]
    placements, _ = placer(items, node_loads, base.primaries_only().free_per_node(num_nodes))
    return sel, base.with_placements(placements)


# -- mapping ---------------------------------------------------------------------------

@dataclass
class MappingTable:
    table: np.ndarray  # [batch, experts] -> slot

    @property
    def batch_size(self) -> int:
        return self.table.shape[0]

    def to_json(self) -> str:
        return json.dumps({"batch": self.batch_size, "experts": int(self.table.shape[1]),
                           "table": self.table.tolist()})


def rotation_order(slots: Sequence[int]) -> List[int]:
    # Rows cycle through replicas by ascending slot id, independent of which is primary.
    return sorted(slots)


def build_mapping(assignment: ReplicaAssignment, batch_size: int) -> MappingTable:
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    table = np.zeros((batch_size, assignment.num_experts), dtype=np.int64)
    rows = np.arange(batch_size)
    for e in range(assignment.num_experts):
        order = np.array(rotation_order(assignment.slots[e]))
        table[:, e] = order[rows % len(order)]
    return MappingTable(table)


def route_token(token_pos: int, logical_expert: int, table: MappingTable) -> int:
    return int(table.table[token_pos % table.batch_size, logical_expert])


def slot_loads(load: LoadTable, layer: int, assignment: ReplicaAssignment) -> Dict[int, int]:
    """Tokens landing on each slot when every slice is split evenly across replicas."""
    out: Dict[int, int] = {}
    counts = load.counts[layer]
    for e, ss in assignment.slots.items():
        order = rotation_order(ss)
        total = [0] * len(order)
        for t in range(load.num_slices):
            for i, share in enumerate(split_evenly(counts[e, t], len(order))):
                total[i] += share
        for s, v in zip(order, total):
            out[s] = v
    return out


def max_slot_load(load: LoadTable, layer: int, assignment: ReplicaAssignment) -> int:
    return max(slot_loads(load, layer, assignment).values(), default=0)


def synthetic_skew(num_experts: int = 256, num_slices: int = 4, tokens_per_slice: int = 100_000,
                   hot_ratio: float = 30.0, seed: int = 0, layers: int = 1) -> LoadTable:
    """Zipf-shaped load whose hottest expert gets ``hot_ratio`` times the mean.

    The Zipf exponent is solved by bisection so the top share matches exactly;
    expert identities are shuffled per layer and slices get mild noise.
    """
    ranks = np.arange(1, num_experts + 1, dtype=float)

    def top_ratio(s):
        w = ranks ** -s
        return w[0] / w.mean()

    lo, hi = 0.0, 4.0
    for _ in range(100):
        mid = (lo + hi) / 2
        if top_ratio(mid) < hot_ratio:
            lo = mid
        else:
            hi = mid
    weights = ranks ** -hi
    weights /= weights.sum()
    rng = np.random.default_rng(seed)
    counts = np.zeros((layers, num_experts, num_slices), dtype=np.int64)
    for l in range(layers):
        perm = rng.permutation(num_experts)
        for t in range(num_slices):
            noisy = weights * rng.uniform(0.98, 1.02, num_experts)
            noisy /= noisy.sum()
            counts[l, perm, t] = np.round(noisy * tokens_per_slice).astype(np.int64)
    return LoadTable(counts)


# -- live reconfiguration ------------------------------------------------------------------

PHASES = ("prefetch", "disable", "load", "restore")


@dataclass
class PhaseRecord:
    phase: str
    t_start: int
    t_end: int


class Reconfiguration:
    """Four-phase swap from ``current`` to ``target`` while inference keeps routing.

    During ``disable`` and ``load`` every expert falls back to its primary slot.
    """

    def __init__(self, current: ReplicaAssignment, target: ReplicaAssignment, batch_size: int,
                 durations_ns: Optional[Dict[str, int]] = None):
        if set(current.slots) != set(target.slots):
            raise ConfigError("reconfiguration cannot change the logical expert set")
        if any(current.primary(e) != target.primary(e) for e in current.slots):
            raise ConfigError("reconfiguration keeps primary slots fixed")
        self.current = current
        self.target = target
        self.batch_size = batch_size
        self.durations = {"prefetch": 1000, "disable": 100, "load": 1000, "restore": 100}
        self.durations.update(durations_ns or {})
        self.phase: Optional[str] = None
        self.records: List[PhaseRecord] = []
        self._tables = {
            None: build_mapping(current, batch_size),
            "prefetch": build_mapping(current, batch_size),
            "disable": build_mapping(current.primaries_only(), batch_size),
            "load": build_mapping(current.primaries_only(), batch_size),
            "restore": build_mapping(target, batch_size),
            "done": build_mapping(target, batch_size),
        }

    def mapping(self) -> MappingTable:
        return self._tables[self.phase]

    def enabled_slots(self) -> set:
        if self.phase in ("disable", "load"):
            return {ss[0] for ss in self.current.slots.values()}
        src = self.target if self.phase in ("restore", "done") else self.current
        return {s for ss in src.slots.values() for s in ss}

    def route(self, token_pos: int, expert: int) -> int:
        return route_token(token_pos, expert, self.mapping())

    def step(self) -> Optional[str]:
        """Advance one phase; returns the new phase (``done`` after restore)."""
        order = [None, *PHASES, "done"]
        i = order.index(self.phase)
        if self.phase == "done":
            return "done"
        self.phase = order[i + 1]
        return self.phase

    def run(self, env, trace: Optional[Trace] = None, node: int = -1):
        """simpy process stepping through the phases with their modeled durations."""
        for _ in PHASES:
            phase = self.step()
            t0 = int(env.now)
            if trace is not None:
                trace.add(t0, node, f"eplb_{phase}", -1, 0, "")
            yield env.timeout(self.durations[phase])
            self.records.append(PhaseRecord(phase, t0, int(env.now)))
        self.step()
        return self.records
