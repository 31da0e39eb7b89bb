"""Execute a RunConfig and assemble the result bundle."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .engine import Trace, ms_to_ns
from .eplb import (LoadTable, ReplicaAssignment, collect_load, layer_load, max_slot_load, plan_layer,
                   read_routing_csv, select_redundant)
from .fabric import ConfigError
from .pipeline.ma import ma_pipeline
from .pipeline.metrics import kernel_breakdown, throughput_report
from .pipeline.mtp import AcceptanceSampler, DecodeTiming, decode_iteration
from .pipeline.pd import SCALE_OUT, PdCluster, PdConfig, PrefillProfile
from .reliability import ClusterState, FaultEvent, expert_deployment, heartbeat_monitor, recover
from .scheduler import simulate_prefill

log = logging.getLogger("moeserve_sim.run")

METRICS = ("tpot_ms", "ttft_ms", "tokens_per_s_per_chip", "total_tokens_per_s", "global_batch", "tokens_per_step",
           "forward_ms", "gap_ms")


@dataclass
class Bundle:
    """Everything a run writes: the results document plus named text artifacts."""

    results: dict
    files: Dict[str, str] = field(default_factory=dict)


def _r(x: Optional[float], nd: int = 9):
    return None if x is None else round(float(x), nd)


def _empty(cfg) -> dict:
    out = {k: None for k in METRICS}
    out.update(deployment=cfg.deployment, seed=cfg.seed, name=cfg.name, requests=0, breakdown=[], detail={})
    return out


def _breakdown(cfg, batch: int) -> List[dict]:
    kw = dict(cfg.breakdown)
    kw.setdefault("batch", batch)
    return kernel_breakdown(seed=cfg.seed, **kw)


def _measure_decode(cfg, requests, batch_size: int, iterations: int, timing: DecodeTiming, trace: Trace):
    """Decode one die's batch for ``iterations`` steps; returns measured tokens per step."""
    batch = [r.id for r in requests[:max(1, batch_size)]]
    sampler = AcceptanceSampler(cfg.mtp)
    positions: Dict[int, int] = {}
    tokens = 0
    t = 0.0
    for it in range(iterations):
        res = decode_iteration(batch, positions, cfg.mtp, sampler, timing, start_ms=t)
        for name, s, _ in res.steps:
            trace.add(ms_to_ns(s), 0, name, -1, len(batch), f"iter={it}")
        tokens += res.tokens_emitted
        t += res.duration_ms
    return tokens / (len(batch) * iterations)


def _fill(out: dict, rep, tps: float) -> None:
    d = rep.to_dict()
    out.update(tpot_ms=_r(d["tpot_ms"]), tokens_per_s_per_chip=_r(d["tokens_per_s_per_chip"]),
               total_tokens_per_s=_r(d["total_tokens_per_s"]), global_batch=d["global_batch"],
               tokens_per_step=_r(tps), forward_ms=_r(d["forward_ms"]), gap_ms=_r(d["gap_ms"]))


def run_colocated(cfg, requests) -> Bundle:
    dc = cfg.decode
    out = _empty(cfg)
    out["requests"] = len(requests)
    if not requests:
        return Bundle(out)
    timing = DecodeTiming.from_forward(dc["forward_ms"], dc["gap_ms"])
    trace = Trace()
    tps = _measure_decode(cfg, requests, dc["batch_per_die"], dc.get("iterations", 50), timing, trace)
    bd = _breakdown(cfg, dc["batch_per_die"])
    rep = throughput_report(dc["forward_ms"], dc["gap_ms"], tps, batch_per_die=dc["batch_per_die"], dies=dc["dies"],
                            dies_per_chip=dc.get("dies_per_chip", 2), breakdown=bd)
    _fill(out, rep, tps)
    pre = simulate_prefill(requests, dc.get("prefill_dps", 4), cost=cfg.scheduler)
    out["ttft_ms"] = _r(np.mean([pre.finish_us[r.id] for r in requests]) / 1000.0)
    out["breakdown"] = bd
    out["detail"] = {"prefill_makespan_ms": _r(pre.makespan_us / 1000.0), "prefill_steps": pre.steps}
    return Bundle(out, {"trace.csv": trace.to_csv()})


def run_ma(cfg, requests) -> Bundle:
    ma = cfg.ma
    lat = cfg.ma_latencies
    out = _empty(cfg)
    out["requests"] = len(requests)
    if not requests:
        return Bundle(out)
    tl = ma_pipeline(ma["domains"], ma.get("microbatches", 2), ma.get("layers", 61), lat)
    trace = Trace()
    for s in tl.segments:
        trace.add(s.start_ns, s.domain, s.name, -1, s.end_ns - s.start_ns,
                  f"mb={s.microbatch} layer={s.layer} res={s.resource}")
    timing = DecodeTiming.from_forward(tl.forward_ms, lat.gap_ms, mtp_forward_ms=lat.mtp_ms)
    tps = _measure_decode(cfg, requests, ma["batch_per_die"], cfg.decode.get("iterations", 50), timing, Trace(False))
    bd = _breakdown(cfg, ma["batch_per_die"])
    rep = throughput_report(tl.forward_ms, lat.gap_ms, tps, batch_per_die=ma["batch_per_die"],
                            dies=ma["attention_dies"], dies_per_chip=ma.get("dies_per_chip", 2),
                            domains=ma["domains"], breakdown=bd)
    _fill(out, rep, tps)
    out["breakdown"] = bd
    out["detail"] = {"forward_total_ms": _r(tl.total_ms), "violations": len(tl.violations()),
                     "moe_utilization": _r(tl.utilization(), 6), "attention_dies": ma["attention_dies"],
                     "expert_dies": ma["expert_dies"], "domains": ma["domains"]}
    return Bundle(out, {"trace.csv": trace.to_csv()})


def pd_config(cfg) -> PdConfig:
    p = cfg.pd
    per_tok = p.get("per_token_us", 1.0)
    profiles = [PrefillProfile("supernode", per_tok) for _ in range(p["prefill_tes"])]
    profiles += [PrefillProfile("scaleout", per_tok, path=SCALE_OUT) for _ in range(p.get("scale_out_tes", 0))]
    kw = {k: p[k] for k in ("dps_per_prefill_te", "decode_tes", "dps_per_decode_te", "prefill_blocks_per_dp",
                            "decode_blocks_per_dp", "decode_batch_limit", "block_tokens", "capacity_deadline_ms",
                            "transfer_timeout_us") if k in p}
    if kw.get("capacity_deadline_ms") == 0:
        kw["capacity_deadline_ms"] = None  # 0 means wait for decode capacity forever
    timing = DecodeTiming.from_forward(cfg.decode.get("forward_ms", 93.0), cfg.decode.get("gap_ms", 2.0))
    return PdConfig(prefill_profiles=profiles, cost=cfg.scheduler, mtp=cfg.mtp, decode_timing=timing, **kw)


def run_pd(cfg, requests) -> Bundle:
    out = _empty(cfg)
    out["requests"] = len(requests)
    if not requests:
        return Bundle(out)
    pcfg = pd_config(cfg)
    cluster = PdCluster(pcfg, seed=cfg.seed, latency=cfg.latency)
    for r in requests:
        cluster.submit(r)
    res = cluster.run()  # DeadlockError propagates to the CLI
    tpots, ttfts = res.tpot_ms(), res.ttft_ms()
    tokens = sum(len(r.tokens) for r in res.requests)
    dies = pcfg.prefill_tes * pcfg.dps_per_prefill_te + pcfg.decode_tes * pcfg.dps_per_decode_te
    span_s = res.end_ns / 1e9
    out.update(tpot_ms=_r(np.mean(tpots)) if tpots else None, ttft_ms=_r(np.mean(ttfts)) if ttfts else None,
               tokens_per_s_per_chip=_r(tokens / span_s / (dies / 2)) if span_s > 0 else None,
               total_tokens_per_s=_r(tokens / span_s) if span_s > 0 else None,
               forward_ms=_r(pcfg.decode_timing.forward_ms), gap_ms=_r(pcfg.decode_timing.gap_ms))
    steps = sum(len(v) for v in res.steps.values())
    out["breakdown"] = _breakdown(cfg, pcfg.decode_batch_limit)
    out["detail"] = {"completed": res.completed, "failed": res.failed, "causes": dict(sorted(res.causes.items())),
                     "ledger": res.ledger, "bytes_moved": res.bytes_moved,
                     "backpressure_events": res.backpressure_events, "unreserved_recvs": res.unreserved_recvs,
                     "mismatched_transfers": res.mismatched_transfers, "pd_steps": steps, "end_ns": res.end_ns}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "state", "ttft_ms", "tokens", "fail_cause"])
    for r in res.requests:
        ttft = "" if r.t_first_token is None else f"{(r.t_first_token - r.arrival_ns) / 1e6:.6f}"
        w.writerow([r.id, r.state, ttft, len(r.tokens), r.fail_cause or ""])
    files = {"trace.csv": cluster.fabric.trace.to_csv(), "decisions.jsonl": res.decisions.to_jsonl(),
             "ledger.json": json.dumps(res.ledger, sort_keys=True, indent=2) + "\n", "requests.csv": buf.getvalue()}
    return Bundle(out, files)


# -- faults ------------------------------------------------------------------------------

def cluster_actors(cfg):
    """Prefill and decode TE names plus the DP masters under each TE."""
    if cfg.deployment == "disagg_pd":
        p = cfg.pd
        pre = [f"p{i}" for i in range(p["prefill_tes"] + p.get("scale_out_tes", 0))]
        dec = [f"d{i}" for i in range(p["decode_tes"])]
        dps = {**{t: p.get("dps_per_prefill_te", 2) for t in pre}, **{t: p.get("dps_per_decode_te", 4) for t in dec}}
    elif cfg.deployment == "disagg_ma":
        pre, dec = [], [f"d{i}" for i in range(cfg.ma["domains"])]
        dps = {t: cfg.ma["attention_dies"] for t in dec}
    else:
        pre, dec = [], ["d0"]
        dps = {"d0": cfg.decode["dies"]}
    return pre, dec, {te: [f"{te}/dp{i}" for i in range(n)] for te, n in dps.items()}


def apply_faults(cfg, faults: Sequence[FaultEvent]) -> List[dict]:
    """Detect hangs via heartbeats, then run the configured recovery for every fault."""
    pre, dec, actors = cluster_actors(cfg)
    if cfg.deployment == "disagg_ma":
        dies = cfg.ma["expert_dies"]
    elif cfg.deployment == "disagg_pd":
        dies = len(pre) * cfg.pd.get("dps_per_prefill_te", 2) + len(dec) * cfg.pd.get("dps_per_decode_te", 4)
    else:
        dies = cfg.decode["dies"]
    experts = expert_deployment(seed=cfg.seed) if dies >= 288 else None
    state = ClusterState(pre, dec, experts, dies, dies)
    known = set(actors) | {a for v in actors.values() for a in v}
    hang = [f for f in faults if f.kind in ("crash", "stuck_loop") and f.location in known]
    detections = {}
    if hang:
        hb = cfg.heartbeat
        horizon = max(f.inject_time_ns for f in hang) + ms_to_ns((hb.miss_threshold + 2) *
                                                                 max(hb.control_to_te_ms, hb.te_to_dp_ms))
        watched = {te: [d for d in dps if d in {f.location for f in hang}] for te, dps in actors.items()}
        for d in heartbeat_monitor(hb, watched, hang, horizon_ns=horizon):
            detections.setdefault(d.actor, d)
    records: List[dict] = []
    for f in sorted(faults, key=lambda f: (f.inject_time_ns, f.location, f.kind)):
        ev = f
        if f in hang:
            det = detections.get(f.location)
            if det is None:
                records.append({"time": f.inject_time_ns, "event": f.kind, "action": "undetected", "stage": "",
                                "affected": [f.location]})
                continue
            records.append({"time": det.time_ns, "event": f.kind, "action": f"detected_{det.tier}",
                            "stage": "", "affected": [f.location]})
            ev = FaultEvent(f.kind, f.location.split("/")[0], det.time_ns, f.detail)
        if ev.location.startswith("die") and state.assignment is None:
            records.append({"time": ev.inject_time_ns, "event": ev.kind, "action": "escalate", "stage": "",
                            "affected": ["no expert deployment at this scale"]})
            continue
        for rec in recover(ev, cfg.recovery, state):
            records.append(json.loads(rec.to_json()))
    return records


RUNNERS = {"colocated_pd": run_colocated, "disagg_pd": run_pd, "disagg_ma": run_ma}


def execute(cfg, faults: Optional[Sequence[FaultEvent]] = None) -> Bundle:
    requests = cfg.workload.build(cfg.seed)
    log.info("running %s with %d requests (seed %d)", cfg.deployment, len(requests), cfg.seed)
    bundle = RUNNERS[cfg.deployment](cfg, requests)
    faults = list(cfg.faults if faults is None else faults)
    if faults:
        recs = apply_faults(cfg, faults)
        bundle.results["recovery"] = recs
        bundle.files["recovery.jsonl"] = "".join(json.dumps(r, sort_keys=True) + "\n" for r in recs)
    return bundle


def results_json(results: dict) -> str:
    return json.dumps(results, sort_keys=True, indent=2) + "\n"


# -- eplb analyze ------------------------------------------------------------------------

def eplb_report(trace_text: str, budget: int, *, nodes: Optional[int] = None, slice_ns: Optional[int] = None,
                redundant_per_node: int = 1) -> dict:
    """Greedy selection and placement for every layer of a routing trace."""
    if budget < 0:
        raise ConfigError("budget must be >= 0")
    if trace_text.lstrip().startswith("{"):
        load = LoadTable.from_json(trace_text)
    else:
        rows = read_routing_csv(trace_text)
        load = collect_load(rows, slice_ns) if slice_ns else collect_load(rows)
    nodes = nodes or load.num_experts
    base = ReplicaAssignment.initial(load.num_experts, nodes, redundant_per_node, budget)
    layers = []
    for layer in range(load.num_layers):
        sel = select_redundant(load, layer, min(budget, len(base.redundant_slots)))
        _, asg = plan_layer(load, layer, base, nodes, budget)
        layers.append({"layer": layer, "native_load": layer_load(load, layer), "greedy_load": sel.history[-1],
                       "history": [int(x) for x in sel.history], "selected": [int(e) for e in sel.experts],
                       "native_max_slot": max_slot_load(load, layer, base.primaries_only()),
                       "balanced_max_slot": max_slot_load(load, layer, asg),
                       "placement": {str(e): [int(asg.slot_node[s]) for s in ss]
                                     for e, ss in sorted(asg.slots.items()) if len(ss) > 1}})
    return {"layers": load.num_layers, "experts": load.num_experts, "slices": load.num_slices, "budget": budget,
            "nodes": nodes, "per_layer": layers}

