"""Run configuration: TOML in, validated dataclasses out.

Errors carry the file and line of the offending key so the CLI can print
``path:line: message`` diagnostics.
"""

from __future__ import annotations

import json
import logging
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .fabric import ConfigError, LatencyModel, Topology, build_topology
from .pipeline.ma import MaLatencies
from .pipeline.mtp import MtpConfig
from .reliability import FaultEvent, HeartbeatConfig, RecoveryPolicy, load_fault_schedule
from .scheduler import CostModel

DEPLOYMENTS = ("colocated_pd", "disagg_pd", "disagg_ma")
PRESET_DIR = Path(__file__).parent / "presets"

log = logging.getLogger("moeserve_sim")


class ConfigFileError(ConfigError):
    def __init__(self, path, line: Optional[int], message: str):
        self.path = str(path)
        self.line = line
        self.message = message
        super().__init__(f"{self.path}:{line or 1}: {message}")


def setup_logging() -> None:
    """Verbosity comes from ``SIM_LOG`` (debug, info, warning, error); default warning."""
    level = os.environ.get("SIM_LOG", "warning").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(level)


# key name -> accepted python types; a tuple marks "any of"
_NUM = (int, float)
SCHEMA: Dict[str, Dict[str, Any]] = {
    "": {"deployment": str, "seed": int, "name": str},
    "topology": {"chips": int, "dies_per_chip": int, "cores_per_die": int},
    "latency": {"mem_startup_us": _NUM, "dma_startup_us": _NUM, "bandwidth_gbps": _NUM, "core_efficiency": _NUM,
                "cores_max": int, "dma_bandwidth_gbps": _NUM, "meta_write_us": _NUM, "poll_interval_us": _NUM,
                "jitter_sigma": _NUM},
    "decode": {"forward_ms": _NUM, "gap_ms": _NUM, "batch_per_die": int, "dies": int, "dies_per_chip": int,
               "iterations": int, "prefill_dps": int},
    "mtp": {"num_mtp_layers": int, "drafts_per_step": int, "acceptance": (int, float, list), "bernoulli": bool,
            "seed": int},
    "ma": {"domains": int, "attention_dies": int, "expert_dies": int, "microbatches": int, "layers": int,
           "batch_per_die": int, "dies_per_chip": int, "gap_ms": _NUM, "mtp_ms": _NUM,
           "attention_ms_per_layer": _NUM, "a2e_ms": _NUM, "moe_ms": _NUM, "e2a_ms": _NUM, "mla_a2a_ms": _NUM},
    "pd": {"prefill_tes": int, "scale_out_tes": int, "dps_per_prefill_te": int, "decode_tes": int,
           "dps_per_decode_te": int, "prefill_blocks_per_dp": int, "decode_blocks_per_dp": int,
           "decode_batch_limit": int, "block_tokens": int, "capacity_deadline_ms": _NUM,
           "transfer_timeout_us": _NUM, "per_token_us": _NUM},
    "scheduler": {"weight_prefix_hit": _NUM, "weight_length": _NUM, "weight_load": _NUM, "max_len": int},
    "eplb": {"budget": int, "redundant_per_node": int},
    "breakdown": {"ranks": int, "iterations": int, "k": int, "hidden": int, "mla_sigma_us": _NUM,
                  "moe_sigma_us": _NUM, "moe_us": _NUM},
    "workload": {"file": str, "count": int, "prompt_min": int, "prompt_max": int, "output_min": int,
                 "output_max": int, "arrival": str, "rate": _NUM},
    "faults": {"file": str},
    "heartbeat": {"control_to_te_ms": _NUM, "te_to_dp_ms": _NUM, "miss_threshold": int},
    "recovery": {"stage": str, "kill_p_to_preserve_d": bool, "min_replicas_per_expert": int},
}

REQUIRED = {
    "colocated_pd": {"decode": ("forward_ms", "gap_ms", "batch_per_die", "dies")},
    "disagg_pd": {"pd": ("prefill_tes", "decode_tes")},
    "disagg_ma": {"ma": ("domains", "attention_dies", "expert_dies", "batch_per_die")},
}

_HEADER = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-]+)\s*\]")
_KEY = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")


def key_lines(text: str) -> Dict[Tuple[str, str], int]:
    """Map ``(section, key)`` to its 1-based line; ``(section, "")`` is the header."""
    out: Dict[Tuple[str, str], int] = {}
    section = ""
    for n, line in enumerate(text.splitlines(), 1):
        m = _HEADER.match(line)
        if m:
            section = m.group(1)
            out.setdefault((section, ""), n)
            continue
        m = _KEY.match(line)
        if m:
            out.setdefault((section, m.group(1)), n)
    return out


@dataclass
class WorkloadSpec:
    """Either an explicit request list or a synthetic generator description."""

    requests: Optional[List[dict]] = None
    count: int = 0
    prompt_range: Tuple[int, int] = (128, 4096)
    output_range: Tuple[int, int] = (16, 256)
    arrival: str = "fixed"
    rate: float = 100.0

    @property
    def size(self) -> int:
        return len(self.requests) if self.requests is not None else self.count

    def build(self, seed: int):
        from .pipeline.pd import make_workload, workload_from_spec
        if self.requests is not None:
            return workload_from_spec({"requests": self.requests, "arrival": self.arrival, "rate": self.rate}, seed)
        return make_workload(self.count, seed=seed, prompt_range=self.prompt_range, output_range=self.output_range,
                             arrival=self.arrival, rate_per_s=self.rate)


@dataclass
class RunConfig:
    deployment: str
    seed: int = 0
    name: str = ""
    topology: Optional[Topology] = None
    latency: LatencyModel = field(default_factory=LatencyModel)
    decode: Dict[str, Any] = field(default_factory=dict)
    mtp: MtpConfig = field(default_factory=MtpConfig)
    ma: Dict[str, Any] = field(default_factory=dict)
    ma_latencies: MaLatencies = field(default_factory=MaLatencies)
    pd: Dict[str, Any] = field(default_factory=dict)
    scheduler: CostModel = field(default_factory=CostModel)
    eplb: Dict[str, Any] = field(default_factory=dict)
    breakdown: Dict[str, Any] = field(default_factory=dict)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    faults: List[FaultEvent] = field(default_factory=list)
    heartbeat: HeartbeatConfig = field(default_factory=HeartbeatConfig)
    recovery: RecoveryPolicy = field(default_factory=RecoveryPolicy)
    source: str = ""


class _Loader:
    def __init__(self, text: str, path):
        self.text = text
        self.path = Path(path)
        self.lines = key_lines(text)

    def fail(self, section: str, key: str, message: str):
        line = self.lines.get((section, key)) or self.lines.get((section, "")) or 1
        raise ConfigFileError(self.path, line, message)

    def check_section(self, raw: dict, section: str) -> dict:
        schema = SCHEMA[section]
        body = raw if section == "" else raw.get(section, {})
        where = section or "top level"
        if not isinstance(body, dict):
            self.fail("", section, f"{section} must be a table")
        for key, value in body.items():
            if section == "" and key in SCHEMA:
                continue
            if key not in schema:
                self.fail(section, key, f"unknown key {key!r} in {where}")
            want = schema[key]
            # bool is an int subclass; only accept it where bool is asked for
            if isinstance(value, bool) and want is not bool:
                self.fail(section, key, f"{where}.{key} must be {_type_name(want)}, got a boolean")
            if not isinstance(value, want):
                self.fail(section, key, f"{where}.{key} must be {_type_name(want)}, got {type(value).__name__}")
        return dict(body)

    def build(self, section: str, fn, body: dict):
        """Call a validating constructor and pin its error to the most likely key."""
        try:
            return fn(body)
        except ConfigError as e:
            msg = str(e)
            key = next((k for k in body if k in msg), "")
            self.fail(section, key, msg)

    def resolve(self, section: str, rel: str) -> Path:
        p = Path(rel)
        if not p.is_absolute():
            p = self.path.parent / p
        if not p.exists():
            self.fail(section, "file", f"referenced file {rel!r} does not exist")
        return p


def _type_name(want) -> str:
    if isinstance(want, tuple):
        return " or ".join(sorted({t.__name__ for t in want}))
    return want.__name__


def parse_config(text: str, path="<config>") -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        line = int(m.group(1)) if m else max(1, len(text.splitlines()))
        raise ConfigFileError(path, line, f"TOML syntax error: {e}") from None
    ld = _Loader(text, path)
    for sec in raw:
        if isinstance(raw[sec], dict) and sec not in SCHEMA:
            ld.fail(sec, "", f"unknown section [{sec}]")
    top = ld.check_section(raw, "")
    secs = {s: ld.check_section(raw, s) for s in SCHEMA if s}
    dep = top.get("deployment")
    if dep is None:
        raise ConfigFileError(path, 1, "missing required key 'deployment'")
    if dep not in DEPLOYMENTS:
        ld.fail("", "deployment", f"deployment must be one of {', '.join(DEPLOYMENTS)}, got {dep!r}")
    for sec, keys in REQUIRED[dep].items():
        for k in keys:
            if k not in secs[sec]:
                ld.fail(sec, "", f"deployment {dep} requires [{sec}] {k}")

    cfg = RunConfig(dep, seed=top.get("seed", 0), name=top.get("name", ""), source=str(path))
    if secs["topology"]:
        t = secs["topology"]
        cfg.topology = ld.build("topology", lambda b: build_topology(b.get("chips", 1), b.get("dies_per_chip", 2),
                                                                     b.get("cores_per_die", 48)), t)
    cfg.latency = ld.build("latency", lambda b: LatencyModel(**b), secs["latency"])
    cfg.mtp = ld.build("mtp", MtpConfig.from_config, secs["mtp"])
    cfg.scheduler = ld.build("scheduler", CostModel.from_config, secs["scheduler"])
    cfg.heartbeat = ld.build("heartbeat", lambda b: HeartbeatConfig(**b), secs["heartbeat"])
    cfg.recovery = ld.build("recovery", lambda b: RecoveryPolicy(**b), secs["recovery"])
    cfg.ma_latencies = ld.build("ma", MaLatencies.from_config, secs["ma"])
    for sec in ("decode", "ma", "pd", "eplb", "breakdown"):
        for k, v in secs[sec].items():
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                ld.fail(sec, k, f"{sec}.{k} must be >= 0")
        setattr(cfg, sec, secs[sec])
    for sec, keys in (("decode", ("batch_per_die", "dies", "dies_per_chip", "iterations", "prefill_dps")),
                      ("ma", ("domains", "attention_dies", "expert_dies", "microbatches", "layers", "dies_per_chip")),
                      ("pd", ("prefill_tes", "decode_tes", "dps_per_prefill_te", "dps_per_decode_te"))):
        for k in keys:
            if k in secs[sec] and secs[sec][k] < 1 and not (k == "batch_per_die"):
                ld.fail(sec, k, f"{sec}.{k} must be >= 1")

    w = secs["workload"]
    spec = WorkloadSpec(arrival=w.get("arrival", "fixed"), rate=float(w.get("rate", 100.0)))
    if spec.arrival not in ("poisson", "fixed"):
        ld.fail("workload", "arrival", f"workload.arrival must be poisson or fixed, got {spec.arrival!r}")
    if spec.rate <= 0:
        ld.fail("workload", "rate", "workload.rate must be > 0")
    if "file" in w:
        wpath = ld.resolve("workload", w["file"])
        try:
            body = json.loads(wpath.read_text())
        except json.JSONDecodeError as e:
            raise ConfigFileError(wpath, e.lineno, f"workload JSON: {e.msg}") from None
        reqs = body.get("requests", []) if isinstance(body, dict) else None
        if not isinstance(reqs, list) or any(not isinstance(r, dict) or "prompt_len" not in r for r in reqs):
            raise ConfigFileError(wpath, 1, "workload needs {requests: [{prompt_len, max_output}]}")
        spec.requests = reqs
        spec.arrival = body.get("arrival", spec.arrival)
        spec.rate = float(body.get("rate", spec.rate))
    else:
        spec.count = w.get("count", 0)
        spec.prompt_range = (w.get("prompt_min", 128), w.get("prompt_max", 4096))
        spec.output_range = (w.get("output_min", 16), w.get("output_max", 256))
        if spec.prompt_range[0] > spec.prompt_range[1] or spec.output_range[0] > spec.output_range[1]:
            ld.fail("workload", "prompt_min", "workload ranges need min <= max")
        if min(spec.prompt_range + spec.output_range) < 1:
            ld.fail("workload", "prompt_min", "workload lengths must be >= 1")
    cfg.workload = spec
    if "file" in secs["faults"]:
        cfg.faults = load_faults(ld.resolve("faults", secs["faults"]["file"]))
    return cfg


def load_faults(path) -> List[FaultEvent]:
    path = Path(path)
    if not path.exists():
        raise ConfigFileError(path, None, "fault schedule not found")
    try:
        return load_fault_schedule(path.read_text())
    except ConfigFileError:
        raise
    except ConfigError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ConfigFileError(path, int(m.group(1)) if m else None, str(e)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigFileError(path, None, "config file not found")
    return parse_config(path.read_text(), path)


def preset_path(name: str) -> Path:
    p = PRESET_DIR / (name if name.endswith(".toml") else name + ".toml")
    if not p.exists():
        raise ConfigError(f"no preset named {name!r}")
    return p


def list_presets() -> List[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.toml"))
