"""Command line entry point: ``run``, ``report`` and ``eplb analyze``.

Exit codes: 0 success, 2 bad input (config, fault schedule, missing bundle),
3 simulation deadlock.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from .config import ConfigFileError, list_presets, load_config, load_faults, preset_path, setup_logging
from .fabric import ConfigError
from .pipeline.pd import DeadlockError
from .runner import eplb_report, execute, results_json

EXIT_OK, EXIT_CONFIG, EXIT_DEADLOCK = 0, 2, 3
SUMMARY_KEYS = ("tpot_ms", "ttft_ms", "tokens_per_s_per_chip", "total_tokens_per_s", "global_batch",
                "tokens_per_step")

log = logging.getLogger("moeserve_sim.cli")


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def resolve_config(arg: str) -> Path:
    """A path, or the name of a shipped preset."""
    p = Path(arg)
    if p.exists():
        return p
    try:
        return preset_path(arg)
    except ConfigError:
        return p


def write_bundle(out_dir: Path, bundle) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.json").write_text(results_json(bundle.results))
    for name, text in sorted(bundle.files.items()):
        (out_dir / name).write_text(text)


def _run_one(config_path: str, seed: int, out_dir: str, faults_path: Optional[str]) -> int:
    """Run a single seed; returns the exit code.  Picklable for ``--parallel``."""
    try:
        cfg = load_config(config_path)
        cfg = replace(cfg, seed=seed)
        faults = load_faults(faults_path) if faults_path else None
        bundle = execute(cfg, faults)
    except ConfigFileError as e:
        _err(str(e))
        return EXIT_CONFIG
    except ConfigError as e:
        _err(f"{config_path}: {e}")
        return EXIT_CONFIG
    except DeadlockError as e:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dump = json.dumps({"stuck": e.stuck}, sort_keys=True, indent=2, default=str)
        (out / "stuck.json").write_text(dump + "\n")
        _err(f"deadlock: {len(e.stuck)} request(s) unfinished with no pending events")
        print(dump, file=sys.stderr)
        return EXIT_DEADLOCK
    write_bundle(Path(out_dir), bundle)
    r = bundle.results
    print(f"{r['name'] or r['deployment']} seed={seed}: requests={r['requests']} "
          + " ".join(f"{k}={r[k]}" for k in SUMMARY_KEYS) + f" -> {out_dir}")
    return EXIT_OK


def cmd_run(args) -> int:
    path = resolve_config(args.config)
    try:
        cfg = load_config(path)
    except ConfigFileError as e:
        _err(str(e))
        return EXIT_CONFIG
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    if args.parallel < 1:
        _err("--parallel must be >= 1")
        return EXIT_CONFIG
    if args.parallel == 1:
        return _run_one(str(path), seed, str(out), args.faults)
    seeds = [seed + i for i in range(args.parallel)]
    with ProcessPoolExecutor(max_workers=args.parallel) as pool:
        codes = list(pool.map(_run_one, [str(path)] * len(seeds), seeds,
                              [str(out / f"seed-{s}") for s in seeds], [args.faults] * len(seeds)))
    return max(codes)


# -- report ------------------------------------------------------------------------------

def render_table(r: dict) -> str:
    lines = ["Latency breakdown (us)", f"{'op':<10}{'avg':>12}{'min':>12}{'max':>12}"]
    for row in r.get("breakdown") or []:
        lines.append(f"{row['op']:<10}{row['avg_us']:>12.3f}{row['min_us']:>12.3f}{row['max_us']:>12.3f}")
    if not r.get("breakdown"):
        lines.append("(no rows)")
    lines.append("")
    for k in SUMMARY_KEYS:
        v = r.get(k)
        lines.append(f"{k:<24}{'null' if v is None else (f'{v:.3f}' if isinstance(v, float) else v)}")
    return "\n".join(lines) + "\n"


def render_csv(r: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "avg_us", "min_us", "max_us", "value"])
    for row in r.get("breakdown") or []:
        w.writerow([row["op"], row["avg_us"], row["min_us"], row["max_us"], ""])
    for k in SUMMARY_KEYS:
        v = r.get(k)
        w.writerow([k, "", "", "", "" if v is None else v])
    return buf.getvalue()


def render_json(r: dict) -> str:
    return json.dumps(r, sort_keys=True, indent=2) + "\n"


RENDERERS = {"table": render_table, "json": render_json, "csv": render_csv}


def cmd_report(args) -> int:
    d = Path(args.dir)
    res = d / "results.json"
    if not res.is_file():
        _err(f"no result bundle at {d} (results.json missing)")
        return EXIT_CONFIG
    try:
        results = json.loads(res.read_text())
    except json.JSONDecodeError as e:
        _err(f"{res}:{e.lineno}: {e.msg}")
        return EXIT_CONFIG
    sys.stdout.write(RENDERERS[args.format](results))
    if not args.no_plots:
        from .plotting import render_all
        for p in render_all(d, results):
            log.info("wrote %s", p)
    return EXIT_OK


def cmd_eplb_analyze(args) -> int:
    p = Path(args.trace)
    if not p.is_file():
        _err(f"trace {p} not found")
        return EXIT_CONFIG
    try:
        rep = eplb_report(p.read_text(), args.budget, nodes=args.nodes, slice_ns=args.slice_ns)
    except (ConfigError, KeyError, ValueError) as e:
        _err(f"{p}: {e}")
        return EXIT_CONFIG
    sys.stdout.write(json.dumps(rep, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="moeserve-sim", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a simulation from a TOML config or preset name")
    run.add_argument("--config", required=True, help=f"TOML path or preset ({', '.join(list_presets())})")
    run.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    run.add_argument("--out", default="out", help="result bundle directory")
    run.add_argument("--faults", default=None, help="JSON fault schedule")
    run.add_argument("--parallel", type=int, default=1, help="run N consecutive seeds concurrently")
    run.set_defaults(fn=cmd_run)

    rep = sub.add_parser("report", help="render a result bundle")
    rep.add_argument("dir")
    rep.add_argument("--format", choices=sorted(RENDERERS), default="table")
    rep.add_argument("--no-plots", action="store_true", help="skip writing PNG figures")
    rep.set_defaults(fn=cmd_report)

    ep = sub.add_parser("eplb", help="expert placement tools")
    esub = ep.add_subparsers(dest="eplb_command", required=True)
    an = esub.add_parser("analyze", help="greedy selection/placement report for a routing trace")
    an.add_argument("--trace", required=True, help="routing CSV (time_ns,layer,expert[,count]) or LoadTable JSON")
    an.add_argument("--budget", type=int, required=True, help="redundant replicas per layer")
    an.add_argument("--nodes", type=int, default=None, help="nodes hosting experts (default: one per expert)")
    an.add_argument("--slice-ns", type=int, default=None, help="load collection slice width")
    an.set_defaults(fn=cmd_eplb_analyze)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
