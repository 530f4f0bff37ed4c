"""Command line entry point: run, sweep, validate, oracle.

Exit codes: 0 success, 1 configuration error, 2 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

from . import __version__
from .metrics import COMPARED, MetricsSummary, compare, compute, metric_value
from .scenario import PROTOCOLS, ConfigInvalid, ScenarioConfig, parse_scenario
from .simkernel import TRACE_FORMAT, Simulator, tree_violations, zone_mismatches
from .wire import WIRE_FORMAT

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVARIANT = 2


def write_atomic(path: str, text: str) -> None:
    """Write to a temporary file in the target directory, then rename over."""
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_scenario(path: str) -> ScenarioConfig:
    with open(path) as fh:
        return parse_scenario(fh.read())


class TickChecker:
    """Run tree checks at most once per interval of simulated time."""

    def __init__(self, interval_ms: int):
        self.interval = interval_ms
        self.next_at = 0

    def __call__(self, sim: Simulator) -> list:
        if self.interval and sim.now < self.next_at:
            return []
        self.next_at = sim.now + self.interval
        return tree_violations(sim)


@dataclass
class RunResult:
    protocol: str
    seed: int
    summary: MetricsSummary
    trace: str
    violations: list


def run_one(cfg: ScenarioConfig, check: str = "tick") -> RunResult:
    checker = None
    if check == "tick":
        checker = TickChecker(cfg.mobility.tick)
    elif check == "event":
        checker = TickChecker(0)
    sim = Simulator(cfg, check=checker)
    records = sim.finish()
    return RunResult(cfg.protocol, cfg.seed, compute(records), sim.trace_text(),
                     list(sim.violations))


def _run_job(args) -> RunResult:
    cfg, check = args
    return run_one(cfg, check)


def summary_json(s: MetricsSummary) -> str:
    def clean(v):
        if isinstance(v, float) and math.isnan(v):
            return "undefined"
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        return v
    return json.dumps(clean(s.to_dict()), indent=2, sort_keys=True) + "\n"


# -- comparison table -----------------------------------------------------------------

def comparison_rows(runs: dict[str, list[MetricsSummary]], baseline: Optional[str] = None):
    """One row per (metric, protocol): mean over seeds, difference and sign test
    against the first protocol listed (or `baseline`)."""
    protocols = list(runs)
    ref = baseline or protocols[0]
    rows = []
    for m in COMPARED:
        for p in protocols:
            vals = [metric_value(s, m) for s in runs[p]]
            finite = [v for v in vals if not math.isnan(v)]
            mean = sum(finite) / len(finite) if finite else float("nan")
            row = {"metric": m, "protocol": p, "mean": mean, "seeds": len(vals),
                   "vs": None, "diff": None, "wins": None, "losses": None, "p_value": None}
            if p != ref:
                c = compare(runs[p], runs[ref])[m]
                row.update(vs=ref, diff=c.mean_diff, wins=c.wins_a, losses=c.wins_b,
                           p_value=c.p_value)
            rows.append(row)
    return rows


def _cell(v, fmt="{:.4g}") -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return "undefined" if math.isnan(v) else fmt.format(v)
    return str(v)


def format_table(rows) -> str:
    head = ["metric", "protocol", "mean", "vs", "diff", "wins", "losses", "p"]
    body = [[r["metric"], r["protocol"], _cell(r["mean"]), _cell(r["vs"]), _cell(r["diff"]),
             _cell(r["wins"]), _cell(r["losses"]), _cell(r["p_value"], "{:.3g}")] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(b, widths)))
    return "\n".join(lines) + "\n"


# -- subcommands ----------------------------------------------------------------------

def cmd_validate(args) -> int:
    load_scenario(args.scenario)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_scenario(args.scenario)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.protocol is not None:
        cfg = cfg.with_protocol(args.protocol)
    res = run_one(cfg, args.check)
    if args.trace:
        write_atomic(args.trace, res.trace)
    if args.summary:
        write_atomic(args.summary, summary_json(res.summary))
    else:
        sys.stdout.write(summary_json(res.summary))
    if res.violations:
        for v in res.violations[:20]:
            print(f"invariant violation: {v}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_scenario(args.scenario)
    protocols = [p.strip() for p in args.protocols.split(",") if p.strip()]
    for p in protocols:
        if p not in PROTOCOLS:
            raise ConfigInvalid(f"unknown protocol {p!r}", key="protocols")
    seeds = [args.first_seed + i for i in range(args.seeds)]
    jobs = [(cfg.with_seed(s).with_protocol(p), args.check) for p in protocols for s in seeds]
    if args.jobs == 1:
        results = [_run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs or None) as ex:
            results = list(ex.map(_run_job, jobs))
    runs: dict[str, list[MetricsSummary]] = {p: [] for p in protocols}
    violations = []
    for r in results:
        runs[r.protocol].append(r.summary)
        violations += [f"{r.protocol} seed {r.seed}: {v}" for v in r.violations]
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            stem = os.path.join(args.out, f"{r.protocol}-{r.seed}")
            write_atomic(stem + ".trace", r.trace)
            write_atomic(stem + ".json", summary_json(r.summary))
    rows = comparison_rows(runs)
    table = format_table(rows)
    sys.stdout.write(table)
    if args.out:
        write_atomic(os.path.join(args.out, "comparison.txt"), table)
        write_atomic(os.path.join(args.out, "comparison.json"),
                     json.dumps([{k: (None if isinstance(v, float) and math.isnan(v) else v)
                                  for k, v in r.items()} for r in rows], indent=2) + "\n")
    if violations:
        for v in violations[:20]:
            print(f"invariant violation: {v}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = load_scenario(args.scenario)
    if cfg.mobility.kind != "static":
        raise ConfigInvalid("oracle needs a static topology", key="kind")
    sim = Simulator(cfg)
    sim.run_until(args.at if args.at is not None else cfg.end_time_ms)
    bad = zone_mismatches(sim)
    for line in bad:
        print(line)
    print(f"{sim.n} nodes checked, {len(bad)} mismatches")
    return EXIT_INVARIANT if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seelamp", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version",
                    version=f"seelamp {__version__} (trace format {TRACE_FORMAT}, "
                            f"wire format {WIRE_FORMAT})")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--trace", help="write the trace log here")
    p.add_argument("--summary", help="write the JSON summary here instead of stdout")
    p.add_argument("--check", choices=("off", "tick", "event"), default="tick",
                   help="tree invariant checks: never, once per mobility tick, or after every event")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="matched-seed runs across protocols")
    p.add_argument("scenario")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--first-seed", type=int, default=1)
    p.add_argument("--protocols", default=",".join(PROTOCOLS))
    p.add_argument("--jobs", type=int, default=0, help="worker processes (0 = one per CPU)")
    p.add_argument("--out", help="directory for traces, summaries and the comparison table")
    p.add_argument("--check", choices=("off", "tick", "event"), default="off")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="parse and validate a scenario file")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("oracle", help="compare zone tables with BFS on a static run")
    p.add_argument("scenario")
    p.add_argument("--at", type=int, help="stop time in ms (default: end_time)")
    p.set_defaults(func=cmd_oracle)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
