"""Run metrics computed from trace records, and matched-seed comparison."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy.stats import binomtest

from .simkernel import TRACE_FORMAT

UNDEFINED = float("nan")  # control overhead when nothing was delivered


class MalformedTrace(ValueError):
    pass


class MismatchedScenarios(ValueError):
    pass


@dataclass
class Spread:
    mean: float = UNDEFINED
    p95: float = UNDEFINED


@dataclass
class MetricsSummary:
    pdr: float
    control_overhead: float
    data_latency_ms: Spread
    join_latency_ms: Spread
    energy_total_j: float
    energy_per_delivery_j: float
    network_lifetime_ms: int
    load_gini: float
    repair_count: int
    failover_count: int
    leader_count_max: int
    dup_count: int = 0
    deliveries: int = 0
    expected: int = 0
    control_tx: int = 0
    data_tx: int = 0
    seed: int = 0
    protocol: str = ""
    scenario_hash: str = ""
    match_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def gini(values: Iterable[float]) -> float:
    x = np.sort(np.asarray(list(values), dtype=float))
    n = x.size
    if n == 0 or x.sum() == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    return float((2 * (ranks * x).sum()) / (n * x.sum()) - (n + 1) / n)


def _spread(values: list[float]) -> Spread:
    if not values:
        return Spread()
    return Spread(float(np.mean(values)), float(np.percentile(values, 95)))


def parse_header(line: str) -> dict:
    if not line.startswith("# seelamp-trace"):
        raise MalformedTrace("missing trace header")
    fields = dict(tok.split("=", 1) for tok in line.split()[2:])
    if int(fields.get("format", -1)) != TRACE_FORMAT:
        raise MalformedTrace(f"unsupported trace format {fields.get('format')}")
    return fields


def compute(trace) -> MetricsSummary:
    """Summarize a run from its trace (a list of lines or the full text)."""
    lines = trace.splitlines() if isinstance(trace, str) else list(trace)
    if not lines:
        raise MalformedTrace("empty trace")
    head = parse_header(lines[0])
    n = int(head["nodes"])
    end = int(head["end_ms"])
    sends: dict[str, tuple[int, int]] = {}
    expected = 0
    delivered: dict[tuple[str, int], int] = {}
    dups = 0
    latencies = []
    joins: dict[tuple[int, int], int] = {}
    join_lat = []
    load = [0] * n
    control = data = 0
    roots: dict[int, set[int]] = {}
    leaders = 0
    repairs = failovers = 0
    energy = 0.0
    lifetime: Optional[int] = None
    ended = False
    last_t = 0
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        if len(parts) < 3:
            raise MalformedTrace(f"line {lineno}: too few fields")
        try:
            t, node, kind = int(parts[0]), int(parts[1]), parts[2]
        except ValueError:
            raise MalformedTrace(f"line {lineno}: bad time or node") from None
        if t < last_t:
            raise MalformedTrace(f"line {lineno}: time goes backwards")
        last_t = t
        try:
            if kind == "tx":
                if int(parts[5]) != node:
                    load[node] += 1
                if parts[3] == "DATA":
                    data += 1
                else:
                    control += 1
            elif kind == "deliver":
                key = (parts[4], node)
                if key in delivered:
                    dups += 1
                    continue
                delivered[key] = t
                if parts[4] in sends:
                    latencies.append(t - sends[parts[4]][0])
            elif kind == "send":
                sends[parts[4]] = (t, node)
                expected += int(parts[5])
            elif kind == "join":
                joins[(node, int(parts[3]))] = t
            elif kind == "role":
                g, role = int(parts[3]), parts[4]
                if role in ("member", "primary_root", "backup_root", "intermediate"):
                    started = joins.pop((node, g), None)
                    if started is not None:
                        join_lat.append(t - started)
                holders = roots.setdefault(g, set())
                if role == "primary_root":
                    holders.add(node)
                else:
                    holders.discard(node)
                leaders = max(leaders, len(holders))
            elif kind == "death":
                for holders in roots.values():
                    holders.discard(node)
                if parts[3] == "battery" and lifetime is None:
                    lifetime = t
            elif kind == "log":
                if parts[3] == "repair":
                    repairs += 1
                elif parts[3] == "failover":
                    failovers += 1
            elif kind == "energy":
                energy += float(parts[7]) - float(parts[3])
            elif kind == "end":
                ended = True
        except (IndexError, ValueError) as exc:
            raise MalformedTrace(f"line {lineno}: {exc}") from None
    if not ended:
        raise MalformedTrace("trace has no end record")
    deliveries = len(delivered)
    return MetricsSummary(
        pdr=deliveries / expected if expected else 1.0,
        control_overhead=control / deliveries if deliveries else UNDEFINED,
        data_latency_ms=_spread(latencies),
        join_latency_ms=_spread(join_lat),
        energy_total_j=energy,
        energy_per_delivery_j=energy / deliveries if deliveries else UNDEFINED,
        network_lifetime_ms=end if lifetime is None else lifetime,
        load_gini=gini(load),
        repair_count=repairs,
        failover_count=failovers,
        leader_count_max=leaders,
        dup_count=dups,
        deliveries=deliveries,
        expected=expected,
        control_tx=control,
        data_tx=data,
        seed=int(head["seed"]),
        protocol=head["protocol"],
        scenario_hash=head["scenario_hash"],
        match_hash=head["match_hash"],
    )


def delivery_times(trace) -> list[int]:
    lines = trace.splitlines() if isinstance(trace, str) else list(trace)
    parse_header(lines[0])
    return [int(p[0]) for p in (l.split() for l in lines[1:]) if p[2] == "deliver"]


COMPARED = ("pdr", "control_overhead", "data_latency_ms", "join_latency_ms", "energy_total_j",
            "energy_per_delivery_j", "network_lifetime_ms", "load_gini", "repair_count",
            "failover_count", "leader_count_max")


def metric_value(s: MetricsSummary, name: str) -> float:
    v = getattr(s, name)
    return v.mean if isinstance(v, Spread) else float(v)


@dataclass
class MetricComparison:
    metric: str
    mean_a: float
    mean_b: float
    mean_diff: float
    wins_a: int  # seeds where a > b
    wins_b: int
    ties: int
    p_value: float  # two-sided sign test


def sign_test(wins: int, losses: int, alternative: str = "two-sided") -> float:
    trials = wins + losses
    if trials == 0:
        return 1.0
    return float(binomtest(wins, trials, 0.5, alternative=alternative).pvalue)


def compare(a: list[MetricsSummary], b: list[MetricsSummary]) -> dict[str, MetricComparison]:
    """Per-metric comparison of two protocols over matched seeds."""
    if len(a) != len(b) or not a:
        raise MismatchedScenarios("need the same non-zero number of runs on both sides")
    for x, y in zip(a, b):
        if x.match_hash != y.match_hash or x.seed != y.seed:
            raise MismatchedScenarios(
                f"run pair differs: {x.match_hash}/{x.seed} vs {y.match_hash}/{y.seed}")
    out = {}
    for m in COMPARED:
        va = [metric_value(s, m) for s in a]
        vb = [metric_value(s, m) for s in b]
        pairs = [(p, q) for p, q in zip(va, vb) if not (math.isnan(p) or math.isnan(q))]
        wa = sum(p > q for p, q in pairs)
        wb = sum(p < q for p, q in pairs)
        ma = float(np.mean([p for p, _ in pairs])) if pairs else UNDEFINED
        mb = float(np.mean([q for _, q in pairs])) if pairs else UNDEFINED
        out[m] = MetricComparison(m, ma, mb, ma - mb if pairs else UNDEFINED, wa, wb,
                                  len(pairs) - wa - wb, sign_test(wa, wb))
    return out
