"""Scenario configuration: data model, text format, and workload expansion.

The file format is line oriented. `[section]` headers open one of the
sections general, radio, energy, mobility, protocol, app; every other
non-blank, non-comment line is `key = value`. Unknown keys are errors.
The `[app]` section may repeat `event = <t_ms> <verb> <args...>`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import random
from dataclasses import dataclass, field
from typing import Optional

from .protocol import ProtocolConfig

PROTOCOLS = ("seelamp", "shared_tree", "mesh")
VERBS = {"join": 2, "leave": 2, "send": 3, "kill": 1, "killroot": 1}


class ConfigInvalid(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None):
        self.line = line
        self.key = key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass
class RadioModel:
    range: float = 250.0
    per_hop_latency: int = 5
    loss_probability: float = 0.0


@dataclass
class EnergyModel:
    tx_cost: float = 2.0e-6
    rx_cost: float = 1.0e-6
    idle_cost: float = 1.0e-3
    initial_battery: float = 50.0
    node_battery: dict[int, float] = field(default_factory=dict)
    node_idle_cost: dict[int, float] = field(default_factory=dict)

    def battery_of(self, node: int) -> float:
        return self.node_battery.get(node, self.initial_battery)

    def idle_of(self, node: int) -> float:
        return self.node_idle_cost.get(node, self.idle_cost)


@dataclass
class MobilityModel:
    kind: str = "static"  # static | random_waypoint | trace
    speed_min: float = 1.0
    speed_max: float = 10.0
    pause: int = 0
    tick: int = 100
    # trace kind: node -> [(t_ms, x, y), ...]
    waypoints: dict[int, list[tuple[int, float, float]]] = field(default_factory=dict)


@dataclass(frozen=True)
class AppDirective:
    at: int
    verb: str
    node: int
    group: int = 0
    payload_len: int = 0


@dataclass
class Workload:
    """Generated membership and traffic, drawn from the scenario seed."""
    group: int = 1
    members: int = 0
    join_start: int = 1000
    join_spacing: int = 100
    send_start: int = 10000
    send_end: int = 0
    send_interval: int = 1000
    payload_len: int = 64
    source: str = "random"  # random | first

    @property
    def enabled(self) -> bool:
        return self.members > 0


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 1
    width: float = 1000.0
    height: float = 1000.0
    node_count: int = 1
    end_time_ms: int = 10000
    protocol: str = "seelamp"
    positions: dict[int, tuple[float, float]] = field(default_factory=dict)
    radio: RadioModel = field(default_factory=RadioModel)
    energy: EnergyModel = field(default_factory=EnergyModel)
    mobility: MobilityModel = field(default_factory=MobilityModel)
    protocol_params: ProtocolConfig = field(default_factory=ProtocolConfig)
    app_script: list[AppDirective] = field(default_factory=list)
    workload: Workload = field(default_factory=Workload)

    @property
    def scenario_hash(self) -> str:
        return _digest(dataclasses.replace(self, seed=0))

    @property
    def match_hash(self) -> str:
        """Digest ignoring seed and protocol, for pairing runs across protocols."""
        return _digest(dataclasses.replace(self, seed=0, protocol="seelamp"))

    def net_diameter(self) -> int:
        if self.protocol_params.net_diameter:
            return self.protocol_params.net_diameter
        return math.ceil(math.hypot(self.width, self.height) / self.radio.range) + 2

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return dataclasses.replace(self, seed=seed)

    def with_protocol(self, protocol: str) -> "ScenarioConfig":
        return dataclasses.replace(self, protocol=protocol)


def _digest(cfg: ScenarioConfig) -> str:
    return hashlib.sha256(render(cfg).encode()).hexdigest()[:16]


# -- parsing ------------------------------------------------------------------

def _num(kind):
    def conv(text: str):
        if kind is int:
            return int(text, 0)
        return float(text)
    return conv


def _pairs(value: str, conv=float) -> dict:
    out = {}
    for item in value.replace(";", ",").split(","):
        item = item.strip()
        if not item:
            continue
        node, _, rest = item.partition(":")
        out[int(node)] = conv(rest)
    return out


def _xy(text: str) -> tuple[float, float]:
    x, y = text.split()
    return float(x), float(y)


def _waypoints(value: str) -> dict[int, list[tuple[int, float, float]]]:
    out: dict[int, list] = {}
    for item in value.split(","):
        item = item.strip()
        if not item:
            continue
        node, t, x, y = item.split(":")
        out.setdefault(int(node), []).append((int(t), float(x), float(y)))
    for legs in out.values():
        legs.sort(key=lambda leg: leg[0])
    return out


_GENERAL = {"name": str, "seed": _num(int), "width": _num(float), "height": _num(float),
            "node_count": _num(int), "end_time_ms": _num(int), "protocol": str}
_RADIO = {"range": _num(float), "per_hop_latency": _num(int),
          "loss_probability": _num(float)}
_ENERGY = {"tx_cost": _num(float), "rx_cost": _num(float), "idle_cost": _num(float),
           "initial_battery": _num(float)}
_MOBILITY = {"kind": str, "speed_min": _num(float), "speed_max": _num(float),
             "pause": _num(int), "tick": _num(int)}
_WORKLOAD = {"group": _num(int), "members": _num(int), "join_start": _num(int),
             "join_spacing": _num(int), "send_start": _num(int), "send_end": _num(int),
             "send_interval": _num(int), "payload_len": _num(int), "source": str}


def _protocol_fields() -> dict:
    out = {}
    for f in dataclasses.fields(ProtocolConfig):
        out[f.name] = _num(float) if f.type in ("float", float) else _num(int)
    return out


def parse_scenario(text: str) -> ScenarioConfig:
    cfg = ScenarioConfig()
    section = None
    seen: dict[tuple[str, str], int] = {}
    lines: dict[str, int] = {}
    proto_fields = _protocol_fields()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in ("general", "radio", "energy", "mobility", "protocol", "app"):
                raise ConfigInvalid(f"unknown section [{section}]", lineno)
            continue
        if section is None:
            raise ConfigInvalid("key outside of any section", lineno)
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigInvalid("expected key = value", lineno)
        if key != "event":
            if (section, key) in seen:
                raise ConfigInvalid("duplicate key", lineno, key)
            seen[(section, key)] = lineno
        lines[f"{section}.{key}"] = lineno
        try:
            _assign(cfg, section, key, value, proto_fields, lineno)
        except ConfigInvalid:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigInvalid(f"bad value {value!r} ({exc})", lineno, key) from None
    validate(cfg, lines)
    return cfg


def _assign(cfg: ScenarioConfig, section: str, key: str, value: str, proto_fields, lineno):
    if section == "general":
        if key == "positions":
            cfg.positions = _pairs(value, _xy)
        elif key == "end_time":
            cfg.end_time_ms = int(value, 0)
        elif key in _GENERAL:
            setattr(cfg, key, _GENERAL[key](value))
        else:
            raise ConfigInvalid("unknown key", lineno, key)
    elif section == "radio":
        if key not in _RADIO:
            raise ConfigInvalid("unknown key", lineno, key)
        setattr(cfg.radio, key, _RADIO[key](value))
    elif section == "energy":
        if key == "node_battery":
            cfg.energy.node_battery = _pairs(value)
        elif key == "node_idle_cost":
            cfg.energy.node_idle_cost = _pairs(value)
        elif key in _ENERGY:
            setattr(cfg.energy, key, _ENERGY[key](value))
        else:
            raise ConfigInvalid("unknown key", lineno, key)
    elif section == "mobility":
        if key == "waypoints":
            cfg.mobility.waypoints = _waypoints(value)
        elif key in _MOBILITY:
            setattr(cfg.mobility, key, _MOBILITY[key](value))
        else:
            raise ConfigInvalid("unknown key", lineno, key)
    elif section == "protocol":
        if key not in proto_fields:
            raise ConfigInvalid("unknown key", lineno, key)
        setattr(cfg.protocol_params, key, proto_fields[key](value))
    elif section == "app":
        if key == "event":
            cfg.app_script.append(_directive(value, lineno))
        elif key in _WORKLOAD:
            setattr(cfg.workload, key, _WORKLOAD[key](value))
        else:
            raise ConfigInvalid("unknown key", lineno, key)


def _directive(value: str, lineno: int) -> AppDirective:
    parts = value.split()
    if len(parts) < 2 or parts[1] not in VERBS:
        raise ConfigInvalid(f"bad event {value!r}", lineno, "event")
    verb = parts[1]
    args = [int(a, 0) for a in parts[2:]]
    if len(args) != VERBS[verb]:
        raise ConfigInvalid(f"'{verb}' takes {VERBS[verb]} arguments", lineno, "event")
    at = int(parts[0], 0)
    if verb == "killroot":
        return AppDirective(at, verb, -1, args[0])
    if verb == "kill":
        return AppDirective(at, verb, args[0])
    if verb == "send":
        return AppDirective(at, verb, args[0], args[1], args[2])
    return AppDirective(at, verb, args[0], args[1])


def validate(cfg: ScenarioConfig, lines: Optional[dict] = None) -> None:
    lines = lines or {}

    def fail(msg: str, where: str):
        key = where.split(".", 1)[1] if "." in where else where
        raise ConfigInvalid(msg, lines.get(where), key)

    if cfg.node_count < 1:
        fail("must be at least 1", "general.node_count")
    if not 0 <= cfg.seed < 2 ** 64:
        fail("must be a 64-bit unsigned integer", "general.seed")
    if cfg.width <= 0 or cfg.height <= 0:
        fail("area must be positive", "general.width")
    if cfg.end_time_ms <= 0:
        fail("must be positive", "general.end_time_ms")
    if cfg.protocol not in PROTOCOLS:
        fail(f"must be one of {', '.join(PROTOCOLS)}", "general.protocol")
    for node, (x, y) in cfg.positions.items():
        if not 0 <= node < cfg.node_count:
            fail(f"node {node} out of range", "general.positions")
        if not (0 <= x <= cfg.width and 0 <= y <= cfg.height):
            fail(f"node {node} placed outside the area", "general.positions")
    r = cfg.radio
    if r.range <= 0:
        fail("must be positive", "radio.range")
    if r.per_hop_latency < 1:
        fail("must be at least 1 ms", "radio.per_hop_latency")
    if not 0 <= r.loss_probability < 1:
        fail("must be in [0, 1)", "radio.loss_probability")
    e = cfg.energy
    if not e.tx_cost >= e.rx_cost >= 0:
        fail("need tx_cost >= rx_cost >= 0", "energy.tx_cost")
    if e.idle_cost < 0 or e.initial_battery <= 0:
        fail("idle_cost must be >= 0 and initial_battery > 0", "energy.initial_battery")
    for node in list(e.node_battery) + list(e.node_idle_cost):
        if not 0 <= node < cfg.node_count:
            fail(f"node {node} out of range", "energy.node_battery")
    m = cfg.mobility
    if m.kind not in ("static", "random_waypoint", "trace"):
        fail("must be static, random_waypoint or trace", "mobility.kind")
    if not 0 <= m.speed_min <= m.speed_max:
        fail("need 0 <= speed_min <= speed_max", "mobility.speed_min")
    if m.pause < 0 or m.tick <= 0:
        fail("pause must be >= 0 and tick > 0", "mobility.tick")
    for node, legs in m.waypoints.items():
        if not 0 <= node < cfg.node_count:
            fail(f"node {node} out of range", "mobility.waypoints")
        for _, x, y in legs:
            if not (0 <= x <= cfg.width and 0 <= y <= cfg.height):
                fail(f"waypoint for node {node} outside the area", "mobility.waypoints")
        times = [t for t, _, _ in legs]
        if any(b <= a for a, b in zip(times, times[1:])) or times[0] < 0:
            fail(f"waypoint times for node {node} must be distinct and non-negative",
                 "mobility.waypoints")
    try:
        cfg.protocol_params.validate()
    except ValueError as exc:
        name = str(exc).split()[0]
        fail(str(exc), f"protocol.{name}")
    for d in cfg.app_script:
        if d.at < 0 or d.at > cfg.end_time_ms:
            fail(f"event at {d.at} outside [0, end_time_ms]", "app.event")
        if d.verb != "killroot" and not 0 <= d.node < cfg.node_count:
            fail(f"node {d.node} out of range", "app.event")
        if d.verb in ("join", "leave", "send", "killroot") and d.group < 1:
            fail("group ids start at 1", "app.event")
        if d.verb == "send" and not 0 <= d.payload_len <= 60000:
            fail("payload length out of range", "app.event")
    w = cfg.workload
    if w.enabled:
        if w.members > cfg.node_count:
            fail("more members than nodes", "app.members")
        if w.group < 1 or w.send_interval <= 0 or w.payload_len < 16:
            fail("group >= 1, send_interval > 0 and payload_len >= 16 required", "app.group")
        if w.source not in ("random", "first"):
            fail("must be random or first", "app.source")
        last_join = w.join_start + (w.members - 1) * w.join_spacing
        if last_join > cfg.end_time_ms or w.send_start > cfg.end_time_ms:
            fail("workload times exceed end_time_ms", "app.join_start")


# -- rendering ----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render(cfg: ScenarioConfig) -> str:
    out = ["[general]"]
    for k in _GENERAL:
        out.append(f"{k} = {_fmt(getattr(cfg, k))}")
    if cfg.positions:
        out.append("positions = " + ", ".join(
            f"{n}:{_fmt(x)} {_fmt(y)}" for n, (x, y) in sorted(cfg.positions.items())))
    out.append("[radio]")
    out += [f"{k} = {_fmt(getattr(cfg.radio, k))}" for k in _RADIO]
    out.append("[energy]")
    out += [f"{k} = {_fmt(getattr(cfg.energy, k))}" for k in _ENERGY]
    if cfg.energy.node_battery:
        out.append("node_battery = " + ", ".join(
            f"{n}:{_fmt(v)}" for n, v in sorted(cfg.energy.node_battery.items())))
    if cfg.energy.node_idle_cost:
        out.append("node_idle_cost = " + ", ".join(
            f"{n}:{_fmt(v)}" for n, v in sorted(cfg.energy.node_idle_cost.items())))
    out.append("[mobility]")
    out += [f"{k} = {_fmt(getattr(cfg.mobility, k))}" for k in _MOBILITY]
    if cfg.mobility.waypoints:
        out.append("waypoints = " + ", ".join(
            f"{n}:{t}:{_fmt(x)}:{_fmt(y)}"
            for n, legs in sorted(cfg.mobility.waypoints.items()) for t, x, y in legs))
    out.append("[protocol]")
    for f in dataclasses.fields(ProtocolConfig):
        out.append(f"{f.name} = {_fmt(getattr(cfg.protocol_params, f.name))}")
    out.append("[app]")
    out += [f"{k} = {_fmt(getattr(cfg.workload, k))}" for k in _WORKLOAD]
    for d in cfg.app_script:
        if d.verb == "killroot":
            args = f"{d.group}"
        elif d.verb == "kill":
            args = f"{d.node}"
        elif d.verb == "send":
            args = f"{d.node} {d.group} {d.payload_len}"
        else:
            args = f"{d.node} {d.group}"
        out.append(f"event = {d.at} {d.verb} {args}")
    return "\n".join(out) + "\n"


# -- workload -----------------------------------------------------------------

def expand_app_script(cfg: ScenarioConfig) -> list[AppDirective]:
    """Explicit directives plus the seeded workload, in dispatch order."""
    events = list(cfg.app_script)
    w = cfg.workload
    if w.enabled:
        rng = random.Random(f"{cfg.seed}:workload")
        members = sorted(rng.sample(range(cfg.node_count), w.members))
        order = list(members)
        rng.shuffle(order)
        for i, node in enumerate(order):
            events.append(AppDirective(w.join_start + i * w.join_spacing, "join", node, w.group))
        end = w.send_end or cfg.end_time_ms - 2000
        t = w.send_start
        while t <= end:
            src = members[0] if w.source == "first" else rng.choice(members)
            events.append(AppDirective(t, "send", src, w.group, w.payload_len))
            t += w.send_interval
    events.sort(key=lambda d: d.at)
    return events
