"""Deterministic discrete-event kernel.

Unit-disk radio with per-hop latency and Bernoulli loss, random-waypoint
or scripted mobility, and a linear energy model. Events are ordered by
(time, insertion sequence). Every random draw comes from a named stream
derived from the scenario seed, so a (scenario, seed) pair fixes the trace.
"""

from __future__ import annotations

import heapq
import math
import random
import struct
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .geometry import Position
from .protocol import (
    BaseNode, Broadcast, Deliver, Log, ProtocolConfig, Role, RoleChange, SeelampNode, Send,
    SetTimer, plain_shared_tree_node,
)
from .scenario import AppDirective, MobilityModel, ScenarioConfig, expand_app_script
from .wire import MsgType, Packet, encoded_size

TRACE_FORMAT = 1

ARRIVAL, TX_FAILED, TIMER, TICK, APP = range(5)


class InvariantViolation(RuntimeError):
    pass


# -- connectivity -------------------------------------------------------------

def connectivity_oracle(positions, range_m: float) -> list[set[int]]:
    """Unit-disk adjacency: u and v are linked iff their distance is <= range."""
    pts = [(p.x, p.y) if isinstance(p, Position) else tuple(p) for p in positions]
    n = len(pts)
    adj: list[set[int]] = [set() for _ in range(n)]
    if n == 0:
        return adj
    arr = np.asarray(pts, dtype=float)
    d = np.hypot(arr[:, 0, None] - arr[None, :, 0], arr[:, 1, None] - arr[None, :, 1])
    close = d <= range_m
    for i in range(n):
        adj[i] = {int(j) for j in np.flatnonzero(close[i]) if j != i}
    return adj


def zone_oracle(adj: list[set[int]], node: int, k: int) -> set[int]:
    """Nodes within k hops of `node` (excluding itself), by breadth-first search."""
    seen = {node}
    frontier = [node]
    for _ in range(k):
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
    seen.discard(node)
    return seen


# -- mobility -----------------------------------------------------------------

@dataclass
class NodeMotion:
    """One random-waypoint leg plus the pause that follows it (times in ms)."""
    x0: float
    y0: float
    t0: float
    wx: float
    wy: float
    speed: float  # m/s
    arrive: float
    resume: float
    rng: random.Random
    width: float
    height: float
    speed_min: float
    speed_max: float
    pause: int

    @classmethod
    def start(cls, x: float, y: float, now: float, rng: random.Random, width: float,
              height: float, speed_min: float, speed_max: float, pause: int) -> "NodeMotion":
        m = cls(x, y, now, x, y, 0.0, now, now, rng, width, height, speed_min, speed_max, pause)
        m.next_leg(now)
        return m

    def next_leg(self, now: float) -> None:
        self.x0, self.y0, self.t0 = self.wx, self.wy, now
        self.wx = self.rng.uniform(0.0, self.width)
        self.wy = self.rng.uniform(0.0, self.height)
        self.speed = self.rng.uniform(self.speed_min, self.speed_max)
        if self.speed <= 0.0:
            self.wx, self.wy = self.x0, self.y0
            self.arrive = self.resume = math.inf
            return
        length = math.hypot(self.wx - self.x0, self.wy - self.y0)
        self.arrive = now + 1000.0 * length / self.speed
        self.resume = self.arrive + self.pause

    def velocity(self) -> tuple[float, float]:
        """Velocity in meters per millisecond along the current leg."""
        if self.arrive == self.t0 or math.isinf(self.arrive):
            return 0.0, 0.0
        span = self.arrive - self.t0
        return (self.wx - self.x0) / span, (self.wy - self.y0) / span

    def advance(self, now: float) -> bool:
        moved = False
        while now >= self.resume:
            self.next_leg(self.resume)
            moved = True
        return moved


def random_waypoint_step(motion: NodeMotion, now: float) -> Position:
    """Position of a random-waypoint node at `now`, drawing new legs as needed."""
    motion.advance(now)
    if now >= motion.arrive:
        return Position(motion.wx, motion.wy)
    vx, vy = motion.velocity()
    dt = max(0.0, now - motion.t0)
    return Position(motion.x0 + vx * dt, motion.y0 + vy * dt)


class Mobility:
    """Positions of every node, computed in bulk and cached per timestamp."""

    def __init__(self, model: MobilityModel, start: list[tuple[float, float]], seed: int,
                 width: float, height: float):
        self.model = model
        self.n = len(start)
        self.kind = model.kind
        self.xs = np.array([p[0] for p in start], dtype=float)
        self.ys = np.array([p[1] for p in start], dtype=float)
        self._cache_t = None
        self._speed = np.zeros(self.n)
        if self.kind == "random_waypoint":
            self.motions = [NodeMotion.start(x, y, 0.0, random.Random(f"{seed}:mobility:{i}"),
                                             width, height, model.speed_min, model.speed_max,
                                             model.pause)
                            for i, (x, y) in enumerate(start)]
            self._load_legs(range(self.n))
        elif self.kind == "trace":
            self.tracks = {}
            for i in range(self.n):
                legs = model.waypoints.get(i)
                if legs:
                    self.tracks[i] = (np.array([t for t, _, _ in legs], dtype=float),
                                      np.array([x for _, x, _ in legs]),
                                      np.array([y for _, _, y in legs]))

    def _load_legs(self, idx) -> None:
        if not hasattr(self, "x0"):
            n = self.n
            self.x0, self.y0, self.t0 = np.zeros(n), np.zeros(n), np.zeros(n)
            self.wx, self.wy, self.vx, self.vy = (np.zeros(n) for _ in range(4))
            self.arrive, self.resume, self.spd = np.zeros(n), np.zeros(n), np.zeros(n)
        for i in idx:
            m = self.motions[i]
            vx, vy = m.velocity()
            self.x0[i], self.y0[i], self.t0[i] = m.x0, m.y0, m.t0
            self.wx[i], self.wy[i] = m.wx, m.wy
            self.vx[i], self.vy[i] = vx, vy
            self.arrive[i], self.resume[i] = m.arrive, m.resume
            self.spd[i] = m.speed
        self._next_resume = float(self.resume.min()) if self.n else math.inf

    def at(self, now: float) -> tuple[np.ndarray, np.ndarray]:
        if self._cache_t == now or self.kind == "static":
            return self.xs, self.ys
        if self.kind == "random_waypoint":
            if now >= self._next_resume:
                changed = [i for i in range(self.n) if self.motions[i].advance(now)]
                self._load_legs(changed)
            moving = now < self.arrive
            dt = np.maximum(now - self.t0, 0.0)
            self.xs = np.where(moving, self.x0 + self.vx * dt, self.wx)
            self.ys = np.where(moving, self.y0 + self.vy * dt, self.wy)
            self._speed = np.where(moving & (now >= self.t0), self.spd, 0.0)
        else:
            xs, ys = self.xs.copy(), self.ys.copy()
            for i, (ts, tx, ty) in self.tracks.items():
                xs[i] = np.interp(now, ts, tx)
                ys[i] = np.interp(now, ts, ty)
            self.xs, self.ys = xs, ys
        self._cache_t = now
        return self.xs, self.ys

    def speed(self, i: int) -> float:
        return float(self._speed[i]) if self.kind == "random_waypoint" else 0.0


# -- node construction ----------------------------------------------------------

def make_node(protocol: str, node_id: int, config: ProtocolConfig, **kw) -> BaseNode:
    if protocol == "seelamp":
        return SeelampNode(node_id, config, **kw)
    if protocol == "shared_tree":
        return plain_shared_tree_node(node_id, config, **kw)
    if protocol == "mesh":
        from .baselines import FloodingMeshNode
        return FloodingMeshNode(node_id, config, **kw)
    raise ValueError(f"unknown protocol {protocol!r}")


def payload_for(node: int, counter: int, length: int) -> bytes:
    head = struct.pack("<IQ", node, counter)
    return head + bytes(max(0, length - len(head)))


def payload_id(payload: bytes) -> str:
    node, counter = struct.unpack_from("<IQ", payload)
    return f"{node}.{counter}"


# -- simulator --------------------------------------------------------------------

class Simulator:
    def __init__(self, scenario: ScenarioConfig, *,
                 check: Optional[Callable[["Simulator"], list]] = None):
        import dataclasses
        self.scenario = scenario
        sc = scenario
        self.n = sc.node_count
        self.end = sc.end_time_ms
        self.radio = sc.radio
        self.energy = sc.energy
        self.latency = sc.radio.per_hop_latency
        self.range = sc.radio.range
        self.loss = sc.radio.loss_probability
        self.loss_rng = random.Random(f"{sc.seed}:loss")
        self.now = 0
        self.queue: list = []
        self._ins = 0
        self.records: list[str] = []
        self.check = check
        self.violations: list[str] = []

        place = random.Random(f"{sc.seed}:placement")
        start = []
        for i in range(self.n):
            x, y = place.uniform(0, sc.width), place.uniform(0, sc.height)
            if i in sc.positions:
                x, y = sc.positions[i]
            elif sc.mobility.kind == "trace" and sc.mobility.waypoints.get(i):
                _, x, y = sc.mobility.waypoints[i][0]
            start.append((x, y))
        self.mobility = Mobility(sc.mobility, start, sc.seed, sc.width, sc.height)
        self._adj_t = None
        self._adj: dict[int, list[int]] = {}

        cfg = dataclasses.replace(sc.protocol_params, net_diameter=sc.net_diameter())
        self.config = cfg
        self.nodes: list[BaseNode] = []
        for i in range(self.n):
            node = make_node(sc.protocol, i, cfg, initial_battery=sc.energy.battery_of(i),
                             hop_latency=self.latency,
                             rng=random.Random(f"{sc.seed}:protocol:{i}"))
            node.net_diameter = cfg.net_diameter
            self.nodes.append(node)
        self.alive = [True] * self.n
        self.tx_bytes = [0] * self.n
        self.rx_bytes = [0] * self.n
        self.died_at: list[Optional[int]] = [None] * self.n
        self.initial = [sc.energy.battery_of(i) for i in range(self.n)]
        self.idle = [sc.energy.idle_of(i) for i in range(self.n)]
        self.members: dict[int, set[int]] = {}
        self.roles: dict[int, dict[int, Role]] = {}
        self.send_counter = [0] * self.n
        self.tx_count = 0

        self.records.append(
            f"# seelamp-trace format={TRACE_FORMAT} scenario_hash={sc.scenario_hash} "
            f"match_hash={sc.match_hash} seed={sc.seed} protocol={sc.protocol} "
            f"nodes={self.n} end_ms={self.end}")
        self._push(0, TICK, None)
        for d in expand_app_script(sc):
            self._push(d.at, APP, d)
        self._started = False

    # queue

    def _push(self, at: int, kind: int, data) -> None:
        self._ins += 1
        heapq.heappush(self.queue, (at, self._ins, kind, data))

    def _rec(self, node, kind: str, *fields) -> None:
        self.records.append(" ".join((str(self.now), str(node), kind) + tuple(map(str, fields))))

    # energy

    def battery(self, i: int, now: Optional[int] = None) -> float:
        t = self.now if now is None else now
        if self.died_at[i] is not None:
            t = self.died_at[i]
        e = self.energy
        return self.initial[i] - (self.tx_bytes[i] * e.tx_cost + self.rx_bytes[i] * e.rx_cost
                                  + self.idle[i] * t / 1000.0)

    def _check_deaths(self) -> None:
        for i in range(self.n):
            if self.alive[i] and self.battery(i) <= 0.0:
                self.kill(i, "battery")

    def kill(self, i: int, reason: str) -> None:
        if not self.alive[i]:
            return
        self.alive[i] = False
        self.died_at[i] = self.now
        self._rec(i, "death", reason)
        for g in sorted(self.members):
            self.members[g].discard(i)
        for g in sorted(self.roles):
            self.roles[g].pop(i, None)

    # radio

    def neighbors(self, i: int) -> list[int]:
        if self._adj_t != self.now:
            if self.mobility.kind != "static":
                self._adj = {}
            self._adj_t = self.now
        nb = self._adj.get(i)
        if nb is None:
            xs, ys = self.mobility.at(self.now)
            d = np.hypot(xs - xs[i], ys - ys[i])
            nb = [int(j) for j in np.flatnonzero(d <= self.range) if j != i]
            self._adj[i] = nb
        return nb

    def position(self, i: int) -> Position:
        xs, ys = self.mobility.at(self.now)
        return Position(float(xs[i]), float(ys[i]))

    def transmit(self, i: int, pkt: Packet, to: Optional[int], attempt: int = 1) -> None:
        size = encoded_size(pkt)
        self.tx_bytes[i] += size
        self.tx_count += 1
        self._rec(i, "tx", pkt.msg_type.name, -1 if to is None else to, pkt.origin, pkt.seq, size)
        recv = []
        alive = self.alive
        loss = self.loss
        for j in self.neighbors(i):
            if not alive[j]:
                continue
            self.rx_bytes[j] += size
            if loss and self.loss_rng.random() < loss:
                continue
            recv.append(j)
        at = self.now + self.latency
        if to is not None and to not in recv:
            self._push(at, TX_FAILED, (i, to, pkt, attempt))
        if recv:
            self._push(at, ARRIVAL, (i, pkt, to, recv))

    # actions

    def apply(self, i: int, actions) -> None:
        for a in actions:
            t = type(a)
            if t is Send:
                self.transmit(i, a.packet, a.to, a.attempt)
            elif t is Broadcast:
                self.transmit(i, a.packet, None)
            elif t is SetTimer:
                self._push(self.now + max(0, a.delay), TIMER, (i, a.kind, a.key))
            elif t is Deliver:
                self._rec(i, "deliver", a.group, payload_id(a.payload), a.origin)
            elif t is RoleChange:
                roles = self.roles.setdefault(a.group, {})
                if a.new_role is Role.NON_MEMBER:
                    roles.pop(i, None)
                else:
                    roles[i] = a.new_role
                self._rec(i, "role", a.group, a.new_role.value)
            elif t is Log:
                detail = " ".join(f"{k}={v}" for k, v in a.detail.items())
                self._rec(i, "log", a.event, *([detail] if detail else []))
            else:
                raise TypeError(f"unknown action {a!r}")

    # dispatch

    def inject(self, i: int, actions) -> None:
        """Apply actions on behalf of node i at the current time."""
        self.apply(i, actions)

    def step(self) -> bool:
        if not self.queue or self.queue[0][0] > self.end:
            return False
        at, _, kind, data = heapq.heappop(self.queue)
        self.now = at
        nodes = self.nodes
        if kind == ARRIVAL:
            src, pkt, to, recv = data
            for j in recv:
                if not self.alive[j]:
                    continue
                node = nodes[j]
                if to is None or j == to:
                    self.apply(j, node.on_receive(pkt, at))
                else:
                    node.on_overhear(pkt, at)
        elif kind == TX_FAILED:
            i, to, pkt, attempt = data
            if self.alive[i]:
                self.apply(i, nodes[i].on_tx_failed(to, pkt, attempt, at))
        elif kind == TIMER:
            i, tkind, key = data
            if self.alive[i]:
                node = nodes[i]
                node.battery = self.battery(i)
                self.apply(i, node.on_timer(tkind, key, at))
        elif kind == TICK:
            self._tick()
        else:
            self._app(data)
        if self.check is not None:
            found = self.check(self)
            if found:
                self.violations.extend(f"t={self.now}: {v}" for v in found)
        return True

    def _tick(self) -> None:
        if not self._started:
            self._started = True
            for i in range(self.n):
                self.apply(i, self.nodes[i].start(self.now))
        if self.mobility.kind != "static" or self.now == 0:
            self.mobility.at(self.now)
            for i in range(self.n):
                if self.alive[i]:
                    node = self.nodes[i]
                    node.battery = self.battery(i)
                    self.apply(i, node.on_position_update(self.position(i), self.now,
                                                          self.mobility.speed(i)))
        self._check_deaths()
        self._push(self.now + self.scenario.mobility.tick, TICK, None)

    def _app(self, d: AppDirective) -> None:
        if d.verb == "killroot":
            roots = sorted(i for i, r in self.roles.get(d.group, {}).items()
                           if r is Role.PRIMARY_ROOT and self.alive[i])
            if not roots:
                self._rec(-1, "log", "killroot_none", f"group={d.group}")
                return
            self.kill(roots[0], "killed")
            return
        i = d.node
        if not self.alive[i]:
            return
        node = self.nodes[i]
        node.battery = self.battery(i)
        if d.verb == "kill":
            self.kill(i, "killed")
        elif d.verb == "join":
            if i in self.members.setdefault(d.group, set()):
                return
            self.members[d.group].add(i)
            self._rec(i, "join", d.group)
            self.apply(i, node.app_join(d.group, self.now))
        elif d.verb == "leave":
            if i not in self.members.get(d.group, ()):
                return
            self.members[d.group].discard(i)
            self._rec(i, "leave", d.group)
            self.apply(i, node.app_leave(d.group, self.now))
        elif d.verb == "send":
            self.send_counter[i] += 1
            payload = payload_for(i, self.send_counter[i], d.payload_len)
            expected = len(self.members.get(d.group, set()) - {i})
            self._rec(i, "send", d.group, payload_id(payload), expected)
            self.apply(i, node.app_send(d.group, payload, self.now))

    def run_until(self, t: int) -> None:
        saved = self.end
        self.end = min(t, saved)
        while self.step():
            pass
        self.end = saved

    def finish(self) -> list[str]:
        while self.step():
            pass
        self.now = self.end
        self._check_deaths()
        for i in range(self.n):
            t = self.end if self.died_at[i] is None else self.died_at[i]
            self._rec(i, "energy", repr(self.battery(i)), self.tx_bytes[i], self.rx_bytes[i],
                      t, repr(self.initial[i]))
        self._rec(-1, "end")
        return self.records

    def trace_text(self) -> str:
        return "\n".join(self.records) + "\n"


def run(scenario: ScenarioConfig, *, check=None):
    """Run a scenario to completion; returns (trace lines, metrics summary)."""
    from .metrics import compute
    sim = Simulator(scenario, check=check)
    records = sim.finish()
    return records, compute(records)


# -- tree invariants ----------------------------------------------------------------

def tree_violations(sim: Simulator) -> list[str]:
    """Check the upstream-pointer structure of every group among live nodes.

    Following UPSTREAM pointers must never loop, every primary root has hop
    count 0 and no upstream, and the top of every component is either a
    primary root or a node whose upstream is gone (repair in progress).
    """
    out = []
    groups: dict[int, dict[int, object]] = {}
    for i, node in enumerate(sim.nodes):
        if not sim.alive[i] or not isinstance(node, SeelampNode):
            continue
        for g, e in node.mtt.entries.items():
            groups.setdefault(g, {})[i] = e
    for g, entries in sorted(groups.items()):
        for i, e in entries.items():
            role = sim.nodes[i].role(g)
            up = e.upstream()
            if role is Role.PRIMARY_ROOT and (up is not None or e.hop_count_to_leader != 0):
                out.append(f"group {g}: root {i} has upstream {up} hops {e.hop_count_to_leader}")
        state: dict[int, int] = {}
        for start in entries:
            path = []
            i = start
            while i in entries and state.get(i, 0) == 0:
                state[i] = 1
                path.append(i)
                i = entries[i].upstream()
                if i is None:
                    break
            if i is not None and state.get(i) == 1 and i in path:
                out.append(f"group {g}: upstream cycle through {path[path.index(i):]}")
            for p in path:
                state[p] = 2
    return out


def zone_mismatches(sim: Simulator) -> list[str]:
    """Compare every live node's zone table with the k-hop BFS over current positions."""
    alive = [i for i in range(sim.n) if sim.alive[i]]
    pos = [sim.position(i) for i in range(sim.n)]
    adj = connectivity_oracle(pos, sim.scenario.radio.range)
    for i in range(sim.n):
        if not sim.alive[i]:
            adj[i] = set()
    adj = [{j for j in a if sim.alive[j]} for a in adj]
    out = []
    for i in alive:
        node = sim.nodes[i]
        k = node.k
        want = zone_oracle(adj, i, k)
        got = node.znt.zone_members()
        if got != want:
            out.append(f"node {i}: missing {sorted(want - got)} extra {sorted(got - want)}")
            continue
        dist = _bfs_hops(adj, i, k)
        for n in sorted(got):
            if node.znt.get(n).hop_count != dist[n]:
                out.append(f"node {i}: {n} at {node.znt.get(n).hop_count} hops, BFS says {dist[n]}")
    return out


def _bfs_hops(adj, src: int, k: int) -> dict[int, int]:
    dist = {src: 0}
    frontier = [src]
    for d in range(1, k + 1):
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if v not in dist:
                    dist[v] = d
                    nxt.append(v)
        frontier = nxt
    return dist
