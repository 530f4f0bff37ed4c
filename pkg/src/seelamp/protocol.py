"""Per-node protocol state machines.

`BaseNode` carries the location layer every protocol shares (LOCN/LACK
advertisement, promiscuous snooping, zone table upkeep). `SeelampNode`
adds the shared-tree multicast logic with backup root, preventive
maintenance, local repair and directional diffused search. The plain
shared-tree baseline is a `SeelampNode` with those features switched off.

Handlers mutate the node and return a list of actions for the kernel.
"""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, field
from typing import Optional

from .geometry import Position, angular_difference, bearing, distance, within_cone
from .tables import (
    CapacityExceeded, Direction, InTree, Known, MttEntry, MulticastTreeTable,
    RequestTable, RtEntry, ZntEntry, ZoneNeighborTable, lookup_group_member,
)
from .wire import (
    BROADCAST, NO_HOPS, UNICAST_TTL, Alarm, AlarmKind, Data, DirectedTarget,
    Graft, Lack, Leave, Locn, Mgreq, Mgrpl, Packet, StopSearch, TreeUpdate,
)


class AlreadyMember(RuntimeError):
    pass


class Role(enum.Enum):
    NON_MEMBER = "non_member"
    MEMBER = "member"
    INTERMEDIATE = "intermediate"
    BACKUP_ROOT = "backup_root"
    PRIMARY_ROOT = "primary_root"


@dataclass
class ProtocolConfig:
    k: int = 2
    theta_t: float = math.pi / 4
    move_threshold: float = 10.0
    tree_update_period: int = 5000
    power_check_period: int = 2000
    power_threshold_fraction: float = 0.15
    znt_max_age: int = 15000
    rt_max_age: int = 30000
    search_retry_delay: int = 1000
    backup_speed_max: float = 5.0
    backup_battery_min_fraction: float = 0.5
    net_diameter: int = 0  # 0: derived from the scenario area and radio range
    jitter_max: int = 500
    locn_refresh: int = 10000
    mesh_refresh_period: int = 3000
    merge_probe_period: int = 2000
    znt_capacity: int = 256
    mtt_capacity: int = 64
    rt_capacity: int = 256

    def validate(self) -> None:
        for name in ("k", "tree_update_period", "power_check_period", "znt_max_age",
                     "rt_max_age", "search_retry_delay", "locn_refresh",
                     "mesh_refresh_period", "merge_probe_period", "znt_capacity", "mtt_capacity", "rt_capacity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.theta_t <= math.pi:
            raise ValueError("theta_t must be in (0, pi]")
        if self.move_threshold <= 0 or self.backup_speed_max <= 0:
            raise ValueError("move_threshold and backup_speed_max must be positive")
        if not 0 < self.power_threshold_fraction < 1:
            raise ValueError("power_threshold_fraction must be in (0, 1)")
        if not self.power_threshold_fraction < self.backup_battery_min_fraction <= 1:
            raise ValueError("backup_battery_min_fraction must exceed power_threshold_fraction")
        if self.net_diameter < 0 or self.jitter_max < 0:
            raise ValueError("net_diameter and jitter_max must be non-negative")


@dataclass(frozen=True)
class Features:
    backup_root: bool = True
    preventive: bool = True
    directional: bool = True
    local_repair: bool = True


SEELAMP_FEATURES = Features()
PLAIN_TREE_FEATURES = Features(False, False, False, False)


# -- actions ------------------------------------------------------------------

@dataclass(slots=True)
class Send:
    to: int
    packet: Packet
    attempt: int = 1


@dataclass(slots=True)
class Broadcast:
    packet: Packet

    @property
    def ttl(self) -> int:
        return self.packet.ttl


@dataclass(slots=True)
class SetTimer:
    kind: str
    delay: int
    key: object = None


@dataclass(slots=True)
class Deliver:
    group: int
    origin: int
    seq: int
    payload: bytes


@dataclass(slots=True)
class RoleChange:
    group: int
    new_role: Role


@dataclass(slots=True)
class Log:
    event: str
    detail: dict = field(default_factory=dict)


MAX_TX_ATTEMPTS = 3


# -- location layer -----------------------------------------------------------

class BaseNode:
    protocol_name = "base"

    def __init__(self, node_id: int, config: ProtocolConfig, *,
                 initial_battery: float = 50.0, hop_latency: int = 5,
                 rng: Optional[random.Random] = None):
        self.id = node_id
        self.config = config
        self.k = config.k
        self.net_diameter = config.net_diameter or 8
        self.hop_latency = max(1, hop_latency)
        self.rng = rng or random.Random(node_id)
        self.pos: Optional[Position] = None
        self.last_advertised_pos: Optional[Position] = None
        self.last_advertised_at = -1
        self.speed = 0.0
        self.initial_battery = initial_battery
        self.battery = initial_battery
        self.znt = ZoneNeighborTable(config.k, config.znt_capacity)
        self.mtt = MulticastTreeTable(config.mtt_capacity)
        self.rt = RequestTable(config.rt_capacity)
        self.seen: set[tuple[int, int]] = set()
        self.low_power_nodes: set[int] = set()
        self.members: set[int] = set()
        self.now = 0
        self._seq = 0

    # packets

    def new_packet(self, body, ttl: int) -> Packet:
        self._seq += 1
        p = Packet(self._seq, self.id, self.id, ttl, self.now, body)
        self.seen.add((self.id, self._seq))
        return p

    def route_to(self, node: int) -> Optional[int]:
        e = self.znt.get(node)
        return None if e is None else e.next_hop

    # lifecycle

    def start(self, now: int) -> list:
        self.now = now
        first = self.config.power_check_period + self.rng.randint(0, self.config.jitter_max)
        return [SetTimer("house", first)]

    def house_period(self) -> int:
        return self.config.power_check_period

    def on_position_update(self, new_pos: Position, now: int, speed: float = 0.0) -> list:
        self.now = now
        self.pos = new_pos
        self.speed = speed
        if (self.last_advertised_pos is None
                or distance(new_pos, self.last_advertised_pos) > self.config.move_threshold):
            return [self._advertise()]
        return []

    def _advertise(self) -> Broadcast:
        self.last_advertised_pos = self.pos
        self.last_advertised_at = self.now
        return Broadcast(self.new_packet(Locn(self.pos), self.k))

    # receive paths

    def on_receive(self, pkt: Packet, now: int) -> list:
        self.now = now
        key = (pkt.origin, pkt.seq)
        if key in self.seen:
            return self.on_duplicate(pkt)
        self.seen.add(key)
        handler = self._handlers.get(type(pkt.body))
        if handler is None:
            return []
        return handler(self, pkt)

    def on_duplicate(self, pkt: Packet) -> list:
        return []

    def on_overhear(self, pkt: Packet, now: int) -> list:
        self.now = now
        self._snoop(pkt)
        return []

    def _snoop(self, pkt: Packet) -> None:
        body = pkt.body
        t = type(body)
        if t is Lack:
            self._learn(pkt.origin, body.ack_pos, pkt.src)
        elif t is Mgreq:
            self._learn(body.rq, body.rq_pos, pkt.src)
        elif t is Mgrpl:
            self._learn(body.tm, body.tm_pos, pkt.src)
            if body.rq != BROADCAST:
                self._learn(body.rq, body.rq_pos, pkt.src)
        elif t is Locn:
            self._learn(pkt.origin, body.pos, pkt.src)

    def _learn(self, node: int, pos: Position, via: int) -> None:
        if node == self.id:
            return
        known = self.znt.entries.get(node)
        if via == node:
            if known is not None and known.zonal and known.hop_count == 1:
                self.znt.refresh(node, pos, self.now)
            else:
                self._upsert_route(ZntEntry(node, pos, node, 1, self.now))
            return
        if known is not None:
            self.znt.refresh(node, pos, self.now)
            return
        try:
            self.znt.upsert(ZntEntry(node, pos, via, self.k + 1, self.now, zonal=False))
        except CapacityExceeded:
            pass

    def _upsert_route(self, entry: ZntEntry) -> None:
        old = self.znt.get(entry.neighbor)
        if old is not None and not old.zonal and entry.zonal:
            self.znt.remove(entry.neighbor)
        self.znt.upsert(entry)

    def _on_locn(self, pkt: Packet) -> list:
        hops = max(1, self.k - pkt.ttl + 1)
        self._upsert_route(ZntEntry(pkt.origin, pkt.body.pos, pkt.src, hops, self.now))
        out = [Send(pkt.src, self.new_packet(Lack(self.pos, pkt.origin, pkt.body.pos),
                                             UNICAST_TTL))]
        if pkt.ttl > 1:
            out.append(Broadcast(pkt.relayed(self.id)))
        return out

    def _on_lack(self, pkt: Packet) -> list:
        self._learn(pkt.origin, pkt.body.ack_pos, pkt.src)
        dest = pkt.body.src
        if dest == self.id or pkt.ttl <= 1:
            return []
        nh = self.route_to(dest)
        return [] if nh is None else [Send(nh, pkt.relayed(self.id))]

    _handlers: dict = {Locn: _on_locn, Lack: _on_lack}

    # failures and timers

    def on_tx_failed(self, to: int, pkt: Packet, attempt: int, now: int) -> list:
        self.now = now
        if attempt < MAX_TX_ATTEMPTS:
            return [Send(to, pkt, attempt + 1)]
        return self.on_link_break(to, pkt)

    def on_link_break(self, to: int, pkt: Packet) -> list:
        self.znt.remove(to)
        for e in [e for e in self.znt if e.next_hop == to]:
            self.znt.remove(e.neighbor)
        return []

    def on_timer(self, kind: str, key, now: int) -> list:
        self.now = now
        if kind == "house":
            out = self.housekeeping()
            out.append(SetTimer("house", self.house_period()))
            return out
        return []

    def housekeeping(self) -> list:
        cfg = self.config
        self.znt.expire(self.now, cfg.znt_max_age)
        self.rt.expire(self.now, cfg.rt_max_age)
        out = []
        if self.pos is not None and self.now - self.last_advertised_at >= cfg.locn_refresh:
            out.append(self._advertise())
        return out

    # application hooks, overridden by protocols

    def app_join(self, group: int, now: int) -> list:
        raise NotImplementedError

    def app_leave(self, group: int, now: int) -> list:
        raise NotImplementedError

    def app_send(self, group: int, payload: bytes, now: int) -> list:
        raise NotImplementedError

    def role(self, group: int) -> Role:
        return Role.MEMBER if group in self.members else Role.NON_MEMBER


# -- directional selection ------------------------------------------------------

STAGE_BORDER = "border"
STAGE_FARTHEST = "farthest"
STAGE_ALL = "all"
STAGE_DIRECT = "direct"


def select_directional(znt: ZoneNeighborTable, origin: Position, target: Position,
                       k: int, theta_t: float, exclude=()) -> list[tuple[int, int]]:
    """Pick (waypoint, next_hop) pairs for a directional search copy."""
    return select_directional_staged(znt, origin, target, k, theta_t, exclude)[1]


def select_directional_staged(znt: ZoneNeighborTable, origin: Position, target: Position,
                              k: int, theta_t: float, exclude=()):
    """Like select_directional, also naming the stage that produced the picks.

    Border nodes inside the cone come first; failing that, the farthest
    zone nodes inside the cone; failing that, every zone node. At most one
    copy leaves per next hop.
    """
    skip = set(exclude)
    zone = [e for e in znt if e.zonal and e.hop_count <= k and e.neighbor not in skip
            and e.next_hop not in skip]
    if not zone:
        return STAGE_ALL, []
    if origin == target:
        in_cone = zone
    else:
        in_cone = [e for e in zone if within_cone(origin, target, e.pos, theta_t)]
    chosen = [e for e in in_cone if e.hop_count == k]
    stage = STAGE_BORDER
    if not chosen and in_cone:
        far = max(e.hop_count for e in in_cone)
        chosen = [e for e in in_cone if e.hop_count == far]
        stage = STAGE_FARTHEST
    fallback = not chosen
    if fallback:
        stage = STAGE_ALL
        chosen = zone
    axis = None if origin == target else bearing(origin, target)

    def rank(e: ZntEntry):
        if axis is None or e.pos == origin:
            off = 0.0
        else:
            off = angular_difference(bearing(origin, e.pos), axis)
        if fallback:
            return (-e.hop_count, off, e.neighbor)
        return (off, -e.hop_count, e.neighbor)

    by_hop: dict[int, ZntEntry] = {}
    for e in sorted(chosen, key=rank):
        by_hop.setdefault(e.next_hop, e)
    return stage, sorted(((e.neighbor, nh) for nh, e in by_hop.items()), key=lambda p: p[1])


# -- SEELAMP --------------------------------------------------------------------

class Phase(enum.Enum):
    IN_ZONE = "in_zone"
    NETWORK = "network"
    DIRECTED = "directed"


@dataclass
class Search:
    group: int
    join: bool
    sid: int
    phase: Phase
    issued_at: int
    budget: int
    rq_hops: int = NO_HOPS
    repair: bool = False
    probe: bool = False
    replied: bool = False
    directed_tried: bool = False
    pending_data: list = field(default_factory=list)
    held: list = field(default_factory=list)  # DATA packets waiting for the repaired upstream
    await_backup: bool = False  # upstream was the root: give its backup time to take over
    root_check: bool = False  # backup cut off from its root: no reply means the root is gone
    retried: bool = False  # an exhausted repair search gets one more pass before giving up


HELD_MAX = 32


@dataclass(slots=True)
class ForwardRoute:
    next_hop: int
    tm: int
    leader: int
    hops: int
    at: int


class SeelampNode(BaseNode):
    protocol_name = "seelamp"

    def __init__(self, node_id: int, config: ProtocolConfig,
                 features: Features = SEELAMP_FEATURES, **kw):
        super().__init__(node_id, config, **kw)
        self.features = features
        self.roles: dict[int, Role] = {}
        self.searches: dict[int, Search] = {}
        self._sid = 0
        self.reverse: dict[tuple[int, int], int] = {}
        # (requester, group, tree member) -> route toward that tree member
        self.forward: dict[tuple[int, int, int], ForwardRoute] = {}
        # (requester, group) -> most recent such route, used for non-member data
        self.data_forward: dict[tuple[int, int], ForwardRoute] = {}
        self.rt_answered: dict[tuple[int, int], int] = {}
        self.stopped: dict[tuple[int, int], int] = {}
        self.backup: dict[int, int] = {}
        self.backup_heard: dict[int, int] = {}
        self.appointer: dict[int, int] = {}
        self.declined: dict[int, set[int]] = {}
        self.successions: dict[int, int] = {}
        self.leaving: set[int] = set()
        self.tree_view: dict[int, dict[int, tuple]] = {}
        self.data_routes: dict[int, tuple[int, int]] = {}
        self.tu_armed: set[int] = set()
        self.up_sent: dict[int, int] = {}
        self.reverse_hops: dict[tuple[int, int], int] = {}
        # group -> (node, since): upstream chosen but not yet confirmed attached
        self.pending_up: dict[int, tuple[int, int]] = {}
        self.pending_held: dict[int, list] = {}
        self.probe_armed: set[int] = set()
        self.power_handoff_done = False

    # roles

    def role(self, group: int) -> Role:
        return self.roles.get(group, Role.NON_MEMBER)

    def _set_role(self, group: int, role: Role, out: list) -> None:
        if self.roles.get(group, Role.NON_MEMBER) is role:
            return
        if role is Role.NON_MEMBER:
            self.roles.pop(group, None)
        else:
            self.roles[group] = role
        out.append(RoleChange(group, role))

    def _tree_role(self, group: int) -> Role:
        return Role.MEMBER if group in self.members else Role.INTERMEDIATE

    def is_root(self, group: int) -> bool:
        return self.roles.get(group) is Role.PRIMARY_ROOT

    def house_period(self) -> int:
        p = self.config.power_check_period
        if any(r is Role.PRIMARY_ROOT for r in self.roles.values()):
            return max(1, p // 2)
        return p

    def _timeout(self, budget: int) -> int:
        return 3 * budget * self.hop_latency + self.hop_latency

    def _jitter(self) -> int:
        return self.rng.randint(0, self.config.jitter_max)

    # application interface

    def app_join(self, group: int, now: int) -> list:
        self.now = now
        self.members.add(group)
        out: list = []
        entry = self.mtt.get(group)
        if entry is not None:
            if self.role(group) is Role.INTERMEDIATE:
                self._set_role(group, Role.MEMBER, out)
            return out
        return self.start_search(group, True, now)

    def app_leave(self, group: int, now: int) -> list:
        self.now = now
        self.members.discard(group)
        return self.leave_group(group, now)

    def app_send(self, group: int, payload: bytes, now: int) -> list:
        self.now = now
        entry = self.mtt.get(group)
        if entry is not None:
            pkt = self.new_packet(Data(group, payload), UNICAST_TTL)
            if entry.upstream() is None and not self.is_root(group):
                self._hold(group, pkt)
            return [Send(h, pkt) for h in entry.links()]
        route = self.data_routes.get(group)
        if route is not None and now - route[1] <= self.config.rt_max_age and route[0] in self.znt:
            return [Send(route[0], self.new_packet(Data(group, payload), UNICAST_TTL))]
        s = self.searches.get(group)
        if s is not None and not s.replied:
            s.pending_data.append(payload)
            return []
        out = self._begin_search(group, group in self.members, pending=[payload])
        return out

    # searches

    def start_search(self, group: int, join: bool, now: int) -> list:
        self.now = now
        if group in self.mtt:
            raise AlreadyMember(f"node {self.id} already holds group {group}")
        return self._begin_search(group, join)

    def _begin_search(self, group: int, join: bool, rq_hops: int = NO_HOPS,
                      repair: bool = False, pending=None, probe: bool = False) -> list:
        s = self.searches.get(group)
        if s is not None and not s.replied:
            if pending:
                s.pending_data.extend(pending)
            s.join = s.join or join
            return []
        self._sid += 1
        flood = probe or (repair and not self.features.local_repair)
        budget = self.net_diameter if flood else self.k
        s = Search(group, join, self._sid, Phase.NETWORK if flood else Phase.IN_ZONE,
                   self.now, budget, rq_hops, repair, probe, pending_data=list(pending or ()))
        self.searches[group] = s
        pkt = self.new_packet(Mgreq(group, self.id, self.pos, join, rq_hops), budget)
        return [Broadcast(pkt), SetTimer("search", self._timeout(budget), (group, s.sid))]

    def on_search_timeout(self, group: int, sid: int) -> list:
        s = self.searches.get(group)
        if s is None or s.sid != sid or s.replied:
            return []
        if s.phase is Phase.DIRECTED:
            s.phase = Phase.NETWORK
        if s.await_backup:
            s.await_backup = False
            wait = 3 * self._root_period() + self._timeout(s.budget)
            return [SetTimer("search", wait, (group, sid))]
        if (s.root_check and self.role(group) is Role.BACKUP_ROOT
                and (s.budget >= 2 * self.k or s.budget >= self.net_diameter)):
            del self.searches[group]
            out = self.take_over(group, voluntary=False)
            entry = self.mtt.get(group)
            for held in s.held:
                out.extend(Send(h, held) for h in entry.links())
            return out
        if s.budget >= self.net_diameter and s.repair and not s.retried:
            # a briefly isolated node should not split the group on one bad moment
            s.retried = True
            s.budget = 0 if self.features.local_repair else self.net_diameter - self.k
            return [SetTimer("search", self.config.search_retry_delay + self._jitter(),
                             (group, sid))]
        if s.budget >= self.net_diameter:
            del self.searches[group]
            if s.probe:
                return []
            if s.join:
                return self.declare_leader(group)
            return [Log("no_such_group", {"group": group, "dropped": len(s.pending_data)})]
        s.phase = Phase.NETWORK
        s.budget = min(s.budget + self.k, self.net_diameter)
        pkt = self.new_packet(Mgreq(group, self.id, self.pos, s.join, s.rq_hops), s.budget)
        return [Broadcast(pkt), SetTimer("search", self._timeout(s.budget), (group, sid))]

    def _eligible_responder(self, entry: MttEntry, body: Mgreq) -> bool:
        if body.rq == self.id or entry.hop_count_to_leader >= body.rq_hops:
            return False
        if entry.leader == body.rq:
            return False
        if entry.group in self.leaving:
            return False
        return True

    def _on_mgreq(self, pkt: Packet) -> list:
        body: Mgreq = pkt.body
        self._learn(body.rq, body.rq_pos, pkt.src)
        if body.rq == self.id:
            return []
        key = (body.rq, body.group)
        self.reverse[key] = pkt.src
        self.reverse_hops[key] = body.rq_hops
        if body.target is not None:
            return self._on_directed(pkt)
        stop = self.stopped.get(key)
        if stop is not None and pkt.timestamp <= stop:
            return []
        if body.join_flag and body.rq_hops == NO_HOPS:
            self.rt.upsert(RtEntry(body.group, body.rq, body.rq_pos, self.now))
        found = lookup_group_member(self.mtt, self.rt, body.group, exclude=(body.rq,))
        if isinstance(found, InTree):
            if self._eligible_responder(found.entry, body):
                return [Send(pkt.src, self._reply_self(found.entry, body))]
        elif (isinstance(found, Known) and self.features.directional
              and body.rq_hops == NO_HOPS and self._may_answer_from_rt(body)):
            rt = found.entry
            reply = self.new_packet(Mgrpl(body.group, rt.tree_member, rt.tm_pos, body.rq,
                                          body.rq_pos, BROADCAST, NO_HOPS), UNICAST_TTL)
            out = [Send(pkt.src, reply)]
            if pkt.ttl > 1:
                out.append(Broadcast(pkt.relayed(self.id)))
            return out
        if pkt.ttl > 1:
            return [Broadcast(pkt.relayed(self.id))]
        return []

    def _may_answer_from_rt(self, body: Mgreq) -> bool:
        """Request-table answers come only from the requester's zone, once per while."""
        route = self.znt.get(body.rq)
        if route is None or not route.zonal or route.hop_count > self.k:
            return False
        key = (body.rq, body.group)
        last = self.rt_answered.get(key)
        if last is not None and self.now - last < self.config.search_retry_delay * 5:
            return False
        self.rt_answered[key] = self.now
        return True

    def _reply_self(self, entry: MttEntry, body: Mgreq) -> Packet:
        return self.new_packet(Mgrpl(body.group, self.id, self.pos, body.rq, body.rq_pos,
                                     entry.leader, entry.hop_count_to_leader), UNICAST_TTL)

    # directional diffused forwarding

    def directional_forward(self, mgreq: Packet, target_pos: Position,
                            exclude=()) -> list:
        body: Mgreq = mgreq.body
        tm = body.target.tm
        route = self.znt.get(tm)
        if route is not None and route.zonal and tm != self.id:
            stage, picks = STAGE_DIRECT, [(tm, route.next_hop)]
        else:
            stage, picks = select_directional_staged(self.znt, self.pos, target_pos, self.k,
                                                     self.config.theta_t, exclude=exclude)
        out: list = [Log("directed", {"group": body.group, "rq": body.rq, "stage": stage,
                                      "copies": len(picks)})]
        for waypoint, nh in picks:
            b = Mgreq(body.group, body.rq, body.rq_pos, body.join_flag, body.rq_hops,
                      DirectedTarget(tm, target_pos, waypoint))
            out.append(Send(nh, Packet(mgreq.seq, self.id, mgreq.origin, mgreq.ttl,
                                       mgreq.timestamp, b)))
        return out

    def _on_directed(self, pkt: Packet) -> list:
        body: Mgreq = pkt.body
        entry = self.mtt.get(body.group)
        if entry is not None and self._eligible_responder(entry, body):
            return [Send(pkt.src, self._reply_self(entry, body))]
        if pkt.ttl <= 1:
            return []
        relay = pkt.relayed(self.id)
        wp = body.target.waypoint
        if wp != self.id:
            route = self.znt.get(wp)
            if route is not None and route.next_hop != pkt.src:
                return [Send(route.next_hop, relay)]
        return self.directional_forward(relay, body.target.tm_pos, exclude=(pkt.src, body.rq))

    # replies

    def _on_mgrpl(self, pkt: Packet) -> list:
        body: Mgrpl = pkt.body
        self._learn(body.tm, body.tm_pos, pkt.src)
        if body.rq == BROADCAST:
            self.rt.upsert(RtEntry(body.group, body.tm, body.tm_pos, self.now))
            return [Broadcast(pkt.relayed(self.id))] if pkt.ttl > 1 else []
        if body.rq != self.id:
            self._learn(body.rq, body.rq_pos, pkt.src)
            traveled = UNICAST_TTL - pkt.ttl + 1
            hops = NO_HOPS if body.tm_hops == NO_HOPS else body.tm_hops + traveled
            if body.tm == pkt.origin:
                route = ForwardRoute(pkt.src, body.tm, body.leader, hops, self.now)
                self.forward[(body.rq, body.group, body.tm)] = route
                self.data_forward[(body.rq, body.group)] = route
            if pkt.ttl <= 1:
                return []
            nh = self.reverse.get((body.rq, body.group))
            if nh is None:
                nh = self.route_to(body.rq)
            return [] if nh is None else [Send(nh, pkt.relayed(self.id))]
        return self.on_mgrpl(pkt)

    def on_mgrpl(self, pkt: Packet) -> list:
        body: Mgrpl = pkt.body
        group = body.group
        if self.successions.get(group) == pkt.origin:
            return self._accept_succession(pkt)
        entry = self.mtt.get(group)
        if (entry is not None and pkt.origin == pkt.src and body.tm == pkt.origin
                and body.tm_hops != NO_HOPS):
            if entry.upstream() == pkt.src:
                return self._hop_refresh(entry, body)
            pending = self.pending_up.get(group)
            if pending is not None and pending[0] == pkt.src and entry.upstream() is None:
                return self._adopt(entry, body, pkt.src)
        s = self.searches.get(group)
        if s is None or s.replied:
            return []
        in_tree = body.tm == pkt.origin and body.tm_hops != NO_HOPS
        out: list = []
        if s.probe:
            if not in_tree or body.leader >= self.id or entry is None:
                return out
            return self._merge_into(s, pkt)
        if not in_tree:
            if s.directed_tried or not self.features.directional or s.repair:
                return []
            s.directed_tried = True
            s.phase = Phase.DIRECTED
            self._sid += 1
            s.sid = self._sid
            out.append(Broadcast(self.new_packet(StopSearch(group, self.id), self.k)))
            probe = self.new_packet(Mgreq(group, self.id, self.pos, s.join, s.rq_hops,
                                          DirectedTarget(body.tm, body.tm_pos, self.id)),
                                    self.net_diameter)
            out.extend(self.directional_forward(probe, body.tm_pos))
            out.append(SetTimer("search", self._timeout(self.net_diameter), (group, s.sid)))
            return out
        if body.tm_hops >= s.rq_hops:
            return []
        s.replied = True
        del self.searches[group]
        out.append(Broadcast(self.new_packet(StopSearch(group, self.id), self.k)))
        self.rt.upsert(RtEntry(group, body.tm, body.tm_pos, self.now))
        traveled = UNICAST_TTL - pkt.ttl + 1
        if s.join:
            if entry is not None and not s.repair:
                return out
            new_hops = body.tm_hops + traveled
            if entry is None:
                entry = self.mtt.install(MttEntry(group, body.leader, new_hops, [], self.now))
                self._set_role(group, self._tree_role(group), out)
            if s.repair:
                if s.root_check:
                    # the tree is still reachable, just no longer next door
                    out.append(Log("backup_lapsed", {"group": group}))
                    self._step_down_backup(group, out)
                self._await_upstream(entry, pkt.src, s.held)
                s.held = []
            else:
                entry.set_upstream(pkt.src)
            entry.leader = body.leader
            entry.hop_count_to_leader = new_hops
            entry.updated_at = self.now
            out.append(Send(pkt.src, self.new_packet(Graft(group, self.id, body.tm),
                                                     UNICAST_TTL)))
            out.extend(self._arm_tree_update(group))
            for payload in s.pending_data:
                out.extend(self.app_send(group, payload, self.now))
        else:
            self.data_routes[group] = (pkt.src, self.now)
            for payload in s.pending_data:
                out.append(Send(pkt.src, self.new_packet(Data(group, payload), UNICAST_TTL)))
        return out

    def _entered_tree(self, group: int) -> list:
        """Drop a pending join search once some other path put us in the tree."""
        s = self.searches.get(group)
        if s is None or s.repair or s.probe:
            return []
        del self.searches[group]
        out = []
        for payload in s.pending_data:
            out.extend(self.app_send(group, payload, self.now))
        return out

    def _await_upstream(self, entry: MttEntry, node: int, held=()) -> None:
        """Choose a new upstream without pointing at it yet.

        The path to the new upstream may run through this node's own subtree,
        which re-roots hop by hop; pointing early would form a transient loop.
        The upstream is adopted when its hop refresh arrives."""
        entry.set_upstream(None)
        self.pending_up[entry.group] = (node, self.now)
        self.pending_held.setdefault(entry.group, []).extend(held)

    def _adopt(self, entry: MttEntry, body: Mgrpl, node: int) -> list:
        group = entry.group
        del self.pending_up[group]
        out: list = []
        entry.set_upstream(node)
        if body.leader != entry.leader:
            self._step_down_backup(group, out)
        entry.leader = body.leader
        entry.hop_count_to_leader = body.tm_hops + 1
        entry.updated_at = self.now
        out.extend(self._propagate_hops(entry))
        for p in self.pending_held.pop(group, ()):
            out.append(Send(node, p))
        return out

    def _refresh_to(self, entry: MttEntry, d: int) -> Send:
        ze = self.znt.get(d)
        pos = ze.pos if ze is not None else self.pos
        return Send(d, self.new_packet(
            Mgrpl(entry.group, self.id, self.pos, d, pos, entry.leader,
                  entry.hop_count_to_leader), UNICAST_TTL))

    def _hop_refresh(self, entry: MttEntry, body: Mgrpl) -> list:
        new_hops = body.tm_hops + 1
        out: list = []
        if body.leader != entry.leader:
            entry.leader = body.leader
            self._step_down_backup(entry.group, out)
            entry.hop_count_to_leader = new_hops
            out.extend(self._propagate_hops(entry))
            return out
        if new_hops == entry.hop_count_to_leader:
            return out
        entry.hop_count_to_leader = new_hops
        return self._propagate_hops(entry)

    def _merge_into(self, s: Search, pkt: Packet) -> list:
        """A root that found another tree with a lower leader id joins it."""
        body: Mgrpl = pkt.body
        group = body.group
        entry = self.mtt.get(group)
        s.replied = True
        del self.searches[group]
        out: list = [Log("merge", {"group": group, "into": body.leader})]
        out.append(Broadcast(self.new_packet(StopSearch(group, self.id), self.k)))
        out.extend(self._release_backup(group))
        self._await_upstream(entry, pkt.src)
        entry.leader = body.leader
        entry.hop_count_to_leader = body.tm_hops + UNICAST_TTL - pkt.ttl + 1
        self._set_role(group, self._tree_role(group), out)
        out.append(Send(pkt.src, self.new_packet(Graft(group, self.id, body.tm), UNICAST_TTL)))
        return out

    def _propagate_hops(self, entry: MttEntry) -> list:
        if entry.upstream() is None and not self.is_root(entry.group):
            return []
        return [self._refresh_to(entry, d) for d in entry.downstream()]

    def _accept_succession(self, pkt: Packet) -> list:
        body: Mgrpl = pkt.body
        group = body.group
        del self.successions[group]
        out: list = []
        if group in self.mtt or body.tm_hops == NO_HOPS:
            return out
        entry = self.mtt.install(MttEntry(group, body.leader, body.tm_hops + 1, [], self.now))
        entry.set_upstream(body.tm)
        self._set_role(group, self._tree_role(group), out)
        out.append(Send(body.tm, self.new_packet(Graft(group, self.id, body.tm), UNICAST_TTL)))
        out.extend(self._arm_tree_update(group))
        out.extend(self._entered_tree(group))
        return out

    def _on_stop(self, pkt: Packet) -> list:
        body: StopSearch = pkt.body
        self.stopped[(body.rq, body.group)] = pkt.timestamp
        return [Broadcast(pkt.relayed(self.id))] if pkt.ttl > 1 else []

    # grafting

    def _on_graft(self, pkt: Packet) -> list:
        body: Graft = pkt.body
        group = body.group
        entry = self.mtt.get(group)
        out: list = []
        if entry is not None and body.from_node != pkt.src and body.from_node in entry.downstream():
            # a former child reattached over a new path
            entry.remove_hop(body.from_node)
        if body.to_node == self.id:
            if entry is None:
                return [Send(pkt.src, self.new_packet(Leave(group), UNICAST_TTL))]
            if entry.upstream() == pkt.src:
                return []
            entry.add_downstream(pkt.src)
            if self._attached(entry):
                out.append(self._refresh_to(entry, pkt.src))
            return out
        fwd = self.forward.get((body.from_node, group, body.to_node))
        if fwd is None or pkt.ttl <= 1:
            return out
        if entry is not None:
            up = entry.upstream()
            rq = body.from_node
            # Nodes that may hang below the requester re-root toward the new
            # attachment instead of absorbing the graft; stopping there would
            # close a loop through the requester.
            below_rq = (up == pkt.src or entry.leader == rq or entry.hop_count_to_leader
                        > self.reverse_hops.get((rq, group), NO_HOPS))
            mine = entry.hop_count_to_leader
            if not below_rq:
                entry.add_downstream(pkt.src)
                if self.is_root(group) or (up is not None and mine <= fwd.hops):
                    out.append(self._refresh_to(entry, pkt.src))
                    return out
            s = self.searches.get(group)
            held = ()
            if s is not None and s.repair:
                del self.searches[group]
                held = s.held
            self._await_upstream(entry, fwd.next_hop, held)
            entry.add_downstream(pkt.src)
            entry.leader = fwd.leader
            entry.hop_count_to_leader = fwd.hops
            if up is not None and up not in (fwd.next_hop, pkt.src):
                out.append(Send(up, self.new_packet(Leave(group), UNICAST_TTL)))
        else:
            entry = self.mtt.install(MttEntry(group, fwd.leader, fwd.hops, [], self.now))
            entry.set_upstream(fwd.next_hop)
            entry.add_downstream(pkt.src)
            self._set_role(group, self._tree_role(group), out)
            out.extend(self._arm_tree_update(group))
            out.append(self._refresh_to(entry, pkt.src))
        out.append(Send(fwd.next_hop, pkt.relayed(self.id)))
        out.extend(self._entered_tree(group))
        return out

    # leadership and backup root

    def declare_leader(self, group: int) -> list:
        out: list = []
        entry = self.mtt.get(group)
        if entry is None:
            entry = self.mtt.install(MttEntry(group, self.id, 0, [], self.now))
        entry.set_upstream(None)
        entry.leader = self.id
        entry.hop_count_to_leader = 0
        entry.updated_at = self.now
        self._set_role(group, Role.PRIMARY_ROOT, out)
        self.rt.upsert(RtEntry(group, self.id, self.pos, self.now))
        out.append(Log("leader", {"group": group}))
        out.extend(self._propagate_hops(entry))
        out.append(Broadcast(self.new_packet(
            Mgrpl(group, self.id, self.pos, BROADCAST, self.pos, self.id, 0), self.k)))
        if self.features.backup_root:
            out.append(SetTimer("elect", self.hop_latency, group))
        out.extend(self._arm_tree_update(group))
        out.extend(self._arm_probe(group))
        return out

    def _arm_probe(self, group: int) -> list:
        if group in self.probe_armed:
            return []
        self.probe_armed.add(group)
        return [SetTimer("probe", self.config.merge_probe_period + self._jitter(), group)]

    def _probe(self, group: int) -> list:
        if not self.is_root(group):
            self.probe_armed.discard(group)
            return []
        out = [SetTimer("probe", self.config.merge_probe_period + self._jitter(), group)]
        if group not in self.searches and group not in self.leaving:
            out.extend(self._begin_search(group, True, probe=True))
        return out

    def elect_backup(self, group: int) -> list:
        if not self.is_root(group) or group in self.backup or not self.features.backup_root:
            return []
        cfg = self.config
        tried = self.declined.setdefault(group, set())
        cands = [e for e in self.znt.one_hop()
                 if e.speed <= cfg.backup_speed_max and e.neighbor not in self.low_power_nodes
                 and e.neighbor not in tried]
        if not cands:
            tried.clear()
            return [SetTimer("elect", cfg.search_retry_delay + self._jitter(), group)]
        best = min(cands, key=lambda e: (distance(self.pos, e.pos), e.neighbor))
        self.backup[group] = best.neighbor
        return [Send(best.neighbor, self.new_packet(
            Alarm(group, AlarmKind.BACKUP_APPOINT, best.neighbor), UNICAST_TTL)),
            Log("backup_appointed", {"group": group, "backup": best.neighbor})]

    def _backup_lost(self, group: int) -> list:
        b = self.backup.pop(group, None)
        if b is None or not self.is_root(group):
            return []
        self.declined.setdefault(group, set()).add(b)
        return [SetTimer("elect", self.hop_latency, group)]

    def _release_backup(self, group: int) -> list:
        """Tell the current backup it no longer stands in for this node."""
        b = self.backup.pop(group, None)
        if b is None:
            return []
        nh = self.route_to(b)
        if nh is None:
            return []
        return [Send(nh, self.new_packet(Alarm(group, AlarmKind.BACKUP_RELEASE, b), UNICAST_TTL))]

    def _step_down_backup(self, group: int, out: list) -> None:
        self.backup_heard.pop(group, None)
        self.appointer.pop(group, None)
        if self.role(group) is Role.BACKUP_ROOT:
            self._set_role(group, self._tree_role(group), out)

    def _refresh_backups(self) -> list:
        out = []
        for group, b in list(self.backup.items()):
            if not self.is_root(group):
                del self.backup[group]
                continue
            nh = self.route_to(b)
            if nh is None:
                out.extend(self._backup_lost(group))
                continue
            out.append(Send(nh, self.new_packet(Alarm(group, AlarmKind.BACKUP_APPOINT, b),
                                                UNICAST_TTL)))
        return out

    def _on_appointment(self, pkt: Packet) -> list:
        body: Alarm = pkt.body
        group = body.group
        out: list = []
        if (self.battery < self.config.backup_battery_min_fraction * self.initial_battery
                or self.power_handoff_done or group in self.leaving):
            if self.appointer.get(group) == pkt.origin:
                self._step_down_backup(group, out)
            out.append(Send(pkt.src, self.new_packet(Alarm(group, AlarmKind.POWER_LOW, self.id),
                                                     UNICAST_TTL)))
            return out
        entry = self.mtt.get(group)
        if entry is None:
            if pkt.src != pkt.origin:
                return out
            entry = self.mtt.install(MttEntry(group, pkt.origin, 1, [], self.now))
            entry.set_upstream(pkt.origin)
            out.append(Send(pkt.origin, self.new_packet(Graft(group, self.id, pkt.origin),
                                                        UNICAST_TTL)))
            out.extend(self._arm_tree_update(group))
            out.extend(self._entered_tree(group))
        elif self.is_root(group):
            return out
        self.backup_heard[group] = self.now
        self.appointer[group] = pkt.origin
        if self.role(group) is not Role.BACKUP_ROOT:
            self._set_role(group, Role.BACKUP_ROOT, out)
            out.append(SetTimer("watchdog", self._root_period(), group))
        return out

    def _root_period(self) -> int:
        return max(1, self.config.power_check_period // 2)

    def _watchdog(self, group: int) -> list:
        if self.role(group) is not Role.BACKUP_ROOT:
            return []
        window = 3 * self._root_period()
        s = self.searches.get(group)
        if s is not None and s.root_check:
            return [SetTimer("watchdog", self._root_period(), group)]
        heard = self.backup_heard.get(group, self.now)
        if self.now - heard > window:
            # A root heard well after it should have re-appointed us, or one that is
            # no longer our leader, let the appointment lapse rather than failing.
            root = self.appointer.get(group)
            seen = self.znt.get(root) if root is not None else None
            entry = self.mtt.get(group)
            if ((seen is not None and seen.updated_at - heard > 2 * self._root_period())
                    or entry is None or entry.leader != root):
                out: list = [Log("backup_lapsed", {"group": group})]
                self._step_down_backup(group, out)
                return out
            return self.take_over(group, voluntary=False)
        return [SetTimer("watchdog", self._root_period(), group)]

    def take_over(self, group: int, voluntary: bool, old_root: Optional[int] = None) -> list:
        entry = self.mtt.get(group)
        if entry is None:
            return []
        out: list = []
        old_leader = entry.leader if old_root is None else old_root
        up = entry.upstream()
        entry.set_upstream(None)
        if up is not None and up != old_leader:
            entry.add_downstream(up)
        entry.leader = self.id
        entry.hop_count_to_leader = 0
        self.backup_heard.pop(group, None)
        self.appointer.pop(group, None)
        self._set_role(group, Role.PRIMARY_ROOT, out)
        out.append(Log("failover", {"group": group, "old_leader": old_leader,
                                    "voluntary": int(voluntary)}))
        out.extend(self._propagate_hops(entry))
        out.append(Broadcast(self.new_packet(
            Alarm(group, AlarmKind.ROOT_HANDOFF, self.id), self.k)))
        out.append(SetTimer("elect", self.hop_latency, group))
        out.extend(self._arm_probe(group))
        return out

    def _demote(self, group: int) -> list:
        out: list = [Log("demote", {"group": group})]
        out.extend(self._release_backup(group))
        self._drop_entry(group)
        self._set_role(group, Role.NON_MEMBER, out)
        out.append(Broadcast(self.new_packet(Leave(group), 1)))
        if group in self.members:
            out.extend(self._begin_search(group, True))
        return out

    # alarms and leaves

    def _on_alarm(self, pkt: Packet) -> list:
        body: Alarm = pkt.body
        group = body.group
        kind = body.kind
        if kind in (AlarmKind.BACKUP_APPOINT, AlarmKind.BACKUP_RELEASE):
            if body.successor == self.id:
                if kind is AlarmKind.BACKUP_APPOINT:
                    return self._on_appointment(pkt)
                out: list = []
                if self.appointer.get(group) == pkt.origin:
                    self._step_down_backup(group, out)
                return out
            nh = self.route_to(body.successor)
            if nh is None or pkt.ttl <= 1:
                return []
            return [Send(nh, pkt.relayed(self.id))]
        out: list = []
        if kind is AlarmKind.POWER_LOW:
            self.low_power_nodes.add(pkt.origin)
            if self.backup.get(group) == pkt.origin:
                out.extend(self._backup_lost(group))
            return out
        if kind is AlarmKind.ROOT_HANDOFF:
            return self._on_root_handoff(pkt)
        # LEAVING
        leaver = pkt.origin
        succ = body.successor
        self.znt.remove(leaver)
        self.rt.remove_member(leaver)
        if succ == self.id:
            self.successions[group] = leaver
        entry = self.mtt.get(group)
        if entry is not None and entry.has_hop(leaver) and succ is not None and succ != self.id:
            if entry.upstream() == leaver:
                entry.set_upstream(succ)
                out.append(Send(succ, self.new_packet(TreeUpdate(group, (self.id,)),
                                                      UNICAST_TTL)))
            else:
                entry.remove_hop(leaver)
                entry.add_downstream(succ)
        if self.backup.get(group) == leaver:
            out.extend(self._backup_lost(group))
        return out

    def _on_root_handoff(self, pkt: Packet) -> list:
        body: Alarm = pkt.body
        group = body.group
        succ = body.successor
        out: list = []
        if pkt.ttl > 1:
            out.append(Broadcast(pkt.relayed(self.id)))
        voluntary = pkt.origin != succ
        if voluntary:
            self.znt.remove(pkt.origin)
            self.rt.remove_member(pkt.origin)
        entry = self.mtt.get(group)
        if succ == self.id:
            if voluntary and entry is not None and not self.is_root(group):
                out.extend(self.take_over(group, voluntary=True, old_root=pkt.origin))
            return out
        if entry is None:
            return out
        if self.is_root(group):
            if not voluntary and group not in self.leaving:
                out.extend(self._demote(group))
            return out
        old_leader = pkt.origin if voluntary else entry.leader
        self._step_down_backup(group, out)
        up = entry.upstream()
        orphan = up is None and group not in self.pending_up
        # Nodes whose upstream still stands learn the new leader from hop
        # refreshes coming down the tree, never from the zone broadcast: a
        # subtree hanging off a live old root must not claim the successor.
        if orphan or up == old_leader:
            route = self.znt.get(succ)
            if route is not None and route.zonal and route.hop_count == 1:
                entry.leader = succ
                entry.set_upstream(succ)
                entry.hop_count_to_leader = 1
                out.append(Send(succ, self.new_packet(Graft(group, self.id, succ), UNICAST_TTL)))
                s = self.searches.pop(group, None)
                if s is not None:
                    out.extend(Send(succ, p) for p in s.held)
                out.extend(self._propagate_hops(entry))
            elif group not in self.searches:
                out.extend(self.repair_link(group))
        return out

    def _on_leave(self, pkt: Packet) -> list:
        group = pkt.body.group
        sender = pkt.src
        self.rt.entries.pop((group, sender), None)
        out: list = []
        entry = self.mtt.get(group)
        if entry is not None and entry.has_hop(sender):
            if entry.upstream() == sender:
                out.extend(self.repair_link(group))
            else:
                entry.remove_hop(sender)
                out.extend(self._maybe_prune(group))
        if self.backup.get(group) == sender:
            out.extend(self._backup_lost(group))
        return out

    def _maybe_prune(self, group: int) -> list:
        entry = self.mtt.get(group)
        if (entry is None or self.role(group) is not Role.INTERMEDIATE
                or group in self.members or entry.downstream(activated_only=False)):
            return []
        out: list = []
        up = entry.upstream()
        self._drop_entry(group)
        self._set_role(group, Role.NON_MEMBER, out)
        self.searches.pop(group, None)
        if up is not None:
            out.append(Send(up, self.new_packet(Leave(group), UNICAST_TTL)))
        return out

    def leave_group(self, group: int, now: int, kind: AlarmKind = AlarmKind.LEAVING) -> list:
        self.now = now
        self.searches.pop(group, None)
        entry = self.mtt.get(group)
        out: list = []
        if entry is None or group in self.leaving:
            if entry is None:
                out.append(Broadcast(self.new_packet(Leave(group), 1)))
            return out
        if self.is_root(group):
            b = self.backup.get(group)
            route = self.znt.get(b) if b is not None else None
            if (self.features.preventive and self.features.backup_root and route is not None
                    and route.hop_count == 1):
                self.leaving.add(group)
                out.append(Broadcast(self.new_packet(
                    Alarm(group, AlarmKind.ROOT_HANDOFF, b), 1)))
                out.append(SetTimer("leave", self._grace(), group))
                return out
            return out + self._leave_now(group)
        if not self.features.preventive or entry.is_leaf():
            return out + self._leave_now(group)
        up = entry.upstream()
        tree = set(entry.links())
        cands = [e for e in self.znt.one_hop()
                 if e.neighbor not in tree and e.neighbor not in self.low_power_nodes]
        if up is None or not cands:
            return out + self._leave_now(group)
        succ = min(cands, key=lambda e: (distance(self.pos, e.pos), e.neighbor))
        up_entry = self.znt.get(up)
        up_pos = up_entry.pos if up_entry is not None else self.pos
        self.leaving.add(group)
        out.append(Broadcast(self.new_packet(Alarm(group, AlarmKind.LEAVING, succ.neighbor), 1)))
        out.append(Send(succ.neighbor, self.new_packet(
            Mgrpl(group, up, up_pos, succ.neighbor, succ.pos, entry.leader,
                  max(0, entry.hop_count_to_leader - 1)), UNICAST_TTL)))
        out.append(Log("handoff", {"group": group, "successor": succ.neighbor,
                                   "reason": kind.name.lower()}))
        out.append(SetTimer("leave", self._grace(), group))
        return out

    def _grace(self) -> int:
        return 10 * self.hop_latency

    def _leave_now(self, group: int) -> list:
        out: list = []
        self.leaving.discard(group)
        self._drop_entry(group)
        self.backup.pop(group, None)
        self.tu_armed.discard(group)
        self._set_role(group, Role.NON_MEMBER, out)
        out.append(Broadcast(self.new_packet(Leave(group), 1)))
        return out

    # maintenance

    def repair_link(self, group: int) -> list:
        entry = self.mtt.get(group)
        if entry is None or self.is_root(group):
            return []
        up = entry.upstream()
        orphan = self.features.backup_root and up is not None and up == entry.leader
        entry.set_upstream(None)
        self.pending_up.pop(group, None)
        held = self.pending_held.pop(group, [])
        s = self.searches.get(group)
        if s is not None and not s.replied:
            s.held.extend(held)
            return []
        out = [Log("repair", {"group": group, "hops": entry.hop_count_to_leader})]
        out.extend(self._begin_search(group, True, rq_hops=entry.hop_count_to_leader,
                                      repair=True))
        s = self.searches.get(group)
        if s is not None:
            s.held.extend(held[:HELD_MAX])
            if self.role(group) is Role.BACKUP_ROOT:
                s.root_check = orphan
            else:
                s.await_backup = orphan
        return out

    def _arm_tree_update(self, group: int) -> list:
        if group in self.tu_armed:
            return []
        self.tu_armed.add(group)
        return [SetTimer("tree_update", self.config.tree_update_period + self._jitter(), group)]

    def periodic_tree_update(self, group: int) -> list:
        entry = self.mtt.get(group)
        if entry is None:
            self.tu_armed.discard(group)
            return []
        out = [SetTimer("tree_update", self.config.tree_update_period, group)]
        role = self.role(group)
        if role is Role.PRIMARY_ROOT:
            return out
        up = entry.upstream()
        if up is None:
            pending = self.pending_up.get(group)
            if pending is not None and self.now - pending[1] < self.config.search_retry_delay:
                return out
            if group not in self.searches:
                out.extend(self.repair_link(group))
            return out
        # interior nodes relay their leaves' updates; speak up only when nothing went upstream
        recent = self.now - self.up_sent.get(group, -self.config.tree_update_period)
        if role is Role.BACKUP_ROOT or (not entry.is_leaf()
                                        and recent < self.config.tree_update_period):
            return out
        self.up_sent[group] = self.now
        out.append(Send(up, self.new_packet(TreeUpdate(group, (self.id,)), UNICAST_TTL)))
        return out

    def _on_tree_update(self, pkt: Packet) -> list:
        body: TreeUpdate = pkt.body
        group = body.group
        entry = self.mtt.get(group)
        if entry is None:
            return [Send(pkt.src, self.new_packet(Leave(group), UNICAST_TTL))]
        if entry.upstream() != pkt.src:
            entry.add_downstream(pkt.src)
        entry.updated_at = self.now
        role = self.role(group)
        if role is Role.PRIMARY_ROOT:
            self.tree_view.setdefault(group, {})[body.path[0]] = body.path
            return []
        if role is Role.BACKUP_ROOT and self.features.backup_root:
            view = self.tree_view.setdefault(group, {})
            if view.get(body.path[0]) == body.path:
                return []
            view[body.path[0]] = body.path
        if self.id in body.path:
            # the update came back around: the upstream chain is a loop
            return [Log("loop", {"group": group})] + self.repair_link(group)
        if pkt.ttl <= 1:
            return []
        up = entry.upstream()
        if up is None:
            return []
        path = body.path if role is Role.BACKUP_ROOT else body.path + (self.id,)
        self.up_sent[group] = self.now
        return [Send(up, Packet(pkt.seq, self.id, pkt.origin, pkt.ttl - 1, pkt.timestamp,
                                TreeUpdate(group, path)))]

    def power_check(self) -> list:
        cfg = self.config
        if (not self.features.preventive or self.power_handoff_done
                or self.battery >= cfg.power_threshold_fraction * self.initial_battery):
            return []
        self.power_handoff_done = True
        out: list = [Broadcast(self.new_packet(Alarm(0, AlarmKind.POWER_LOW, None), 1))]
        for group in sorted(self.mtt.entries):
            out.extend(self.leave_group(group, self.now, AlarmKind.POWER_LOW))
        return out

    def housekeeping(self) -> list:
        out = super().housekeeping()
        for group in sorted(self.mtt.entries):
            entry = self.mtt.entries[group]
            up = entry.upstream()
            if up is not None and not self._adjacent(up) and group not in self.searches:
                out.extend(self.repair_link(group))
            for d in entry.downstream(activated_only=False):
                if not self._adjacent(d):
                    entry.remove_hop(d)
            out.extend(self._maybe_prune(group))
        out.extend(self._refresh_backups())
        out.extend(self.power_check())
        return out

    def _adjacent(self, node: int) -> bool:
        e = self.znt.get(node)
        return e is not None and e.zonal and e.hop_count == 1

    def on_link_break(self, to: int, pkt: Packet) -> list:
        super().on_link_break(to, pkt)
        out: list = []
        body = pkt.body
        if type(body) is Alarm and body.kind is AlarmKind.BACKUP_APPOINT:
            out.extend(self._backup_lost(body.group))
        for group in sorted(self.mtt.entries):
            entry = self.mtt.entries.get(group)
            if entry is None or not entry.has_hop(to):
                continue
            if entry.upstream() == to:
                out.extend(self.repair_link(group))
                if type(body) is Data and body.group == group:
                    self._hold(group, pkt)
            else:
                entry.remove_hop(to)
                out.extend(self._maybe_prune(group))
        return out

    # data

    def _hold(self, group: int, pkt: Packet) -> None:
        """Keep an upstream-bound DATA packet while local repair runs."""
        if not self.features.local_repair:
            return
        if group in self.pending_up:
            held = self.pending_held.setdefault(group, [])
            if len(held) < HELD_MAX:
                held.append(pkt)
            return
        s = self.searches.get(group)
        if s is not None and s.repair and not s.replied and len(s.held) < HELD_MAX:
            s.held.append(pkt)

    def _drop_entry(self, group: int) -> None:
        self.mtt.remove(group)
        self.pending_up.pop(group, None)
        self.pending_held.pop(group, None)

    def _attached(self, entry: MttEntry) -> bool:
        return self.is_root(entry.group) or entry.upstream() is not None

    def _on_data(self, pkt: Packet) -> list:
        body: Data = pkt.body
        group = body.group
        entry = self.mtt.get(group)
        out: list = []
        if entry is None:
            fwd = self.data_forward.get((pkt.origin, group))
            if fwd is not None and pkt.ttl > 1:
                return [Send(fwd.next_hop, pkt.relayed(self.id))]
            return [Log("drop_unknown_group", {"group": group, "origin": pkt.origin,
                                               "seq": pkt.seq})]
        if group in self.members:
            out.append(Deliver(group, pkt.origin, pkt.seq, body.payload))
        links = entry.links()
        relay = pkt.relayed(self.id)
        if entry.upstream() is None and not self.is_root(group) and pkt.ttl > 1:
            self._hold(group, relay)
        for h in links:
            if h != pkt.src:
                out.append(Send(h, relay))
        return out

    # timers

    def on_timer(self, kind: str, key, now: int) -> list:
        self.now = now
        if kind == "search":
            return self.on_search_timeout(*key)
        if kind == "tree_update":
            return self.periodic_tree_update(key)
        if kind == "elect":
            return self.elect_backup(key)
        if kind == "watchdog":
            return self._watchdog(key)
        if kind == "probe":
            return self._probe(key)
        if kind == "leave":
            if key in self.leaving and key in self.mtt:
                return self._leave_now(key)
            self.leaving.discard(key)
            return []
        return super().on_timer(kind, key, now)

    _handlers = {
        **BaseNode._handlers,
        Mgreq: _on_mgreq, Mgrpl: _on_mgrpl, Graft: _on_graft, Alarm: _on_alarm,
        Leave: _on_leave, TreeUpdate: _on_tree_update, StopSearch: _on_stop, Data: _on_data,
    }


def plain_shared_tree_node(node_id: int, config: ProtocolConfig, **kw) -> SeelampNode:
    node = SeelampNode(node_id, config, PLAIN_TREE_FEATURES, **kw)
    node.protocol_name = "shared_tree"
    return node
