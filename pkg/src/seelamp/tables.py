"""Per-node soft-state tables: zone neighbors, multicast tree, requests."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from .geometry import Position, distance


class CapacityExceeded(RuntimeError):
    pass


class Upsert(enum.Enum):
    INSERTED = "inserted"
    UPDATED = "updated"
    REJECTED_STALE = "rejected_stale"


# -- zone neighbor table ------------------------------------------------------

@dataclass(slots=True)
class ZntEntry:
    neighbor: int
    pos: Position
    next_hop: int
    hop_count: int
    updated_at: int
    zonal: bool = True
    speed: float = 0.0  # m/s, estimated from successive position reports

    def __post_init__(self):
        if self.hop_count < 1:
            raise ValueError(f"hop_count must be positive, got {self.hop_count}")
        if self.hop_count == 1 and self.next_hop != self.neighbor:
            raise ValueError("a 1-hop entry must use the neighbor as next hop")


class ZoneNeighborTable:
    def __init__(self, k: int, capacity: int = 256):
        self.k = k
        self.capacity = capacity
        self.entries: dict[int, ZntEntry] = {}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, node: int) -> bool:
        return node in self.entries

    def __iter__(self):
        return iter(self.entries.values())

    def get(self, node: int) -> Optional[ZntEntry]:
        return self.entries.get(node)

    def upsert(self, entry: ZntEntry) -> Upsert:
        old = self.entries.get(entry.neighbor)
        if old is not None:
            newer = entry.updated_at > old.updated_at
            if not newer and not (entry.updated_at == old.updated_at
                                  and entry.hop_count < old.hop_count):
                return Upsert.REJECTED_STALE
            if newer:
                dt = (entry.updated_at - old.updated_at) / 1000.0
                entry.speed = distance(old.pos, entry.pos) / dt
            else:
                entry.speed = old.speed
            self.entries[entry.neighbor] = entry
            return Upsert.UPDATED
        if len(self.entries) >= self.capacity:
            self._evict_for(entry)
        self.entries[entry.neighbor] = entry
        return Upsert.INSERTED

    def _evict_for(self, entry: ZntEntry) -> None:
        extra = [e for e in self.entries.values() if not e.zonal]
        if extra:
            victim = min(extra, key=lambda e: (e.updated_at, e.neighbor))
        elif entry.zonal:
            victim = min(self.entries.values(), key=lambda e: (e.updated_at, e.neighbor))
        else:
            raise CapacityExceeded(f"no room for overheard entry {entry.neighbor}")
        del self.entries[victim.neighbor]

    def refresh(self, node: int, pos: Position, now: int) -> bool:
        """Update position and timestamp of a known entry, keeping its route."""
        e = self.entries.get(node)
        if e is None or now <= e.updated_at:
            return False
        dt = (now - e.updated_at) / 1000.0
        e.speed = distance(e.pos, pos) / dt
        e.pos = pos
        e.updated_at = now
        return True

    def remove(self, node: int) -> Optional[ZntEntry]:
        return self.entries.pop(node, None)

    def expire(self, now: int, max_age: int) -> list[int]:
        if max_age <= 0:
            raise ValueError("max_age must be positive")
        stale = sorted(n for n, e in self.entries.items() if now - e.updated_at > max_age)
        for n in stale:
            del self.entries[n]
        return stale

    def zone_members(self) -> set[int]:
        k = self.k
        return {n for n, e in self.entries.items() if e.zonal and e.hop_count <= k}

    def border_nodes(self, k: Optional[int] = None) -> set[int]:
        k = self.k if k is None else k
        return {n for n, e in self.entries.items() if e.zonal and e.hop_count == k}

    def perimeter_nodes(self, k: Optional[int] = None) -> set[int]:
        """Border nodes, or the farthest zone members when there are none."""
        k = self.k if k is None else k
        border = self.border_nodes(k)
        if border:
            return border
        zone = [e for e in self.entries.values() if e.zonal and e.hop_count <= k]
        if not zone:
            return set()
        far = max(e.hop_count for e in zone)
        return {e.neighbor for e in zone if e.hop_count == far}

    def one_hop(self) -> list[ZntEntry]:
        return sorted((e for e in self.entries.values() if e.zonal and e.hop_count == 1),
                      key=lambda e: e.neighbor)

    def snapshot(self) -> list[dict]:
        return [{"table": "znt", "neighbor": e.neighbor, "x": e.pos.x, "y": e.pos.y,
                 "next_hop": e.next_hop, "hops": e.hop_count, "ts": e.updated_at,
                 "zonal": int(e.zonal)}
                for e in sorted(self.entries.values(), key=lambda e: e.neighbor)]


# -- multicast tree table -----------------------------------------------------

class Direction(enum.Enum):
    UPSTREAM = "up"
    DOWNSTREAM = "down"


@dataclass(slots=True)
class NextHop:
    hop: int
    direction: Direction
    activated: bool = True


@dataclass(slots=True)
class MttEntry:
    group: int
    leader: int
    hop_count_to_leader: int
    next_hops: list[NextHop] = field(default_factory=list)
    updated_at: int = 0

    def upstream(self) -> Optional[int]:
        for nh in self.next_hops:
            if nh.direction is Direction.UPSTREAM:
                return nh.hop
        return None

    def downstream(self, activated_only: bool = True) -> list[int]:
        return [nh.hop for nh in self.next_hops
                if nh.direction is Direction.DOWNSTREAM
                and (nh.activated or not activated_only)]

    def links(self) -> list[int]:
        """Activated tree neighbors, upstream first."""
        return [nh.hop for nh in self.next_hops if nh.activated]

    def has_hop(self, hop: int) -> bool:
        return any(nh.hop == hop for nh in self.next_hops)

    def set_upstream(self, hop: Optional[int], activated: bool = True) -> None:
        self.next_hops = [nh for nh in self.next_hops
                          if nh.direction is not Direction.UPSTREAM and nh.hop != hop]
        if hop is not None:
            self.next_hops.insert(0, NextHop(hop, Direction.UPSTREAM, activated))

    def add_downstream(self, hop: int, activated: bool = True) -> bool:
        for nh in self.next_hops:
            if nh.hop == hop:
                if nh.direction is Direction.UPSTREAM:
                    return False
                nh.activated = activated
                return True
        self.next_hops.append(NextHop(hop, Direction.DOWNSTREAM, activated))
        return True

    def remove_hop(self, hop: int) -> Optional[NextHop]:
        for i, nh in enumerate(self.next_hops):
            if nh.hop == hop:
                return self.next_hops.pop(i)
        return None

    def is_leaf(self) -> bool:
        return not self.downstream()


class MulticastTreeTable:
    def __init__(self, capacity: int = 64):
        self.capacity = capacity
        self.entries: dict[int, MttEntry] = {}

    def __contains__(self, group: int) -> bool:
        return group in self.entries

    def __iter__(self):
        return iter(self.entries.values())

    def __len__(self):
        return len(self.entries)

    def get(self, group: int) -> Optional[MttEntry]:
        return self.entries.get(group)

    def install(self, entry: MttEntry) -> MttEntry:
        if entry.group not in self.entries and len(self.entries) >= self.capacity:
            raise CapacityExceeded(f"multicast tree table full ({self.capacity})")
        self.entries[entry.group] = entry
        return entry

    def remove(self, group: int) -> Optional[MttEntry]:
        return self.entries.pop(group, None)

    def snapshot(self) -> list[dict]:
        out = []
        for e in sorted(self.entries.values(), key=lambda e: e.group):
            hops = ";".join(f"{nh.hop}{'^' if nh.direction is Direction.UPSTREAM else 'v'}"
                            f"{'' if nh.activated else '?'}" for nh in e.next_hops)
            out.append({"table": "mtt", "group": e.group, "leader": e.leader,
                        "hops": e.hop_count_to_leader, "next": hops, "ts": e.updated_at})
        return out


# -- request table ------------------------------------------------------------

@dataclass(slots=True)
class RtEntry:
    group: int
    tree_member: int
    tm_pos: Position
    updated_at: int


class RequestTable:
    def __init__(self, capacity: int = 256):
        self.capacity = capacity
        self.entries: dict[tuple[int, int], RtEntry] = {}

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries.values())

    def upsert(self, entry: RtEntry) -> Upsert:
        key = (entry.group, entry.tree_member)
        old = self.entries.get(key)
        if old is not None:
            if entry.updated_at <= old.updated_at:
                return Upsert.REJECTED_STALE
            self.entries[key] = entry
            return Upsert.UPDATED
        if len(self.entries) >= self.capacity:
            victim = min(self.entries.values(),
                         key=lambda e: (e.updated_at, e.group, e.tree_member))
            del self.entries[(victim.group, victim.tree_member)]
        self.entries[key] = entry
        return Upsert.INSERTED

    def lookup(self, group: int, exclude: Iterable[int] = ()) -> Optional[RtEntry]:
        skip = set(exclude)
        best = None
        for e in self.entries.values():
            if e.group != group or e.tree_member in skip:
                continue
            if best is None or (-e.updated_at, e.tree_member) < (-best.updated_at, best.tree_member):
                best = e
        return best

    def remove_member(self, node: int) -> int:
        keys = [k for k in self.entries if k[1] == node]
        for k in keys:
            del self.entries[k]
        return len(keys)

    def expire(self, now: int, max_age: int) -> list[tuple[int, int]]:
        if max_age <= 0:
            raise ValueError("max_age must be positive")
        stale = sorted(k for k, e in self.entries.items() if now - e.updated_at > max_age)
        for k in stale:
            del self.entries[k]
        return stale

    def snapshot(self) -> list[dict]:
        return [{"table": "rt", "group": e.group, "member": e.tree_member,
                 "x": e.tm_pos.x, "y": e.tm_pos.y, "ts": e.updated_at}
                for e in sorted(self.entries.values(), key=lambda e: (e.group, e.tree_member))]


# -- combined lookup ----------------------------------------------------------

@dataclass(frozen=True, slots=True)
class InTree:
    entry: MttEntry


@dataclass(frozen=True, slots=True)
class Known:
    entry: RtEntry


class _Unknown:
    __slots__ = ()

    def __repr__(self):
        return "Unknown"


Unknown = _Unknown()
GroupLookup = Union[InTree, Known, _Unknown]


def lookup_group_member(mtt: MulticastTreeTable, rt: RequestTable, group: int,
                        exclude: Iterable[int] = ()) -> GroupLookup:
    """Tree table first, then the request table."""
    entry = mtt.get(group)
    if entry is not None:
        return InTree(entry)
    hit = rt.lookup(group, exclude)
    if hit is not None:
        return Known(hit)
    return Unknown
