"""Reference protocols for comparison.

`shared_tree_plain` is the tree protocol with backup root, preventive
maintenance, local repair and directional search all switched off, so any
difference against the full protocol comes from those features alone.

`FloodingMeshNode` is a mesh abstraction in the spirit of on-demand
forwarding-group protocols: members flood periodic join queries, other
members answer along the reverse path, nodes on those paths become
forwarding-group nodes, and data is broadcast through them.
"""

from __future__ import annotations

import enum

from .protocol import (
    PLAIN_TREE_FEATURES, BaseNode, Broadcast, Deliver, ProtocolConfig, Role, RoleChange, Send,
    SetTimer, plain_shared_tree_node,
)
from .wire import NO_HOPS, UNICAST_TTL, Data, Mgreq, Mgrpl, Packet


class BaselineKind(enum.Enum):
    SHARED_TREE_PLAIN = "shared_tree"
    FLOODING_MESH = "mesh"


def shared_tree_plain(node_id: int, config: ProtocolConfig, **kw):
    return plain_shared_tree_node(node_id, config, **kw)


class FloodingMeshNode(BaseNode):
    protocol_name = "mesh"

    def __init__(self, node_id: int, config: ProtocolConfig, **kw):
        super().__init__(node_id, config, **kw)
        self.reverse: dict[tuple[int, int], int] = {}
        self.forwarding: dict[int, int] = {}  # group -> time the flag was last set
        self.replied: set[tuple[int, int]] = set()

    def role(self, group: int) -> Role:
        return Role.MEMBER if group in self.members else Role.NON_MEMBER

    def _fg_active(self, group: int) -> bool:
        t = self.forwarding.get(group)
        return t is not None and self.now - t <= 3 * self.config.mesh_refresh_period

    # application

    def app_join(self, group: int, now: int) -> list:
        self.now = now
        if group in self.members:
            return []
        self.members.add(group)
        return [RoleChange(group, Role.MEMBER), *self._query(group)]

    def app_leave(self, group: int, now: int) -> list:
        self.now = now
        if group not in self.members:
            return []
        self.members.discard(group)
        return [RoleChange(group, Role.NON_MEMBER)]

    def app_send(self, group: int, payload: bytes, now: int) -> list:
        self.now = now
        return [Broadcast(self.new_packet(Data(group, payload), self.net_diameter))]

    def _query(self, group: int) -> list:
        pkt = self.new_packet(Mgreq(group, self.id, self.pos, True, NO_HOPS), self.net_diameter)
        return [Broadcast(pkt),
                SetTimer("mesh_refresh", self.config.mesh_refresh_period, group)]

    def on_timer(self, kind: str, key, now: int) -> list:
        self.now = now
        if kind == "mesh_refresh":
            return self._query(key) if key in self.members else []
        return super().on_timer(kind, key, now)

    # packets

    def _on_mgreq(self, pkt: Packet) -> list:
        body: Mgreq = pkt.body
        self._learn(body.rq, body.rq_pos, pkt.src)
        self.reverse[(body.rq, body.group)] = pkt.src
        out = []
        if body.group in self.members and body.rq != self.id:
            out.append(Send(pkt.src, self.new_packet(
                Mgrpl(body.group, self.id, self.pos, body.rq, body.rq_pos, self.id, 0),
                UNICAST_TTL)))
        if pkt.ttl > 1:
            out.append(Broadcast(pkt.relayed(self.id)))
        return out

    def _on_mgrpl(self, pkt: Packet) -> list:
        body: Mgrpl = pkt.body
        self._learn(body.tm, body.tm_pos, pkt.src)
        if body.rq == self.id:
            return []
        self.forwarding[body.group] = self.now
        nh = self.reverse.get((body.rq, body.group))
        if nh is None or pkt.ttl <= 1:
            return []
        return [Send(nh, pkt.relayed(self.id))]

    def _on_data(self, pkt: Packet) -> list:
        body: Data = pkt.body
        out = []
        if body.group in self.members:
            out.append(Deliver(body.group, pkt.origin, pkt.seq, body.payload))
        if pkt.ttl > 1 and self._fg_active(body.group):
            out.append(Broadcast(pkt.relayed(self.id)))
        return out

    _handlers = {**BaseNode._handlers, Mgreq: _on_mgreq, Mgrpl: _on_mgrpl, Data: _on_data}


__all__ = ["BaselineKind", "FloodingMeshNode", "shared_tree_plain", "PLAIN_TREE_FEATURES"]
