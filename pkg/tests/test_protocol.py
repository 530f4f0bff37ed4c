import dataclasses
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from seelamp.geometry import Position
from seelamp.protocol import (STAGE_ALL, STAGE_BORDER, STAGE_FARTHEST, AlreadyMember,
                              Broadcast, Deliver, Log, ProtocolConfig, Role, RoleChange,
                              SeelampNode, Send, SetTimer, plain_shared_tree_node,
                              select_directional_staged)
from seelamp.scenario import parse_scenario
from seelamp.simkernel import Simulator
from seelamp.tables import MttEntry, RtEntry, ZntEntry, ZoneNeighborTable
from seelamp.wire import (NO_HOPS, UNICAST_TTL, Alarm, AlarmKind, Data, Graft, Lack, Leave,
                          Locn, Mgreq, Mgrpl, Packet, StopSearch, TreeUpdate)

G = 1


def make(i=0, pos=(0.0, 0.0), plain=False, **cfg):
    conf = dataclasses.replace(ProtocolConfig(), **cfg)
    n = plain_shared_tree_node(i, conf) if plain else SeelampNode(i, conf)
    n.net_diameter = 6
    n.on_position_update(Position(*pos), 0)
    return n


def neighbor(n, other, pos, hops=1, via=None, t=0, speed=0.0):
    e = ZntEntry(other, Position(*pos), other if hops == 1 else via, hops, t)
    n.znt.upsert(e)
    e.speed = speed
    return e


def pkt(body, src, origin=None, ttl=UNICAST_TTL, seq=1, t=0):
    return Packet(seq, src, src if origin is None else origin, ttl, t, body)


def of(actions, kind, body=None):
    out = [a for a in actions if isinstance(a, kind)]
    if body is not None:
        out = [a for a in out if isinstance(a.packet.body, body)]
    return out


def tree_entry(n, leader, hops, up=None, down=()):
    e = n.mtt.install(MttEntry(G, leader, hops, [], 0))
    if up is not None:
        e.set_upstream(up)
    for d in down:
        e.add_downstream(d)
    return e


# -- location layer -----------------------------------------------------------

def test_position_updates():
    n = SeelampNode(0, ProtocolConfig(k=3, move_threshold=10.0))
    first = n.on_position_update(Position(0, 0), 0)
    assert len(first) == 1 and first[0].ttl == 3
    assert isinstance(first[0].packet.body, Locn)
    assert n.on_position_update(Position(0, 0), 100) == []
    assert n.on_position_update(Position(6, 0), 200) == []
    again = n.on_position_update(Position(12, 0), 300)
    assert len(again) == 1 and again[0].packet.body.pos == Position(12, 0)


def test_fresh_locn_from_neighbor():
    n = make(k=2)
    p = pkt(Locn(Position(50, 0)), 5, ttl=2)
    out = n.on_receive(p, 10)
    e = n.znt.get(5)
    assert e.hop_count == 1 and e.next_hop == 5
    lacks = of(out, Send, Lack)
    assert len(lacks) == 1 and lacks[0].to == 5
    assert len(of(out, Broadcast)) == 1  # ttl 2 so it is relayed once
    assert n.on_receive(p, 11) == []


def test_relayed_locn_gives_two_hop_entry():
    n = make(k=2)
    out = n.on_receive(pkt(Locn(Position(400, 0)), 7, origin=5, ttl=1), 10)
    e = n.znt.get(5)
    assert e.hop_count == 2 and e.next_hop == 7
    assert of(out, Broadcast) == []
    assert of(out, Send, Lack)[0].packet.body.src == 5


def test_snooping():
    n = make()
    n.on_overhear(pkt(Lack(Position(30, 40), 99, Position(0, 0)), 3), 5)
    assert n.znt.get(3).hop_count == 1 and n.znt.get(3).pos == Position(30, 40)
    before = n.znt.snapshot()
    n.on_overhear(pkt(Data(G, b"x" * 16), 4), 6)
    assert n.znt.snapshot() == before
    n.on_overhear(pkt(Mgreq(G, 8, Position(70, 70), True), 8), 7)
    assert n.znt.get(8).pos == Position(70, 70)


# -- searches -----------------------------------------------------------------

def test_join_broadcasts_mgreq_in_zone():
    n = make(k=3)
    out = n.app_join(G, 100)
    (b,) = of(out, Broadcast, Mgreq)
    assert b.ttl == 3 and b.packet.body.join_flag and b.packet.body.rq == 0
    assert of(out, SetTimer)


def test_start_search_when_member():
    n = make()
    tree_entry(n, 0, 0)
    with pytest.raises(AlreadyMember):
        n.start_search(G, True, 0)


def test_tree_member_answers_mgreq():
    n = make(i=4)
    tree_entry(n, leader=4, hops=0)
    n.roles[G] = Role.PRIMARY_ROOT
    out = n.on_receive(pkt(Mgreq(G, 9, Position(100, 0), True), 9, ttl=2), 10)
    (s,) = of(out, Send, Mgrpl)
    assert s.to == 9
    assert (s.packet.body.tm, s.packet.body.rq, s.packet.body.tm_hops) == (4, 9, 0)
    assert n.rt.lookup(G, exclude=[4]).tree_member == 9


def test_request_table_answer_names_remote_member():
    n = make(i=4)
    n.rt.upsert(RtEntry(G, 20, Position(900, 900), 0))
    out = n.on_receive(pkt(Mgreq(G, 9, Position(100, 0), False), 9, ttl=2), 10)
    (s,) = of(out, Send, Mgrpl)
    assert s.packet.body.tm == 20 and s.packet.body.tm_pos == Position(900, 900)
    assert s.packet.body.tm_hops == NO_HOPS


def test_no_knowledge_last_hop_drops():
    n = make(i=4)
    out = n.on_receive(pkt(Mgreq(G, 9, Position(100, 0), False), 9, ttl=1), 10)
    assert of(out, Send) == [] and of(out, Broadcast) == []


def test_join_search_escalates_then_declares_leader():
    n = make(k=2)
    out = n.app_join(G, 0)
    (timer,) = of(out, SetTimer)
    out = n.on_timer("search", timer.key, timer.delay)
    (b,) = of(out, Broadcast, Mgreq)
    assert b.ttl == 4  # one more zone radius
    (timer,) = of(out, SetTimer)
    out = n.on_timer("search", timer.key, 1000)
    assert of(out, Broadcast, Mgreq)[0].ttl == 6
    out = n.on_timer("search", of(out, SetTimer)[0].key, 2000)
    assert RoleChange(G, Role.PRIMARY_ROOT) in out
    assert n.mtt.get(G).hop_count_to_leader == 0 and n.mtt.get(G).leader == 0


def test_reply_before_timeout_cancels_escalation():
    n = make(k=2)
    (timer,) = of(n.app_join(G, 0), SetTimer)
    reply = Mgrpl(G, 7, Position(50, 0), 0, Position(0, 0), leader=7, tm_hops=0)
    n.on_receive(pkt(reply, 7), 20)
    assert n.on_timer("search", timer.key, 100) == []


def test_join_reply_grafts_and_first_copy_wins():
    n = make(k=2)
    n.app_join(G, 0)
    reply = Mgrpl(G, 7, Position(50, 0), 0, Position(0, 0), leader=3, tm_hops=1)
    out = n.on_receive(pkt(reply, 7), 20)
    (g,) = of(out, Send, Graft)
    assert g.to == 7 and g.packet.body.to_node == 7
    assert RoleChange(G, Role.MEMBER) in out
    assert of(out, Broadcast, StopSearch)
    e = n.mtt.get(G)
    assert e.upstream() == 7 and e.leader == 3 and e.hop_count_to_leader == 2
    second = Mgrpl(G, 8, Position(0, 50), 0, Position(0, 0), leader=3, tm_hops=0)
    assert n.on_receive(pkt(second, 8, seq=2), 30) == []
    assert n.mtt.get(G).upstream() == 7


def test_data_search_reply_sends_data_without_graft():
    n = make(k=2)
    out = n.app_send(G, b"p" * 20, 0)
    (b,) = of(out, Broadcast, Mgreq)
    assert not b.packet.body.join_flag
    reply = Mgrpl(G, 7, Position(50, 0), 0, Position(0, 0), leader=7, tm_hops=0)
    out = n.on_receive(pkt(reply, 7), 20)
    assert of(out, Send, Graft) == []
    (d,) = of(out, Send, Data)
    assert d.to == 7 and d.packet.body.payload == b"p" * 20
    assert G not in n.mtt


def test_unsolicited_reply_only_learns():
    n = make(k=2)
    reply = Mgrpl(G, 7, Position(50, 0), 0, Position(0, 0), leader=7, tm_hops=0)
    assert n.on_receive(pkt(reply, 7), 20) == []
    assert n.znt.get(7) is not None and G not in n.mtt


# -- directional selection ----------------------------------------------------

def zone(k, entries):
    z = ZoneNeighborTable(k)
    for name, (x, y), hops, via in entries:
        z.upsert(ZntEntry(name, Position(x, y), name if hops == 1 else via, hops, 0))
    return z


S, TARGET = Position(0, 0), Position(1000, 0)
A, B, C, D, E, F, GG, H, K, M = range(1, 11)


def test_border_nodes_in_cone():
    z = zone(3, [(A, (100, 30), 1, None), (B, (200, 60), 2, A), (GG, (300, 100), 3, A),
                 (C, (-20, 100), 1, None), (D, (-50, 300), 3, C),
                 (E, (100, -40), 1, None), (M, (300, -120), 3, E)])
    stage, picks = select_directional_staged(z, S, TARGET, 3, math.pi / 4)
    assert stage == STAGE_BORDER and picks == [(GG, A), (M, E)]


def test_no_border_uses_farthest_in_cone():
    z = zone(3, [(E, (100, 20), 1, None), (F, (200, 50), 2, E),
                 (H, (100, -30), 1, None), (K, (200, -60), 2, H),
                 (B, (-100, 50), 1, None), (C, (-100, 150), 2, B)])
    stage, picks = select_directional_staged(z, S, TARGET, 3, math.pi / 4)
    assert stage == STAGE_FARTHEST and picks == [(F, E), (K, H)]


def test_nothing_in_cone_uses_every_next_hop():
    z = zone(3, [(B, (-100, 0), 1, None), (C, (-200, 0), 2, B),
                 (E, (0, 100), 1, None), (F, (0, 200), 2, E), (H, (0, -100), 1, None)])
    stage, picks = select_directional_staged(z, S, TARGET, 3, math.pi / 4)
    assert stage == STAGE_ALL and picks == [(C, B), (F, E), (H, H)]


def test_directional_forward_sends_one_copy_per_pick():
    n = make(k=3)
    for name, pos, hops, via in [(A, (100, 30), 1, None), (GG, (300, 100), 3, A),
                                 (E, (100, -40), 1, None), (M, (300, -120), 3, E)]:
        neighbor(n, name, pos, hops, via)
    from seelamp.wire import DirectedTarget
    probe = n.new_packet(Mgreq(G, 0, S, True, NO_HOPS, DirectedTarget(50, TARGET, 0)), 6)
    out = n.directional_forward(probe, TARGET)
    assert isinstance(out[0], Log) and out[0].detail["stage"] == STAGE_BORDER
    assert sorted(s.to for s in of(out, Send)) == [A, E]
    assert {s.packet.body.target.waypoint for s in of(out, Send)} == {GG, M}


# -- leaders and backups ------------------------------------------------------

def test_declare_leader():
    n = make(i=3)
    out = n.declare_leader(G)
    assert RoleChange(G, Role.PRIMARY_ROOT) in out
    assert n.mtt.get(G).hop_count_to_leader == 0
    assert any(isinstance(a, SetTimer) and a.kind == "elect" for a in out)
    plain = make(i=3, plain=True)
    assert not any(isinstance(a, SetTimer) and a.kind == "elect"
                   for a in plain.declare_leader(G))


def test_partitions_elect_one_leader_each():
    cfg = parse_scenario("""
[general]
node_count = 4
end_time_ms = 8000
positions = 0:100 100, 1:200 100, 2:900 900, 3:800 900
[app]
event = 500 join 0 1
event = 600 join 1 1
event = 500 join 2 1
event = 600 join 3 1
""")
    sim = Simulator(cfg)
    sim.finish()
    roots = sorted(i for i, r in sim.roles[1].items() if r is Role.PRIMARY_ROOT)
    assert len(roots) == 2 and roots[0] in (0, 1) and roots[1] in (2, 3)


def test_backup_single_candidate():
    n = make()
    n.declare_leader(G)
    neighbor(n, 5, (50, 0))
    out = n.elect_backup(G)
    (s,) = of(out, Send, Alarm)
    assert s.to == 5 and s.packet.body.kind is AlarmKind.BACKUP_APPOINT
    assert n.backup[G] == 5


def test_backup_no_candidate_retries():
    n = make()
    n.declare_leader(G)
    neighbor(n, 5, (50, 0), speed=50.0)  # too fast
    out = n.elect_backup(G)
    assert of(out, Send) == [] and of(out, SetTimer)[0].kind == "elect"


@given(st.tuples(st.integers(1, 50), st.integers(1, 50)).filter(lambda p: p[0] != p[1]),
       st.floats(1, 200), st.floats(1, 200), st.booleans())
def test_backup_choice_nearest_then_lowest_id(ids, d1, d2, same):
    n = make()
    n.declare_leader(G)
    if same:
        d2 = d1
    neighbor(n, ids[0], (d1, 0))
    neighbor(n, ids[1], (0, d2))
    n.elect_backup(G)
    want = min([(d1, ids[0]), (d2, ids[1])])[1]
    assert n.backup[G] == want


def test_appointee_with_low_battery_declines():
    n = make(i=5)
    n.battery = 0.1 * n.initial_battery
    out = n.on_receive(pkt(Alarm(G, AlarmKind.BACKUP_APPOINT, 5), 0), 10)
    (s,) = of(out, Send, Alarm)
    assert s.packet.body.kind is AlarmKind.POWER_LOW and s.to == 0


# -- tree updates -------------------------------------------------------------

def test_leaf_sends_tree_update_upstream():
    n = make(i=9)
    tree_entry(n, leader=0, hops=2, up=4)
    n.roles[G] = Role.MEMBER
    out = n.periodic_tree_update(G)
    (s,) = of(out, Send, TreeUpdate)
    assert s.to == 4 and s.packet.body.path == (9,)


def test_interior_relaying_does_not_originate():
    n = make(i=4)
    tree_entry(n, leader=0, hops=1, up=0, down=[9])
    n.roles[G] = Role.MEMBER
    n.now = 1000
    relay = n.on_receive(pkt(TreeUpdate(G, (9,)), 9), 1000)
    (s,) = of(relay, Send, TreeUpdate)
    assert s.to == 0 and s.packet.body.path == (9, 4)
    n.now = 2000
    assert of(n.periodic_tree_update(G), Send) == []


def test_chain_path_reaches_backup_and_unchanged_path_stops():
    # leaf 9 -> 8 -> 7 -> backup 6 -> root 0
    nodes = {i: make(i=i) for i in (9, 8, 7, 6)}
    ups = {9: 8, 8: 7, 7: 6, 6: 0}
    for i, node in nodes.items():
        down = [j for j, u in ups.items() if u == i]
        tree_entry(node, leader=0, hops=4 - (9 - i) if i != 6 else 1, up=ups[i], down=down)
        node.roles[G] = Role.MEMBER
    nodes[6].roles[G] = Role.BACKUP_ROOT
    (s,) = of(nodes[9].periodic_tree_update(G), Send, TreeUpdate)
    p = s.packet
    for hop in (8, 7):
        (s,) = of(nodes[hop].on_receive(p, 10), Send, TreeUpdate)
        p = s.packet
    out = nodes[6].on_receive(p, 20)
    assert nodes[6].tree_view[G][9] == (9, 8, 7)
    assert len(nodes[6].tree_view[G][9]) == 3
    (up,) = of(out, Send, TreeUpdate)
    assert up.to == 0  # changed path goes to the primary
    again = Packet(p.seq + 100, p.src, p.origin, p.ttl, p.timestamp, p.body)
    assert of(nodes[6].on_receive(again, 30), Send) == []


def test_update_arriving_back_at_sender_reveals_loop():
    n = make(i=4)
    tree_entry(n, leader=0, hops=2, up=5, down=[6])
    n.roles[G] = Role.INTERMEDIATE
    out = n.on_receive(pkt(TreeUpdate(G, (4, 6)), 6), 10)
    assert any(isinstance(a, Log) and a.event == "loop" for a in out)
    assert n.mtt.get(G).upstream() is None


# -- leaving and power --------------------------------------------------------

def test_leaf_leave_is_one_hop_leave():
    n = make(i=9)
    tree_entry(n, leader=0, hops=2, up=4)
    n.roles[G] = Role.MEMBER
    n.members.add(G)
    out = n.app_leave(G, 10)
    (b,) = of(out, Broadcast)
    assert isinstance(b.packet.body, Leave) and b.ttl == 1
    assert G not in n.mtt


def test_interior_leave_hands_off_to_nearest_outsider():
    n = make(i=4)
    tree_entry(n, leader=0, hops=1, up=0, down=[9])
    n.roles[G] = Role.MEMBER
    for other, pos in ((0, (-100, 0)), (9, (100, 0)), (11, (0, 80)), (12, (0, 30))):
        neighbor(n, other, pos)
    out = n.leave_group(G, 10)
    (alarm,) = of(out, Broadcast, Alarm)
    assert alarm.ttl == 1 and alarm.packet.body.kind is AlarmKind.LEAVING
    assert alarm.packet.body.successor == 12
    (hand,) = of(out, Send, Mgrpl)
    assert hand.to == 12 and hand.packet.body.tm == 0


def test_alarm_receivers_purge_leaver():
    n = make(i=2)
    neighbor(n, 4, (50, 0))
    n.rt.upsert(RtEntry(G, 4, Position(50, 0), 0))
    n.on_receive(pkt(Alarm(G, AlarmKind.LEAVING, 12), 4, ttl=1), 10)
    assert n.znt.get(4) is None and n.rt.lookup(G) is None


def test_downstream_follows_successor():
    n = make(i=9)
    tree_entry(n, leader=0, hops=2, up=4)
    n.roles[G] = Role.MEMBER
    out = n.on_receive(pkt(Alarm(G, AlarmKind.LEAVING, 12), 4, ttl=1), 10)
    assert n.mtt.get(G).upstream() == 12
    assert of(out, Send, TreeUpdate)[0].to == 12


def test_power_threshold_boundary():
    n = make(i=4, power_threshold_fraction=0.15)
    n.battery = 0.15 * n.initial_battery
    assert n.power_check() == []
    n.battery -= 1e-9
    out = n.power_check()
    (b,) = of(out, Broadcast, Alarm)
    assert b.packet.body.kind is AlarmKind.POWER_LOW
    assert len(out) == 1  # not in any tree: alarm only


def test_low_power_interior_hands_off():
    n = make(i=4)
    tree_entry(n, leader=0, hops=1, up=0, down=[9])
    n.roles[G] = Role.INTERMEDIATE
    for other, pos in ((0, (-100, 0)), (9, (100, 0)), (12, (0, 30))):
        neighbor(n, other, pos)
    n.battery = 0.01
    out = n.power_check()
    assert any(isinstance(a, Log) and a.event == "handoff" for a in out)
    assert n.power_check() == []


# -- repair -------------------------------------------------------------------

def test_repair_broadcasts_with_own_hop_count():
    n = make(i=9, k=2)
    tree_entry(n, leader=0, hops=3, up=4)
    n.roles[G] = Role.MEMBER
    out = n.repair_link(G)
    (b,) = of(out, Broadcast, Mgreq)
    assert b.ttl == 2 and b.packet.body.rq_hops == 3 and b.packet.body.join_flag


def test_only_closer_tree_nodes_answer_repair():
    far = make(i=5)
    tree_entry(far, leader=0, hops=3, up=1)
    far.roles[G] = Role.INTERMEDIATE
    req = Mgreq(G, 9, Position(10, 0), True, rq_hops=3)
    assert of(far.on_receive(pkt(req, 9, ttl=2), 10), Send, Mgrpl) == []
    near = make(i=6)
    tree_entry(near, leader=0, hops=1, up=0)
    near.roles[G] = Role.INTERMEDIATE
    (s,) = of(near.on_receive(pkt(req, 9, ttl=2), 10), Send, Mgrpl)
    assert s.to == 9 and s.packet.body.tm_hops == 1


def test_plain_tree_repair_floods():
    n = make(i=9, plain=True)
    tree_entry(n, leader=0, hops=3, up=4)
    n.roles[G] = Role.MEMBER
    (b,) = of(n.repair_link(G), Broadcast, Mgreq)
    assert b.ttl == n.net_diameter


def test_diamond_regraft_to_root():
    # 0 is the root; 3 hangs off 1, and 2 links 3 back to 0 as well
    cfg = parse_scenario("""
[general]
node_count = 4
end_time_ms = 30000
positions = 0:100 100, 1:300 100, 2:100 300, 3:300 300
[radio]
range = 210
[app]
event = 500 join 0 1
event = 3000 join 3 1
event = 12000 kill 1
""")
    sim = Simulator(cfg)
    sim.run_until(11000)
    assert sim.nodes[3].mtt.get(1).upstream() in (1, 2)
    sim.finish()
    e = sim.nodes[3].mtt.get(1)
    assert e is not None and e.upstream() == 2 and e.hop_count_to_leader == 2
    assert sim.nodes[2].mtt.get(1).upstream() == 0


# -- data ---------------------------------------------------------------------

def test_root_sends_on_every_link():
    n = make()
    tree_entry(n, leader=0, hops=0, down=[1, 2, 3])
    n.roles[G] = Role.PRIMARY_ROOT
    out = n.app_send(G, b"d" * 20, 0)
    assert sorted(s.to for s in of(out, Send, Data)) == [1, 2, 3]


def test_leaf_member_delivers_only():
    n = make(i=9)
    tree_entry(n, leader=0, hops=2, up=4)
    n.members.add(G)
    out = n.on_receive(pkt(Data(G, b"d" * 20), 4, origin=1), 10)
    assert [type(a) for a in out] == [Deliver]


def test_intermediate_forwards_without_delivery():
    n = make(i=4)
    tree_entry(n, leader=0, hops=1, up=0, down=[9, 10])
    n.roles[G] = Role.INTERMEDIATE
    out = n.on_receive(pkt(Data(G, b"d" * 20), 9, origin=9), 10)
    assert of(out, Deliver) == []
    assert sorted(s.to for s in of(out, Send, Data)) == [0, 10]
    assert n.on_receive(pkt(Data(G, b"d" * 20), 10, origin=9), 11) == []


def test_unknown_group_data_dropped():
    n = make(i=4)
    out = n.on_receive(pkt(Data(G, b"d" * 20), 9), 10)
    assert [a.event for a in out] == ["drop_unknown_group"]
