"""Scenario builders shared by the test suites."""

import random

import networkx as nx

from seelamp.scenario import parse_scenario


def unit_disk_graph(pts, rng_m):
    g = nx.Graph()
    g.add_nodes_from(range(len(pts)))
    for i, (x1, y1) in enumerate(pts):
        for j in range(i + 1, len(pts)):
            x2, y2 = pts[j]
            if (x1 - x2) ** 2 + (y1 - y2) ** 2 <= rng_m ** 2:
                g.add_edge(i, j)
    return g


def connected_layout(n, seed, side, rng_m=250.0):
    """Uniform placement in a side x side square, redrawn until connected."""
    r = random.Random(f"layout:{seed}")
    while True:
        pts = [(round(r.uniform(0, side), 3), round(r.uniform(0, side), 3)) for _ in range(n)]
        g = unit_disk_graph(pts, rng_m)
        if nx.is_connected(g):
            return pts, g


def positions_line(pts):
    return ", ".join(f"{i}:{x} {y}" for i, (x, y) in enumerate(pts))


def static_scenario(pts, side, *, seed=1, end=20000, protocol="seelamp", body="",
                    rng_m=250.0, **general):
    extra = "".join(f"{k} = {v}\n" for k, v in general.items())
    return parse_scenario(f"""
[general]
seed = {seed}
node_count = {len(pts)}
width = {side}
height = {side}
end_time_ms = {end}
protocol = {protocol}
positions = {positions_line(pts)}
{extra}[radio]
range = {rng_m}
{body}""")
