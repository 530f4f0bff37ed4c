"""Planar geometry used by the location-aware parts of the protocol.

Positions are in meters on a flat rectangle. Bearings are radians in
(-pi, pi], measured counter-clockwise from the +x axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

# Tolerances the property suites hold these functions to.
TRIANGLE_RTOL = 1e-9  # relative slack in d(a,c) <= d(a,b) + d(b,c)
BEARING_ATOL = 1e-9  # |bearing(a,b) - bearing(b,a)| equals pi within this


class CoincidentPoints(ValueError):
    """Raised when a direction is requested between two identical points."""


@dataclass(frozen=True, slots=True)
class Position:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite position ({self.x}, {self.y})")

    def __iter__(self):
        yield self.x
        yield self.y


def distance(a: Position, b: Position) -> float:
    return math.hypot(b.x - a.x, b.y - a.y)


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def bearing(origin: Position, to: Position) -> float:
    dx = to.x - origin.x
    dy = to.y - origin.y
    if dx == 0.0 and dy == 0.0:
        raise CoincidentPoints(f"bearing undefined from {origin} to itself")
    return normalize_angle(math.atan2(dy, dx))


def angular_difference(a: float, b: float) -> float:
    """Absolute difference between two bearings, wrapped into [0, pi]."""
    return abs(normalize_angle(a - b))


def within_cone(origin: Position, target: Position, candidate: Position,
                theta_t: float) -> bool:
    """True when `candidate` lies within +/- theta_t of the origin->target ray.

    The boundary is inclusive and a candidate sitting on the origin counts
    as inside the cone.
    """
    axis = bearing(origin, target)
    if candidate.x == origin.x and candidate.y == origin.y:
        return True
    return angular_difference(bearing(origin, candidate), axis) <= theta_t
