"""Spatial helpers: a uniform grid index plus small planar geometry utilities.

The grid buckets points into fixed-size cells (30 m by default) so that
radius queries only touch the neighborhood of cells that could possibly
contain a match; exact distances are always confirmed with the haversine
metric, so the index never changes results, only speeds them up.
"""

from __future__ import annotations

import math
from typing import Iterable, Optional, Sequence

from .feedcore import EARTH_RADIUS_M, GeoPoint, haversine_m

M_PER_DEG_LAT = math.pi / 180.0 * EARTH_RADIUS_M


class GridIndex:
    """Bucket points into ~cell_m meter cells for fast radius queries."""

    def __init__(self, points: Sequence[GeoPoint], cell_m: float = 30.0):
        if cell_m <= 0:
            raise ValueError("cell size must be positive")
        self.points = list(points)
        self.cell_m = float(cell_m)
        ref_lat = self.points[0].lat if self.points else 0.0
        self._m_per_deg_lng = M_PER_DEG_LAT * max(0.01, math.cos(math.radians(ref_lat)))
        self._cells: dict[tuple[int, int], list[int]] = {}
        for i, p in enumerate(self.points):
            self._cells.setdefault(self._cell_of(p), []).append(i)

    def _cell_of(self, p: GeoPoint) -> tuple[int, int]:
        return (
            int(math.floor(p.lat * M_PER_DEG_LAT / self.cell_m)),
            int(math.floor(p.lng * self._m_per_deg_lng / self.cell_m)),
        )

    def query_radius(self, center: GeoPoint, radius_m: float) -> list[int]:
        """Indices of all points within radius_m (inclusive), ascending."""
        ci, cj = self._cell_of(center)
        ring = int(math.ceil(radius_m / self.cell_m)) + 1
        hits: list[int] = []
        for di in range(-ring, ring + 1):
            for dj in range(-ring, ring + 1):
                for idx in self._cells.get((ci + di, cj + dj), ()):
                    if haversine_m(center, self.points[idx]) <= radius_m:
                        hits.append(idx)
        hits.sort()
        return hits

    def nearest_within(self, center: GeoPoint, radius_m: float) -> Optional[tuple[int, float]]:
        """Closest point within radius_m as (index, distance), ties to the
        lowest index; None when nothing is in range."""
        best: Optional[tuple[int, float]] = None
        for idx in self.query_radius(center, radius_m):
            d = haversine_m(center, self.points[idx])
            if best is None or d < best[1]:
                best = (idx, d)
        return best


def _local_xy(p: GeoPoint, ref: GeoPoint) -> tuple[float, float]:
    """Project to meters in a flat frame centered on ref (fine at <1 km)."""
    x = (p.lng - ref.lng) * M_PER_DEG_LAT * math.cos(math.radians(ref.lat))
    y = (p.lat - ref.lat) * M_PER_DEG_LAT
    return x, y


def point_segment_distance_m(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> float:
    """Distance from p to the segment a-b, in meters."""
    ax, ay = _local_xy(a, p)
    bx, by = _local_xy(b, p)
    dx, dy = bx - ax, by - ay
    seg_sq = dx * dx + dy * dy
    if seg_sq == 0.0:
        return math.hypot(ax, ay)
    # p projects to the origin of the local frame
    t = max(0.0, min(1.0, (-(ax * dx) - (ay * dy)) / seg_sq))
    cx, cy = ax + t * dx, ay + t * dy
    return math.hypot(cx, cy)


def point_polyline_distance_m(p: GeoPoint, polyline: Sequence[GeoPoint]) -> float:
    """Distance from p to the nearest segment of an open polyline."""
    if len(polyline) < 2:
        raise ValueError("polyline needs at least two points")
    return min(
        point_segment_distance_m(p, polyline[i], polyline[i + 1])
        for i in range(len(polyline) - 1)
    )


def point_in_polygon(p: GeoPoint, polygon: Sequence[GeoPoint]) -> bool:
    """Ray-casting containment test on the lat/lng plane."""
    if len(polygon) < 3:
        return False
    inside = False
    x, y = p.lng, p.lat
    for i in range(len(polygon)):
        a = polygon[i]
        b = polygon[(i + 1) % len(polygon)]
        ya, yb = a.lat, b.lat
        xa, xb = a.lng, b.lng
        if (ya > y) != (yb > y):
            x_cross = xa + (y - ya) / (yb - ya) * (xb - xa)
            if x < x_cross:
                inside = not inside
    return inside
