"""Fog layer: contextualization steps 1-6, stop clustering, feedback, storage.

The fog node collects the edge batches of a configurable period (default six
hours), enriches every record with station / street / intersection / trip
context, clusters the period's stops to find service disruptions, persists
everything to a date-partitioned store, and forwards only cluster members
toward the cloud.
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, field, replace
from datetime import date, datetime
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .edge import EdgeBatch
from .feedcore import (
    Category,
    Direction,
    Feedback,
    FeedbackKind,
    GeoPoint,
    LatencyClass,
    Layer,
    Motion,
    MovementRecord,
    TripRole,
    _Missing,
    format_timestamp,
    haversine_m,
    serialize_context,
    CONTEXT_CSV_HEADER,
)
from .geoindex import GridIndex, point_in_polygon, point_polyline_distance_m
from .ingest import GeoDB, ScheduleDB

STATION_RADIUS_M = 30.0
STREET_MAX_DISTANCE_M = 20.0
INTERSECTION_RADIUS_M = 30.0
DBSCAN_EPS_M = 15.0
DBSCAN_MIN_PTS = 8
FOG_BATCH_PERIOD_S = 6 * 3600

# Ten context attributes forwarded to the cloud, plus the cluster tag.
CLOUD_ROW_HEADER = [
    "trip_id",
    "lat",
    "lng",
    "gps_timestamp",
    "street_name",
    "direction",
    "stop_id",
    "movement_sequence",
    "arrival_time",
    "target_class",
    "cluster_id",
]


# ---------------------------------------------------------------------------
# Station buffers and step 1: categorization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StationBuffer:
    """Circular catchment zone around one station center."""

    station_id: str
    center: GeoPoint
    radius_m: float = STATION_RADIUS_M

    def __post_init__(self):
        if self.radius_m <= 0:
            raise ValueError("buffer radius must be positive")


def station_buffers(sched: ScheduleDB, radius_m: float = STATION_RADIUS_M) -> list[StationBuffer]:
    """One buffer per station, in station-id order for deterministic ties."""
    return [
        StationBuffer(s.station_id, s.point, radius_m)
        for s in sorted(sched.stations.values(), key=lambda s: s.station_id)
    ]


def _nearest_buffer(
    point: GeoPoint, buffers: Sequence[StationBuffer], index: Optional[GridIndex] = None
) -> Optional[tuple[float, StationBuffer]]:
    """Nearest buffer whose zone contains the point (inclusive boundary)."""
    if index is not None and buffers:
        hit = index.nearest_within(point, buffers[0].radius_m)
        return None if hit is None else (hit[1], buffers[hit[0]])
    best: Optional[tuple[float, StationBuffer]] = None
    for b in buffers:
        d = haversine_m(point, b.center)
        if d <= b.radius_m and (best is None or d < best[0]):
            best = (d, b)
    return best


def buffer_index(buffers: Sequence[StationBuffer]) -> GridIndex:
    radii = {b.radius_m for b in buffers}
    if len(radii) > 1:
        raise ValueError("grid lookup requires a uniform buffer radius")
    return GridIndex([b.center for b in buffers])


def categorize(
    rec: MovementRecord,
    buffers: Sequence[StationBuffer],
    index: Optional[GridIndex] = None,
) -> MovementRecord:
    """Step 1: cross the motion tag with station-buffer containment."""
    if rec.motion is None:
        raise ValueError("categorize needs a motion-tagged record")
    inside = _nearest_buffer(rec.base.point, buffers, index) is not None
    if rec.motion is Motion.STOP:
        category = Category.STOPOVER if inside else Category.SUSPENSION
    else:
        category = Category.PASSING if inside else Category.RUNNING
    return replace(rec, category=category)


# ---------------------------------------------------------------------------
# Step 2: street annotation
# ---------------------------------------------------------------------------


def annotate_street(
    rec: MovementRecord, geo: GeoDB, max_distance_m: float = STREET_MAX_DISTANCE_M
) -> MovementRecord:
    """Step 2: name of the nearest street polyline within the GPS tolerance."""
    if not geo.streets:
        return rec
    scored = [
        (point_polyline_distance_m(rec.base.point, s.points), s.name) for s in geo.streets
    ]
    d_min = min(d for d, _ in scored)
    if d_min > max_distance_m:
        return rec
    name = min(n for d, n in scored if d <= d_min + 1e-9)
    return replace(rec, street_name=name)


# ---------------------------------------------------------------------------
# Step 3: direction and station identification
# ---------------------------------------------------------------------------


def _route_of(rec: MovementRecord, sched: ScheduleDB) -> Optional[str]:
    rta = rec.base.route_id_rta
    if not isinstance(rta, _Missing):
        route = str(rta)
        if any(key[0] == route for key in sched.station_order):
            return route
    routes = {key[0] for key in sched.station_order}
    return next(iter(routes)) if len(routes) == 1 else None


def identify_station(
    records: Sequence[MovementRecord],
    sched: ScheduleDB,
    radius_m: float = STATION_RADIUS_M,
    route_id: Optional[str] = None,
) -> list[MovementRecord]:
    """Step 3: split the trip at its middle record into Outbound then Return,
    and resolve each in-buffer record to a station of the route's ordered
    stop list for that direction.

    A trip of fewer than two records has no determinable direction and is
    returned untouched.
    """
    if len(records) < 2:
        return list(records)
    mid = len(records) // 2
    route = route_id if route_id is not None else _route_of(records[0], sched)
    out: list[MovementRecord] = []
    for k, rec in enumerate(records):
        direction = Direction.OUTBOUND if k < mid else Direction.RETURN
        rec = replace(rec, direction=direction)
        if rec.category in (Category.STOPOVER, Category.PASSING) and route is not None:
            candidates = sched.station_order.get((route, direction), [])
            best: Optional[tuple[float, str]] = None
            for sid in candidates:
                station = sched.stations.get(sid)
                if station is None:
                    continue
                d = haversine_m(rec.base.point, station.point)
                if d <= radius_m and (best is None or d < best[0]):
                    best = (d, sid)
            if best is not None:
                rec = replace(rec, station_id=best[1])
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# Step 4: intersections
# ---------------------------------------------------------------------------


def identify_intersection(
    rec: MovementRecord, geo: GeoDB, radius_m: float = INTERSECTION_RADIUS_M
) -> MovementRecord:
    """Step 4: nearest intersection whose circular zone contains the point."""
    best: Optional[tuple[float, str]] = None
    for x in geo.intersections:
        d = haversine_m(rec.base.point, x.point)
        if d <= radius_m and (best is None or d < best[0]):
            best = (d, x.intersection_id)
    return rec if best is None else replace(rec, intersection_id=best[1])


# ---------------------------------------------------------------------------
# Step 5: arrival and departure times
# ---------------------------------------------------------------------------


def arrival_departure(run: Sequence[MovementRecord]) -> tuple[datetime, datetime]:
    """Step 5: actual arrival = first timestamp of a stopover run, actual
    departure = its last timestamp."""
    if not run:
        raise ValueError("empty stopover run")
    stations = {r.station_id for r in run}
    if len(stations) > 1:
        raise ValueError(f"stopover run spans several stations: {sorted(map(str, stations))}")
    return run[0].base.timestamp, run[-1].base.timestamp


def apply_arrival_departure(records: Sequence[MovementRecord]) -> list[MovementRecord]:
    """Stamp every record of each consecutive same-station Stopover run with
    the run's arrival and departure times."""
    out = list(records)
    i = 0
    while i < len(out):
        rec = out[i]
        if rec.category is not Category.STOPOVER or rec.station_id is None:
            i += 1
            continue
        j = i
        while (
            j + 1 < len(out)
            and out[j + 1].category is Category.STOPOVER
            and out[j + 1].station_id == rec.station_id
        ):
            j += 1
        arrive, depart = arrival_departure(out[i : j + 1])
        for k in range(i, j + 1):
            out[k] = replace(out[k], arrival_time=arrive, departure_time=depart)
        i = j + 1
    return out


# ---------------------------------------------------------------------------
# Step 6: origin / destination tagging
# ---------------------------------------------------------------------------


def tag_origin_destination(records: Sequence[MovementRecord]) -> list[MovementRecord]:
    """Step 6: first tuple Origin, last Destination, the rest sequentially
    indexed Intermediates.  A single-record trip collapses to Origin."""
    n = len(records)
    out = []
    for k, rec in enumerate(records):
        if k == 0:
            role = TripRole.ORIGIN
        elif k == n - 1:
            role = TripRole.DESTINATION
        else:
            role = TripRole.INTERMEDIATE
        out.append(replace(rec, trip_role=role, sequence_index=k))
    return out


# ---------------------------------------------------------------------------
# Whole-trip contextualization
# ---------------------------------------------------------------------------


def contextualize_trip(
    records: Sequence[MovementRecord],
    sched: ScheduleDB,
    geo: Optional[GeoDB] = None,
    buffers: Optional[Sequence[StationBuffer]] = None,
    index: Optional[GridIndex] = None,
    station_radius_m: float = STATION_RADIUS_M,
    street_max_m: float = STREET_MAX_DISTANCE_M,
    intersection_radius_m: float = INTERSECTION_RADIUS_M,
) -> list[MovementRecord]:
    """Steps 1-6 over one trip's timestamp-ordered records."""
    if buffers is None:
        buffers = station_buffers(sched, station_radius_m)
    out = [categorize(r, buffers, index) for r in records]
    if geo is not None:
        out = [annotate_street(r, geo, street_max_m) for r in out]
    out = identify_station(out, sched, station_radius_m)
    if geo is not None:
        out = [identify_intersection(r, geo, intersection_radius_m) for r in out]
    out = apply_arrival_departure(out)
    return tag_origin_destination(out)


# ---------------------------------------------------------------------------
# DBSCAN over the period's stops
# ---------------------------------------------------------------------------


@dataclass
class SpatialCluster:
    """A dense knot of stopped records.

    Nominally holds at least min_pts members; a cluster formed later can in
    principle hold fewer when an earlier cluster already claimed shared
    border points.
    """

    cluster_id: int
    members: list[MovementRecord]
    centroid: GeoPoint
    nearest_station: Optional[tuple[str, float]] = None


def dbscan_indices(
    points: Sequence[GeoPoint],
    eps_m: float = DBSCAN_EPS_M,
    min_pts: int = DBSCAN_MIN_PTS,
) -> tuple[list[list[int]], list[int]]:
    """Classic single-pass DBSCAN with a haversine metric.

    A core point counts itself among its neighbors.  Clusters are grown in
    input order, so a border point in reach of two clusters belongs to the
    one discovered first.  Returns (clusters, noise) as index lists.
    """
    n = len(points)
    labels: list[Optional[int]] = [None] * n
    NOISE = -1
    if n == 0:
        return [], []
    index = GridIndex(points, cell_m=30.0)
    clusters: list[list[int]] = []
    for i in range(n):
        if labels[i] is not None:
            continue
        neighbors = index.query_radius(points[i], eps_m)
        if len(neighbors) < min_pts:
            labels[i] = NOISE
            continue
        cid = len(clusters)
        clusters.append([])
        labels[i] = cid
        queue = deque(j for j in neighbors if j != i)
        while queue:
            j = queue.popleft()
            if labels[j] == NOISE:
                labels[j] = cid  # border point adopted by the first cluster to reach it
                continue
            if labels[j] is not None:
                continue
            labels[j] = cid
            reach = index.query_radius(points[j], eps_m)
            if len(reach) >= min_pts:
                queue.extend(reach)
    noise: list[int] = []
    for i, label in enumerate(labels):
        if label == NOISE:
            noise.append(i)
        else:
            clusters[label].append(i)
    return clusters, noise


def cluster_stops(
    records: Sequence[MovementRecord],
    eps_m: float = DBSCAN_EPS_M,
    min_pts: int = DBSCAN_MIN_PTS,
    buffers: Sequence[StationBuffer] = (),
    station_radius_m: float = STATION_RADIUS_M,
) -> tuple[list[SpatialCluster], list[MovementRecord]]:
    """Cluster Stop-tagged records; non-Stop records are rejected."""
    for r in records:
        if r.motion is not Motion.STOP:
            raise ValueError("clustering applies to Stop-tagged records only")
    points = [r.base.point for r in records]
    groups, noise_idx = dbscan_indices(points, eps_m, min_pts)
    clusters: list[SpatialCluster] = []
    for cid, member_idx in enumerate(groups):
        members = [records[i] for i in member_idx]
        centroid = GeoPoint(
            sum(points[i].lat for i in member_idx) / len(member_idx),
            sum(points[i].lng for i in member_idx) / len(member_idx),
        )
        near = _nearest_buffer(centroid, buffers)
        clusters.append(
            SpatialCluster(
                cluster_id=cid,
                members=members,
                centroid=centroid,
                nearest_station=None if near is None else (near[1].station_id, near[0]),
            )
        )
    return clusters, [records[i] for i in noise_idx]


# ---------------------------------------------------------------------------
# Feedback
# ---------------------------------------------------------------------------


def fog_feedback(
    clusters: Sequence[SpatialCluster],
    depot: Optional[Sequence[GeoPoint]],
    now: datetime,
) -> list[Feedback]:
    """One message per cluster: a congestion alert named after the nearest
    station when one is in range, or a service interruption when the knot of
    stopped buses sits inside the depot zone."""
    out: list[Feedback] = []
    for c in clusters:
        if depot and point_in_polygon(c.centroid, depot):
            out.append(
                Feedback(
                    layer=Layer.FOG,
                    latency_class=LatencyClass.NEAR_REAL_TIME,
                    kind=FeedbackKind.SERVICE_INTERRUPTION,
                    subject=f"cluster-{c.cluster_id}",
                    detail=f"{len(c.members)} stops clustered inside the depot zone",
                    emitted_at=now,
                )
            )
            continue
        subject = c.nearest_station[0] if c.nearest_station else f"cluster-{c.cluster_id}"
        where = (
            f"{c.nearest_station[1]:.1f} m from station {c.nearest_station[0]}"
            if c.nearest_station
            else f"at ({c.centroid.lat:.5f}, {c.centroid.lng:.5f})"
        )
        out.append(
            Feedback(
                layer=Layer.FOG,
                latency_class=LatencyClass.NEAR_REAL_TIME,
                kind=FeedbackKind.CONGESTION_CLUSTER,
                subject=subject,
                detail=f"{len(c.members)} stops clustered {where}",
                emitted_at=now,
            )
        )
    return out


# ---------------------------------------------------------------------------
# The fog node
# ---------------------------------------------------------------------------


@dataclass
class FogResult:
    """Everything one processed fog period produced."""

    processed_at: datetime
    contextualized: list[MovementRecord]
    clusters: list[SpatialCluster]
    noise: list[MovementRecord]
    feedback: list[Feedback]
    cloud_rows: list[list[str]]
    persisted: list[Path] = field(default_factory=list)


def cloud_row(rec: MovementRecord, cluster_id: int) -> list[str]:
    base = rec.base
    trip = base.trip_id_tta
    return [
        "N/A" if isinstance(trip, _Missing) else str(trip),
        repr(base.lat),
        repr(base.lng),
        format_timestamp(base.timestamp),
        rec.street_name or "",
        rec.direction.value if rec.direction else "",
        rec.station_id or "",
        "" if rec.sequence_index is None else str(rec.sequence_index),
        format_timestamp(rec.arrival_time) if rec.arrival_time else "",
        "",  # target_class: labeled at the cloud, blank in transit
        str(cluster_id),
    ]


def encode_cloud_rows(rows: Iterable[list[str]]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf)
    for row in rows:
        writer.writerow(row)
    return buf.getvalue().encode("utf-8")


def decode_cloud_rows(payload: bytes) -> list[list[str]]:
    return [row for row in csv.reader(io.StringIO(payload.decode("utf-8"))) if row]


class FogNode:
    """Collects edge batches and processes them one period at a time."""

    def __init__(
        self,
        sched: ScheduleDB,
        geo: Optional[GeoDB] = None,
        depot: Optional[Sequence[GeoPoint]] = None,
        eps_m: float = DBSCAN_EPS_M,
        min_pts: int = DBSCAN_MIN_PTS,
        station_radius_m: float = STATION_RADIUS_M,
        street_max_m: float = STREET_MAX_DISTANCE_M,
        intersection_radius_m: float = INTERSECTION_RADIUS_M,
        batch_period_s: int = FOG_BATCH_PERIOD_S,
        persist_dir: Optional[str | Path] = None,
    ):
        if batch_period_s <= 0:
            raise ValueError("batch period must be positive")
        self.sched = sched
        self.geo = geo
        self.depot = list(depot) if depot else None
        self.eps_m = eps_m
        self.min_pts = min_pts
        self.station_radius_m = station_radius_m
        self.street_max_m = street_max_m
        self.intersection_radius_m = intersection_radius_m
        self.batch_period_s = batch_period_s
        self.persist_dir = Path(persist_dir) if persist_dir is not None else None
        self.buffers = station_buffers(sched, station_radius_m)
        self._index = buffer_index(self.buffers) if self.buffers else None
        self._pending: list[MovementRecord] = []
        self.records_in = 0
        self.records_stored = 0

    def receive(self, batch: EdgeBatch) -> None:
        self._pending.extend(batch.records)
        self.records_in += len(batch.records)

    def pending_count(self) -> int:
        return len(self._pending)

    def process(self, now: datetime) -> FogResult:
        """Contextualize, cluster, and persist everything buffered so far."""
        trips: dict[tuple[date, str], list[MovementRecord]] = {}
        for rec in self._pending:
            trip = rec.base.trip_id_tta
            key = (rec.base.service_date(), "" if isinstance(trip, _Missing) else str(trip))
            trips.setdefault(key, []).append(rec)
        self._pending = []

        contextualized: list[MovementRecord] = []
        for (day, trip), records in sorted(trips.items()):
            records = sorted(records, key=lambda r: r.base.timestamp)
            if trip == "":
                # No trip context: only the per-record enrichments apply.
                done = [categorize(r, self.buffers, self._index) for r in records]
                if self.geo is not None:
                    done = [annotate_street(r, self.geo, self.street_max_m) for r in done]
                    done = [identify_intersection(r, self.geo, self.intersection_radius_m) for r in done]
            else:
                done = contextualize_trip(
                    records,
                    self.sched,
                    self.geo,
                    buffers=self.buffers,
                    index=self._index,
                    station_radius_m=self.station_radius_m,
                    street_max_m=self.street_max_m,
                    intersection_radius_m=self.intersection_radius_m,
                )
            contextualized.extend(done)

        stops = sorted(
            (r for r in contextualized if r.motion is Motion.STOP),
            key=lambda r: (r.base.timestamp, str(r.base.trip_id_tta), r.base.lat, r.base.lng),
        )
        clusters, noise = cluster_stops(
            stops, self.eps_m, self.min_pts, self.buffers, self.station_radius_m
        )
        feedback = fog_feedback(clusters, self.depot, now)
        rows = [cloud_row(rec, c.cluster_id) for c in clusters for rec in c.members]
        persisted = self._persist(contextualized)
        return FogResult(
            processed_at=now,
            contextualized=contextualized,
            clusters=clusters,
            noise=noise,
            feedback=feedback,
            cloud_rows=rows,
            persisted=persisted,
        )

    def _persist(self, records: Sequence[MovementRecord]) -> list[Path]:
        if self.persist_dir is None or not records:
            return []
        self.persist_dir.mkdir(parents=True, exist_ok=True)
        by_day: dict[date, list[MovementRecord]] = {}
        for rec in records:
            by_day.setdefault(rec.base.service_date(), []).append(rec)
        paths = []
        for day, day_records in sorted(by_day.items()):
            path = self.persist_dir / f"records-{day.isoformat()}.csv"
            fresh = not path.exists()
            with path.open("a", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                if fresh:
                    writer.writerow(CONTEXT_CSV_HEADER)
                for rec in day_records:
                    writer.writerow(serialize_context(rec))
            self.records_stored += len(day_records)
            paths.append(path)
        return paths
