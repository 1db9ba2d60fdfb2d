"""Data sources: schedule/geography loaders, the synthetic feed generator, replay.

Three ways records enter the pipeline: loaded from a static transit schedule
(GTFS subset) plus a geographic database (GeoJSON), synthesized by the
deterministic feed generator, or replayed from a canonical feed CSV.  The
generator also produces a GroundTruth side channel that only tests and
reports consume; pipeline nodes never see it.
"""

from __future__ import annotations

import csv
import json
import math
import random
import time
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

from .feedcore import (
    Direction,
    FeedError,
    FeedTuple,
    GeoPoint,
    MalformedRecord,
    StreamElement,
    classify_record,
    format_timestamp,
    parse_hms,
    serialize_tuple,
)
from .geoindex import M_PER_DEG_LAT, point_segment_distance_m


class LoadError(FeedError):
    """A schedule or geography input failed validation."""


class GenerationError(FeedError):
    """The synthetic feed configuration cannot be realized."""


# ---------------------------------------------------------------------------
# Schedule database (GTFS-static subset)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Station:
    station_id: str
    name: str
    point: GeoPoint


@dataclass(frozen=True)
class ScheduledTrip:
    trip_id: str
    route_id: str
    service_days: frozenset[int]  # 0=Monday .. 6=Sunday
    start_s: int  # seconds of day
    end_s: int


@dataclass
class ScheduleDB:
    """Static schedule: stations, trips, per-stop arrivals, station order."""

    stations: dict[str, Station]
    scheduled_trips: list[ScheduledTrip]
    scheduled_arrivals: dict[tuple[str, str], int]  # (trip_id, station_id) -> seconds
    station_order: dict[tuple[str, Direction], list[str]]

    def __post_init__(self):
        self._by_id = {t.trip_id: t for t in self.scheduled_trips}

    def trip(self, trip_id: str) -> Optional[ScheduledTrip]:
        return self._by_id.get(trip_id)

    def trips_on(self, weekday: int) -> list[ScheduledTrip]:
        return [t for t in self.scheduled_trips if weekday in t.service_days]

    def scheduled_duration(self, trip_id: str) -> Optional[int]:
        t = self.trip(trip_id)
        return None if t is None else t.end_s - t.start_s


_WEEKDAY_COLUMNS = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")


def _read_gtfs_file(root: Path, name: str) -> list[dict]:
    path = root / name
    if not path.exists():
        raise LoadError(f"{name}: file missing from {root}")
    with path.open(newline="", encoding="utf-8-sig") as fh:
        return list(csv.DictReader(fh))


def load_gtfs(root: str | Path) -> ScheduleDB:
    """Load the five-file GTFS-static subset into a ScheduleDB.

    Referential problems (a stop_times row naming an unknown stop, a trip
    whose schedule ends before it starts) raise LoadError naming the row.
    """
    root = Path(root)
    stations: dict[str, Station] = {}
    for i, row in enumerate(_read_gtfs_file(root, "stops.txt"), start=2):
        sid = (row.get("stop_id") or "").strip()
        if not sid:
            raise LoadError(f"stops.txt row {i}: empty stop_id")
        if sid in stations:
            raise LoadError(f"stops.txt row {i}: duplicate stop_id {sid}")
        try:
            point = GeoPoint(float(row["stop_lat"]), float(row["stop_lon"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"stops.txt row {i}: bad coordinates for stop {sid}") from exc
        stations[sid] = Station(sid, (row.get("stop_name") or sid).strip(), point)

    route_ids = set()
    for i, row in enumerate(_read_gtfs_file(root, "routes.txt"), start=2):
        rid = (row.get("route_id") or "").strip()
        if not rid:
            raise LoadError(f"routes.txt row {i}: empty route_id")
        route_ids.add(rid)

    services: dict[str, frozenset[int]] = {}
    for i, row in enumerate(_read_gtfs_file(root, "calendar.txt"), start=2):
        sid = (row.get("service_id") or "").strip()
        if not sid:
            raise LoadError(f"calendar.txt row {i}: empty service_id")
        days = frozenset(d for d, col in enumerate(_WEEKDAY_COLUMNS) if (row.get(col) or "0").strip() == "1")
        services[sid] = days

    trip_meta: dict[str, tuple[str, str, Direction]] = {}
    for i, row in enumerate(_read_gtfs_file(root, "trips.txt"), start=2):
        tid = (row.get("trip_id") or "").strip()
        rid = (row.get("route_id") or "").strip()
        svc = (row.get("service_id") or "").strip()
        if not tid:
            raise LoadError(f"trips.txt row {i}: empty trip_id")
        if rid not in route_ids:
            raise LoadError(f"trips.txt row {i}: trip {tid} references unknown route {rid}")
        if svc not in services:
            raise LoadError(f"trips.txt row {i}: trip {tid} references unknown service {svc}")
        direction = Direction.RETURN if (row.get("direction_id") or "0").strip() == "1" else Direction.OUTBOUND
        trip_meta[tid] = (rid, svc, direction)

    stop_times: dict[str, list[tuple[int, str, int]]] = {}
    arrivals: dict[tuple[str, str], int] = {}
    for i, row in enumerate(_read_gtfs_file(root, "stop_times.txt"), start=2):
        tid = (row.get("trip_id") or "").strip()
        sid = (row.get("stop_id") or "").strip()
        if tid not in trip_meta:
            raise LoadError(f"stop_times.txt row {i}: unknown trip {tid}")
        if sid not in stations:
            raise LoadError(f"stop_times.txt row {i}: trip {tid} references unknown stop {sid}")
        try:
            seq = int(row["stop_sequence"])
            arr = parse_hms(row["arrival_time"])
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"stop_times.txt row {i}: bad stop_sequence or arrival_time") from exc
        stop_times.setdefault(tid, []).append((seq, sid, arr))
        arrivals[(tid, sid)] = arr

    trips: list[ScheduledTrip] = []
    order_candidates: dict[tuple[str, Direction], list[str]] = {}
    for tid, (rid, svc, direction) in trip_meta.items():
        times = sorted(stop_times.get(tid, []))
        if not times:
            raise LoadError(f"trips.txt: trip {tid} has no stop_times rows")
        start = times[0][2]
        end = times[-1][2]
        if end <= start:
            raise LoadError(f"stop_times.txt: trip {tid} ends at or before its start")
        trips.append(ScheduledTrip(tid, rid, services[svc], start, end))
        key = (rid, direction)
        ordered = [sid for _, sid, _ in times]
        if len(ordered) > len(order_candidates.get(key, [])):
            order_candidates[key] = ordered

    station_order = dict(order_candidates)
    # A route observed in only one direction gets the reverse order for the other.
    for (rid, direction), ordered in list(order_candidates.items()):
        other = Direction.RETURN if direction is Direction.OUTBOUND else Direction.OUTBOUND
        station_order.setdefault((rid, other), list(reversed(ordered)))

    trips.sort(key=lambda t: (t.start_s, t.trip_id))
    return ScheduleDB(stations, trips, arrivals, station_order)


# ---------------------------------------------------------------------------
# Geographic database (GeoJSON subset)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Street:
    name: str
    points: tuple[GeoPoint, ...]


@dataclass(frozen=True)
class Intersection:
    intersection_id: str
    point: GeoPoint


@dataclass
class GeoDB:
    streets: list[Street]
    intersections: list[Intersection]


def load_geojson(path: str | Path) -> GeoDB:
    """Load streets (LineString + name) and intersections (Point + id)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path.name}: unreadable GeoJSON: {exc}") from exc
    if doc.get("type") != "FeatureCollection":
        raise LoadError(f"{path.name}: expected a FeatureCollection")
    streets: list[Street] = []
    intersections: list[Intersection] = []
    seen_ids: set[str] = set()
    for i, feature in enumerate(doc.get("features", [])):
        geom = feature.get("geometry") or {}
        props = feature.get("properties") or {}
        gtype = geom.get("type")
        if gtype == "LineString":
            name = props.get("name")
            if not name:
                raise LoadError(f"feature {i}: LineString without a name property")
            coords = geom.get("coordinates") or []
            if len(coords) < 2:
                raise LoadError(f"feature {i}: street {name!r} needs at least two points")
            points = tuple(GeoPoint(lat, lng) for lng, lat in coords)
            streets.append(Street(str(name), points))
        elif gtype == "Point":
            iid = props.get("intersection_id")
            if not iid:
                raise LoadError(f"feature {i}: Point without an intersection_id property")
            if str(iid) in seen_ids:
                raise LoadError(f"feature {i}: duplicate intersection_id {iid}")
            seen_ids.add(str(iid))
            lng, lat = geom.get("coordinates", (None, None))
            intersections.append(Intersection(str(iid), GeoPoint(lat, lng)))
        else:
            raise LoadError(f"feature {i}: unsupported geometry type {gtype!r}")
    return GeoDB(streets, intersections)


def geodb_to_geojson(geo: GeoDB) -> dict:
    features = []
    for s in geo.streets:
        features.append(
            {
                "type": "Feature",
                "properties": {"name": s.name},
                "geometry": {"type": "LineString", "coordinates": [[p.lng, p.lat] for p in s.points]},
            }
        )
    for x in geo.intersections:
        features.append(
            {
                "type": "Feature",
                "properties": {"intersection_id": x.intersection_id},
                "geometry": {"type": "Point", "coordinates": [x.point.lng, x.point.lat]},
            }
        )
    return {"type": "FeatureCollection", "features": features}


# ---------------------------------------------------------------------------
# Synthetic feed configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MissingTripAt:
    """Remove every trip starting within [hour, hour+1) on the given day."""

    day: int
    hour: int


@dataclass(frozen=True)
class CongestionAt:
    """Pause trips that pass near the point, adding stopped dwell time."""

    point: GeoPoint
    extra_dwell_s: int
    day: Optional[int] = None  # None applies to every day


@dataclass(frozen=True)
class StormDay:
    """Scale every leg travel time on the given day (with per-trip jitter)."""

    day: int
    slowdown: float


@dataclass(frozen=True)
class TripDurationAt:
    """Force the actual duration of trips starting within [hour, hour+1)."""

    day: int
    hour: int
    duration_s: int


@dataclass(frozen=True)
class DuplicateRate:
    p: float


@dataclass(frozen=True)
class DropRate:
    p: float


@dataclass(frozen=True)
class CorruptRate:
    p: float


Anomaly = Union[MissingTripAt, CongestionAt, StormDay, TripDurationAt, DuplicateRate, DropRate, CorruptRate]

BUS_SPEED_M_S = 8.0
NOMINAL_DWELL_S = 25
DWELL_CHOICES = (10, 15, 20, 25, 30, 35, 40)
SERVICE_START_S = 5 * 3600
LAST_START_S = 23 * 3600 + 15 * 60


@dataclass
class SynthConfig:
    """Everything the deterministic generator needs to build a feed."""

    route_id: str = "51"
    route_name: str = "Route 51"
    weekday_trips: int = 66
    sunday_trips: int = 23
    trip_duration_s: int = 2700
    sample_period_s: int = 5
    gps_noise_sigma_m: float = 0.0
    n_stations: int = 12
    n_vehicles: int = 5
    days: int = 1
    start_date: date = date(2017, 2, 14)
    anomalies: list[Anomaly] = field(default_factory=list)
    rng_seed: int = 42

    def validate(self) -> None:
        if self.weekday_trips <= 0 or self.sunday_trips <= 0:
            raise GenerationError("trip counts must be positive")
        if self.trip_duration_s <= 0 or self.sample_period_s <= 0:
            raise GenerationError("durations must be positive")
        if self.trip_duration_s % self.sample_period_s:
            raise GenerationError("trip_duration_s must be a multiple of sample_period_s")
        if self.n_stations < 2:
            raise GenerationError("a route needs at least two stations")
        if self.n_vehicles <= 0 or self.days <= 0:
            raise GenerationError("n_vehicles and days must be positive")
        if self.gps_noise_sigma_m < 0:
            raise GenerationError("gps_noise_sigma_m must be non-negative")
        for a in self.anomalies:
            if isinstance(a, (DuplicateRate, DropRate, CorruptRate)) and not 0.0 <= a.p <= 1.0:
                raise GenerationError(f"{type(a).__name__} probability must be within [0, 1]")
            if isinstance(a, StormDay) and a.slowdown <= 0:
                raise GenerationError("StormDay slowdown must be positive")
            if isinstance(a, TripDurationAt) and a.duration_s <= 0:
                raise GenerationError("TripDurationAt duration must be positive")
        if self.leg_travel_s() < 30:
            raise GenerationError("trip_duration_s too small for n_stations")

    def leg_travel_s(self) -> int:
        """Nominal seconds per station-to-station leg, on the sample grid."""
        k = self.n_stations
        budget = self.trip_duration_s - self.sample_period_s - max(DWELL_CHOICES) * k
        return int(budget // (k - 1) // 5 * 5)


@dataclass
class SynthNetwork:
    sched: ScheduleDB
    geo: GeoDB
    dispatch: dict[str, int]  # trip_id -> vehicle number
    depot: list[GeoPoint]


def _meters_to_point(origin: GeoPoint, x_m: float, y_m: float) -> GeoPoint:
    lat = origin.lat + y_m / M_PER_DEG_LAT
    lng = origin.lng + x_m / (M_PER_DEG_LAT * math.cos(math.radians(origin.lat)))
    return GeoPoint(lat, lng)


_HEADINGS = ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))


def synthesize_network(cfg: SynthConfig, origin: GeoPoint = GeoPoint(46.06, -64.85)) -> SynthNetwork:
    """Build a synthetic route: stations on a bent path, streets along it,
    intersections at the bends, a weekday/Sunday schedule, and a round-robin
    vehicle dispatch."""
    cfg.validate()
    spacing = cfg.leg_travel_s() * BUS_SPEED_M_S
    coords = [(0.0, 0.0)]
    heading = 0
    for i in range(1, cfg.n_stations):
        if i % 4 == 0:
            heading = (heading + 1) % 4
        dx, dy = _HEADINGS[heading]
        px, py = coords[-1]
        coords.append((px + dx * spacing, py + dy * spacing))
    station_points = [_meters_to_point(origin, x, y) for x, y in coords]

    stations = {
        f"68{10000 + i}": Station(f"68{10000 + i}", f"Stop {i}", p)
        for i, p in enumerate(station_points)
    }
    station_ids = list(stations)

    # One street per straight run, intersections where the heading changes.
    streets: list[Street] = []
    intersections: list[Intersection] = []
    run_start = 0
    street_no = 0
    for i in range(1, cfg.n_stations + 1):
        if i == cfg.n_stations or i % 4 == 0:
            pts = tuple(station_points[run_start : min(i, cfg.n_stations - 1) + 1])
            if len(pts) >= 2:
                streets.append(Street(f"{chr(65 + street_no)} Street", pts))
                street_no += 1
            if i < cfg.n_stations:
                intersections.append(Intersection(f"I{len(intersections) + 1}", station_points[i]))
            run_start = i
    geo = GeoDB(streets, intersections)

    leg = cfg.leg_travel_s()
    trips: list[ScheduledTrip] = []
    arrivals: dict[tuple[str, str], int] = {}
    dispatch: dict[str, int] = {}

    def build_day_type(count: int, base_id: int, service_days: frozenset[int]):
        span_min = (LAST_START_S - SERVICE_START_S) // 60
        headway_min = max(1, span_min // count)
        for i in range(count):
            tid = str(base_id + i)
            start = SERVICE_START_S + i * headway_min * 60
            trips.append(ScheduledTrip(tid, cfg.route_id, service_days, start, start + cfg.trip_duration_s))
            visit = station_ids if i % 2 == 0 else list(reversed(station_ids))
            for j, sid in enumerate(visit):
                arrivals[(tid, sid)] = start + j * (leg + NOMINAL_DWELL_S)
            dispatch[tid] = 1 + i % cfg.n_vehicles

    build_day_type(cfg.weekday_trips, 1000, frozenset(range(6)))
    build_day_type(cfg.sunday_trips, 2000, frozenset({6}))
    trips.sort(key=lambda t: (t.start_s, t.trip_id))

    station_order = {
        (cfg.route_id, Direction.OUTBOUND): station_ids,
        (cfg.route_id, Direction.RETURN): list(reversed(station_ids)),
    }
    sched = ScheduleDB(stations, trips, arrivals, station_order)

    # Depot sits just off the start of the route.
    depot = [
        _meters_to_point(origin, -400.0, -400.0),
        _meters_to_point(origin, -150.0, -400.0),
        _meters_to_point(origin, -150.0, -150.0),
        _meters_to_point(origin, -400.0, -150.0),
    ]
    return SynthNetwork(sched, geo, dispatch, depot)


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------


@dataclass
class DwellTruth:
    station_id: Optional[str]  # None for a congestion pause
    start: datetime
    end: datetime
    point: GeoPoint


@dataclass
class TripTruth:
    trip_id: str
    vehicle: int
    service_date: date
    direction: Direction
    sched_start_s: int
    first_sample: datetime
    last_sample: datetime
    samples: int
    dwells: list[DwellTruth]
    visits: list[str]
    forced_duration: Optional[int] = None
    storm: bool = False

    @property
    def duration_s(self) -> int:
        return int((self.last_sample - self.first_sample).total_seconds())


@dataclass
class GroundTruth:
    """Generator-side record of what the feed really contains.

    Visible only to tests and offline reports; pipeline nodes never read it.
    The injection counters settle once the stream has been fully consumed.
    """

    trips: list[TripTruth] = field(default_factory=list)
    missing_trips: list[tuple[str, str]] = field(default_factory=list)  # (trip_id, iso date)
    storm_days: list[int] = field(default_factory=list)
    congestion_points: list[GeoPoint] = field(default_factory=list)
    duplicates_injected: int = 0
    drops_injected: int = 0
    corrupted_injected: int = 0

    def to_json_dict(self) -> dict:
        return {
            "trips": [
                {
                    "trip_id": t.trip_id,
                    "vehicle": t.vehicle,
                    "service_date": t.service_date.isoformat(),
                    "direction": t.direction.value,
                    "sched_start_s": t.sched_start_s,
                    "first_sample": format_timestamp(t.first_sample),
                    "last_sample": format_timestamp(t.last_sample),
                    "samples": t.samples,
                    "duration_s": t.duration_s,
                    "forced_duration": t.forced_duration,
                    "storm": t.storm,
                    "visits": t.visits,
                    "dwells": [
                        {
                            "station_id": d.station_id,
                            "start": format_timestamp(d.start),
                            "end": format_timestamp(d.end),
                            "lat": d.point.lat,
                            "lng": d.point.lng,
                        }
                        for d in t.dwells
                    ],
                }
                for t in self.trips
            ],
            "missing_trips": [list(m) for m in self.missing_trips],
            "storm_days": self.storm_days,
            "congestion_points": [[p.lat, p.lng] for p in self.congestion_points],
            "duplicates_injected": self.duplicates_injected,
            "drops_injected": self.drops_injected,
            "corrupted_injected": self.corrupted_injected,
        }


# ---------------------------------------------------------------------------
# Feed generation
# ---------------------------------------------------------------------------


@dataclass
class _Phase:
    start_s: float
    end_s: float
    a: GeoPoint
    b: GeoPoint
    station_id: Optional[str] = None  # set for station dwells
    pause: bool = False  # congestion pause

    def position(self, t: float) -> GeoPoint:
        if self.end_s <= self.start_s or self.a == self.b:
            return self.a
        f = (t - self.start_s) / (self.end_s - self.start_s)
        f = min(1.0, max(0.0, f))
        return GeoPoint(
            self.a.lat + f * (self.b.lat - self.a.lat),
            self.a.lng + f * (self.b.lng - self.a.lng),
        )


def _plan_trip(
    cfg: SynthConfig,
    rng: random.Random,
    trip: ScheduledTrip,
    day: int,
    visit: list[Station],
    slowdown: Optional[float],
    congestion: list[CongestionAt],
    forced_duration: Optional[int],
) -> tuple[list[_Phase], float]:
    """Lay out dwell/move phases for one trip, in seconds from trip start."""
    leg_nominal = cfg.leg_travel_s()
    jitter = rng.uniform(0.8, 1.2) if slowdown else 1.0
    phases: list[_Phase] = []
    t = 0.0
    for idx, station in enumerate(visit):
        dwell = rng.choice(DWELL_CHOICES)
        phases.append(_Phase(t, t + dwell, station.point, station.point, station_id=station.station_id))
        t += dwell
        if idx == len(visit) - 1:
            break
        nxt = visit[idx + 1]
        travel = leg_nominal * (slowdown * jitter if slowdown else 1.0)
        hit = None
        for c in congestion:
            d = point_segment_distance_m(c.point, station.point, nxt.point)
            if d <= 60.0:
                hit = c
                break
        if hit is None:
            phases.append(_Phase(t, t + travel, station.point, nxt.point))
            t += travel
        else:
            # Split the leg at the point nearest the congestion site.
            ax, ay = station.point.lat, station.point.lng
            bx, by = nxt.point.lat, nxt.point.lng
            seg_sq = (bx - ax) ** 2 + (by - ay) ** 2
            f = 0.5
            if seg_sq > 0:
                f = ((hit.point.lat - ax) * (bx - ax) + (hit.point.lng - ay) * (by - ay)) / seg_sq
                f = min(1.0, max(0.0, f))
            mid = GeoPoint(ax + f * (bx - ax), ay + f * (by - ay))
            pause = max(cfg.sample_period_s, int(hit.extra_dwell_s // cfg.sample_period_s * cfg.sample_period_s))
            phases.append(_Phase(t, t + travel * f, station.point, mid))
            t += travel * f
            phases.append(_Phase(t, t + pause, mid, mid, pause=True))
            t += pause
            phases.append(_Phase(t, t + travel * (1.0 - f), mid, nxt.point))
            t += travel * (1.0 - f)
    completion = t

    natural_end = cfg.trip_duration_s - cfg.sample_period_s
    if forced_duration is not None:
        end = float(forced_duration)
        if end > completion:
            final = phases[-1]
            phases.append(_Phase(completion, end, final.b, final.b, station_id=final.station_id))
    elif completion < natural_end:
        final = phases[-1]
        phases.append(_Phase(completion, float(natural_end), final.b, final.b, station_id=final.station_id))
        end = float(natural_end)
    else:
        end = completion
    return phases, end


_CORRUPT_MODES = ("blank_optional", "drop_field", "extra_field", "bad_coord", "blank_critical", "miscase_route")
_OPTIONAL_FIELD_INDEXES = (0, 1, 4, 5, 6, 9, 12, 13)
# Positional repair of a short record is only unambiguous near the tail, so
# injected field drops stay in the trailing text attributes.
_DROPPABLE_FIELD_INDEXES = (12, 13)


def generate_feed(
    cfg: SynthConfig,
    sched: Optional[ScheduleDB] = None,
    geo: Optional[GeoDB] = None,
    dispatch: Optional[dict[str, int]] = None,
) -> tuple[Iterator[StreamElement], GroundTruth]:
    """Build the deterministic synthetic feed.

    Returns a lazily evaluated, time-ordered stream of feed records (clean
    tuples interleaved with any injected malformed ones) and the GroundTruth
    side channel.  Identical configurations yield byte-identical streams.
    """
    cfg.validate()
    if sched is None or geo is None or dispatch is None:
        net = synthesize_network(cfg)
        sched = sched or net.sched
        geo = geo or net.geo
        dispatch = dispatch or net.dispatch

    rng = random.Random(cfg.rng_seed)
    truth = GroundTruth()

    missing_plan = [a for a in cfg.anomalies if isinstance(a, MissingTripAt)]
    storm_plan = {a.day: a.slowdown for a in cfg.anomalies if isinstance(a, StormDay)}
    duration_plan = [a for a in cfg.anomalies if isinstance(a, TripDurationAt)]
    congestion_plan = [a for a in cfg.anomalies if isinstance(a, CongestionAt)]
    dup_p = max((a.p for a in cfg.anomalies if isinstance(a, DuplicateRate)), default=0.0)
    drop_p = max((a.p for a in cfg.anomalies if isinstance(a, DropRate)), default=0.0)
    corrupt_p = max((a.p for a in cfg.anomalies if isinstance(a, CorruptRate)), default=0.0)

    truth.storm_days = sorted(storm_plan)
    truth.congestion_points = [c.point for c in congestion_plan]

    outbound = [sched.stations[s] for s in sched.station_order[(cfg.route_id, Direction.OUTBOUND)]]
    inbound = [sched.stations[s] for s in sched.station_order[(cfg.route_id, Direction.RETURN)]]

    # Planning pass: lay out every trip of every day, then validate that no
    # vehicle is asked to run two trips at once.
    day_plans: list[list[tuple[ScheduledTrip, int, date, list[_Phase], float, Direction]]] = []
    vehicle_busy: dict[int, tuple[float, str]] = {}
    for day in range(cfg.days):
        service_date = cfg.start_date + timedelta(days=day)
        weekday = service_date.weekday()
        roster = sched.trips_on(weekday)
        plans = []
        for trip in roster:
            hour = trip.start_s // 3600
            if any(m.day == day and m.hour == hour for m in missing_plan):
                truth.missing_trips.append((trip.trip_id, service_date.isoformat()))
                continue
            vehicle = dispatch.get(trip.trip_id, 1)
            direction = Direction.OUTBOUND if sched.scheduled_arrivals.get(
                (trip.trip_id, outbound[0].station_id)
            ) == trip.start_s else Direction.RETURN
            visit = outbound if direction is Direction.OUTBOUND else inbound
            slow = storm_plan.get(day)
            congestion = [c for c in congestion_plan if c.day in (None, day)]
            forced = next(
                (f.duration_s for f in duration_plan if f.day == day and f.hour == hour), None
            )
            phases, end = _plan_trip(cfg, rng, trip, day, visit, slow, congestion, forced)
            start_abs = day * 86400.0 + trip.start_s
            prev = vehicle_busy.get(vehicle)
            if prev is not None and start_abs < prev[0]:
                raise GenerationError(
                    f"vehicle {vehicle} still on trip {prev[1]} when trip {trip.trip_id} starts "
                    f"(day {day}); spread trips over more vehicles"
                )
            vehicle_busy[vehicle] = (start_abs + end, trip.trip_id)
            plans.append((trip, vehicle, service_date, phases, end, direction))
        day_plans.append(plans)

    def emit() -> Iterator[StreamElement]:
        sample_counter = 0
        for day, plans in enumerate(day_plans):
            day_samples: list[tuple[float, int, FeedTuple]] = []
            for trip, vehicle, service_date, phases, end, direction in plans:
                midnight = datetime(service_date.year, service_date.month, service_date.day, tzinfo=timezone.utc)
                offsets = [float(i * cfg.sample_period_s) for i in range(int(end // cfg.sample_period_s) + 1)]
                if offsets[-1] < end:
                    offsets.append(end)  # exact final report for forced durations
                dwell_truth: list[DwellTruth] = []
                for ph in phases:
                    if ph.start_s >= end:
                        break  # planned but truncated away by a forced duration
                    if ph.a == ph.b and (ph.station_id or ph.pause):
                        start_dt = midnight + timedelta(seconds=trip.start_s + ph.start_s)
                        end_dt = midnight + timedelta(seconds=trip.start_s + min(ph.end_s, end))
                        if dwell_truth and dwell_truth[-1].station_id == ph.station_id and dwell_truth[-1].end == start_dt:
                            dwell_truth[-1] = replace(dwell_truth[-1], end=end_dt)
                        else:
                            dwell_truth.append(DwellTruth(ph.station_id, start_dt, end_dt, ph.a))
                samples = []
                cursor = 0
                for off in offsets:
                    while cursor < len(phases) - 1 and off >= phases[cursor].end_s:
                        cursor += 1
                    pos = phases[cursor].position(off)
                    if cfg.gps_noise_sigma_m > 0:
                        dx = rng.gauss(0.0, cfg.gps_noise_sigma_m)
                        dy = rng.gauss(0.0, cfg.gps_noise_sigma_m)
                        pos = _meters_to_point(pos, dx, dy)
                    ts = midnight + timedelta(seconds=trip.start_s + off)
                    sample_counter += 1
                    samples.append(
                        (
                            day * 86400.0 + trip.start_s + off,
                            vehicle,
                            FeedTuple(
                                vlr_id=sample_counter,
                                route_id_vlr=12,
                                route_name=cfg.route_name,
                                route_id_rta=int(cfg.route_id) if cfg.route_id.isdigit() else 0,
                                route_nickname="MAIN",
                                trip_id_br=int(trip.trip_id),
                                transit_authority_service_time_id=77,
                                trip_id_tta=int(trip.trip_id),
                                trip_start=trip.start_s,
                                trip_finish=trip.end_s,
                                vehicle_id_vab=vehicle,
                                vehicle_id_vlr=40 + vehicle,
                                vehicle_id_vlr_ta=f"VAB-{vehicle}",
                                bdescription="in service",
                                lat=pos.lat,
                                lng=pos.lng,
                                timestamp=ts.replace(microsecond=0),
                            ),
                        )
                    )
                day_samples.extend(samples)
                truth.trips.append(
                    TripTruth(
                        trip_id=trip.trip_id,
                        vehicle=vehicle,
                        service_date=service_date,
                        direction=direction,
                        sched_start_s=trip.start_s,
                        first_sample=samples[0][2].timestamp,
                        last_sample=samples[-1][2].timestamp,
                        samples=len(samples),
                        dwells=dwell_truth,
                        visits=[d.station_id for d in dwell_truth if d.station_id],
                        forced_duration=next(
                            (f.duration_s for f in duration_plan if f.day == day and f.hour == trip.start_s // 3600),
                            None,
                        ),
                        storm=day in storm_plan,
                    )
                )
            day_samples.sort(key=lambda s: (s[0], s[1]))
            for _, _, tup in day_samples:
                if drop_p and rng.random() < drop_p:
                    truth.drops_injected += 1
                    continue
                element: StreamElement = tup
                if corrupt_p and rng.random() < corrupt_p:
                    element = _corrupt(rng, tup)
                    truth.corrupted_injected += 1
                yield element
                if dup_p and rng.random() < dup_p:
                    truth.duplicates_injected += 1
                    yield element

    return emit(), truth


def _corrupt(rng: random.Random, tup: FeedTuple) -> StreamElement:
    row = serialize_tuple(tup)
    mode = rng.choice(_CORRUPT_MODES)
    if mode == "blank_optional":
        row[rng.choice(_OPTIONAL_FIELD_INDEXES)] = ""
    elif mode == "drop_field":
        del row[rng.choice(_DROPPABLE_FIELD_INDEXES)]
    elif mode == "extra_field":
        row.append("spurious")
    elif mode == "bad_coord":
        row[14] = "999.0"
    elif mode == "blank_critical":
        row[rng.choice((14, 15, 16))] = ""
    else:  # miscase_route
        row[2] = row[2].upper() if row[2] != row[2].upper() else row[2].lower()
    return classify_record(row)


# ---------------------------------------------------------------------------
# Canonical feed CSV and replay
# ---------------------------------------------------------------------------


def write_feed_csv(path: str | Path, elements: Iterable[StreamElement]) -> int:
    """Write a stream to canonical feed CSV; returns the row count."""
    count = 0
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for el in elements:
            writer.writerow(serialize_tuple(el) if isinstance(el, FeedTuple) else list(el.fields))
            count += 1
    return count


@dataclass(frozen=True)
class Scaled:
    """Replay pacing that sleeps timestamp gaps divided by factor."""

    factor: float


AS_FAST_AS_POSSIBLE = None

Pacing = Optional[Scaled]


def replay_csv(path: str | Path, pacing: Pacing = AS_FAST_AS_POSSIBLE) -> Iterator[StreamElement]:
    """Stream a canonical feed CSV in file order.

    Rows that fail canonical parsing are forwarded as malformed records for
    the edge layer to repair; an empty file is an empty stream.
    """
    prev_ts: Optional[datetime] = None
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            element = classify_record(row)
            if pacing is not None:
                ts = element.timestamp if isinstance(element, FeedTuple) else element.timestamp_guess()
                if ts is not None:
                    if prev_ts is not None and ts > prev_ts:
                        time.sleep((ts - prev_ts).total_seconds() / pacing.factor)
                    prev_ts = ts
            yield element
