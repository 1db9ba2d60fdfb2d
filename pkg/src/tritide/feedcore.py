"""Core domain types for the transit feed: tuples, movement records, feedback.

Every layer of the pipeline exchanges the types defined here.  A feed tuple
carries the 17 attributes reported by a bus automatic vehicle locator; a
movement record wraps one tuple with the enrichments added downstream
(stop/move tag, street, station, direction, and so on); feedback objects
travel back down the layers with an explicit latency class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields as dc_fields
from datetime import date, datetime, timedelta, timezone
from enum import Enum
from typing import Optional, Union

EARTH_RADIUS_M = 6_371_000.0
FEED_FIELD_COUNT = 17


class FeedError(Exception):
    """Base class for feed-level errors."""


class ParseError(FeedError):
    """A raw record could not be parsed into a FeedTuple."""


class WrongArity(ParseError):
    def __init__(self, count: int):
        super().__init__(f"expected {FEED_FIELD_COUNT} fields, got {count}")
        self.count = count


class MalformedCoordinate(ParseError):
    def __init__(self, name: str, value: str):
        super().__init__(f"unusable {name} value: {value!r}")
        self.field_name = name
        self.value = value


class MalformedTimestamp(ParseError):
    def __init__(self, value: str):
        super().__init__(f"unusable timestamp value: {value!r}")
        self.value = value


class _Missing:
    """Singleton marker for an absent attribute value.

    Serialized as ``N/A``.  Deliberately distinct from the empty string: an
    empty string in a raw record is a value that still *needs* filling,
    while MISSING is the canonical already-filled state.
    """

    _instance: Optional["_Missing"] = None

    def __new__(cls) -> "_Missing":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "N/A"

    def __bool__(self) -> bool:
        return False


MISSING = _Missing()
MISSING_TEXT = "N/A"

# Field value unions.  Optional attributes may hold MISSING; the three
# critical attributes (lat, lng, timestamp) never do.
OptInt = Union[int, _Missing]
OptText = Union[str, _Missing]
OptSeconds = Union[int, _Missing]  # time of day, seconds since midnight


class Motion(Enum):
    MOVE = "Move"
    STOP = "Stop"


class Category(Enum):
    RUNNING = "Running"
    PASSING = "Passing"
    SUSPENSION = "Suspension"
    STOPOVER = "Stopover"


class Direction(Enum):
    OUTBOUND = "Outbound"
    RETURN = "Return"


class TripRole(Enum):
    ORIGIN = "Origin"
    INTERMEDIATE = "Intermediate"
    DESTINATION = "Destination"


class Layer(Enum):
    EDGE = "Edge"
    FOG = "Fog"
    CLOUD = "Cloud"


class LatencyClass(Enum):
    REAL_TIME = "RealTime"
    NEAR_REAL_TIME = "NearRealTime"
    PERIODIC = "Periodic"
    HISTORICAL = "Historical"


class FeedbackKind(Enum):
    MISSING_TRIP = "MissingTrip"
    TRIP_DURATION_ANOMALY = "TripDurationAnomaly"
    CONGESTION_CLUSTER = "CongestionCluster"
    SERVICE_INTERRUPTION = "ServiceInterruption"
    PUNCTUALITY_REPORT = "PunctualityReport"


# Which latency classes each layer is allowed to emit.
LAYER_LATENCY = {
    Layer.EDGE: frozenset({LatencyClass.REAL_TIME}),
    Layer.FOG: frozenset({LatencyClass.NEAR_REAL_TIME, LatencyClass.PERIODIC}),
    Layer.CLOUD: frozenset({LatencyClass.PERIODIC, LatencyClass.HISTORICAL}),
}


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lng: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and -90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude out of range: {self.lat}")
        if not (math.isfinite(self.lng) and -180.0 <= self.lng <= 180.0):
            raise ValueError(f"longitude out of range: {self.lng}")


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters on a sphere of radius 6371 km."""
    lat1, lng1, lat2, lng2 = map(math.radians, (a.lat, a.lng, b.lat, b.lng))
    dlat = lat2 - lat1
    dlng = lng2 - lng1
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlng / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def parse_hms(text: str) -> int:
    """Parse ``HH:MM:SS`` into seconds since midnight (hours may pass 24)."""
    parts = text.strip().split(":")
    if len(parts) != 3:
        raise ValueError(f"not an HH:MM:SS time: {text!r}")
    h, m, s = (int(p) for p in parts)
    if not (0 <= h < 48 and 0 <= m < 60 and 0 <= s < 60):
        raise ValueError(f"time of day out of range: {text!r}")
    return h * 3600 + m * 60 + s


def format_hms(seconds: int) -> str:
    h, rest = divmod(int(seconds), 3600)
    m, s = divmod(rest, 60)
    return f"{h:02d}:{m:02d}:{s:02d}"


def parse_timestamp(text: str, tz: timezone = timezone.utc) -> datetime:
    """Parse an ISO-8601 timestamp, normalize to UTC, truncate to seconds."""
    raw = text.strip()
    if raw.endswith(("Z", "z")):
        raw = raw[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(raw)
    except ValueError as exc:
        raise MalformedTimestamp(text) from exc
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=tz)
    return ts.astimezone(timezone.utc).replace(microsecond=0)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).replace(microsecond=0).isoformat()


# (name, kind) for the 17 feed attributes, in wire order.  Kinds: int fields
# and time fields admit MISSING; text fields admit MISSING; lat/lng/timestamp
# are critical and must always be present and valid.
FEED_SCHEMA = (
    ("vlr_id", "int"),
    ("route_id_vlr", "int"),
    ("route_name", "text"),
    ("route_id_rta", "int"),
    ("route_nickname", "text"),
    ("trip_id_br", "int"),
    ("transit_authority_service_time_id", "int"),
    ("trip_id_tta", "int"),
    ("trip_start", "time"),
    ("trip_finish", "time"),
    ("vehicle_id_vab", "int"),
    ("vehicle_id_vlr", "int"),
    ("vehicle_id_vlr_ta", "text"),
    ("bdescription", "text"),
    ("lat", "lat"),
    ("lng", "lng"),
    ("timestamp", "timestamp"),
)

CRITICAL_FIELDS = ("lat", "lng", "timestamp")
_FIELD_INDEX = {name: i for i, (name, _) in enumerate(FEED_SCHEMA)}
LAT_INDEX = _FIELD_INDEX["lat"]
LNG_INDEX = _FIELD_INDEX["lng"]
TIMESTAMP_INDEX = _FIELD_INDEX["timestamp"]
TRIP_ID_INDEX = _FIELD_INDEX["trip_id_tta"]
VEHICLE_INDEX = _FIELD_INDEX["vehicle_id_vab"]
ROUTE_NAME_INDEX = _FIELD_INDEX["route_name"]


@dataclass(frozen=True)
class FeedTuple:
    """One automatic-vehicle-locator report, 17 attributes in wire order."""

    vlr_id: OptInt
    route_id_vlr: OptInt
    route_name: OptText
    route_id_rta: OptInt
    route_nickname: OptText
    trip_id_br: OptInt
    transit_authority_service_time_id: OptInt
    trip_id_tta: OptInt
    trip_start: OptSeconds
    trip_finish: OptSeconds
    vehicle_id_vab: OptInt
    vehicle_id_vlr: OptInt
    vehicle_id_vlr_ta: OptText
    bdescription: OptText
    lat: float
    lng: float
    timestamp: datetime

    def __post_init__(self):
        if not (math.isfinite(self.lat) and -90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude out of range: {self.lat}")
        if not (math.isfinite(self.lng) and -180.0 <= self.lng <= 180.0):
            raise ValueError(f"longitude out of range: {self.lng}")
        if self.timestamp.tzinfo is None:
            raise ValueError("timestamp must be timezone-aware")
        if self.timestamp.microsecond:
            raise ValueError("timestamp must have whole-second resolution")

    @property
    def point(self) -> GeoPoint:
        return GeoPoint(self.lat, self.lng)

    @property
    def trip_key(self) -> OptInt:
        """The identifier used to group tuples into trips."""
        return self.trip_id_tta

    @property
    def seconds_of_day(self) -> int:
        t = self.timestamp
        return t.hour * 3600 + t.minute * 60 + t.second

    def service_date(self) -> date:
        """The operating date of this tuple's trip.

        A trip that crosses midnight keeps the date it started on: tuples
        stamped earlier in the day than the trip's scheduled start belong
        to the previous date.
        """
        d = self.timestamp.date()
        if not isinstance(self.trip_start, _Missing) and self.seconds_of_day < self.trip_start:
            return d - timedelta(days=1)
        return d


def parse_tuple(record: list[str] | tuple[str, ...], tz: timezone = timezone.utc) -> FeedTuple:
    """Parse one raw 17-field record into a FeedTuple.

    Unparseable optional fields become MISSING.  Raises WrongArity when the
    record does not have 17 fields, MalformedCoordinate / MalformedTimestamp
    when a critical field cannot be used; callers that want to repair such
    records apply the edge cleaning rules.
    """
    if len(record) != FEED_FIELD_COUNT:
        raise WrongArity(len(record))
    values: list = []
    for raw, (name, kind) in zip(record, FEED_SCHEMA):
        raw = raw.strip() if isinstance(raw, str) else raw
        if kind == "int":
            try:
                values.append(int(raw))
            except (TypeError, ValueError):
                values.append(MISSING)
        elif kind == "time":
            if raw == MISSING_TEXT:
                values.append(MISSING)
            else:
                try:
                    values.append(parse_hms(raw))
                except (TypeError, ValueError):
                    values.append(MISSING)
        elif kind == "text":
            values.append(MISSING if raw == MISSING_TEXT else raw)
        elif kind in ("lat", "lng"):
            try:
                coord = float(raw)
            except (TypeError, ValueError):
                raise MalformedCoordinate(name, raw) from None
            limit = 90.0 if kind == "lat" else 180.0
            if not math.isfinite(coord) or not -limit <= coord <= limit:
                raise MalformedCoordinate(name, raw)
            values.append(coord)
        else:  # timestamp
            values.append(parse_timestamp(raw, tz=tz))
    return FeedTuple(*values)


def serialize_tuple(t: FeedTuple) -> list[str]:
    """Render a FeedTuple back to its 17-field wire form (MISSING -> N/A)."""
    out: list[str] = []
    for name, kind in FEED_SCHEMA:
        value = getattr(t, name)
        if isinstance(value, _Missing):
            out.append(MISSING_TEXT)
        elif kind == "time":
            out.append(format_hms(value))
        elif kind in ("lat", "lng"):
            out.append(repr(value))
        elif kind == "timestamp":
            out.append(format_timestamp(value))
        else:
            out.append(str(value))
    return out


@dataclass(frozen=True)
class MalformedRecord:
    """A raw record that failed canonical parsing, kept for edge repair."""

    fields: tuple[str, ...]
    reason: str

    def _critical_tail_start(self) -> int:
        # Short records are read as "non-critical head + critical 3-field
        # tail"; records of 17+ fields use the canonical positions.
        return TIMESTAMP_INDEX if len(self.fields) >= FEED_FIELD_COUNT else len(self.fields) - 1

    def timestamp_guess(self) -> Optional[datetime]:
        idx = self._critical_tail_start()
        if idx < 0:
            return None
        try:
            return parse_timestamp(self.fields[idx])
        except (MalformedTimestamp, IndexError):
            return None

    def _int_guess(self, index: int) -> Optional[int]:
        n = len(self.fields)
        if n < FEED_FIELD_COUNT and (n - 3) <= index:
            return None  # position swallowed by the missing gap
        try:
            return int(self.fields[index])
        except (IndexError, ValueError):
            return None

    def trip_guess(self) -> Optional[int]:
        return self._int_guess(TRIP_ID_INDEX)

    def vehicle_guess(self) -> Optional[int]:
        return self._int_guess(VEHICLE_INDEX)


def classify_record(fields: list[str] | tuple[str, ...], tz: timezone = timezone.utc):
    """Classify one raw record as a canonical FeedTuple or a MalformedRecord.

    Canonical means: exactly 17 fields, valid critical fields, and every
    optional field either a well-formed value or the literal N/A.  Anything
    else is handed downstream for the edge layer to repair or drop.
    """
    fields = tuple(str(f) for f in fields)
    if len(fields) != FEED_FIELD_COUNT:
        return MalformedRecord(fields, f"arity:{len(fields)}")
    problems = []
    for raw, (name, kind) in zip(fields, FEED_SCHEMA):
        raw = raw.strip()
        if kind == "int":
            if raw != MISSING_TEXT:
                try:
                    int(raw)
                except ValueError:
                    problems.append(f"bad_{name}")
        elif kind == "time":
            if raw != MISSING_TEXT:
                try:
                    parse_hms(raw)
                except ValueError:
                    problems.append(f"bad_{name}")
        elif kind == "text":
            if raw == "":
                problems.append(f"empty_{name}")
        elif kind in ("lat", "lng"):
            try:
                coord = float(raw)
                limit = 90.0 if kind == "lat" else 180.0
                if not math.isfinite(coord) or not -limit <= coord <= limit:
                    problems.append(f"bad_{name}")
            except ValueError:
                problems.append(f"bad_{name}")
        else:
            try:
                parse_timestamp(raw, tz=tz)
            except MalformedTimestamp:
                problems.append("bad_timestamp")
    if problems:
        return MalformedRecord(fields, ",".join(problems))
    return parse_tuple(fields, tz=tz)


StreamElement = Union[FeedTuple, MalformedRecord]


@dataclass(frozen=True)
class MovementRecord:
    """A feed tuple plus everything the edge and fog layers learned about it.

    Enrichment never mutates the base tuple; each stage returns a copy with
    more fields set.  Cross-field consistency is enforced at construction.
    """

    base: FeedTuple
    distance_from_prev: Optional[float] = None
    motion: Optional[Motion] = None
    category: Optional[Category] = None
    street_name: Optional[str] = None
    direction: Optional[Direction] = None
    station_id: Optional[str] = None
    intersection_id: Optional[str] = None
    arrival_time: Optional[datetime] = None
    departure_time: Optional[datetime] = None
    sequence_index: Optional[int] = None
    trip_role: Optional[TripRole] = None

    def __post_init__(self):
        if self.distance_from_prev is not None and self.distance_from_prev < 0:
            raise ValueError("distance_from_prev must be non-negative")
        if self.category is not None:
            if self.motion is None:
                raise ValueError("category requires a motion tag")
            stopped = self.category in (Category.SUSPENSION, Category.STOPOVER)
            if stopped != (self.motion is Motion.STOP):
                raise ValueError(f"category {self.category.value} inconsistent with motion {self.motion.value}")
        if self.station_id is not None and self.category not in (Category.STOPOVER, Category.PASSING):
            raise ValueError("station_id only applies to Stopover/Passing records")
        if (self.arrival_time is None) != (self.departure_time is None):
            raise ValueError("arrival and departure times come as a pair")
        if self.arrival_time is not None and self.departure_time < self.arrival_time:
            raise ValueError("departure precedes arrival")
        if self.sequence_index is not None and self.sequence_index < 0:
            raise ValueError("sequence_index must be non-negative")
        if self.trip_role is TripRole.ORIGIN and self.sequence_index not in (None, 0):
            raise ValueError("Origin must sit at sequence_index 0")


@dataclass(frozen=True)
class Feedback:
    """A message sent back down the layers, tagged with its delivery class."""

    layer: Layer
    latency_class: LatencyClass
    kind: FeedbackKind
    subject: str
    detail: str
    emitted_at: datetime

    def __post_init__(self):
        allowed = LAYER_LATENCY[self.layer]
        if self.latency_class not in allowed:
            names = "/".join(sorted(c.value for c in allowed))
            raise ValueError(f"{self.layer.value} feedback must be {names}, got {self.latency_class.value}")
        if self.emitted_at.tzinfo is None:
            raise ValueError("emitted_at must be timezone-aware")

    def as_dict(self) -> dict:
        return {
            "layer": self.layer.value,
            "latency_class": self.latency_class.value,
            "kind": self.kind.value,
            "subject": self.subject,
            "detail": self.detail,
            "emitted_at": format_timestamp(self.emitted_at),
        }


MOVEMENT_CSV_HEADER = [name for name, _ in FEED_SCHEMA] + ["motion", "distance_from_prev"]

CONTEXT_CSV_HEADER = MOVEMENT_CSV_HEADER + [
    "category",
    "street_name",
    "direction",
    "station_id",
    "intersection_id",
    "arrival_time",
    "departure_time",
    "sequence_index",
    "trip_role",
]


def _opt(value) -> str:
    return "" if value is None else value


def serialize_movement(rec: MovementRecord) -> list[str]:
    """17 base columns plus motion and distance."""
    row = serialize_tuple(rec.base)
    row.append(rec.motion.value if rec.motion else "")
    row.append("" if rec.distance_from_prev is None else repr(rec.distance_from_prev))
    return row


def parse_movement(row: list[str]) -> MovementRecord:
    if len(row) != len(MOVEMENT_CSV_HEADER):
        raise ParseError(f"expected {len(MOVEMENT_CSV_HEADER)} movement columns, got {len(row)}")
    base = parse_tuple(row[:FEED_FIELD_COUNT])
    motion = Motion(row[FEED_FIELD_COUNT]) if row[FEED_FIELD_COUNT] else None
    distance = float(row[FEED_FIELD_COUNT + 1]) if row[FEED_FIELD_COUNT + 1] else None
    return MovementRecord(base=base, motion=motion, distance_from_prev=distance)


def serialize_context(rec: MovementRecord) -> list[str]:
    """Full contextualized row: movement columns plus the fog enrichments."""
    row = serialize_movement(rec)
    row.extend(
        [
            rec.category.value if rec.category else "",
            _opt(rec.street_name),
            rec.direction.value if rec.direction else "",
            _opt(rec.station_id),
            _opt(rec.intersection_id),
            format_timestamp(rec.arrival_time) if rec.arrival_time else "",
            format_timestamp(rec.departure_time) if rec.departure_time else "",
            "" if rec.sequence_index is None else str(rec.sequence_index),
            rec.trip_role.value if rec.trip_role else "",
        ]
    )
    return row
