"""Edge layer: tumbling windows, stream cleaning, stop/move tagging, trip stats.

The edge node runs beside the bus.  It slices the raw feed into 5-second
tumbling windows, repairs or drops damaged tuples, tags each survivor as
moving or stopped, closes trips into aggregates, rolls daily period
summaries, and raises real-time feedback when the schedule is violated.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta, timezone
from typing import Iterable, Iterator, Optional

from .feedcore import (
    FEED_FIELD_COUNT,
    FEED_SCHEMA,
    MISSING,
    MISSING_TEXT,
    Feedback,
    FeedbackKind,
    FeedTuple,
    LatencyClass,
    Layer,
    MalformedRecord,
    Motion,
    MovementRecord,
    ParseError,
    StreamElement,
    _Missing,
    format_hms,
    format_timestamp,
    haversine_m,
    parse_hms,
    parse_movement,
    parse_tuple,
    serialize_movement,
)
from .ingest import ScheduleDB

STOP_MOVE_THRESHOLD_M = 15.0
WINDOW_SECONDS = 5
MISSING_TUPLE_LIMIT = 100
MISSING_TRIP_GRACE_S = 300
DEFAULT_SCHEDULED_DURATION_S = 2700
DURATION_FACTOR_LOW = 0.5
DURATION_FACTOR_HIGH = 1.5


# ---------------------------------------------------------------------------
# Tumbling windows
# ---------------------------------------------------------------------------


@dataclass
class TimeWindow:
    """A half-open [start, start + duration) slice of the stream."""

    window_start: datetime
    duration_s: int = WINDOW_SECONDS
    tuples: list[StreamElement] = field(default_factory=list)

    @property
    def window_end(self) -> datetime:
        return self.window_start + timedelta(seconds=self.duration_s)


def _floor_to_grid(ts: datetime, width_s: int) -> datetime:
    epoch = math.floor(ts.timestamp() / width_s) * width_s
    return datetime.fromtimestamp(epoch, tz=timezone.utc)


class WindowAssigner:
    """Assign stream elements to epoch-aligned tumbling windows.

    A window is emitted once an element with a timestamp at or past its end
    arrives; elements older than the newest emitted window end are diverted
    to the late-arrivals side channel instead of reopening closed windows.
    Elements without a usable timestamp ride along in the window holding the
    current watermark so the cleaner can account for them.
    """

    def __init__(self, width_s: int = WINDOW_SECONDS):
        if width_s <= 0:
            raise ValueError("window width must be positive")
        self.width_s = width_s
        self.late: list[StreamElement] = []
        self._open: dict[datetime, TimeWindow] = {}
        self._emitted_end: Optional[datetime] = None
        self._watermark: Optional[datetime] = None

    def push(self, element: StreamElement) -> list[TimeWindow]:
        """Feed one element; returns any windows that closed because of it."""
        ts = element.timestamp if isinstance(element, FeedTuple) else element.timestamp_guess()
        if ts is None:
            target = self._watermark or next(iter(sorted(self._open)), None)
            if target is None:
                target = datetime.fromtimestamp(0, tz=timezone.utc)
            self._window_for(_floor_to_grid(target, self.width_s)).tuples.append(element)
            return []
        closed = [w for s, w in sorted(self._open.items()) if w.window_end <= ts]
        for w in closed:
            del self._open[w.window_start]
            if self._emitted_end is None or w.window_end > self._emitted_end:
                self._emitted_end = w.window_end
        if self._emitted_end is not None and ts < self._emitted_end:
            self.late.append(element)
            return closed
        self._watermark = ts if self._watermark is None else max(self._watermark, ts)
        self._window_for(_floor_to_grid(ts, self.width_s)).tuples.append(element)
        return closed

    def _window_for(self, start: datetime) -> TimeWindow:
        if start not in self._open:
            self._open[start] = TimeWindow(start, self.width_s)
        return self._open[start]

    def flush(self) -> list[TimeWindow]:
        """Emit every still-open window, oldest first."""
        remaining = [self._open[s] for s in sorted(self._open)]
        for w in remaining:
            if self._emitted_end is None or w.window_end > self._emitted_end:
                self._emitted_end = w.window_end
        self._open.clear()
        return remaining


def assign_windows(stream: Iterable[StreamElement], width_s: int = WINDOW_SECONDS) -> Iterator[TimeWindow]:
    """Convenience wrapper: windows for a whole finite stream."""
    assigner = WindowAssigner(width_s)
    for element in stream:
        yield from assigner.push(element)
    yield from assigner.flush()


# ---------------------------------------------------------------------------
# Cleaning
# ---------------------------------------------------------------------------


@dataclass
class CleaningReport:
    """Per-window accounting of what the cleaner did.

    received always equals survivors plus every dropping counter, so no
    tuple can vanish unexplained.
    """

    received: int = 0
    survivors: int = 0
    duplicates_removed: int = 0
    corrupted_filled: int = 0
    corrupted_dropped: int = 0
    extra_attributes_trimmed: int = 0
    wrong_values_fixed: int = 0
    wrong_values_dropped: int = 0
    trip_deletion_drops: int = 0
    trips_deleted_for_missing: list[int] = field(default_factory=list)

    def balanced(self) -> bool:
        return self.received == (
            self.survivors
            + self.duplicates_removed
            + self.corrupted_dropped
            + self.wrong_values_dropped
            + self.trip_deletion_drops
        )

    def merged_into(self, total: "CleaningReport") -> None:
        total.received += self.received
        total.survivors += self.survivors
        total.duplicates_removed += self.duplicates_removed
        total.corrupted_filled += self.corrupted_filled
        total.corrupted_dropped += self.corrupted_dropped
        total.extra_attributes_trimmed += self.extra_attributes_trimmed
        total.wrong_values_fixed += self.wrong_values_fixed
        total.wrong_values_dropped += self.wrong_values_dropped
        total.trip_deletion_drops += self.trip_deletion_drops
        total.trips_deleted_for_missing.extend(self.trips_deleted_for_missing)

    def as_dict(self) -> dict:
        return {
            "received": self.received,
            "survivors": self.survivors,
            "duplicates_removed": self.duplicates_removed,
            "corrupted_filled": self.corrupted_filled,
            "corrupted_dropped": self.corrupted_dropped,
            "extra_attributes_trimmed": self.extra_attributes_trimmed,
            "wrong_values_fixed": self.wrong_values_fixed,
            "wrong_values_dropped": self.wrong_values_dropped,
            "trip_deletion_drops": self.trip_deletion_drops,
            "trips_deleted_for_missing": list(self.trips_deleted_for_missing),
        }


@dataclass
class _TripState:
    timestamps: set[float] = field(default_factory=set)
    min_ts: float = math.inf
    max_ts: float = -math.inf
    deleted: bool = False

    def observe(self, ts_epoch: float) -> None:
        self.timestamps.add(ts_epoch)
        self.min_ts = min(self.min_ts, ts_epoch)
        self.max_ts = max(self.max_ts, ts_epoch)

    def missing_count(self, period_s: int) -> int:
        if not self.timestamps:
            return 0
        expected = math.floor((self.max_ts - self.min_ts) / period_s) + 1
        return max(0, expected - len(self.timestamps))


class EdgeCleaner:
    """Stateful window cleaner applying, in order: duplicate removal,
    missing-tuple trip deletion, missing-value repair, extra-attribute
    trimming, and wrong-value normalization."""

    def __init__(
        self,
        route_names: Iterable[str] = (),
        missing_limit: int = MISSING_TUPLE_LIMIT,
        period_s: int = WINDOW_SECONDS,
        enabled: bool = True,
    ):
        self.route_names = {r for r in route_names}
        self._routes_folded = {r.casefold(): r for r in self.route_names}
        self.missing_limit = missing_limit
        self.period_s = period_s
        self.enabled = enabled
        self._trips: dict[tuple[int, date], _TripState] = {}

    def clean(self, window: TimeWindow) -> tuple[list[FeedTuple], CleaningReport]:
        report = CleaningReport(received=len(window.tuples))

        # Rule 1: drop retransmitted copies, keeping the first of each
        # (trip, timestamp) pair.  Copies share a timestamp, so they always
        # land in the same window.
        items: list[StreamElement] = []
        if self.enabled:
            seen: set[tuple[tuple[int, date], float]] = set()
            for el in window.tuples:
                key = self._dedupe_key(el)
                if key is not None:
                    if key in seen:
                        report.duplicates_removed += 1
                        continue
                    seen.add(key)
                items.append(el)
        else:
            items = list(window.tuples)

        # Rule 2: account distinct timestamps per trip instance (id plus
        # service date); an instance that has accumulated at least the
        # missing-tuple limit is deleted, current window included, and stays
        # deleted for the rest of the stream.
        if self.enabled:
            touched: set[tuple[int, date]] = set()
            for el in items:
                trip, ts = self._trip_and_ts(el)
                if trip is None or ts is None:
                    continue
                state = self._trips.setdefault(trip, _TripState())
                if not state.deleted:
                    state.observe(ts)
                    touched.add(trip)
            for trip in sorted(touched):
                state = self._trips[trip]
                if not state.deleted and state.missing_count(self.period_s) >= self.missing_limit:
                    state.deleted = True
                    state.timestamps.clear()
                    report.trips_deleted_for_missing.append(trip[0])
            kept: list[StreamElement] = []
            for el in items:
                trip, _ = self._trip_and_ts(el)
                if trip is not None and self._trips.get(trip, _TripState()).deleted:
                    report.trip_deletion_drops += 1
                else:
                    kept.append(el)
            items = kept

        # Rules 3 and 4: repair malformed records (fill missing values with
        # N/A, trim extra attributes) or drop them when a critical field is
        # beyond saving.
        survivors: list[FeedTuple] = []
        for el in items:
            if isinstance(el, FeedTuple):
                survivors.append(el)
                continue
            repaired = self._repair(el, report)
            if repaired is not None:
                survivors.append(repaired)

        # Rule 5: normalize wrong values against the configured route set.
        if self.enabled and self.route_names:
            fixed: list[FeedTuple] = []
            for t in survivors:
                name = t.route_name
                if isinstance(name, _Missing) or name in self.route_names:
                    fixed.append(t)
                    continue
                match = self._routes_folded.get(str(name).casefold())
                if match is not None:
                    t = _with_field(t, "route_name", match)
                else:
                    t = _with_field(t, "route_name", MISSING)
                report.wrong_values_fixed += 1
                fixed.append(t)
            survivors = fixed

        report.survivors = len(survivors)
        return survivors, report

    def deleted_trips(self) -> set[int]:
        return {trip for (trip, _), state in self._trips.items() if state.deleted}

    def _dedupe_key(self, el: StreamElement) -> Optional[tuple[tuple[int, date], float]]:
        trip, ts = self._trip_and_ts(el)
        if trip is None or ts is None:
            return None
        return (trip, ts)

    @staticmethod
    def _trip_and_ts(el: StreamElement) -> tuple[Optional[tuple[int, date]], Optional[float]]:
        """Trip-instance key (id, service date) plus epoch timestamp, where known.

        Keying on the instance rather than the bare id keeps a trip that runs
        every day from being judged against yesterday's tuples: the overnight
        gap between two runs of the same id is not missing data.
        """
        if isinstance(el, FeedTuple):
            trip = el.trip_key
            key = None if isinstance(trip, _Missing) else (trip, el.service_date())
            return key, el.timestamp.timestamp()
        ts = el.timestamp_guess()
        trip = el.trip_guess()
        key = None if trip is None or ts is None else (trip, ts.date())
        return key, (None if ts is None else ts.timestamp())

    def _repair(self, rec: MalformedRecord, report: CleaningReport) -> Optional[FeedTuple]:
        fields = list(rec.fields)
        filled = False
        if len(fields) > FEED_FIELD_COUNT:
            # Rule 4: an introduced extra attribute is deleted outright.
            fields = fields[:FEED_FIELD_COUNT]
            report.extra_attributes_trimmed += 1
        elif len(fields) < FEED_FIELD_COUNT:
            if len(fields) < 4:
                report.corrupted_dropped += 1
                return None
            # Keep the critical three-field tail, lay the remaining head
            # fields over the leading positions, and fill the gap.
            head = fields[:-3]
            tail = fields[-3:]
            fields = head + [MISSING_TEXT] * (FEED_FIELD_COUNT - 3 - len(head)) + tail
            filled = True
        for i, (name, kind) in enumerate(FEED_SCHEMA):
            raw = fields[i].strip()
            if kind in ("lat", "lng", "timestamp"):
                if raw in ("", MISSING_TEXT):
                    report.corrupted_dropped += 1  # rule 3: missing critical value
                    return None
                continue
            if raw == MISSING_TEXT:
                continue  # already canonical
            bad = raw == ""
            if not bad and kind == "int":
                bad = not _parses_int(raw)
            if not bad and kind == "time":
                bad = not _parses_time(raw)
            if bad:
                fields[i] = MISSING_TEXT
                filled = True
        try:
            t = parse_tuple(fields)
        except ParseError:
            # rule 5: a present but unusable critical value deletes the tuple
            report.wrong_values_dropped += 1
            return None
        if filled:
            report.corrupted_filled += 1
        return t


def _parses_int(raw: str) -> bool:
    try:
        int(raw)
        return True
    except ValueError:
        return False


def _parses_time(raw: str) -> bool:
    try:
        parse_hms(raw)
        return True
    except ValueError:
        return False


def _with_field(t: FeedTuple, name: str, value) -> FeedTuple:
    return replace(t, **{name: value})


# ---------------------------------------------------------------------------
# Stop/move tagging
# ---------------------------------------------------------------------------


def tag_stop_move(
    prev: Optional[MovementRecord],
    cur: FeedTuple,
    threshold_m: float = STOP_MOVE_THRESHOLD_M,
) -> MovementRecord:
    """Tag one tuple against its predecessor on the same trip.

    Strictly more than threshold_m meters of displacement means Move;
    anything up to and including it means Stop.  The first tuple of a trip
    is a Stop with no distance.
    """
    if prev is None:
        return MovementRecord(base=cur, motion=Motion.STOP, distance_from_prev=None)
    if prev.base.trip_key != cur.trip_key:
        raise ValueError(
            f"records from different trips: {prev.base.trip_key!r} then {cur.trip_key!r}"
        )
    d = haversine_m(prev.base.point, cur.point)
    motion = Motion.MOVE if d > threshold_m else Motion.STOP
    return MovementRecord(base=cur, motion=motion, distance_from_prev=d)


# ---------------------------------------------------------------------------
# Trip aggregation and period summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TripAggregate:
    trip_id: int
    service_date: date
    start_time_s: int  # seconds of day of the first record
    total_move: int
    total_stop: int
    total_time_length: int  # seconds, last minus first timestamp

    def as_dict(self) -> dict:
        return {
            "trip_id": self.trip_id,
            "service_date": self.service_date.isoformat(),
            "start_time_s": self.start_time_s,
            "total_move": self.total_move,
            "total_stop": self.total_stop,
            "total_time_length": self.total_time_length,
        }


def aggregate_trip(records: list[MovementRecord]) -> TripAggregate:
    if not records:
        raise ValueError("cannot aggregate an empty trip")
    first = records[0].base
    last = records[-1].base
    trip = first.trip_key
    moves = sum(1 for r in records if r.motion is Motion.MOVE)
    stops = sum(1 for r in records if r.motion is Motion.STOP)
    return TripAggregate(
        trip_id=trip if not isinstance(trip, _Missing) else -1,
        service_date=first.service_date(),
        start_time_s=first.seconds_of_day,
        total_move=moves,
        total_stop=stops,
        total_time_length=int((last.timestamp - first.timestamp).total_seconds()),
    )


PERIODS = (
    ("Morning", 5, 12),
    ("Afternoon", 13, 18),
    ("Evening", 19, 24),
)


def period_of(start_time_s: int) -> Optional[str]:
    hour = start_time_s / 3600.0
    for name, lo, hi in PERIODS:
        if lo <= hour < hi:
            return name
    return None


@dataclass(frozen=True)
class PeriodSummary:
    service_date: date
    period: str
    trip_count: int
    avg_trip_seconds: float
    avg_moves: float
    avg_stops: float

    def as_dict(self) -> dict:
        return {
            "service_date": self.service_date.isoformat(),
            "period": self.period,
            "trip_count": self.trip_count,
            "avg_trip_seconds": self.avg_trip_seconds,
            "avg_moves": self.avg_moves,
            "avg_stops": self.avg_stops,
        }


def summarize_periods(aggregates: list[TripAggregate]) -> list[PeriodSummary]:
    """Roll one day of aggregates into morning/afternoon/evening summaries.

    Trips starting in the uncovered hour ranges (before 5h, the 12h hour,
    and the 18h hour) belong to no period and are excluded.
    """
    if not aggregates:
        return []
    dates = {a.service_date for a in aggregates}
    if len(dates) > 1:
        raise ValueError("period summaries cover exactly one service date")
    out: list[PeriodSummary] = []
    for name, _, _ in PERIODS:
        bucket = [a for a in aggregates if period_of(a.start_time_s) == name]
        if not bucket:
            continue
        n = len(bucket)
        out.append(
            PeriodSummary(
                service_date=next(iter(dates)),
                period=name,
                trip_count=n,
                avg_trip_seconds=sum(a.total_time_length for a in bucket) / n,
                avg_moves=sum(a.total_move for a in bucket) / n,
                avg_stops=sum(a.total_stop for a in bucket) / n,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Edge anomaly detection
# ---------------------------------------------------------------------------


def detect_edge_anomalies(
    aggregates: list[TripAggregate],
    sched: Optional[ScheduleDB],
    clock: datetime,
    observed_trips: Optional[set[tuple[int, date]]] = None,
    grace_s: int = MISSING_TRIP_GRACE_S,
    factor_low: float = DURATION_FACTOR_LOW,
    factor_high: float = DURATION_FACTOR_HIGH,
    default_duration_s: int = DEFAULT_SCHEDULED_DURATION_S,
    online_since: Optional[datetime] = None,
) -> list[Feedback]:
    """Real-time schedule checks: trips that never appeared, and finished
    trips whose length strays outside the configured factors of schedule.

    Scheduled starts earlier than online_since are not judged: a node
    cannot tell a skipped trip from one it was simply not watching.
    """
    feedback: list[Feedback] = []
    if observed_trips is None:
        observed_trips = {(a.trip_id, a.service_date) for a in aggregates}
    if sched is not None:
        on_date = clock.date()
        if online_since is None:
            # Without an explicit online instant, judge only the clock's own
            # service date; earlier days were never under observation.
            online_since = datetime(on_date.year, on_date.month, on_date.day, tzinfo=timezone.utc)
        for day in (on_date - timedelta(days=1), on_date):
            for trip in sched.trips_on(day.weekday()):
                sched_start = datetime(day.year, day.month, day.day, tzinfo=timezone.utc) + timedelta(
                    seconds=trip.start_s
                )
                if sched_start < online_since:
                    continue
                if sched_start + timedelta(seconds=grace_s) >= clock:
                    continue
                try:
                    trip_id = int(trip.trip_id)
                except ValueError:
                    continue
                if (trip_id, day) not in observed_trips:
                    feedback.append(
                        Feedback(
                            layer=Layer.EDGE,
                            latency_class=LatencyClass.REAL_TIME,
                            kind=FeedbackKind.MISSING_TRIP,
                            subject=f"{trip.trip_id}@{day.isoformat()}",
                            detail=f"no tuples {grace_s}s past scheduled start {format_hms(trip.start_s)}",
                            emitted_at=clock,
                        )
                    )
    for agg in aggregates:
        scheduled = None
        if sched is not None:
            scheduled = sched.scheduled_duration(str(agg.trip_id))
        scheduled = scheduled or default_duration_s
        low, high = factor_low * scheduled, factor_high * scheduled
        if not low <= agg.total_time_length <= high:
            feedback.append(
                Feedback(
                    layer=Layer.EDGE,
                    latency_class=LatencyClass.REAL_TIME,
                    kind=FeedbackKind.TRIP_DURATION_ANOMALY,
                    subject=f"{agg.trip_id}@{agg.service_date.isoformat()}",
                    detail=(
                        f"trip length {agg.total_time_length}s outside "
                        f"[{low:.0f}s, {high:.0f}s] of scheduled {scheduled}s"
                    ),
                    emitted_at=clock,
                )
            )
    return feedback


# ---------------------------------------------------------------------------
# Edge node orchestration
# ---------------------------------------------------------------------------


@dataclass
class EdgeBatch:
    """Everything one processed window sends toward the fog layer."""

    vehicle: int
    window_start: datetime
    records: list[MovementRecord]
    aggregates: list[TripAggregate]
    summaries: list[PeriodSummary]
    report: CleaningReport
    feedback: list[Feedback]

    def is_empty(self) -> bool:
        return not (self.records or self.aggregates or self.summaries) and self.report.received == 0


def encode_batch(batch: EdgeBatch) -> bytes:
    """Wire form: one movement CSV line per record, then a JSON trailer."""
    import csv as _csv
    import io as _io

    buf = _io.StringIO()
    writer = _csv.writer(buf)
    for rec in batch.records:
        writer.writerow(serialize_movement(rec))
    trailer = {
        "vehicle": batch.vehicle,
        "window_start": format_timestamp(batch.window_start),
        "aggregates": [a.as_dict() for a in batch.aggregates],
        "summaries": [s.as_dict() for s in batch.summaries],
        "report": batch.report.as_dict(),
    }
    buf.write(json.dumps(trailer, sort_keys=True))
    buf.write("\n")
    return buf.getvalue().encode("utf-8")


def decode_batch(payload: bytes) -> tuple[list[MovementRecord], dict]:
    import csv as _csv
    import io as _io

    text = payload.decode("utf-8")
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty edge batch")
    trailer = json.loads(lines[-1])
    records = [parse_movement(row) for row in _csv.reader(_io.StringIO("\n".join(lines[:-1])))]
    return records, trailer


TRIP_CLOSE_GAP_S = 600


class EdgeNode:
    """One bus's edge process: windows in, cleaned movement batches out."""

    def __init__(
        self,
        vehicle: int,
        sched: Optional[ScheduleDB] = None,
        route_names: Iterable[str] = (),
        window_s: int = WINDOW_SECONDS,
        threshold_m: float = STOP_MOVE_THRESHOLD_M,
        missing_limit: int = MISSING_TUPLE_LIMIT,
        grace_s: int = MISSING_TRIP_GRACE_S,
        factor_low: float = DURATION_FACTOR_LOW,
        factor_high: float = DURATION_FACTOR_HIGH,
        cleaning_enabled: bool = True,
        online_since: Optional[datetime] = None,
    ):
        self.vehicle = vehicle
        self.sched = sched
        self.threshold_m = threshold_m
        self.grace_s = grace_s
        self.factor_low = factor_low
        self.factor_high = factor_high
        self.online_since = online_since
        self.assigner = WindowAssigner(window_s)
        self.cleaner = EdgeCleaner(
            route_names, missing_limit=missing_limit, period_s=window_s, enabled=cleaning_enabled
        )
        self.tuples_in = 0
        self._prev: dict[tuple[int, date], MovementRecord] = {}
        self._open_trips: dict[tuple[int, date], list[MovementRecord]] = {}
        self._day_aggregates: dict[date, list[TripAggregate]] = {}
        self._summarized_days: set[date] = set()
        self._observed: set[tuple[int, date]] = set()
        self._reported: set[str] = set()

    def push(self, element: StreamElement) -> list[EdgeBatch]:
        self.tuples_in += 1
        return [self._process_window(w) for w in self.assigner.push(element)]

    def finish(self) -> list[EdgeBatch]:
        """Flush open windows, close every open trip, summarize every day."""
        batches = [self._process_window(w) for w in self.assigner.flush()]
        final = self._finalize()
        if final is not None:
            batches.append(final)
        return batches

    # -- internals --

    def _process_window(self, window: TimeWindow) -> EdgeBatch:
        if self.online_since is None:
            self.online_since = window.window_start
        cleaned, report = self.cleaner.clean(window)
        clock = window.window_end
        records: list[MovementRecord] = []
        closed: list[TripAggregate] = []
        for t in cleaned:
            trip = t.trip_key
            if isinstance(trip, _Missing):
                records.append(MovementRecord(base=t, motion=Motion.STOP, distance_from_prev=None))
                continue
            key = (trip, t.service_date())
            self._observed.add(key)
            closed.extend(self._close_other_trips(key))
            prev = self._prev.get(key)
            rec = tag_stop_move(prev, t, self.threshold_m)
            self._prev[key] = rec
            self._open_trips.setdefault(key, []).append(rec)
            records.append(rec)
        closed.extend(self._close_stale_trips(clock))
        summaries = self._summaries_for_finished_days(clock)
        feedback = self._anomaly_feedback(closed, clock)
        return EdgeBatch(
            vehicle=self.vehicle,
            window_start=window.window_start,
            records=records,
            aggregates=closed,
            summaries=summaries,
            report=report,
            feedback=feedback,
        )

    def _close_other_trips(self, active_key: tuple[int, date]) -> list[TripAggregate]:
        done = [k for k in self._open_trips if k != active_key]
        return [self._close_trip(k) for k in done]

    def _close_stale_trips(self, clock: datetime) -> list[TripAggregate]:
        stale = [
            k
            for k, recs in self._open_trips.items()
            if (clock - recs[-1].base.timestamp).total_seconds() > TRIP_CLOSE_GAP_S
        ]
        return [self._close_trip(k) for k in stale]

    def _close_trip(self, key: tuple[int, date]) -> TripAggregate:
        records = self._open_trips.pop(key)
        self._prev.pop(key, None)
        agg = aggregate_trip(records)
        self._day_aggregates.setdefault(agg.service_date, []).append(agg)
        return agg

    def _summaries_for_finished_days(self, clock: datetime) -> list[PeriodSummary]:
        out: list[PeriodSummary] = []
        for day, aggs in sorted(self._day_aggregates.items()):
            if day in self._summarized_days:
                continue
            day_end = datetime(day.year, day.month, day.day, tzinfo=timezone.utc) + timedelta(days=1)
            open_on_day = any(k[1] == day for k in self._open_trips)
            if clock >= day_end + timedelta(seconds=TRIP_CLOSE_GAP_S) and not open_on_day:
                out.extend(summarize_periods(aggs))
                self._summarized_days.add(day)
        return out

    def _anomaly_feedback(self, closed: list[TripAggregate], clock: datetime) -> list[Feedback]:
        raw = detect_edge_anomalies(
            closed,
            self.sched,
            clock,
            observed_trips=self._observed,
            grace_s=self.grace_s,
            factor_low=self.factor_low,
            factor_high=self.factor_high,
            online_since=self.online_since,
        )
        fresh = []
        for fb in raw:
            tag = f"{fb.kind.value}:{fb.subject}"
            if tag not in self._reported:
                self._reported.add(tag)
                fresh.append(fb)
        return fresh

    def _finalize(self) -> Optional[EdgeBatch]:
        clocks = [recs[-1].base.timestamp for recs in self._open_trips.values()]
        clock = max(clocks) if clocks else datetime.fromtimestamp(0, tz=timezone.utc)
        closed = [self._close_trip(k) for k in list(self._open_trips)]
        summaries: list[PeriodSummary] = []
        for day, aggs in sorted(self._day_aggregates.items()):
            if day not in self._summarized_days:
                summaries.extend(summarize_periods(aggs))
                self._summarized_days.add(day)
        feedback = self._anomaly_feedback(closed, clock + timedelta(seconds=1))
        if not (closed or summaries or feedback):
            return None
        return EdgeBatch(
            vehicle=self.vehicle,
            window_start=clock,
            records=[],
            aggregates=closed,
            summaries=summaries,
            report=CleaningReport(),
            feedback=feedback,
        )
