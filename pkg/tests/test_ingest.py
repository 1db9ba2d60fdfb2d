"""Tests for schedule/geography loading, the synthetic generator, and replay."""

from __future__ import annotations

import io
import json
from datetime import date

import pytest

from tritide.feedcore import Direction, FeedTuple, GeoPoint, MalformedRecord, haversine_m, serialize_tuple
from tritide.ingest import (
    AS_FAST_AS_POSSIBLE,
    CongestionAt,
    CorruptRate,
    DropRate,
    DuplicateRate,
    GenerationError,
    LoadError,
    MissingTripAt,
    SynthConfig,
    TripDurationAt,
    generate_feed,
    geodb_to_geojson,
    load_geojson,
    load_gtfs,
    replay_csv,
    synthesize_network,
    write_feed_csv,
)

# ---------------------------------------------------------------------------
# GTFS loading
# ---------------------------------------------------------------------------


def write_gtfs(root, stop_rows, route_rows, trip_rows, stop_time_rows, calendar_rows):
    (root / "stops.txt").write_text("stop_id,stop_name,stop_lat,stop_lon\n" + "\n".join(stop_rows) + "\n")
    (root / "routes.txt").write_text("route_id,route_long_name\n" + "\n".join(route_rows) + "\n")
    (root / "trips.txt").write_text("route_id,service_id,trip_id,direction_id\n" + "\n".join(trip_rows) + "\n")
    (root / "stop_times.txt").write_text(
        "trip_id,arrival_time,departure_time,stop_id,stop_sequence\n" + "\n".join(stop_time_rows) + "\n"
    )
    (root / "calendar.txt").write_text(
        "service_id,monday,tuesday,wednesday,thursday,friday,saturday,sunday,start_date,end_date\n"
        + "\n".join(calendar_rows)
        + "\n"
    )


def minimal_gtfs(root):
    write_gtfs(
        root,
        stop_rows=["A,Stop A,46.09,-64.80", "B,Stop B,46.10,-64.79"],
        route_rows=["51,Main Line"],
        trip_rows=["51,WD,t1,0"],
        stop_time_rows=["t1,06:00:00,06:00:30,A,1", "t1,06:10:00,06:10:30,B,2"],
        calendar_rows=["WD,1,1,1,1,1,1,0,20170101,20171231"],
    )


def test_load_minimal_gtfs(tmp_path):
    minimal_gtfs(tmp_path)
    sched = load_gtfs(tmp_path)
    assert set(sched.stations) == {"A", "B"}
    trip = sched.trip("t1")
    assert trip is not None
    assert trip.route_id == "51"
    assert trip.start_s == 6 * 3600
    assert trip.end_s == 6 * 3600 + 600
    assert trip.service_days == frozenset(range(6))
    assert sched.scheduled_arrivals[("t1", "B")] == 6 * 3600 + 600
    assert sched.station_order[("51", Direction.OUTBOUND)] == ["A", "B"]
    # only one direction observed: the other defaults to the reverse order
    assert sched.station_order[("51", Direction.RETURN)] == ["B", "A"]


def test_unknown_stop_reference_is_named(tmp_path):
    minimal_gtfs(tmp_path)
    (tmp_path / "stop_times.txt").write_text(
        "trip_id,arrival_time,departure_time,stop_id,stop_sequence\n"
        "t1,06:00:00,06:00:30,A,1\n"
        "t1,06:10:00,06:10:30,X9,2\n"
    )
    with pytest.raises(LoadError) as exc:
        load_gtfs(tmp_path)
    assert "X9" in str(exc.value)
    assert "row 3" in str(exc.value)


def test_trip_ending_before_start_is_rejected(tmp_path):
    minimal_gtfs(tmp_path)
    (tmp_path / "stop_times.txt").write_text(
        "trip_id,arrival_time,departure_time,stop_id,stop_sequence\n"
        "t1,06:10:00,06:10:30,A,1\n"
        "t1,06:00:00,06:00:30,B,2\n"
    )
    with pytest.raises(LoadError) as exc:
        load_gtfs(tmp_path)
    assert "t1" in str(exc.value)


def test_weekday_trip_count_filter(tmp_path):
    trip_rows = [f"51,WD,w{i},0" for i in range(66)] + [f"51,SU,s{i},0" for i in range(23)]
    stop_time_rows = []
    for prefix, count in (("w", 66), ("s", 23)):
        for i in range(count):
            start = 5 * 3600 + i * 60
            h1, m1 = divmod(start // 60, 60)
            h2, m2 = divmod((start + 600) // 60, 60)
            stop_time_rows.append(f"{prefix}{i},{h1:02d}:{m1:02d}:00,{h1:02d}:{m1:02d}:30,A,1")
            stop_time_rows.append(f"{prefix}{i},{h2:02d}:{m2:02d}:00,{h2:02d}:{m2:02d}:30,B,2")
    write_gtfs(
        tmp_path,
        stop_rows=["A,Stop A,46.09,-64.80", "B,Stop B,46.10,-64.79"],
        route_rows=["51,Main Line"],
        trip_rows=trip_rows,
        stop_time_rows=stop_time_rows,
        calendar_rows=["WD,1,1,1,1,1,1,0,20170101,20171231", "SU,0,0,0,0,0,0,1,20170101,20171231"],
    )
    sched = load_gtfs(tmp_path)
    assert len(sched.trips_on(0)) == 66  # Monday
    assert len(sched.trips_on(6)) == 23  # Sunday


# ---------------------------------------------------------------------------
# GeoJSON loading
# ---------------------------------------------------------------------------


def test_geojson_round_trip(tmp_path):
    net = synthesize_network(SynthConfig())
    path = tmp_path / "net.geojson"
    path.write_text(json.dumps(geodb_to_geojson(net.geo)))
    geo = load_geojson(path)
    assert [s.name for s in geo.streets] == [s.name for s in net.geo.streets]
    assert [i.intersection_id for i in geo.intersections] == [
        i.intersection_id for i in net.geo.intersections
    ]


def test_geojson_rejects_unnamed_street(tmp_path):
    doc = {
        "type": "FeatureCollection",
        "features": [
            {
                "type": "Feature",
                "properties": {},
                "geometry": {"type": "LineString", "coordinates": [[-64.8, 46.09], [-64.79, 46.1]]},
            }
        ],
    }
    path = tmp_path / "bad.geojson"
    path.write_text(json.dumps(doc))
    with pytest.raises(LoadError):
        load_geojson(path)


# ---------------------------------------------------------------------------
# Synthetic network and feed
# ---------------------------------------------------------------------------


def test_network_shape():
    net = synthesize_network(SynthConfig())
    assert len(net.sched.stations) == 12
    assert len(net.geo.streets) == 3
    assert len(net.geo.intersections) == 2
    # every station sits on some street polyline
    weekday = net.sched.trips_on(1)
    assert len(weekday) == 66
    assert len(net.sched.trips_on(6)) == 23
    for trip in weekday:
        assert trip.end_s - trip.start_s == 2700


def test_single_trip_sample_count_and_alignment():
    cfg = SynthConfig(weekday_trips=1, sunday_trips=1, n_vehicles=1, days=1)
    stream, truth = generate_feed(cfg)
    elems = list(stream)
    assert len(elems) == cfg.trip_duration_s // cfg.sample_period_s == 540
    assert all(isinstance(e, FeedTuple) for e in elems)
    trip = truth.trips[0]
    # first tuple lands exactly on the scheduled start
    assert elems[0].seconds_of_day == trip.sched_start_s
    assert trip.duration_s == cfg.trip_duration_s - cfg.sample_period_s
    # with no anomalies every station is visited once, with real dwell time
    assert trip.visits == list(synthesize_network(cfg).sched.station_order[("51", Direction.OUTBOUND)])
    for dwell in trip.dwells:
        assert (dwell.end - dwell.start).total_seconds() >= 5


def test_missing_trip_plan_removes_the_hour(capsys):
    cfg = SynthConfig(weekday_trips=12, sunday_trips=4, n_vehicles=2, days=1,
                      anomalies=[MissingTripAt(0, 6)])
    stream, truth = generate_feed(cfg)
    elems = list(stream)
    assert truth.missing_trips, "an hour-6 trip should exist in a 12-trip roster"
    missing_ids = {int(tid) for tid, _ in truth.missing_trips}
    observed = {e.trip_id_tta for e in elems}
    assert missing_ids.isdisjoint(observed)
    net = synthesize_network(cfg)
    for tid, _ in truth.missing_trips:
        assert net.sched.trip(tid).start_s // 3600 == 6


def test_streams_are_byte_identical_per_seed(tmp_path):
    cfg = SynthConfig(weekday_trips=4, sunday_trips=2, n_vehicles=1, days=1,
                      gps_noise_sigma_m=3.0, anomalies=[DuplicateRate(0.1)])
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    stream, _ = generate_feed(cfg)
    write_feed_csv(a, stream)
    stream, _ = generate_feed(cfg)
    write_feed_csv(b, stream)
    assert a.read_bytes() == b.read_bytes()
    different, _ = generate_feed(SynthConfig(weekday_trips=4, sunday_trips=2, n_vehicles=1,
                                             days=1, gps_noise_sigma_m=3.0,
                                             anomalies=[DuplicateRate(0.1)], rng_seed=7))
    c = tmp_path / "c.csv"
    write_feed_csv(c, different)
    assert a.read_bytes() != c.read_bytes()


def test_duplicates_are_exact_adjacent_copies():
    cfg = SynthConfig(weekday_trips=2, sunday_trips=1, n_vehicles=1, days=1,
                      anomalies=[DuplicateRate(0.2)])
    stream, truth = generate_feed(cfg)
    elems = list(stream)
    assert truth.duplicates_injected > 0
    dup_pairs = sum(1 for i in range(1, len(elems)) if elems[i] == elems[i - 1])
    assert dup_pairs == truth.duplicates_injected


def test_forced_durations_and_storm():
    cfg = SynthConfig(weekday_trips=12, sunday_trips=4, n_vehicles=2, days=2,
                      anomalies=[TripDurationAt(0, 9, 897), TripDurationAt(0, 21, 13468)])
    stream, truth = generate_feed(cfg)
    _ = sum(1 for _ in stream)
    forced = {t.forced_duration: t.duration_s for t in truth.trips if t.forced_duration}
    assert forced == {897: 897, 13468: 13468}


def test_congestion_pauses_sit_on_the_route():
    net = synthesize_network(SynthConfig())
    s5 = net.sched.stations["6810005"].point
    s6 = net.sched.stations["6810006"].point
    mid = GeoPoint((s5.lat + s6.lat) / 2, (s5.lng + s6.lng) / 2)
    cfg = SynthConfig(weekday_trips=4, sunday_trips=2, n_vehicles=1, days=1,
                      anomalies=[CongestionAt(mid, 60)])
    stream, truth = generate_feed(cfg)
    _ = sum(1 for _ in stream)
    pauses = [d for t in truth.trips for d in t.dwells if d.station_id is None]
    assert pauses, "every trip passes the congested leg"
    for pause in pauses:
        assert haversine_m(pause.point, mid) <= 60.0
        assert (pause.end - pause.start).total_seconds() == 60


def test_overbooked_vehicle_is_rejected():
    cfg = SynthConfig(weekday_trips=66, sunday_trips=23, n_vehicles=1, days=1)
    with pytest.raises(GenerationError):
        stream, _ = generate_feed(cfg)
        list(stream)


def test_rate_validation():
    with pytest.raises(GenerationError):
        generate_feed(SynthConfig(anomalies=[DropRate(1.5)]))


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------


def test_replay_preserves_order_and_count(tmp_path):
    cfg = SynthConfig(weekday_trips=1, sunday_trips=1, n_vehicles=1, days=1)
    stream, _ = generate_feed(cfg)
    elems = list(stream)
    path = tmp_path / "feed.csv"
    write_feed_csv(path, elems)
    replayed = list(replay_csv(path, AS_FAST_AS_POSSIBLE))
    assert replayed == elems


def test_replay_forwards_malformed_rows(tmp_path):
    cfg = SynthConfig(weekday_trips=1, sunday_trips=1, n_vehicles=1, days=1)
    stream, _ = generate_feed(cfg)
    elems = list(stream)[:3]
    rows = [serialize_tuple(e) for e in elems]
    rows[1] = rows[1][:16]  # drop one field from the middle row
    path = tmp_path / "feed.csv"
    with path.open("w", newline="") as fh:
        import csv as _csv

        _csv.writer(fh).writerows(rows)
    out = list(replay_csv(path))
    assert isinstance(out[0], FeedTuple)
    assert isinstance(out[1], MalformedRecord)
    assert isinstance(out[2], FeedTuple)
    assert len(out) == 3


def test_replay_empty_file_is_empty_stream(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    assert list(replay_csv(path)) == []
