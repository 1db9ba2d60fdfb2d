"""Injected service anomalies and the edge feedback that catches them.

Three drills against the edge detector:
  * two scheduled trips suppressed entirely (never dispatched),
  * one trip forced to finish in 897 seconds and one stretched to 13468,
  * a hand-built stream with a 101-sample silence inside a single trip.
Each prints the injected truth next to the feedback the edge emitted.
"""

from datetime import datetime, timedelta, timezone

from tritide import (
    CleaningReport,
    EdgeCleaner,
    EdgeNode,
    MissingTripAt,
    SynthConfig,
    TripDurationAt,
    assign_windows,
    generate_feed,
    parse_tuple,
    synthesize_network,
)

BASE = datetime(2017, 2, 14, 6, 0, 0, tzinfo=timezone.utc)


def main():
    cfg = SynthConfig(
        weekday_trips=12,
        sunday_trips=6,
        n_vehicles=1,
        days=1,
        rng_seed=11,
        anomalies=(
            MissingTripAt(day=0, hour=6),
            MissingTripAt(day=0, hour=7),
            TripDurationAt(day=0, hour=9, duration_s=897),
            TripDurationAt(day=0, hour=21, duration_s=13468),
        ),
    )
    net = synthesize_network(cfg)
    feed, truth = generate_feed(cfg, net.sched, net.geo, net.dispatch)
    node = EdgeNode(
        vehicle=1,
        sched=net.sched,
        route_names=[cfg.route_name],
        online_since=datetime(2017, 2, 14, tzinfo=timezone.utc),
    )
    feedback = []
    for element in feed:
        for batch in node.push(element):
            feedback.extend(batch.feedback)
    for batch in node.finish():
        feedback.extend(batch.feedback)

    print("=== drill 1: suppressed trips ===")
    print(f"  injected: {['{}@{}'.format(t, d) for t, d in truth.missing_trips]}")
    missing = [f for f in feedback if f.kind.value == "MissingTrip"]
    for f in missing:
        print(f"  feedback: {f.subject} ({f.latency_class.value}) — {f.detail}")
    print("  note: only hour 6 had a scheduled departure; hour 7 was already empty")

    print()
    print("=== drill 2: forced trip durations ===")
    for t in truth.trips:
        if t.forced_duration:
            print(f"  injected: trip {t.trip_id} forced to {t.forced_duration}s")
    for f in feedback:
        if f.kind.value == "TripDurationAnomaly":
            print(f"  feedback: {f.subject} — {f.detail}")

    print()
    print("=== drill 3: a 101-sample silence inside one trip ===")

    def tuple_at(offset_s):
        ts = (BASE + timedelta(seconds=offset_s)).isoformat()
        return parse_tuple([
            "120", "7", "Route 51", "51", "PLAZA BLVD", "5283", "31",
            "1001", "06:00:00", "06:45:00",
            "1878", "506810", "1878", "En Route",
            "46.0878", "-64.7782", ts,
        ])

    stream = [tuple_at(slot * 5) for slot in range(20)]
    stream += [tuple_at((121 + k) * 5) for k in range(5)]  # resumes after the gap
    cleaner = EdgeCleaner(["Route 51"], period_s=5)
    report = CleaningReport()
    for window in assign_windows(stream):
        _, rep = cleaner.clean(window)
        rep.merged_into(report)
    print(f"  tuples sent: {len(stream)} (gap of 101 sample slots in the middle)")
    print(f"  trips deleted for missing data: {report.trips_deleted_for_missing}")
    print(f"  tuples dropped with the deleted trip: {report.trip_deletion_drops}")
    print(f"  ledger still balances: {report.balanced()}")


if __name__ == "__main__":
    main()
