"""One synthetic service day through a single on-vehicle edge node.

Generates a small weekday roster with injected duplicates, drops, and
corruption, pushes every raw element through the edge node, and prints the
cleaning ledger, per-trip aggregates, and time-of-day summaries the node
would upload.
"""

from datetime import datetime, timezone

from tritide import (
    CleaningReport,
    CorruptRate,
    DropRate,
    DuplicateRate,
    EdgeNode,
    SynthConfig,
    generate_feed,
    synthesize_network,
)


def main():
    cfg = SynthConfig(
        weekday_trips=6,
        sunday_trips=2,
        n_vehicles=1,
        days=1,
        rng_seed=7,
        anomalies=(DuplicateRate(0.05), DropRate(0.02), CorruptRate(0.02)),
    )
    net = synthesize_network(cfg)
    feed, _ = generate_feed(cfg, net.sched, net.geo, net.dispatch)

    node = EdgeNode(
        vehicle=1,
        sched=net.sched,
        route_names=[cfg.route_name],
        online_since=datetime(2017, 2, 14, tzinfo=timezone.utc),
    )
    total = CleaningReport()
    aggregates, summaries = [], []
    for element in feed:
        for batch in node.push(element):
            batch.report.merged_into(total)
            aggregates.extend(batch.aggregates)
            summaries.extend(batch.summaries)
    for batch in node.finish():
        batch.report.merged_into(total)
        aggregates.extend(batch.aggregates)
        summaries.extend(batch.summaries)

    print("=== cleaning ledger ===")
    for key, value in total.as_dict().items():
        print(f"  {key}: {value}")
    print(f"  balanced: {total.balanced()}")

    print()
    print("=== per-trip aggregates ===")
    print(f"  {'trip':>6} {'start':>8} {'moves':>6} {'stops':>6} {'seconds':>8}")
    for agg in aggregates:
        doc = agg.as_dict()
        h, rem = divmod(doc["start_time_s"], 3600)
        print(
            f"  {doc['trip_id']:>6} {f'{h:02d}:{rem // 60:02d}':>8}"
            f" {doc['total_move']:>6} {doc['total_stop']:>6}"
            f" {doc['total_time_length']:>8.0f}"
        )

    print()
    print("=== time-of-day summaries ===")
    for s in summaries:
        print(
            f"  {s.period:<9} trips={s.trip_count}"
            f" avg_seconds={s.avg_trip_seconds:.0f}"
            f" avg_moves={s.avg_moves:.1f} avg_stops={s.avg_stops:.1f}"
        )


if __name__ == "__main__":
    main()
