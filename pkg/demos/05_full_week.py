"""A full simulated week: volume funnel and feedback latency by layer.

The point of the three-layer split is that each hop carries less data than
the one below it while feedback gets slower the higher it originates.  This
runs seven days with the default anomaly mix and prints both effects.
"""

import time

from tritide import build_topology, generate_feed, layer_metrics, run

CONFIG = {
    "synth": {
        "weekday_trips": 12,
        "sunday_trips": 6,
        "n_vehicles": 1,
        "days": 7,
        "rng_seed": 11,
        "duplicate_rate": 0.05,
        "drop_rate": 0.02,
        "corrupt_rate": 0.02,
        "missing_trips": [{"day": 2, "hour": 11}],
        "duration_anomalies": [{"day": 1, "hour": 8, "duration_s": 5000}],
        "storm_days": [{"day": 3, "slowdown": 1.4}],
    },
    "cloud": {"n_trees": 50},
}


def main():
    topology = build_topology(CONFIG)
    feed, truth = generate_feed(
        topology.synth_cfg, topology.net.sched, topology.net.geo, topology.net.dispatch
    )
    t0 = time.monotonic()
    report = run(topology, feed)
    wall = time.monotonic() - t0

    print(f"simulated week processed in {wall:.1f}s of wall clock")
    print()
    print("=== volume funnel (tuples and bytes per layer) ===")
    print(f"  {'layer':<7} {'tuples_in':>10} {'tuples_out':>11} {'bytes_in':>10} {'bytes_out':>10}")
    for row in layer_metrics(report):
        print(
            f"  {row['layer']:<7} {row['tuples_in']:>10} {row['tuples_out']:>11}"
            f" {row['bytes_in']:>10} {row['bytes_out']:>10}"
        )
    rows = layer_metrics(report)
    edge, fog = rows[0], rows[1]
    print(f"  edge keeps {edge['tuples_out'] / edge['tuples_in']:.1%} of raw tuples;")
    print(f"  fog forwards {fog['tuples_out'] / fog['tuples_in']:.1%} of what it receives")

    print()
    print("=== feedback latency by origin layer (simulated seconds) ===")
    print(f"  {'layer':<7} {'class':<13} {'count':>6} {'min_delay':>10} {'max_delay':>10}")
    for row in rows:
        if row["feedback_count"]:
            print(
                f"  {row['layer']:<7} {row['feedback_classes']:<13}"
                f" {row['feedback_count']:>6} {row['min_delay_s']:>10.4f} {row['max_delay_s']:>10.4f}"
            )

    kinds = sorted({f["kind"] for f in report.feedback})
    print()
    print(f"=== feedback kinds seen: {', '.join(kinds)} ===")
    print(f"injected missing trips reported: {len(truth.missing_trips)}")
    print(f"clusters found across the week: {len(report.clusters)}")


if __name__ == "__main__":
    main()
