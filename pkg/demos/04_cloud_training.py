"""Punctuality learning in the cloud layer, day over day.

Runs four simulated days through the whole pipeline.  Day 2 carries a storm
slowdown, so arrivals drift late and the labels stop being all on-time.  The
cloud trains at the end of each daily epoch and tests the previous model on
the newest day first — the accuracy column is therefore always out-of-sample.
"""

from tritide import build_topology, generate_feed, run

CONFIG = {
    "synth": {
        "weekday_trips": 8,
        "sunday_trips": 4,
        "n_vehicles": 1,
        "days": 4,
        "rng_seed": 11,
        "storm_days": [{"day": 1, "slowdown": 1.45}],
    },
    "cloud": {"n_trees": 30},
}


def main():
    topology = build_topology(CONFIG)
    feed, _ = generate_feed(
        topology.synth_cfg, topology.net.sched, topology.net.geo, topology.net.dispatch
    )
    report = run(topology, feed)

    print("=== daily cloud epochs ===")
    print(f"  {'epoch end':<26} {'rows':>6} {'examples':>9} {'tested':>7} {'accuracy':>9} {'trained_on':>11}")
    for row in report.accuracy:
        acc = "-" if row["accuracy"] is None else f"{row['accuracy']:.3f}"
        print(
            f"  {row['processed_at']:<26} {row['rows_received']:>6}"
            f" {row['examples']:>9} {row['tested']:>7} {acc:>9} {row['trained_on']:>11}"
        )

    print()
    print("=== label mix per day (from trip summaries) ===")
    by_day = {}
    for trip in report.trips:
        day = trip["service_date"]
        by_day.setdefault(day, []).append(trip)
    for day in sorted(by_day):
        print(f"  {day}: {len(by_day[day])} trips aggregated")

    cloud_fb = [f for f in report.feedback if f["layer"] == "Cloud"]
    print()
    print(f"=== cloud feedback ({len(cloud_fb)} predictions pushed back down) ===")
    for entry in cloud_fb[:5]:
        print(f"  {entry['kind']}: {entry['subject']} — {entry['detail']}")
    if len(cloud_fb) > 5:
        print(f"  ... and {len(cloud_fb) - 5} more")


if __name__ == "__main__":
    main()
