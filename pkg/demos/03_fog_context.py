"""Edge batches flowing into a fog node: context, arrivals, clusters.

Runs one clean synthetic day through the edge, hands every batch to a fog
node, and prints what the fog adds on top: street and station context per
movement record, per-station arrival/departure stamps, and the spatial
clusters its density scan finds around the stations.
"""

from datetime import datetime, timedelta, timezone

from tritide import (
    Category,
    EdgeNode,
    FogNode,
    SynthConfig,
    generate_feed,
    synthesize_network,
)

ONLINE = datetime(2017, 2, 14, tzinfo=timezone.utc)


def main():
    cfg = SynthConfig(
        weekday_trips=4,
        sunday_trips=2,
        n_vehicles=1,
        days=1,
        sample_period_s=5,
        gps_noise_sigma_m=2.0,
        rng_seed=3,
    )
    net = synthesize_network(cfg)
    feed, _ = generate_feed(cfg, net.sched, net.geo, net.dispatch)

    node = EdgeNode(vehicle=1, sched=net.sched, route_names=[cfg.route_name], online_since=ONLINE)
    fog = FogNode(net.sched, geo=net.geo, depot=net.depot)
    for element in feed:
        for batch in node.push(element):
            fog.receive(batch)
    for batch in node.finish():
        fog.receive(batch)
    result = fog.process(ONLINE + timedelta(days=1))

    print("=== contextualized movement (first stopover run of the day) ===")
    shown = 0
    for rec in result.contextualized:
        if rec.category is not Category.STOPOVER or rec.station_id is None:
            continue
        print(
            f"  {rec.base.timestamp:%H:%M:%S} {rec.motion.value:<5}"
            f" station={rec.station_id} street={rec.street_name}"
            f" dir={rec.direction.value if rec.direction else '-'}"
            f" arr={rec.arrival_time:%H:%M:%S} dep={rec.departure_time:%H:%M:%S}"
        )
        shown += 1
        if shown >= 4:
            break

    visits = {}
    for rec in result.contextualized:
        if rec.category is Category.STOPOVER and rec.station_id and rec.arrival_time:
            visits[(rec.base.trip_key, rec.station_id, rec.arrival_time)] = rec.departure_time
    print()
    print(f"=== station visits: {len(visits)} stopover runs across the day ===")
    first_trip = min(trip for trip, _, _ in visits)
    for (trip, station, arr), dep in sorted(visits.items(), key=lambda kv: kv[0][2]):
        if trip == first_trip:
            print(f"  trip {trip} at {station}: {arr:%H:%M:%S} -> {dep:%H:%M:%S}")

    print()
    print(f"=== spatial clusters (eps=15 m, minPts=8) ===")
    for cluster in result.clusters:
        station, offset_m = cluster.nearest_station or ("-", float("nan"))
        print(
            f"  cluster {cluster.cluster_id}: {len(cluster.members)} stop points,"
            f" {offset_m:.1f} m from station {station},"
            f" centroid ({cluster.centroid.lat:.5f}, {cluster.centroid.lng:.5f})"
        )
    print(f"  noise points: {len(result.noise)}")
    print(f"  rows staged for the cloud: {len(result.cloud_rows)}")


if __name__ == "__main__":
    main()
