"""Topology wiring and the discrete-event runner.

Builds one edge node per vehicle, a fog node, and a cloud node from a TOML
config, then pushes a feed through them on a simulated clock: edge windows
close as tuples arrive, window batches ride the edge→fog link, fog periods
fire on a fixed cadence, cluster members ride the fog→cloud link, the cloud
refits once per epoch, and every feedback message is delivered back down
with link latency.  The whole run is deterministic: identical config, seed,
and feed produce byte-identical reports.
"""

from __future__ import annotations

import heapq
import json
import time
from dataclasses import dataclass
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Union

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .cloud import CloudNode, ForestConfig
from .edge import CleaningReport, EdgeBatch, EdgeNode, encode_batch, decode_batch
from .feedcore import (
    Feedback,
    FeedbackKind,
    FeedTuple,
    LatencyClass,
    Layer,
    parse_timestamp,
    serialize_tuple,
)
from .fog import FogNode, FogResult, decode_cloud_rows, encode_cloud_rows
from .ingest import (
    Anomaly,
    CorruptRate,
    DropRate,
    DuplicateRate,
    MissingTripAt,
    ScheduleDB,
    StormDay,
    StreamElement,
    SynthConfig,
    SynthNetwork,
    TripDurationAt,
    synthesize_network,
)

EDGE_LOCAL_DELAY_S = 0.005  # on-bus feedback reaches the driver console


class ConfigError(ValueError):
    """A config fails schema validation; the message names the dotted key."""


@dataclass(frozen=True)
class LinkConfig:
    """Latency model: fixed cost, per-KB cost, and serialization capacity."""

    fixed_ms: float
    per_kb_ms: float
    capacity_kb_s: float

    def delay_s(self, n_bytes: int) -> float:
        kb = n_bytes / 1024.0
        return (self.fixed_ms + self.per_kb_ms * kb) / 1000.0 + kb / self.capacity_kb_s


DEFAULT_LINKS = {
    "edge_fog": LinkConfig(fixed_ms=50.0, per_kb_ms=2.0, capacity_kb_s=1000.0),
    "fog_cloud": LinkConfig(fixed_ms=20.0, per_kb_ms=0.5, capacity_kb_s=10000.0),
}

DEFAULT_CLOUD_EPOCH_S = 86_400  # retrain once per simulated day


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------

# key -> (type, predicate, human constraint); bool checked before int
# (bool is an int subclass).
_SCHEMA: dict[str, dict[str, tuple[type, object, str]]] = {
    "topology": {
        "fog_nodes": (int, lambda v: v == 1, "must be 1 (single-region build)"),
        "cloud_nodes": (int, lambda v: v == 1, "must be 1"),
    },
    "edge": {
        "window_s": (int, lambda v: v > 0, "must be > 0"),
        "stop_move_threshold_m": ((int, float), lambda v: v > 0, "must be > 0"),
        "missing_limit": (int, lambda v: v >= 1, "must be >= 1"),
        "grace_s": (int, lambda v: v >= 0, "must be >= 0"),
        "duration_factor_low": ((int, float), lambda v: 0 < v < 1, "must be in (0, 1)"),
        "duration_factor_high": ((int, float), lambda v: v > 1, "must be > 1"),
        "cleaning_enabled": (bool, lambda v: True, ""),
    },
    "fog": {
        "eps_m": ((int, float), lambda v: v > 0, "must be > 0"),
        "min_pts": (int, lambda v: v >= 1, "must be >= 1"),
        "station_radius_m": ((int, float), lambda v: v > 0, "must be > 0"),
        "street_max_distance_m": ((int, float), lambda v: v > 0, "must be > 0"),
        "intersection_radius_m": ((int, float), lambda v: v > 0, "must be > 0"),
        "batch_period_s": (int, lambda v: v > 0, "must be > 0"),
    },
    "cloud": {
        "n_trees": (int, lambda v: v >= 1, "must be >= 1"),
        "features_per_tree": (int, lambda v: v >= 1, "must be >= 1"),
        "max_depth": (int, lambda v: v >= 1, "must be >= 1"),
        "min_leaf": (int, lambda v: v >= 1, "must be >= 1"),
        "seed": (int, lambda v: True, ""),
        "include_trip_id": (bool, lambda v: True, ""),
        "epoch_period_s": (int, lambda v: v > 0, "must be > 0"),
    },
    "links": {},  # nested, validated separately
    "synth": {
        "route_id": (str, lambda v: bool(v), "must be non-empty"),
        "route_name": (str, lambda v: bool(v), "must be non-empty"),
        "weekday_trips": (int, lambda v: v > 0, "must be > 0"),
        "sunday_trips": (int, lambda v: v > 0, "must be > 0"),
        "trip_duration_s": (int, lambda v: v > 0, "must be > 0"),
        "sample_period_s": (int, lambda v: v > 0, "must be > 0"),
        "gps_noise_sigma_m": ((int, float), lambda v: v >= 0, "must be >= 0"),
        "n_stations": (int, lambda v: v >= 2, "must be >= 2"),
        "n_vehicles": (int, lambda v: v >= 1, "must be >= 1"),
        "days": (int, lambda v: v >= 1, "must be >= 1"),
        "start_date": (str, lambda v: _is_date(v), "must be YYYY-MM-DD"),
        "rng_seed": (int, lambda v: True, ""),
        "duplicate_rate": ((int, float), lambda v: 0 <= v < 1, "must be in [0, 1)"),
        "drop_rate": ((int, float), lambda v: 0 <= v < 1, "must be in [0, 1)"),
        "corrupt_rate": ((int, float), lambda v: 0 <= v < 1, "must be in [0, 1)"),
        "missing_trips": (list, lambda v: True, ""),
        "duration_anomalies": (list, lambda v: True, ""),
        "storm_days": (list, lambda v: True, ""),
    },
}

_LINK_KEYS = {
    "fixed_ms": ((int, float), lambda v: v >= 0, "must be >= 0"),
    "per_kb_ms": ((int, float), lambda v: v >= 0, "must be >= 0"),
    "capacity_kb_s": ((int, float), lambda v: v > 0, "must be > 0"),
}


def _is_date(v) -> bool:
    try:
        date.fromisoformat(v)
        return True
    except (TypeError, ValueError):
        return False


def _check_key(path: str, value, spec) -> Optional[str]:
    expected, predicate, constraint = spec
    if expected is int and isinstance(value, bool):
        return f"{path}: must be an integer"
    if not isinstance(value, expected):
        kind = expected.__name__ if isinstance(expected, type) else "number"
        return f"{path}: must be a {kind}"
    if not predicate(value):
        return f"{path}: {constraint}"
    return None


def validate_config(cfg: dict) -> list[str]:
    """Schema errors as 'dotted.path: what is wrong' strings; empty if valid."""
    errors: list[str] = []
    if not isinstance(cfg, dict):
        return ["config: must be a table"]
    for section, content in sorted(cfg.items()):
        if section not in _SCHEMA:
            errors.append(f"{section}: unknown section")
            continue
        if not isinstance(content, dict):
            errors.append(f"{section}: must be a table")
            continue
        if section == "links":
            for link, link_cfg in sorted(content.items()):
                if link not in DEFAULT_LINKS:
                    errors.append(f"links.{link}: unknown link (edge_fog, fog_cloud)")
                    continue
                if not isinstance(link_cfg, dict):
                    errors.append(f"links.{link}: must be a table")
                    continue
                for key, value in sorted(link_cfg.items()):
                    if key not in _LINK_KEYS:
                        errors.append(f"links.{link}.{key}: unknown key")
                    else:
                        problem = _check_key(f"links.{link}.{key}", value, _LINK_KEYS[key])
                        if problem:
                            errors.append(problem)
            continue
        for key, value in sorted(content.items()):
            if key not in _SCHEMA[section]:
                errors.append(f"{section}.{key}: unknown key")
            else:
                problem = _check_key(f"{section}.{key}", value, _SCHEMA[section][key])
                if problem:
                    errors.append(problem)
    errors.extend(_validate_anomaly_lists(cfg.get("synth", {})))
    return errors


def _validate_anomaly_lists(synth: dict) -> list[str]:
    errors = []
    if not isinstance(synth, dict):
        return errors
    for i, entry in enumerate(synth.get("missing_trips", []) or []):
        path = f"synth.missing_trips[{i}]"
        if not isinstance(entry, dict) or set(entry) != {"day", "hour"}:
            errors.append(f"{path}: must be a table with keys day, hour")
        elif not all(isinstance(entry[k], int) and not isinstance(entry[k], bool) for k in entry):
            errors.append(f"{path}: day and hour must be integers")
    for i, entry in enumerate(synth.get("duration_anomalies", []) or []):
        path = f"synth.duration_anomalies[{i}]"
        if not isinstance(entry, dict) or set(entry) != {"day", "hour", "duration_s"}:
            errors.append(f"{path}: must be a table with keys day, hour, duration_s")
        elif not all(isinstance(entry[k], int) and not isinstance(entry[k], bool) for k in entry):
            errors.append(f"{path}: day, hour, and duration_s must be integers")
    for i, entry in enumerate(synth.get("storm_days", []) or []):
        path = f"synth.storm_days[{i}]"
        if not isinstance(entry, dict) or set(entry) != {"day", "slowdown"}:
            errors.append(f"{path}: must be a table with keys day, slowdown")
        elif (
            not isinstance(entry["day"], int)
            or isinstance(entry["day"], bool)
            or not isinstance(entry["slowdown"], (int, float))
            or isinstance(entry["slowdown"], bool)
            or entry["slowdown"] <= 0
        ):
            errors.append(f"{path}: day must be an integer and slowdown a number > 0")
    return errors


def load_config(path: Union[str, Path]) -> dict:
    with Path(path).open("rb") as fh:
        return tomllib.load(fh)


def synth_config_from(cfg: dict) -> SynthConfig:
    """The generator config encoded by the synth section (plus defaults)."""
    synth = dict(cfg.get("synth", {}))
    anomalies: list[Anomaly] = []
    for rate_key, cls in (
        ("duplicate_rate", DuplicateRate),
        ("drop_rate", DropRate),
        ("corrupt_rate", CorruptRate),
    ):
        rate = synth.pop(rate_key, 0.0)
        if rate:
            anomalies.append(cls(rate))
    for entry in synth.pop("missing_trips", []):
        anomalies.append(MissingTripAt(day=entry["day"], hour=entry["hour"]))
    for entry in synth.pop("duration_anomalies", []):
        anomalies.append(
            TripDurationAt(day=entry["day"], hour=entry["hour"], duration_s=entry["duration_s"])
        )
    for entry in synth.pop("storm_days", []):
        anomalies.append(StormDay(day=entry["day"], slowdown=entry["slowdown"]))
    if "start_date" in synth:
        synth["start_date"] = date.fromisoformat(synth["start_date"])
    return SynthConfig(anomalies=anomalies, **synth)


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------


@dataclass
class Topology:
    """One fog region: edge nodes per vehicle, one fog, one cloud."""

    edges: dict[int, EdgeNode]
    fog: FogNode
    cloud: CloudNode
    links: dict[str, LinkConfig]
    net: SynthNetwork
    synth_cfg: SynthConfig
    cloud_epoch_s: int
    online_since: datetime


def _vehicle_schedule(sched: ScheduleDB, dispatch: dict[str, int], vehicle: int) -> ScheduleDB:
    """The slice of the schedule this vehicle is dispatched to serve."""
    trips = [t for t in sched.scheduled_trips if dispatch.get(t.trip_id) == vehicle]
    trip_ids = {t.trip_id for t in trips}
    arrivals = {k: v for k, v in sched.scheduled_arrivals.items() if k[0] in trip_ids}
    return ScheduleDB(
        stations=sched.stations,
        scheduled_trips=trips,
        scheduled_arrivals=arrivals,
        station_order=sched.station_order,
    )


def build_topology(
    cfg: Union[dict, str, Path], persist_dir: Optional[Union[str, Path]] = None
) -> Topology:
    if not isinstance(cfg, dict):
        cfg = load_config(cfg)
    errors = validate_config(cfg)
    if errors:
        raise ConfigError("; ".join(errors))
    synth_cfg = synth_config_from(cfg)
    net = synthesize_network(synth_cfg)
    start = synth_cfg.start_date
    online_since = datetime(start.year, start.month, start.day, tzinfo=timezone.utc)

    edge_cfg = cfg.get("edge", {})
    edges = {
        v: EdgeNode(
            vehicle=v,
            sched=_vehicle_schedule(net.sched, net.dispatch, v),
            route_names=[synth_cfg.route_name],
            window_s=edge_cfg.get("window_s", 5),
            threshold_m=edge_cfg.get("stop_move_threshold_m", 15.0),
            missing_limit=edge_cfg.get("missing_limit", 100),
            grace_s=edge_cfg.get("grace_s", 300),
            factor_low=edge_cfg.get("duration_factor_low", 0.5),
            factor_high=edge_cfg.get("duration_factor_high", 1.5),
            cleaning_enabled=edge_cfg.get("cleaning_enabled", True),
            online_since=online_since,
        )
        for v in range(1, synth_cfg.n_vehicles + 1)
    }

    fog_cfg = cfg.get("fog", {})
    fog = FogNode(
        net.sched,
        geo=net.geo,
        depot=net.depot,
        eps_m=fog_cfg.get("eps_m", 15.0),
        min_pts=fog_cfg.get("min_pts", 8),
        station_radius_m=fog_cfg.get("station_radius_m", 30.0),
        street_max_m=fog_cfg.get("street_max_distance_m", 20.0),
        intersection_radius_m=fog_cfg.get("intersection_radius_m", 30.0),
        batch_period_s=fog_cfg.get("batch_period_s", 21_600),
        persist_dir=persist_dir,
    )

    cloud_cfg = dict(cfg.get("cloud", {}))
    cloud_epoch_s = cloud_cfg.pop("epoch_period_s", DEFAULT_CLOUD_EPOCH_S)
    cloud = CloudNode(net.sched, ForestConfig(**cloud_cfg))

    links_cfg = cfg.get("links", {})
    links = {}
    for name, default in DEFAULT_LINKS.items():
        overrides = links_cfg.get(name, {})
        links[name] = LinkConfig(
            fixed_ms=overrides.get("fixed_ms", default.fixed_ms),
            per_kb_ms=overrides.get("per_kb_ms", default.per_kb_ms),
            capacity_kb_s=overrides.get("capacity_kb_s", default.capacity_kb_s),
        )

    return Topology(
        edges=edges,
        fog=fog,
        cloud=cloud,
        links=links,
        net=net,
        synth_cfg=synth_cfg,
        cloud_epoch_s=cloud_epoch_s,
        online_since=online_since,
    )


# ---------------------------------------------------------------------------
# The run report
# ---------------------------------------------------------------------------


@dataclass
class LayerStats:
    tuples_in: int = 0
    tuples_out: int = 0
    bytes_in: int = 0
    bytes_out: int = 0
    feedback_emitted: int = 0

    def as_dict(self) -> dict:
        return {
            "tuples_in": self.tuples_in,
            "tuples_out": self.tuples_out,
            "bytes_in": self.bytes_in,
            "bytes_out": self.bytes_out,
            "feedback_emitted": self.feedback_emitted,
        }


@dataclass
class LinkStats:
    messages: int = 0
    bytes: int = 0
    transfer_s: float = 0.0

    def as_dict(self) -> dict:
        return {"messages": self.messages, "bytes": self.bytes, "transfer_s": self.transfer_s}


@dataclass
class RunReport:
    layers: dict[str, LayerStats]
    links: dict[str, LinkStats]
    feedback: list[dict]  # delivered feedback with emission/delivery times
    cleaning: CleaningReport
    trips: list[dict]
    summaries: list[dict]
    clusters: list[dict]
    accuracy: list[dict]
    persisted_files: int
    wall_clock_s: float = 0.0  # measured, and kept out of the canonical JSON

    def as_dict(self) -> dict:
        """Canonical payload; excludes wall-clock so identical runs are
        byte-identical."""
        return {
            "layers": {name: s.as_dict() for name, s in sorted(self.layers.items())},
            "links": {name: s.as_dict() for name, s in sorted(self.links.items())},
            "feedback": self.feedback,
            "cleaning": self.cleaning.as_dict(),
            "trips": self.trips,
            "summaries": self.summaries,
            "clusters": self.clusters,
            "accuracy": self.accuracy,
            "persisted_files": self.persisted_files,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json_dict(cls, doc: dict) -> "RunReport":
        """Rebuild a report from its canonical JSON payload."""
        return cls(
            layers={name: LayerStats(**s) for name, s in doc["layers"].items()},
            links={name: LinkStats(**s) for name, s in doc["links"].items()},
            feedback=list(doc["feedback"]),
            cleaning=CleaningReport(**doc["cleaning"]),
            trips=list(doc["trips"]),
            summaries=list(doc["summaries"]),
            clusters=list(doc["clusters"]),
            accuracy=list(doc["accuracy"]),
            persisted_files=doc["persisted_files"],
        )


def layer_metrics(report: RunReport) -> list[dict]:
    """Per-layer table: traffic counts plus delivered-feedback latency stats."""
    by_layer: dict[str, list[dict]] = {"edge": [], "fog": [], "cloud": []}
    for entry in report.feedback:
        by_layer[entry["layer"].lower()].append(entry)
    rows = []
    for name in ("edge", "fog", "cloud"):
        stats = report.layers[name]
        delivered = by_layer[name]
        delays = [e["delay_s"] for e in delivered]
        classes = sorted({e["latency_class"] for e in delivered})
        rows.append(
            {
                "layer": name,
                "tuples_in": stats.tuples_in,
                "tuples_out": stats.tuples_out,
                "bytes_in": stats.bytes_in,
                "bytes_out": stats.bytes_out,
                "feedback_count": len(delivered),
                "feedback_classes": "|".join(classes),
                "min_delay_s": min(delays) if delays else "",
                "max_delay_s": max(delays) if delays else "",
            }
        )
    return rows


# ---------------------------------------------------------------------------
# The discrete-event runner
# ---------------------------------------------------------------------------


def _element_bytes(el: StreamElement) -> int:
    fields = serialize_tuple(el) if isinstance(el, FeedTuple) else list(el.fields)
    return len(",".join(fields).encode("utf-8")) + 1


def _element_vehicle(el: StreamElement, fallback: int) -> int:
    if isinstance(el, FeedTuple):
        v = el.vehicle_id_vab
        return v if isinstance(v, int) else fallback
    if len(el.fields) > 10:
        try:
            return int(el.fields[10])
        except ValueError:
            return fallback
    return fallback


def _element_time(el: StreamElement) -> Optional[float]:
    ts = el.timestamp if isinstance(el, FeedTuple) else el.timestamp_guess()
    return None if ts is None else ts.timestamp()


class _Runner:
    def __init__(self, topology: Topology):
        self.topo = topology
        self.heap: list[tuple[float, int, str, object]] = []
        self.seq = 0
        self.layers = {"edge": LayerStats(), "fog": LayerStats(), "cloud": LayerStats()}
        self.link_stats = {name: LinkStats() for name in topology.links}
        self.feedback_log: list[dict] = []
        self.cleaning = CleaningReport()
        self.trips: list[dict] = []
        self.summaries: list[dict] = []
        self.clusters: list[dict] = []
        self.accuracy: list[dict] = []
        self.persisted: set[str] = set()
        self.fog_epoch_no = 0

    def schedule(self, t: float, kind: str, payload: object) -> None:
        heapq.heappush(self.heap, (t, self.seq, kind, payload))
        self.seq += 1

    # -- feedback ----------------------------------------------------------

    def emit_feedback(self, fb: Feedback, t_emit: float, delay_s: float) -> None:
        entry = {
            "layer": fb.layer.value,
            "latency_class": fb.latency_class.value,
            "kind": fb.kind.value,
            "subject": fb.subject,
            "detail": fb.detail,
            "emitted_at": t_emit,
            "delivered_at": t_emit + delay_s,
            "delay_s": delay_s,
        }
        self.layers[fb.layer.value.lower()].feedback_emitted += 1
        self.schedule(t_emit + delay_s, "deliver", entry)

    def _feedback_bytes(self, fb: Feedback) -> int:
        return len(json.dumps(fb.as_dict()).encode("utf-8"))

    def interruption(self, layer: Layer, latency: LatencyClass, t: float, what: str) -> None:
        fb = Feedback(
            layer=layer,
            latency_class=latency,
            kind=FeedbackKind.SERVICE_INTERRUPTION,
            subject=f"{layer.value.lower()}-node",
            detail=what[:500],
            emitted_at=datetime.fromtimestamp(t, tz=timezone.utc),
        )
        n = self._feedback_bytes(fb)
        if layer is Layer.EDGE:
            delay = EDGE_LOCAL_DELAY_S
        elif layer is Layer.FOG:
            delay = self.topo.links["edge_fog"].delay_s(n)
        else:
            delay = self.topo.links["fog_cloud"].delay_s(n) + self.topo.links["edge_fog"].delay_s(n)
        self.emit_feedback(fb, t, delay)

    # -- edge --------------------------------------------------------------

    def handle_element(self, t: float, payload) -> None:
        vehicle, el = payload
        node = self.topo.edges.get(vehicle) or self.topo.edges[min(self.topo.edges)]
        self.layers["edge"].tuples_in += 1
        self.layers["edge"].bytes_in += _element_bytes(el)
        try:
            batches = node.push(el)
        except Exception as exc:  # node errors become feedback, not crashes
            self.interruption(Layer.EDGE, LatencyClass.REAL_TIME, t, f"edge push failed: {exc}")
            return
        self.send_edge_batches(t, batches)

    def send_edge_batches(self, t: float, batches: list[EdgeBatch]) -> None:
        link = self.topo.links["edge_fog"]
        for batch in batches:
            batch.report.merged_into(self.cleaning)
            self.trips.extend(
                {"vehicle": batch.vehicle, **agg.as_dict()} for agg in batch.aggregates
            )
            self.summaries.extend(
                {"vehicle": batch.vehicle, **s.as_dict()} for s in batch.summaries
            )
            for fb in batch.feedback:
                self.emit_feedback(fb, t, EDGE_LOCAL_DELAY_S)
            if not batch.records:
                continue
            encoded = encode_batch(batch)
            n_bytes = len(encoded)
            delay = link.delay_s(n_bytes)
            self.layers["edge"].tuples_out += len(batch.records)
            self.layers["edge"].bytes_out += n_bytes
            stats = self.link_stats["edge_fog"]
            stats.messages += 1
            stats.bytes += n_bytes
            stats.transfer_s += delay
            self.schedule(t + delay, "fog_recv", encoded)

    # -- fog ---------------------------------------------------------------

    def handle_fog_recv(self, t: float, encoded: bytes) -> None:
        records, trailer = decode_batch(encoded)
        batch = EdgeBatch(
            vehicle=trailer["vehicle"],
            window_start=parse_timestamp(trailer["window_start"]),
            records=records,
            aggregates=[],
            summaries=[],
            report=CleaningReport(),
            feedback=[],
        )
        self.layers["fog"].tuples_in += len(records)
        self.layers["fog"].bytes_in += len(encoded)
        self.topo.fog.receive(batch)

    def handle_fog_epoch(self, t: float) -> None:
        now = datetime.fromtimestamp(t, tz=timezone.utc)
        try:
            result: FogResult = self.topo.fog.process(now)
        except Exception as exc:
            self.interruption(Layer.FOG, LatencyClass.NEAR_REAL_TIME, t, f"fog period failed: {exc}")
            return
        epoch = self.fog_epoch_no
        self.fog_epoch_no += 1
        for path in result.persisted:
            self.persisted.add(str(path))
        for cluster in result.clusters:
            station = cluster.nearest_station
            self.clusters.append(
                {
                    "epoch": epoch,
                    "cluster_id": cluster.cluster_id,
                    "centroid_lat": cluster.centroid.lat,
                    "centroid_lng": cluster.centroid.lng,
                    "size": len(cluster.members),
                    "nearest_station": "" if station is None else station[0],
                }
            )
        edge_link = self.topo.links["edge_fog"]
        for fb in result.feedback:
            self.emit_feedback(fb, t, edge_link.delay_s(self._feedback_bytes(fb)))
        if result.cloud_rows:
            encoded = encode_cloud_rows(result.cloud_rows)
            n_bytes = len(encoded)
            link = self.topo.links["fog_cloud"]
            delay = link.delay_s(n_bytes)
            self.layers["fog"].tuples_out += len(result.cloud_rows)
            self.layers["fog"].bytes_out += n_bytes
            stats = self.link_stats["fog_cloud"]
            stats.messages += 1
            stats.bytes += n_bytes
            stats.transfer_s += delay
            self.schedule(t + delay, "cloud_recv", encoded)

    # -- cloud -------------------------------------------------------------

    def handle_cloud_recv(self, t: float, encoded: bytes) -> None:
        rows = decode_cloud_rows(encoded)
        self.layers["cloud"].tuples_in += len(rows)
        self.layers["cloud"].bytes_in += len(encoded)
        self.topo.cloud.receive_rows(rows)

    def handle_cloud_epoch(self, t: float) -> None:
        now = datetime.fromtimestamp(t, tz=timezone.utc)
        try:
            result = self.topo.cloud.process_epoch(now)
        except Exception as exc:
            self.interruption(Layer.CLOUD, LatencyClass.PERIODIC, t, f"cloud epoch failed: {exc}")
            return
        self.accuracy.append(result.report.as_dict())
        down = self.topo.links["fog_cloud"]
        up = self.topo.links["edge_fog"]
        for fb in result.feedback:
            n = self._feedback_bytes(fb)
            self.emit_feedback(fb, t, down.delay_s(n) + up.delay_s(n))

    # -- the loop ----------------------------------------------------------

    def run(self, feed: Iterable[StreamElement]) -> RunReport:
        started = time.monotonic()
        anchor = self.topo.online_since.timestamp()
        fallback_vehicle = min(self.topo.edges)
        t_cursor = anchor
        for el in feed:
            t_el = _element_time(el)
            t_cursor = max(t_cursor, t_el if t_el is not None else t_cursor)
            self.schedule(t_cursor, "el", (_element_vehicle(el, fallback_vehicle), el))
        feed_end = t_cursor

        self.schedule(feed_end + 1.0, "edge_finish", None)
        bp = self.topo.fog.batch_period_s
        t = anchor + bp
        while t <= feed_end + 2 * bp:
            self.schedule(t, "fog_epoch", None)
            last_fog = t
            t += bp
        ep = self.topo.cloud_epoch_s
        t = anchor + ep
        while t <= last_fog + ep:
            self.schedule(t, "cloud_epoch", None)
            t += ep

        handlers = {
            "el": self.handle_element,
            "fog_recv": self.handle_fog_recv,
            "fog_epoch": lambda t, _p: self.handle_fog_epoch(t),
            "cloud_recv": self.handle_cloud_recv,
            "cloud_epoch": lambda t, _p: self.handle_cloud_epoch(t),
            "edge_finish": self.handle_edge_finish,
            "deliver": self.handle_deliver,
        }
        while self.heap:
            t, _, kind, payload = heapq.heappop(self.heap)
            handlers[kind](t, payload)

        report = RunReport(
            layers=self.layers,
            links=self.link_stats,
            feedback=self.feedback_log,
            cleaning=self.cleaning,
            trips=self.trips,
            summaries=self.summaries,
            clusters=self.clusters,
            accuracy=self.accuracy,
            persisted_files=len(self.persisted),
            wall_clock_s=time.monotonic() - started,
        )
        return report

    def handle_edge_finish(self, t: float, _payload) -> None:
        for vehicle in sorted(self.topo.edges):
            try:
                batches = self.topo.edges[vehicle].finish()
            except Exception as exc:
                self.interruption(
                    Layer.EDGE, LatencyClass.REAL_TIME, t, f"edge finish failed: {exc}"
                )
                continue
            self.send_edge_batches(t, batches)

    def handle_deliver(self, t: float, entry: dict) -> None:
        self.feedback_log.append(entry)


def run(topology: Topology, feed: Iterable[StreamElement]) -> RunReport:
    """Push the feed through the topology on the simulated clock."""
    return _Runner(topology).run(feed)
