"""Edge-fog-cloud anticipatory analytics for transit data streams.

The package is layered the way the deployment is: :mod:`tritide.ingest`
produces or replays raw feeds, :mod:`tritide.edge` runs on-vehicle cleaning
and motion tagging, :mod:`tritide.fog` adds location context and clusters
stop events, :mod:`tritide.cloud` learns and serves punctuality predictions,
and :mod:`tritide.pipeline` wires the layers over simulated links.  The most
commonly used names from each layer are re-exported here.
"""

from .cloud import (
    CloudNode,
    CrossValidationReport,
    Forest,
    ForestConfig,
    Label,
    LabeledExample,
    assign_label,
    cross_validate,
    forest_from_json,
    forest_to_json,
    label_for_delta,
    learning_curve,
    train_forest,
)
from .edge import (
    CleaningReport,
    EdgeBatch,
    EdgeCleaner,
    EdgeNode,
    PeriodSummary,
    TimeWindow,
    TripAggregate,
    assign_windows,
    decode_batch,
    encode_batch,
    tag_stop_move,
)
from .feedcore import (
    EARTH_RADIUS_M,
    FEED_FIELD_COUNT,
    MISSING,
    Category,
    Direction,
    Feedback,
    FeedbackKind,
    FeedTuple,
    GeoPoint,
    LatencyClass,
    Layer,
    MalformedRecord,
    Motion,
    MovementRecord,
    TripRole,
    haversine_m,
    parse_tuple,
    serialize_tuple,
)
from .fog import (
    FogNode,
    FogResult,
    SpatialCluster,
    cluster_stops,
    contextualize_trip,
    dbscan_indices,
)
from .geoindex import GridIndex
from .ingest import (
    CongestionAt,
    CorruptRate,
    DropRate,
    DuplicateRate,
    GeoDB,
    GroundTruth,
    MissingTripAt,
    ScheduleDB,
    StormDay,
    SynthConfig,
    SynthNetwork,
    TripDurationAt,
    generate_feed,
    load_geojson,
    load_gtfs,
    replay_csv,
    synthesize_network,
    write_feed_csv,
)
from .pipeline import (
    ConfigError,
    RunReport,
    Topology,
    build_topology,
    layer_metrics,
    load_config,
    run,
    validate_config,
)

__version__ = "0.1.0"
