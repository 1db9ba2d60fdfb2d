"""Punctuality labels, forest training/eviction, evaluation, feedback."""

import json
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tritide.cloud import (
    CLASS_ORDER,
    FEATURES,
    UNKNOWN_TOKEN,
    CloudNode,
    CrossValidationReport,
    FeatureSpec,
    Forest,
    ForestConfig,
    Label,
    LabeledExample,
    Prediction,
    SingleClassError,
    _grow_tree,
    _schedule_delta_s,
    _tree_apply,
    assign_label,
    best_split,
    cloud_feedback,
    cross_validate,
    encode_targets,
    forest_from_json,
    forest_to_json,
    label_for_delta,
    learning_curve,
    stratified_folds,
    train_forest,
)
from tritide.feedcore import FeedbackKind, GeoPoint, LatencyClass, Layer
from tritide.ingest import ScheduleDB, ScheduledTrip, Station

# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------


def test_label_boundaries_exhaustive():
    for delta in range(-400, 401):
        if delta < -80:
            expected = Label.EARLY
        elif delta > 320:
            expected = Label.LATE
        else:
            expected = Label.ON_TIME
        assert label_for_delta(delta) is expected, delta


@pytest.mark.parametrize(
    "delta,expected",
    [(-81, Label.EARLY), (-80, Label.ON_TIME), (320, Label.ON_TIME), (321, Label.LATE)],
)
def test_label_boundary_points(delta, expected):
    sched = datetime(2017, 2, 14, 6, 0, 0)
    assert assign_label(sched + timedelta(seconds=delta), sched) is expected


@given(
    st.integers(min_value=-100_000, max_value=100_000),
    st.integers(min_value=-100_000, max_value=100_000),
)
@settings(max_examples=200)
def test_label_partition_is_monotone(a, b):
    lo, hi = sorted((a, b))
    order = [Label.EARLY, Label.ON_TIME, Label.LATE]
    assert order.index(label_for_delta(lo)) <= order.index(label_for_delta(hi))


def test_schedule_delta_resolves_midnight_wrap():
    # Scheduled 23:53:20 of the service day; the bus shows up after midnight.
    actual = datetime(2017, 2, 15, 0, 3, 20)
    assert _schedule_delta_s(actual, 86_000) == 600.0
    assert label_for_delta(600.0) is Label.LATE
    # And an early departure before midnight against a post-midnight schedule.
    assert _schedule_delta_s(datetime(2017, 2, 14, 23, 58, 20), 86_700) == -400.0


# ---------------------------------------------------------------------------
# Split search: hand-derived cases, then the exhaustive oracle
# ---------------------------------------------------------------------------

KINDS3 = ["num", "num", "cat"]


def test_numeric_split_midpoint_and_reduction():
    X = np.array([[1.0], [2.0], [3.0], [4.0]])
    y = np.array([0, 0, 1, 1])
    got = best_split(X, y, np.arange(4), [0], ["num"], min_leaf=1)
    reduction, feature, kind, value = got
    assert feature == 0 and kind == "num"
    assert value == 2.5
    assert reduction == pytest.approx(0.5, abs=1e-12)


def test_numeric_tie_takes_smallest_threshold():
    X = np.array([[1.0], [2.0], [3.0], [4.0]])
    y = np.array([0, 1, 1, 0])
    got = best_split(X, y, np.arange(4), [0], ["num"], min_leaf=1)
    reduction, _, _, value = got
    assert value == 1.5
    assert reduction == pytest.approx(0.5 - 0.75 * (4.0 / 9.0), abs=1e-12)


def test_feature_tie_takes_first_feature():
    col = np.array([1.0, 2.0, 3.0, 4.0])
    X = np.column_stack([col, col])
    y = np.array([0, 0, 1, 1])
    _, feature, _, _ = best_split(X, y, np.arange(4), [0, 1], ["num", "num"], min_leaf=1)
    assert feature == 0


def test_categorical_one_vs_rest_split():
    X = np.array([[0.0], [0.0], [1.0], [1.0], [2.0], [2.0]])
    y = np.array([0, 1, 2, 2, 0, 1])
    reduction, feature, kind, value = best_split(
        X, y, np.arange(6), [0], ["cat"], min_leaf=2
    )
    assert (feature, kind, value) == (0, "cat", 1.0)
    assert reduction == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_min_leaf_rules_out_all_splits():
    X = np.array([[1.0], [2.0], [3.0], [4.0]])
    y = np.array([0, 0, 1, 1])
    assert best_split(X, y, np.arange(4), [0], ["num"], min_leaf=3) is None


def _oracle_gini(labels):
    n = len(labels)
    if n == 0:
        return 0.0
    acc = 0.0
    for c in range(3):
        p = sum(1 for v in labels if v == c) / n
        acc += p * p
    return 1.0 - acc


def _oracle_reduction(col, y, kind, value, min_leaf):
    n = len(y)
    if kind == "num":
        left = [y[i] for i in range(n) if col[i] <= value]
    else:
        left = [y[i] for i in range(n) if col[i] == value]
    right_n = n - len(left)
    if len(left) < min_leaf or right_n < min_leaf:
        return None
    right = [y[i] for i in range(n) if (col[i] > value if kind == "num" else col[i] != value)]
    parent = _oracle_gini(list(y))
    return parent - (len(left) / n) * _oracle_gini(left) - (right_n / n) * _oracle_gini(right)


def _oracle_best(X, y, features, kinds, min_leaf):
    best = None
    for f in features:
        col = list(X[:, f])
        if kinds[f] == "num":
            vals = sorted(set(col))
            candidates = [(a + b) / 2.0 for a, b in zip(vals, vals[1:])]
        else:
            candidates = sorted(set(col))
        for value in candidates:
            red = _oracle_reduction(col, y, kinds[f], value, min_leaf)
            if red is None:
                continue
            if best is None or red > best:
                best = red
    return best


@given(
    st.integers(min_value=0, max_value=2**32 - 1),
    st.integers(min_value=4, max_value=50),
    st.sampled_from([1, 2, 5]),
)
@settings(max_examples=120, deadline=None)
def test_split_search_matches_exhaustive_oracle(seed, n, min_leaf):
    rng = np.random.default_rng(seed)
    X = np.column_stack(
        [
            rng.integers(0, 6, size=n).astype(float),  # numeric with heavy ties
            np.round(rng.uniform(0, 10, size=n), 2),  # numeric, near-continuous
            rng.integers(0, 4, size=n).astype(float),  # categorical vocab of 4
        ]
    )
    y = rng.integers(0, 3, size=n)
    got = best_split(X, y, np.arange(n), [0, 1, 2], KINDS3, min_leaf)
    want = _oracle_best(X, y, [0, 1, 2], KINDS3, min_leaf)
    if want is None:
        assert got is None
    else:
        assert got is not None
        reduction, feature, kind, value = got
        assert reduction == pytest.approx(want, abs=1e-9)
        # The split handed back really achieves that reduction.
        recomputed = _oracle_reduction(list(X[:, feature]), y, kind, value, min_leaf)
        assert recomputed == pytest.approx(reduction, abs=1e-9)


@given(st.integers(min_value=0, max_value=2**32 - 1), st.integers(min_value=5, max_value=40))
@settings(max_examples=100, deadline=None)
def test_every_tree_beats_plurality_on_its_training_multiset(seed, n):
    rng = np.random.default_rng(seed)
    X = np.column_stack(
        [
            rng.uniform(0, 5, size=n),
            rng.integers(0, 4, size=n).astype(float),
            rng.integers(0, 3, size=n).astype(float),
        ]
    )
    y = rng.integers(0, 3, size=n)
    idx = rng.integers(0, n, size=n)  # a bootstrap-style multiset
    cfg = ForestConfig(max_depth=6, min_leaf=2)
    tree = _grow_tree(X, y, idx, [0, 1, 2], ["num", "cat", "cat"], cfg, 0)
    out = np.empty(n, dtype=np.int64)
    _tree_apply(tree, X, np.arange(n), out)
    accuracy = float(np.mean(out[idx] == y[idx]))
    baseline = np.bincount(y[idx], minlength=3).max() / len(idx)
    assert accuracy >= baseline - 1e-12


# ---------------------------------------------------------------------------
# Example encoding
# ---------------------------------------------------------------------------


def make_example(
    target=Label.ON_TIME,
    trip_id="1001",
    lat=46.06,
    lng=-64.85,
    gps_s=21_600,
    street="A Street",
    direction="Outbound",
    stop_id="6810000",
    seq=0,
    arrival_s=21_650,
):
    return LabeledExample(
        trip_id=trip_id,
        lat=lat,
        lng=lng,
        gps_timestamp_s=gps_s,
        street_name=street,
        direction=direction,
        stop_id=stop_id,
        movement_sequence=seq,
        arrival_time_s=arrival_s,
        target=target,
    )


def test_unknown_category_encodes_to_reserved_index_zero():
    train = [make_example(stop_id="6810000"), make_example(stop_id="6810001")]
    spec = FeatureSpec.fit(train)
    assert spec.vocabs["stop_id"][0] == UNKNOWN_TOKEN
    stop_col = [name for name, _ in FEATURES].index("stop_id")
    X = spec.encode([make_example(stop_id="9999999")])
    assert X[0, stop_col] == 0.0
    X_known = spec.encode([make_example(stop_id="6810001")])
    assert X_known[0, stop_col] == float(spec.vocabs["stop_id"].index("6810001"))


def test_encode_targets_follow_class_order():
    data = [make_example(target=c) for c in (Label.LATE, Label.EARLY, Label.ON_TIME)]
    assert list(encode_targets(data)) == [2, 0, 1]


# ---------------------------------------------------------------------------
# Forest training, prediction, determinism, serialization
# ---------------------------------------------------------------------------


def learnable_dataset(n=200, seed=5):
    """Labels follow movement_sequence bands; several features echo them."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        seq = int(rng.integers(0, 30))
        target = Label.EARLY if seq < 10 else Label.ON_TIME if seq < 20 else Label.LATE
        out.append(
            make_example(
                target=target,
                trip_id=str(1000 + seq % 7),
                lat=46.0 + seq * 0.001 + rng.normal(0, 1e-5),
                lng=-64.85 - seq * 0.001,
                gps_s=21_600 + seq * 120,
                street=f"{chr(65 + seq // 10)} Street",
                direction="Outbound" if seq % 2 == 0 else "Return",
                stop_id=f"68{10_000 + seq // 3}",
                seq=seq,
                arrival_s=21_600 + seq * 120 + 40,
            )
        )
    return out


def shuffled_dataset(n=300, seed=11):
    """Balanced classes with features independent of the labels."""
    rng = np.random.default_rng(seed)
    labels = [CLASS_ORDER[i % 3] for i in range(n)]
    rng.shuffle(labels)
    out = []
    for i in range(n):
        out.append(
            make_example(
                target=labels[i],
                trip_id=str(1000 + int(rng.integers(0, 7))),
                lat=float(rng.uniform(46.0, 46.1)),
                lng=float(rng.uniform(-64.9, -64.8)),
                gps_s=int(rng.integers(0, 86_400)),
                street=f"{chr(65 + int(rng.integers(0, 3)))} Street",
                direction="Outbound" if rng.integers(0, 2) == 0 else "Return",
                stop_id=f"68{10_000 + int(rng.integers(0, 12))}",
                seq=int(rng.integers(0, 30)),
                arrival_s=int(rng.integers(0, 86_400)),
            )
        )
    return out


def test_forest_learns_a_deterministic_function():
    data = learnable_dataset()
    forest = train_forest(data, ForestConfig(n_trees=30, seed=3))
    assert forest.accuracy(data) >= 0.98


def test_train_rejects_single_class():
    data = [make_example(target=Label.ON_TIME) for _ in range(20)]
    with pytest.raises(SingleClassError, match="constant classifier"):
        train_forest(data)


def test_train_rejects_too_few_examples():
    data = [make_example(target=CLASS_ORDER[i % 2]) for i in range(9)]
    with pytest.raises(ValueError, match="at least 10"):
        train_forest(data, ForestConfig(min_leaf=5))


def test_same_seed_same_forest_different_seed_different_forest():
    data = learnable_dataset(n=80)
    a = train_forest(data, ForestConfig(n_trees=10, seed=7))
    b = train_forest(data, ForestConfig(n_trees=10, seed=7))
    c = train_forest(data, ForestConfig(n_trees=10, seed=8))
    dump = lambda f: json.dumps(forest_to_json(f), sort_keys=True)
    assert dump(a) == dump(b)
    assert dump(a) != dump(c)


def test_serialization_round_trip_preserves_predictions():
    data = learnable_dataset(n=120)
    forest = train_forest(data, ForestConfig(n_trees=12, seed=1))
    doc = json.loads(json.dumps(forest_to_json(forest)))
    assert doc["format_version"] == 1
    revived = forest_from_json(doc)
    assert revived.predict(data) == forest.predict(data)
    assert json.dumps(forest_to_json(revived), sort_keys=True) == json.dumps(
        forest_to_json(forest), sort_keys=True
    )


def test_deserialization_rejects_unknown_version():
    data = learnable_dataset(n=60)
    doc = forest_to_json(train_forest(data, ForestConfig(n_trees=2, seed=0)))
    doc["format_version"] = 99
    with pytest.raises(ValueError, match="format version"):
        forest_from_json(doc)


def test_prediction_is_invariant_to_tree_order():
    data = learnable_dataset(n=100)
    forest = train_forest(data, ForestConfig(n_trees=15, seed=2))
    probe = shuffled_dataset(n=60, seed=3)
    before = forest.predict(probe)
    perm = np.random.default_rng(0).permutation(len(forest.trees))
    shuffled = Forest(
        trees=[forest.trees[i] for i in perm],
        spec=forest.spec,
        cfg=forest.cfg,
        feature_subsets=[forest.feature_subsets[i] for i in perm],
    )
    assert shuffled.predict(probe) == before


def test_vote_tie_resolves_to_earliest_class():
    data = [make_example(target=CLASS_ORDER[i % 2]) for i in range(10)]
    spec = FeatureSpec.fit(data)
    late_leaf = {"kind": "leaf", "counts": [0, 0, 5]}
    early_leaf = {"kind": "leaf", "counts": [5, 0, 0]}
    forest = Forest(
        trees=[late_leaf, early_leaf],
        spec=spec,
        cfg=ForestConfig(n_trees=2),
        feature_subsets=[[1], [1]],
    )
    assert forest.predict([make_example()]) == [Label.EARLY]


def test_leaf_plurality_tie_resolves_to_earliest_class():
    out = np.empty(1, dtype=np.int64)
    _tree_apply({"kind": "leaf", "counts": [3, 3, 1]}, np.zeros((1, 9)), np.arange(1), out)
    assert out[0] == 0  # Early
    _tree_apply({"kind": "leaf", "counts": [0, 2, 2]}, np.zeros((1, 9)), np.arange(1), out)
    assert out[0] == 1  # OnTime


def test_trip_id_is_not_split_on_by_default():
    data = learnable_dataset(n=100)
    forest = train_forest(data, ForestConfig(n_trees=40, seed=9))
    assert all(0 not in subset for subset in forest.feature_subsets)
    opted_in = train_forest(data, ForestConfig(n_trees=40, seed=9, include_trip_id=True))
    assert any(0 in subset for subset in opted_in.feature_subsets)


# ---------------------------------------------------------------------------
# Cross validation
# ---------------------------------------------------------------------------


def test_stratified_folds_partition_and_balance():
    labels = [CLASS_ORDER[i % 3] for i in range(100)]
    folds = stratified_folds(labels, k=10, seed=4)
    flat = sorted(i for fold in folds for i in fold)
    assert flat == list(range(100))
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    for fold in folds:
        per_class = [sum(1 for i in fold if labels[i] is c) for c in CLASS_ORDER]
        assert max(per_class) - min(per_class) <= 1


def test_cross_validate_needs_k_examples():
    with pytest.raises(ValueError, match="folds"):
        cross_validate([make_example(target=CLASS_ORDER[i % 2]) for i in range(5)], k=10)


def test_cross_validation_on_learnable_data_scores_high():
    report = cross_validate(learnable_dataset(), k=10, seed=0)
    assert len(report.fold_accuracies) == 10
    assert report.mean >= 0.95
    assert report.mean == pytest.approx(np.mean(report.fold_accuracies))
    assert report.stddev == pytest.approx(np.std(report.fold_accuracies))


def test_cross_validation_on_shuffled_labels_sits_near_chance():
    report = cross_validate(shuffled_dataset(), k=10, seed=0)
    assert 0.23 <= report.mean <= 0.43


def test_cross_validation_is_deterministic():
    data = learnable_dataset(n=120)
    cfg = ForestConfig(n_trees=8, seed=0)
    a = cross_validate(data, k=5, cfg=cfg, seed=21)
    b = cross_validate(data, k=5, cfg=cfg, seed=21)
    assert a == b


def test_cv_report_csv_shape():
    report = CrossValidationReport([0.5, 0.75], 0.625, 0.125)
    lines = report.as_csv().splitlines()
    assert lines[0] == "fold,accuracy"
    assert lines[1].startswith("0,") and lines[3].startswith("mean,")
    assert report.as_dict()["folds"] == 2


# ---------------------------------------------------------------------------
# Learning curves
# ---------------------------------------------------------------------------


def test_learning_curve_more_data_does_not_hurt():
    data = learnable_dataset(n=250)
    cfg = ForestConfig(n_trees=15, seed=0)
    curve = learning_curve(data, [0.1, 1.0], cfg=cfg, seed=6)
    sizes = [size for size, _ in curve]
    assert sizes == sorted(sizes) and sizes[0] < sizes[1]
    accuracies = {size: acc for size, acc in curve}
    assert accuracies[sizes[1]] >= accuracies[sizes[0]] - 0.02


def test_learning_curve_is_deterministic():
    data = learnable_dataset(n=150)
    cfg = ForestConfig(n_trees=6, seed=0)
    assert learning_curve(data, [0.25, 1.0], cfg=cfg, seed=9) == learning_curve(
        data, [0.25, 1.0], cfg=cfg, seed=9
    )


def test_learning_curve_on_constant_labels_is_perfect():
    data = [make_example(target=Label.LATE) for _ in range(100)]
    curve = learning_curve(data, [0.2, 0.5, 1.0], cfg=ForestConfig(n_trees=4), seed=0)
    assert [acc for _, acc in curve] == [1.0, 1.0, 1.0]


def test_learning_curve_argument_validation():
    data = learnable_dataset(n=100)
    with pytest.raises(ValueError, match="at least 5 seeds"):
        learning_curve(data, [0.5], n_seeds=2)
    with pytest.raises(ValueError, match=r"\(0, 1\]"):
        learning_curve(data, [0.0, 1.0])
    with pytest.raises(ValueError, match=r"\(0, 1\]"):
        learning_curve(data, [1.5])


# ---------------------------------------------------------------------------
# Historical feedback
# ---------------------------------------------------------------------------


def test_cloud_feedback_reports_counts_and_proportions():
    now = datetime(2017, 2, 15, 0, 0, 0, tzinfo=timezone.utc)
    preds = (
        [Prediction("51", "6810003", "1001", Label.ON_TIME, now)] * 7
        + [Prediction("51", "6810003", "1002", Label.LATE, now)] * 2
        + [Prediction("51", "6810003", "1003", Label.EARLY, now)]
        + [Prediction("51", "6810005", "1001", Label.LATE, now)] * 3
    )
    feedback = cloud_feedback(preds, now)
    assert [f.subject for f in feedback] == ["51@6810003", "51@6810005"]
    first = feedback[0]
    assert first.kind is FeedbackKind.PUNCTUALITY_REPORT
    assert first.layer is Layer.CLOUD
    assert first.latency_class is LatencyClass.HISTORICAL
    for fragment in ("n=10", "Early=1", "OnTime=7", "Late=2", "p_OnTime=0.70"):
        assert fragment in first.detail
    assert "n=3" in feedback[1].detail and "p_Late=1.00" in feedback[1].detail
    assert cloud_feedback([], now) == []


# ---------------------------------------------------------------------------
# The cloud node
# ---------------------------------------------------------------------------


def node_schedule():
    stations = {
        "6810000": Station("6810000", "Stop 0", GeoPoint(46.06, -64.85)),
        "6810001": Station("6810001", "Stop 1", GeoPoint(46.07, -64.85)),
    }
    trips = [
        ScheduledTrip("1001", "51", frozenset(range(7)), 21_600, 24_300),
        ScheduledTrip("1002", "51", frozenset(range(7)), 25_200, 27_900),
    ]
    arrivals = {
        ("1001", "6810000"): 21_600,
        ("1001", "6810001"): 22_000,
        ("1002", "6810000"): 25_200,
        ("1002", "6810001"): 25_600,
    }
    return ScheduleDB(
        stations=stations, scheduled_trips=trips, scheduled_arrivals=arrivals, station_order={}
    )


def cloud_row(trip, stop, arrival, seq=0, gps="2017-02-14 06:00:00"):
    return [trip, "46.06", "-64.85", gps, "A Street", "Outbound", stop, str(seq), arrival, "", ""]


def test_cloud_node_prequential_epochs():
    node = CloudNode(node_schedule(), ForestConfig(n_trees=10, seed=0))
    day1 = []
    for i in range(10):  # on time at stop 0
        day1.append(cloud_row("1001", "6810000", f"2017-02-14 06:00:{10 + i:02d}", seq=i))
    for i in range(10):  # very late at stop 1
        day1.append(cloud_row("1001", "6810001", f"2017-02-14 06:1{i}:00", seq=10 + i))
    node.receive_rows(day1)
    first = node.process_epoch(datetime(2017, 2, 15, 0, 0, 0, tzinfo=timezone.utc))
    assert first.report.tested == 0 and first.report.accuracy is None
    assert first.feedback == []
    assert first.report.trained_on == 20
    assert node.model is not None

    day2 = [cloud_row("1002", "6810000", "2017-02-14 07:00:30", seq=2)] + [
        cloud_row("1002", "6810001", f"2017-02-14 07:2{i}:00", seq=12) for i in range(4)
    ]
    node.receive_rows(day2)
    second = node.process_epoch(datetime(2017, 2, 16, 0, 0, 0, tzinfo=timezone.utc))
    assert second.report.tested == 5
    assert second.report.accuracy is not None and 0.0 <= second.report.accuracy <= 1.0
    assert second.report.trained_on == 25
    subjects = {f.subject for f in second.feedback}
    assert subjects == {"51@6810000", "51@6810001"}
    assert all(f.latency_class is LatencyClass.HISTORICAL for f in second.feedback)
    # Labels derived from the schedule: 06:00:10 at stop 0 is OnTime, 06:10:00
    # at stop 1 (scheduled 06:06:40) is within the band, 07:2x at stop 1 is Late.
    assert node.history[0].target is Label.ON_TIME
    assert node.history[19].target is Label.LATE


def test_cloud_node_skips_unusable_rows():
    node = CloudNode(node_schedule(), ForestConfig(n_trees=2, seed=0))
    rows = [
        cloud_row("N/A", "6810000", "2017-02-14 06:00:10"),  # no trip
        cloud_row("9999", "6810000", "2017-02-14 06:00:10"),  # unknown trip
        cloud_row("1001", "", "2017-02-14 06:00:10"),  # no station
        cloud_row("1001", "6810000", ""),  # never stamped with an arrival
        ["short", "row"],
        cloud_row("1001", "6810000", "2017-02-14 06:00:10"),  # the one good row
    ]
    node.receive_rows(rows)
    assert node.rows_in == 6
    assert node.rows_skipped == 5
    result = node.process_epoch(datetime(2017, 2, 15, 0, 0, 0, tzinfo=timezone.utc))
    assert result.report.examples == 1
    assert result.report.trained_on == 0  # single class, too few examples
    assert node.model is None
