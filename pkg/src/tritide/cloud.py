"""Cloud layer: punctuality labels, a random forest, evaluation, feedback.

The cloud node turns fog rows into labeled punctuality examples (actual
arrival vs. the static schedule), trains a bagged forest of Gini decision
trees with per-tree feature subsets and majority voting, evaluates it by
k-fold cross validation and learning curves, and emits historical
punctuality reports per route and station.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .feedcore import (
    Feedback,
    FeedbackKind,
    LatencyClass,
    Layer,
    format_timestamp,
    parse_timestamp,
)
from .ingest import ScheduleDB

EARLY_BOUND_S = 80
LATE_BOUND_S = 320

MODEL_FORMAT_VERSION = 1
UNKNOWN_TOKEN = "__unknown__"


class Label(Enum):
    EARLY = "Early"
    ON_TIME = "OnTime"
    LATE = "Late"


CLASS_ORDER: tuple[Label, ...] = (Label.EARLY, Label.ON_TIME, Label.LATE)
_CLASS_INDEX = {label: i for i, label in enumerate(CLASS_ORDER)}


def label_for_delta(delta_s: float) -> Label:
    """Punctuality class for a signed schedule deviation in seconds."""
    if delta_s < -EARLY_BOUND_S:
        return Label.EARLY
    if delta_s > LATE_BOUND_S:
        return Label.LATE
    return Label.ON_TIME


def assign_label(actual_arrival: datetime, scheduled_arrival: datetime) -> Label:
    """Early when the bus beats the schedule by more than 80 s, Late when it
    trails it by more than 320 s, OnTime in the closed band between."""
    return label_for_delta((actual_arrival - scheduled_arrival).total_seconds())


# ---------------------------------------------------------------------------
# Examples and their numeric encoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledExample:
    """One stop observation with its punctuality outcome."""

    trip_id: str
    lat: float
    lng: float
    gps_timestamp_s: int  # seconds of day
    street_name: str  # "" when unannotated
    direction: str
    stop_id: str
    movement_sequence: int
    arrival_time_s: int  # seconds of day
    target: Label


# (name, kind); kind is "num" or "cat".  This order is the feature-index
# space used by trees and serialized models.
FEATURES: tuple[tuple[str, str], ...] = (
    ("trip_id", "cat"),
    ("lat", "num"),
    ("lng", "num"),
    ("gps_timestamp_s", "num"),
    ("street_name", "cat"),
    ("direction", "cat"),
    ("stop_id", "cat"),
    ("movement_sequence", "num"),
    ("arrival_time_s", "num"),
)
TRIP_ID_FEATURE = 0


@dataclass
class ForestConfig:
    n_trees: int = 100
    features_per_tree: int = 3
    max_depth: int = 12
    min_leaf: int = 5
    seed: int = 0
    include_trip_id: bool = False

    def validate(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.features_per_tree < 1:
            raise ValueError("features_per_tree must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")

    def eligible_features(self) -> list[int]:
        return [
            i for i in range(len(FEATURES)) if self.include_trip_id or i != TRIP_ID_FEATURE
        ]


@dataclass
class FeatureSpec:
    """Frozen encoding: categorical vocabularies with Unknown at index 0."""

    vocabs: dict[str, list[str]]

    @classmethod
    def fit(cls, data: Sequence[LabeledExample]) -> "FeatureSpec":
        vocabs: dict[str, list[str]] = {}
        for name, kind in FEATURES:
            if kind != "cat":
                continue
            seen = sorted({str(getattr(x, name)) for x in data})
            vocabs[name] = [UNKNOWN_TOKEN] + seen
        return cls(vocabs)

    def encode(self, data: Sequence[LabeledExample]) -> np.ndarray:
        lookup = {
            name: {tok: i for i, tok in enumerate(vocab)} for name, vocab in self.vocabs.items()
        }
        X = np.empty((len(data), len(FEATURES)), dtype=np.float64)
        for r, x in enumerate(data):
            for c, (name, kind) in enumerate(FEATURES):
                value = getattr(x, name)
                if kind == "cat":
                    X[r, c] = lookup[name].get(str(value), 0)
                else:
                    X[r, c] = float(value)
        return X


def encode_targets(data: Sequence[LabeledExample]) -> np.ndarray:
    return np.array([_CLASS_INDEX[x.target] for x in data], dtype=np.int64)


# ---------------------------------------------------------------------------
# Decision trees
# ---------------------------------------------------------------------------
# Nodes are plain dicts so a model serializes to JSON without adapters:
#   {"kind": "leaf", "counts": [nEarly, nOnTime, nLate]}
#   {"kind": "num", "f": i, "t": threshold, "l": node, "r": node}   x[f] <= t goes left
#   {"kind": "cat", "f": i, "v": vocab_index, "l": node, "r": node} x[f] == v goes left


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.dot(p, p))


def best_split(
    X: np.ndarray,
    y: np.ndarray,
    idx: np.ndarray,
    features: Sequence[int],
    kinds: Sequence[str],
    min_leaf: int,
) -> Optional[tuple[float, int, str, float]]:
    """Best Gini-reduction split over the given features.

    Returns (reduction, feature, kind, threshold-or-category) or None.
    Features are scanned in ascending index and candidate values in
    ascending order; only a strictly larger reduction displaces the
    incumbent, so ties resolve to the first feature and smallest value.
    """
    n = len(idx)
    parent_counts = np.bincount(y[idx], minlength=len(CLASS_ORDER))
    parent_gini = _gini(parent_counts)
    best: Optional[tuple[float, int, str, float]] = None
    for f in sorted(features):
        col = X[idx, f]
        if kinds[f] == "num":
            order = np.argsort(col, kind="stable")
            sv = col[order]
            sy = y[idx][order]
            onehot = np.zeros((n, len(CLASS_ORDER)))
            onehot[np.arange(n), sy] = 1.0
            left = np.cumsum(onehot, axis=0)[:-1]  # counts left of each boundary
            n_left = np.arange(1, n)
            n_right = n - n_left
            valid = (sv[:-1] != sv[1:]) & (n_left >= min_leaf) & (n_right >= min_leaf)
            if not valid.any():
                continue
            right = parent_counts - left
            with np.errstate(invalid="ignore", divide="ignore"):
                gini_l = 1.0 - np.sum((left / n_left[:, None]) ** 2, axis=1)
                gini_r = 1.0 - np.sum((right / n_right[:, None]) ** 2, axis=1)
            reductions = parent_gini - (n_left / n) * gini_l - (n_right / n) * gini_r
            reductions[~valid] = -np.inf
            k = int(np.argmax(reductions))
            reduction = float(reductions[k])
            if best is None or reduction > best[0]:
                best = (reduction, f, "num", float((sv[k] + sv[k + 1]) / 2.0))
        else:
            values = np.unique(col)
            for v in values:
                mask = col == v
                n_l = int(mask.sum())
                if n_l < min_leaf or n - n_l < min_leaf:
                    continue
                left_counts = np.bincount(y[idx][mask], minlength=len(CLASS_ORDER))
                right_counts = parent_counts - left_counts
                reduction = (
                    parent_gini
                    - (n_l / n) * _gini(left_counts)
                    - ((n - n_l) / n) * _gini(right_counts)
                )
                if best is None or reduction > best[0]:
                    best = (reduction, f, "cat", float(v))
    return best


def _grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    idx: np.ndarray,
    features: Sequence[int],
    kinds: Sequence[str],
    cfg: ForestConfig,
    depth: int,
) -> dict:
    counts = np.bincount(y[idx], minlength=len(CLASS_ORDER))
    if (
        depth >= cfg.max_depth
        or counts.max() == len(idx)
        or len(idx) < 2 * cfg.min_leaf
    ):
        return {"kind": "leaf", "counts": counts.tolist()}
    found = best_split(X, y, idx, features, kinds, cfg.min_leaf)
    if found is None or found[0] <= 1e-12:
        return {"kind": "leaf", "counts": counts.tolist()}
    _, f, kind, value = found
    col = X[idx, f]
    mask = (col <= value) if kind == "num" else (col == value)
    left = _grow_tree(X, y, idx[mask], features, kinds, cfg, depth + 1)
    right = _grow_tree(X, y, idx[~mask], features, kinds, cfg, depth + 1)
    node = {"kind": kind, "f": int(f), "l": left, "r": right}
    node["t" if kind == "num" else "v"] = value
    return node


def _tree_apply(node: dict, X: np.ndarray, idx: np.ndarray, out: np.ndarray) -> None:
    if len(idx) == 0:
        return
    if node["kind"] == "leaf":
        out[idx] = int(np.argmax(node["counts"]))  # first max = earliest class
        return
    col = X[idx, node["f"]]
    mask = (col <= node["t"]) if node["kind"] == "num" else (col == node["v"])
    _tree_apply(node["l"], X, idx[mask], out)
    _tree_apply(node["r"], X, idx[~mask], out)


# ---------------------------------------------------------------------------
# The forest
# ---------------------------------------------------------------------------


@dataclass
class Forest:
    trees: list[dict]
    spec: FeatureSpec
    cfg: ForestConfig
    feature_subsets: list[list[int]]

    def predict_indices(self, X: np.ndarray) -> np.ndarray:
        votes = np.zeros((len(X), len(CLASS_ORDER)), dtype=np.int64)
        out = np.empty(len(X), dtype=np.int64)
        all_idx = np.arange(len(X))
        for tree in self.trees:
            _tree_apply(tree, X, all_idx, out)
            votes[all_idx, out] += 1
        return np.argmax(votes, axis=1)  # ties -> earliest class in order

    def predict(self, examples: Sequence[LabeledExample]) -> list[Label]:
        if not examples:
            return []
        X = self.spec.encode(examples)
        return [CLASS_ORDER[i] for i in self.predict_indices(X)]

    def accuracy(self, examples: Sequence[LabeledExample]) -> float:
        if not examples:
            raise ValueError("accuracy of an empty set is undefined")
        predicted = self.predict(examples)
        hits = sum(1 for p, x in zip(predicted, examples) if p is x.target)
        return hits / len(examples)


class SingleClassError(ValueError):
    """Training data holds one class; a constant classifier is the answer."""


def train_forest(data: Sequence[LabeledExample], cfg: Optional[ForestConfig] = None) -> Forest:
    cfg = cfg or ForestConfig()
    cfg.validate()
    classes = {x.target for x in data}
    if len(classes) < 2:
        raise SingleClassError(
            "training data holds a single class; use a constant classifier instead"
        )
    if len(data) < 2 * cfg.min_leaf:
        raise ValueError(f"need at least {2 * cfg.min_leaf} examples, got {len(data)}")
    spec = FeatureSpec.fit(data)
    X = spec.encode(data)
    y = encode_targets(data)
    kinds = [kind for _, kind in FEATURES]
    eligible = cfg.eligible_features()
    k = min(cfg.features_per_tree, len(eligible))
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees)]
    trees: list[dict] = []
    subsets: list[list[int]] = []
    n = len(data)
    for rng in rngs:
        boot = rng.integers(0, n, size=n)
        subset = sorted(int(i) for i in rng.choice(eligible, size=k, replace=False))
        trees.append(_grow_tree(X, y, np.asarray(boot), subset, kinds, cfg, 0))
        subsets.append(subset)
    return Forest(trees=trees, spec=spec, cfg=cfg, feature_subsets=subsets)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def forest_to_json(forest: Forest) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "class_order": [label.value for label in CLASS_ORDER],
        "features": [{"name": name, "kind": kind} for name, kind in FEATURES],
        "vocabs": forest.spec.vocabs,
        "config": {
            "n_trees": forest.cfg.n_trees,
            "features_per_tree": forest.cfg.features_per_tree,
            "max_depth": forest.cfg.max_depth,
            "min_leaf": forest.cfg.min_leaf,
            "seed": forest.cfg.seed,
            "include_trip_id": forest.cfg.include_trip_id,
        },
        "feature_subsets": forest.feature_subsets,
        "trees": forest.trees,
    }


def forest_from_json(doc: dict) -> Forest:
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version: {version!r}")
    expected = [{"name": name, "kind": kind} for name, kind in FEATURES]
    if doc.get("features") != expected:
        raise ValueError("model feature schema does not match this build")
    if doc.get("class_order") != [label.value for label in CLASS_ORDER]:
        raise ValueError("model class order does not match this build")
    cfg = ForestConfig(**doc["config"])
    return Forest(
        trees=doc["trees"],
        spec=FeatureSpec(vocabs=doc["vocabs"]),
        cfg=cfg,
        feature_subsets=[list(map(int, s)) for s in doc["feature_subsets"]],
    )


# ---------------------------------------------------------------------------
# Evaluation: cross validation and learning curves
# ---------------------------------------------------------------------------


@dataclass
class _ConstantModel:
    label: Label

    def predict(self, examples: Sequence[LabeledExample]) -> list[Label]:
        return [self.label] * len(examples)

    def accuracy(self, examples: Sequence[LabeledExample]) -> float:
        return sum(1 for x in examples if x.target is self.label) / len(examples)


def _fit(data: Sequence[LabeledExample], cfg: ForestConfig):
    """Forest when the data supports one, the trivial classifier otherwise."""
    try:
        return train_forest(data, cfg)
    except SingleClassError:
        return _ConstantModel(data[0].target)


@dataclass
class CrossValidationReport:
    fold_accuracies: list[float]
    mean: float
    stddev: float

    def as_dict(self) -> dict:
        return {
            "folds": len(self.fold_accuracies),
            "fold_accuracies": self.fold_accuracies,
            "mean": self.mean,
            "stddev": self.stddev,
        }

    def as_csv(self) -> str:
        lines = ["fold,accuracy"]
        lines += [f"{i},{acc!r}" for i, acc in enumerate(self.fold_accuracies)]
        lines.append(f"mean,{self.mean!r}")
        return "\n".join(lines) + "\n"


def stratified_folds(labels: Sequence[Label], k: int, seed: int) -> list[list[int]]:
    """Seeded shuffle, then deal each class round-robin into k folds."""
    if len(labels) < k:
        raise ValueError(f"cannot make {k} folds from {len(labels)} examples")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    folds: list[list[int]] = [[] for _ in range(k)]
    dealt = 0
    for label in CLASS_ORDER:
        for i in order:
            if labels[i] is label:
                folds[dealt % k].append(int(i))
                dealt += 1
    return folds


def cross_validate(
    data: Sequence[LabeledExample],
    k: int = 10,
    cfg: Optional[ForestConfig] = None,
    seed: int = 0,
) -> CrossValidationReport:
    cfg = cfg or ForestConfig()
    folds = stratified_folds([x.target for x in data], k, seed)
    fold_seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]
    accuracies: list[float] = []
    for fold_no, fold in enumerate(folds):
        hold = set(fold)
        train = [x for i, x in enumerate(data) if i not in hold]
        test = [data[i] for i in fold]
        model = _fit(train, replace(cfg, seed=fold_seeds[fold_no]))
        accuracies.append(model.accuracy(test))
    mean = float(np.mean(accuracies))
    return CrossValidationReport(accuracies, mean, float(np.std(accuracies)))


HOLDOUT_FRACTION = 0.2


def learning_curve(
    data: Sequence[LabeledExample],
    fractions: Sequence[float],
    cfg: Optional[ForestConfig] = None,
    seed: int = 0,
    n_seeds: int = 5,
) -> list[tuple[int, float]]:
    """Accuracy on a fixed 20% holdout as the training share grows.

    Each fraction subsamples the 80% training split and averages over
    n_seeds (>= 5) independent subsample/training seeds.
    """
    cfg = cfg or ForestConfig()
    if n_seeds < 5:
        raise ValueError("learning curves average over at least 5 seeds")
    for f in fractions:
        if not 0 < f <= 1:
            raise ValueError(f"fractions must lie in (0, 1], got {f}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    n_hold = max(1, int(round(HOLDOUT_FRACTION * len(data))))
    holdout = [data[i] for i in order[:n_hold]]
    train_pool = [data[i] for i in order[n_hold:]]
    smallest = min(fractions)
    if int(round(smallest * len(train_pool))) < 2 * cfg.min_leaf:
        raise ValueError(
            f"smallest fraction {smallest} keeps fewer than {2 * cfg.min_leaf} training examples"
        )
    out: list[tuple[int, float]] = []
    for f in sorted(fractions):
        size = max(1, int(round(f * len(train_pool))))
        seeds = np.random.SeedSequence([seed, int(round(f * 1_000_000))]).spawn(n_seeds)
        scores = []
        for s in seeds:
            sub_rng = np.random.default_rng(s)
            pick = sub_rng.choice(len(train_pool), size=size, replace=False)
            subset = [train_pool[i] for i in pick]
            model = _fit(subset, replace(cfg, seed=int(s.generate_state(1)[0])))
            scores.append(model.accuracy(holdout))
        out.append((size, float(np.mean(scores))))
    return out


# ---------------------------------------------------------------------------
# Historical feedback
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    route_id: str
    stop_id: str
    trip_id: str
    label: Label
    at: datetime


def cloud_feedback(predictions: Sequence[Prediction], now: datetime) -> list[Feedback]:
    """One punctuality report per (route, station) over the given predictions."""
    groups: dict[tuple[str, str], list[Prediction]] = {}
    for p in predictions:
        groups.setdefault((p.route_id, p.stop_id), []).append(p)
    out: list[Feedback] = []
    for (route, stop) in sorted(groups):
        batch = groups[(route, stop)]
        n = len(batch)
        counts = {label: sum(1 for p in batch if p.label is label) for label in CLASS_ORDER}
        detail = " ".join(
            [f"n={n}"]
            + [f"{label.value}={counts[label]}" for label in CLASS_ORDER]
            + [f"p_{label.value}={counts[label] / n:.2f}" for label in CLASS_ORDER]
        )
        out.append(
            Feedback(
                layer=Layer.CLOUD,
                latency_class=LatencyClass.HISTORICAL,
                kind=FeedbackKind.PUNCTUALITY_REPORT,
                subject=f"{route}@{stop}",
                detail=detail,
                emitted_at=now,
            )
        )
    return out


# ---------------------------------------------------------------------------
# The cloud node: prequential train/test over daily epochs
# ---------------------------------------------------------------------------


def _seconds_of_day(ts: datetime) -> int:
    return ts.hour * 3600 + ts.minute * 60 + ts.second


def _schedule_delta_s(actual: datetime, scheduled_s: int) -> float:
    """Deviation against a seconds-of-day schedule, resolving the service
    date to whichever midnight puts the scheduled instant closest."""
    candidates = []
    for day_shift in (0, -1, 1):
        day = actual.date() + timedelta(days=day_shift)
        sched = datetime(day.year, day.month, day.day, tzinfo=actual.tzinfo) + timedelta(
            seconds=scheduled_s
        )
        candidates.append((actual - sched).total_seconds())
    return min(candidates, key=abs)


@dataclass
class EpochReport:
    processed_at: datetime
    rows_received: int
    examples: int
    tested: int
    accuracy: Optional[float]
    trained_on: int

    def as_dict(self) -> dict:
        return {
            "processed_at": format_timestamp(self.processed_at),
            "rows_received": self.rows_received,
            "examples": self.examples,
            "tested": self.tested,
            "accuracy": self.accuracy,
            "trained_on": self.trained_on,
        }


@dataclass
class EpochResult:
    report: EpochReport
    feedback: list[Feedback]
    predictions: list[Prediction]


class CloudNode:
    """Consumes fog rows; each epoch tests the standing model on the new
    examples (prequential evaluation), then folds them into the training
    history and refits."""

    def __init__(self, sched: ScheduleDB, cfg: Optional[ForestConfig] = None):
        self.sched = sched
        self.cfg = cfg or ForestConfig()
        self.cfg.validate()
        self.history: list[LabeledExample] = []
        self.model: Optional[Forest] = None
        self.epochs: list[EpochReport] = []
        self.rows_in = 0
        self.rows_skipped = 0
        self._pending: list[tuple[LabeledExample, str]] = []  # (example, route)

    def receive_rows(self, rows: Iterable[list[str]]) -> None:
        for row in rows:
            self.rows_in += 1
            parsed = self._parse_row(row)
            if parsed is None:
                self.rows_skipped += 1
            else:
                self._pending.append(parsed)

    def _parse_row(self, row: list[str]) -> Optional[tuple[LabeledExample, str]]:
        if len(row) != 11:
            return None
        (trip_id, lat, lng, gps_ts, street, direction, stop_id, seq, arrival, _target, _cluster) = row
        if trip_id in ("", "N/A") or not stop_id or not arrival or seq == "":
            return None
        trip = self.sched.trip(trip_id)
        scheduled_s = self.sched.scheduled_arrivals.get((trip_id, stop_id))
        if trip is None or scheduled_s is None:
            return None
        try:
            arrival_dt = parse_timestamp(arrival)
            gps_dt = parse_timestamp(gps_ts)
            example = LabeledExample(
                trip_id=trip_id,
                lat=float(lat),
                lng=float(lng),
                gps_timestamp_s=_seconds_of_day(gps_dt),
                street_name=street,
                direction=direction,
                stop_id=stop_id,
                movement_sequence=int(seq),
                arrival_time_s=_seconds_of_day(arrival_dt),
                target=label_for_delta(_schedule_delta_s(arrival_dt, scheduled_s)),
            )
        except (ValueError, TypeError):
            return None
        return example, trip.route_id


    def process_epoch(self, now: datetime) -> EpochResult:
        pending, self._pending = self._pending, []
        examples = [x for x, _ in pending]
        tested = 0
        accuracy: Optional[float] = None
        predictions: list[Prediction] = []
        if self.model is not None and examples:
            predicted = self.model.predict(examples)
            hits = sum(1 for p, x in zip(predicted, examples) if p is x.target)
            tested = len(examples)
            accuracy = hits / tested
            predictions = [
                Prediction(route_id=route, stop_id=x.stop_id, trip_id=x.trip_id, label=p, at=now)
                for (x, route), p in zip(pending, predicted)
            ]
        feedback = cloud_feedback(predictions, now)
        self.history.extend(examples)
        trained_on = 0
        if len(self.history) >= 2 * self.cfg.min_leaf and len({x.target for x in self.history}) >= 2:
            self.model = train_forest(self.history, self.cfg)
            trained_on = len(self.history)
        report = EpochReport(
            processed_at=now,
            rows_received=len(pending),
            examples=len(examples),
            tested=tested,
            accuracy=accuracy,
            trained_on=trained_on,
        )
        self.epochs.append(report)
        return EpochResult(report=report, feedback=feedback, predictions=predictions)
