"""Survival data containers, CSV ingestion and nonparametric estimators.

A dataset is a set of ``(x_i, delta_i, t_i)`` triplets stored column-wise:
a float feature matrix (``NaN`` marks a missing cell), an event indicator
and the observed time.  Step functions represent survival curves,
cumulative hazards and censoring distributions alike.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

__all__ = [
    "Feature",
    "Schema",
    "SurvivalRecord",
    "SurvivalDataset",
    "StepFunction",
    "LoadError",
    "load_schema",
    "load_csv",
    "save_csv",
    "train_test_split",
    "event_table",
    "kaplan_meier",
    "nelson_aalen",
    "chf_to_survival",
]


class LoadError(ValueError):
    """Raised when a CSV file does not match its schema."""


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str = "numerical"
    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("numerical", "categorical"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.levels is not None:
            object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))


@dataclass(frozen=True)
class Schema:
    """Column layout of a survival CSV file.

    Categorical features are stored as ordinal codes: the position of the
    value in ``levels``.
    """

    features: tuple[Feature, ...]
    time: str = "time"
    event: str = "event"
    missing: str = "NA"

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.features]

    @classmethod
    def from_dict(cls, spec: dict) -> "Schema":
        feats = []
        for f in spec["features"]:
            if isinstance(f, str):
                feats.append(Feature(f))
            else:
                levels = f.get("levels")
                feats.append(
                    Feature(f["name"], f.get("type", "numerical"),
                            tuple(levels) if levels is not None else None)
                )
        return cls(
            features=tuple(feats),
            time=spec.get("time", "time"),
            event=spec.get("event", "event"),
            missing=spec.get("missing", "NA"),
        )

    def to_dict(self) -> dict:
        feats = []
        for f in self.features:
            entry = {"name": f.name, "type": f.kind}
            if f.levels is not None:
                entry["levels"] = list(f.levels)
            feats.append(entry)
        return {"features": feats, "time": self.time, "event": self.event,
                "missing": self.missing}


def load_schema(path) -> Schema:
    with open(path) as fh:
        return Schema.from_dict(json.load(fh))


class SurvivalRecord(NamedTuple):
    features: np.ndarray
    event: bool
    time: float


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Column-oriented survival dataset.

    Parameters
    ----------
    X : array_like, shape (n, d)
        Feature matrix; ``NaN`` marks a missing value.
    time : array_like, shape (n,)
        Observed times, finite and non-negative.
    event : array_like, shape (n,)
        ``True`` when the event was observed, ``False`` when censored.
    schema : Schema, optional
        Column description used for CSV round trips.
    """

    X: np.ndarray
    time: np.ndarray
    event: np.ndarray
    schema: Schema | None = field(default=None)

    def __post_init__(self):
        time = np.array(self.time, dtype=float).reshape(-1)
        event = np.array(self.event).reshape(-1)
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(len(time), -1) if len(time) else X.reshape(0, 0)
        if X.shape[0] != len(time) or len(event) != len(time):
            raise ValueError("X, time and event must have the same number of rows")
        if not np.all(np.isfinite(time)) or np.any(time < 0):
            raise ValueError("times must be finite and non-negative")
        if event.dtype != bool:
            if not np.all(np.isin(event, (0, 1))):
                raise ValueError("event indicator must be boolean or 0/1")
            event = event.astype(bool)
        if np.any(np.isinf(X)):
            raise ValueError("features must be finite or NaN (missing)")
        if self.schema is not None and len(self.schema.features) != X.shape[1]:
            raise ValueError("schema does not match the number of feature columns")
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "time", _frozen(time))
        object.__setattr__(self, "event", _frozen(event))

    def __len__(self) -> int:
        return len(self.time)

    def __iter__(self) -> Iterator[SurvivalRecord]:
        for i in range(len(self)):
            yield SurvivalRecord(self.X[i], bool(self.event[i]), float(self.time[i]))

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def censored_fraction(self) -> float:
        return float(1.0 - self.event.mean())

    def subset(self, idx) -> "SurvivalDataset":
        idx = np.asarray(idx)
        return SurvivalDataset(self.X[idx], self.time[idx], self.event[idx], self.schema)

    def flipped(self) -> "SurvivalDataset":
        """Same records with the event indicator negated."""
        return SurvivalDataset(self.X, self.time, ~self.event, self.schema)

    def with_times(self, time, event) -> "SurvivalDataset":
        return SurvivalDataset(self.X, time, event, self.schema)

    @classmethod
    def concat(cls, parts: Sequence["SurvivalDataset"]) -> "SurvivalDataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(
            np.vstack([p.X for p in parts]),
            np.concatenate([p.time for p in parts]),
            np.concatenate([p.event for p in parts]),
            parts[0].schema,
        )


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Right-continuous piecewise-constant function of time.

    ``f(t)`` is ``values[k]`` for the last ``times[k] <= t`` and
    ``initial_value`` before ``times[0]``.
    """

    times: np.ndarray
    values: np.ndarray
    initial_value: float = 0.0

    def __post_init__(self):
        times = np.array(self.times, dtype=float).reshape(-1)
        values = np.array(self.values, dtype=float).reshape(-1)
        if times.shape != values.shape:
            raise ValueError("times and values must have the same length")
        if np.any(np.diff(times) <= 0):
            raise ValueError("step function times must be strictly increasing")
        object.__setattr__(self, "times", _frozen(times))
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "initial_value", float(self.initial_value))

    def __len__(self) -> int:
        return len(self.times)

    def _lookup(self, idx, scalar):
        padded = np.concatenate(([self.initial_value], self.values))
        out = padded[idx]
        return float(out) if scalar else out

    def __call__(self, t):
        scalar = np.ndim(t) == 0
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        return self._lookup(idx, scalar)

    def left_limit(self, t):
        """Value just before ``t``, i.e. ``f(t-)``."""
        scalar = np.ndim(t) == 0
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="left")
        return self._lookup(idx, scalar)

    def is_survival(self, atol: float = 1e-12) -> bool:
        v = np.concatenate(([self.initial_value], self.values))
        return (
            abs(self.initial_value - 1.0) <= atol
            and bool(np.all(np.diff(v) <= atol))
            and bool(np.all((v >= -atol) & (v <= 1 + atol)))
        )

    def is_cumulative_hazard(self, atol: float = 1e-12) -> bool:
        v = np.concatenate(([self.initial_value], self.values))
        return (
            abs(self.initial_value) <= atol
            and bool(np.all(np.diff(v) >= -atol))
            and bool(np.all(v >= -atol))
        )

    def __eq__(self, other):
        if not isinstance(other, StepFunction):
            return NotImplemented
        return (
            self.initial_value == other.initial_value
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def _parse_float(raw: str, row: int, column: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise LoadError(f"malformed value {raw!r} at row {row}, column {column!r}") from None


def load_csv(path, schema) -> SurvivalDataset:
    """Read a survival dataset from a comma-separated file.

    ``schema`` is a :class:`Schema` or the path of a JSON schema file.
    Categorical features without declared levels get the sorted distinct
    values as levels; the returned dataset carries the completed schema.
    Rows are numbered from 1, header excluded.
    """
    if not isinstance(schema, Schema):
        schema = load_schema(schema)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError(f"{path}: empty file, header row required") from None
        rows = list(reader)

    col = {name: i for i, name in enumerate(header)}
    for name in [schema.time, schema.event, *schema.feature_names]:
        if name not in col:
            raise LoadError(f"unknown column {name!r}")

    features = list(schema.features)
    for j, f in enumerate(features):
        if f.kind == "categorical" and f.levels is None:
            seen = {r[col[f.name]] for r in rows if len(r) == len(header)}
            seen.discard(schema.missing)
            features[j] = Feature(f.name, f.kind, tuple(sorted(seen)))
    schema = Schema(tuple(features), schema.time, schema.event, schema.missing)

    n, d = len(rows), len(features)
    X = np.empty((n, d))
    time = np.empty(n)
    event = np.empty(n, dtype=bool)
    for i, r in enumerate(rows):
        row = i + 1
        if len(r) != len(header):
            raise LoadError(f"malformed row {row}: expected {len(header)} fields, got {len(r)}")
        t = _parse_float(r[col[schema.time]], row, schema.time)
        if not math.isfinite(t):
            raise LoadError(f"non-finite time at row {row}, column {schema.time!r}")
        if t < 0:
            raise LoadError(f"negative time at row {row}, column {schema.time!r}")
        time[i] = t
        e = r[col[schema.event]].strip()
        if e not in ("0", "1"):
            raise LoadError(f"non-boolean event {e!r} at row {row}, column {schema.event!r}")
        event[i] = e == "1"
        for j, f in enumerate(features):
            raw = r[col[f.name]]
            if raw == schema.missing:
                X[i, j] = np.nan
            elif f.kind == "categorical":
                try:
                    X[i, j] = f.levels.index(raw)
                except ValueError:
                    raise LoadError(
                        f"unknown level {raw!r} at row {row}, column {f.name!r}"
                    ) from None
            else:
                X[i, j] = _parse_float(raw, row, f.name)
                if not math.isfinite(X[i, j]):
                    raise LoadError(f"non-finite value at row {row}, column {f.name!r}")
    return SurvivalDataset(X, time, event, schema)


def save_csv(data: SurvivalDataset, path) -> None:
    """Write ``data`` in the dialect read by :func:`load_csv`."""
    schema = data.schema
    if schema is None:
        schema = Schema(tuple(Feature(f"x{j}") for j in range(data.n_features)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*schema.feature_names, schema.event, schema.time])
        for rec in data:
            cells = []
            for f, v in zip(schema.features, rec.features):
                if np.isnan(v):
                    cells.append(schema.missing)
                elif f.kind == "categorical":
                    cells.append(f.levels[int(v)])
                else:
                    cells.append(repr(float(v)))
            cells += ["1" if rec.event else "0", repr(rec.time)]
            w.writerow(cells)


def train_test_split(data: SurvivalDataset, test_fraction: float, seed: int):
    """Shuffle with ``seed`` and split off ``round(test_fraction * n)`` records.

    Returns
    -------
    (train, test) : tuple of SurvivalDataset
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if len(data) == 0:
        raise ValueError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(len(data))
    n_test = int(math.floor(test_fraction * len(data) + 0.5))
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))


def event_table(time, event):
    """Distinct event times with event and at-risk counts.

    Censored subjects tied with an event time stay in that risk set.

    Returns
    -------
    times, d, n : ndarray
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    times, d = np.unique(time[event], return_counts=True)
    sorted_t = np.sort(time)
    n = len(time) - np.searchsorted(sorted_t, times, side="left")
    return times, d.astype(float), n.astype(float)


def _require_records(data: SurvivalDataset):
    if len(data) == 0:
        raise ValueError("estimator requires a non-empty dataset")


def kaplan_meier(data: SurvivalDataset) -> StepFunction:
    """Product-limit estimate of the survival function."""
    _require_records(data)
    times, d, n = event_table(data.time, data.event)
    return StepFunction(times, np.cumprod(1.0 - d / n), initial_value=1.0)


def nelson_aalen(data: SurvivalDataset) -> StepFunction:
    """Nelson-Aalen estimate of the cumulative hazard."""
    _require_records(data)
    times, d, n = event_table(data.time, data.event)
    return StepFunction(times, np.cumsum(d / n), initial_value=0.0)


def chf_to_survival(H: StepFunction) -> StepFunction:
    """Pointwise ``exp(-H)`` on the same grid."""
    if not H.is_cumulative_hazard():
        raise ValueError("not a cumulative hazard: must start at 0 and be non-decreasing")
    return StepFunction(H.times, np.exp(-H.values), initial_value=math.exp(-H.initial_value))
