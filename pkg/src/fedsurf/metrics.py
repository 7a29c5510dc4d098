"""IPCW evaluation metrics: Brier score, integrated Brier score, Uno's C-index.

Censoring is accounted for with inverse probability of censoring weights,
where the censoring survival function G is the Kaplan-Meier estimate on the
training data with the event indicator flipped.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .survival import StepFunction, SurvivalDataset, kaplan_meier

__all__ = [
    "IBS_FLOOR",
    "EvalGrid",
    "MetricsReport",
    "EvalContext",
    "censoring_survival",
    "default_grid",
    "brier_score",
    "brier_curve",
    "integrated_brier_score",
    "concordance_index_ipcw",
    "per_tree_ibs",
    "evaluate_model",
]

IBS_FLOOR = 1e-6


def censoring_survival(train: SurvivalDataset) -> StepFunction:
    """Kaplan-Meier estimate of the censoring survival function G(t)."""
    if len(train) == 0:
        raise ValueError("censoring distribution needs a non-empty dataset")
    return kaplan_meier(train.flipped())


@dataclass(frozen=True, eq=False)
class EvalGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1)
        if len(pts) == 0:
            raise ValueError("evaluation grid must not be empty")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("evaluation grid must be strictly increasing")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def check(self, train: SurvivalDataset) -> "EvalGrid":
        last_event = train.time[train.event].max(initial=-np.inf)
        if self.points[-1] >= last_event:
            raise ValueError(
                f"grid reaches {self.points[-1]:g}, not below the last training event time {last_event:g}"
            )
        return self


def default_grid(
    train: SurvivalDataset, n_points: int = 100, low: float = 0.05, high: float = 0.95
) -> EvalGrid:
    """``n_points`` evenly spaced times between two quantiles of the event times.

    When ties push the upper quantile onto the last event time, the grid
    stops at the previous distinct event time instead.
    """
    ev = train.time[train.event]
    if len(ev) == 0:
        raise ValueError("cannot build an evaluation grid without events")
    lo, hi = np.quantile(ev, [low, high])
    distinct = np.unique(ev)
    if hi >= distinct[-1] and len(distinct) > 1:
        hi = distinct[-2]
    if not hi > lo:
        raise ValueError("event-time quantiles coincide; grid would be degenerate")
    return EvalGrid(np.linspace(lo, hi, n_points))


def brier_curve(G: StepFunction, test: SurvivalDataset, surv, times) -> np.ndarray:
    """IPCW Brier score at each of ``times``.

    ``surv[i, k]`` is the predicted survival of record ``i`` at ``times[k]``.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    surv = np.asarray(surv, dtype=float).reshape(len(test), len(times))
    t_i = test.time[:, None]
    died = (t_i <= times[None, :]) & test.event[:, None]
    alive = t_i > times[None, :]
    g_event = G.left_limit(test.time)[:, None]
    g_t = G(times)[None, :]
    bad = np.any(died & (g_event <= 0), axis=0) | (alive.any(axis=0) & (g_t[0] <= 0))
    if bad.any():
        raise ValueError(
            f"censoring survival is zero at t={times[np.argmax(bad)]:g}; choose an earlier time"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(died, surv**2 / g_event, 0.0) + np.where(alive, (1.0 - surv) ** 2 / g_t, 0.0)
    return term.mean(axis=0)


def brier_score(G: StepFunction, test: SurvivalDataset, surv_at_t, t: float) -> float:
    """IPCW Brier score at a single time ``t``.

    Records censored at or before ``t`` contribute zero.
    """
    surv_at_t = np.asarray(surv_at_t, dtype=float).reshape(-1)
    if len(surv_at_t) != len(test):
        raise ValueError("need one prediction per test record")
    return float(brier_curve(G, test, surv_at_t[:, None], [t])[0])


def _curves_on_grid(surv_curves, grid):
    if isinstance(surv_curves, np.ndarray) or (
        len(surv_curves) and not isinstance(surv_curves[0], StepFunction)
    ):
        return np.asarray(surv_curves, dtype=float)
    return np.array([f(grid) for f in surv_curves])


def integrated_brier_score(
    G: StepFunction, test: SurvivalDataset, surv_curves, grid: EvalGrid
) -> float:
    """Trapezoidal integral of the Brier score over ``grid``, divided by its span.

    ``surv_curves`` is either a sequence of survival :class:`StepFunction`
    (one per record) or an array of survival probabilities at the grid points.
    """
    pts = grid.points
    surv = _curves_on_grid(surv_curves, pts)
    bs = brier_curve(G, test, surv, pts)
    if len(pts) == 1:
        return float(bs[0])
    area = float(np.sum((bs[1:] + bs[:-1]) * np.diff(pts)) / 2.0)
    return area / float(pts[-1] - pts[0])


def concordance_index_ipcw(
    G: StepFunction, test: SurvivalDataset, risks, tau: float, chunk: int = 2048
) -> float:
    """Uno's concordance index truncated at ``tau``.

    Pairs ``(i, j)`` with an observed event at ``t_i < t_j`` and ``t_i < tau``
    are comparable; each is weighted by ``G(t_i-)^-2``.  Tied risks count
    one half, tied times are not comparable.
    """
    risks = np.asarray(risks, dtype=float).reshape(-1)
    if len(risks) != len(test):
        raise ValueError("need one risk score per test record")
    t, e = test.time, test.event
    anchors = np.nonzero(e & (t < tau))[0]
    g = G.left_limit(t[anchors])
    if np.any(g <= 0):
        raise ValueError(f"censoring survival is zero before t={t[anchors][g <= 0].min():g}")
    w = g**-2.0
    num = 0.0
    den = 0.0
    for s in range(0, len(anchors), chunk):
        a = anchors[s:s + chunk]
        comparable = t[a][:, None] < t[None, :]
        ri, rj = risks[a][:, None], risks[None, :]
        score = np.where(ri > rj, 1.0, np.where(ri == rj, 0.5, 0.0))
        wa = w[s:s + chunk]
        num += float(np.sum(wa * np.sum(score * comparable, axis=1)))
        den += float(np.sum(wa * comparable.sum(axis=1)))
    if den == 0:
        raise ValueError("no comparable pairs")
    return num / den


def per_tree_ibs(tree, validation: SurvivalDataset, G: StepFunction, grid: EvalGrid) -> float:
    """IBS of a single tree's survival predictions on ``validation``."""
    if len(validation) == 0:
        raise ValueError("per-tree IBS needs a non-empty validation split")
    surv = tree.survival_at(validation.X, grid.points)
    return integrated_brier_score(G, validation, surv, grid)


@dataclass
class MetricsReport:
    """C-index and IBS of one model on one test set (unscaled)."""

    model: str
    c_index: float
    ibs: float
    brier: list[float] = field(default_factory=list, repr=False)
    setting: str = "federated"
    split_type: str = "uniform"
    seed: int = 0
    client: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.c_index <= 1.0:
            raise ValueError(f"c_index {self.c_index} outside [0, 1]")
        if self.ibs < 0:
            raise ValueError(f"negative ibs {self.ibs}")

    CSV_FIELDS = ("model", "setting", "split_type", "seed", "client", "c_index", "ibs")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def csv_row(self) -> list:
        return [getattr(self, f) for f in self.CSV_FIELDS]


@dataclass(frozen=True, eq=False)
class EvalContext:
    """Censoring curve, IBS grid and C-index horizon derived from a training split."""

    G: StepFunction
    grid: EvalGrid
    tau: float

    @classmethod
    def from_train(cls, train: SurvivalDataset, n_points: int = 100,
                   low: float = 0.05, high: float = 0.95) -> "EvalContext":
        grid = default_grid(train, n_points, low, high).check(train)
        return cls(censoring_survival(train), grid, float(grid.points[-1]))

    def ibs_curve(self, model, test: SurvivalDataset) -> np.ndarray:
        return brier_curve(self.G, test, model.survival_at(test.X, self.grid.points), self.grid.points)


def evaluate_model(model, test: SurvivalDataset, ctx: EvalContext, name: str, **meta) -> MetricsReport:
    """Score any object exposing ``risk(X)`` and ``survival_at(X, times)``."""
    surv = model.survival_at(test.X, ctx.grid.points)
    bs = brier_curve(ctx.G, test, surv, ctx.grid.points)
    ibs = integrated_brier_score(ctx.G, test, surv, ctx.grid)
    c = concordance_index_ipcw(ctx.G, test, model.risk(test.X), ctx.tau)
    return MetricsReport(name, c, ibs, bs.tolist(), **meta)
