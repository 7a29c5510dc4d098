"""Cox proportional-hazards baseline, trained locally or with FedAvg.

The partial likelihood uses Breslow handling of tied event times.  Both
variants share the same baseline: the Nelson-Aalen estimate on the pooled
training data, assembled from per-client risk-set counts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .metrics import EvalContext, concordance_index_ipcw
from .survival import StepFunction, SurvivalDataset

__all__ = [
    "CoxModel",
    "FedAvgConfig",
    "Standardizer",
    "cox_neg_partial_loglik",
    "cox_gradient",
    "fit_cox_local",
    "fit_cox",
    "risk_set_summary",
    "shared_baseline_hazard",
    "fedavg_cox",
    "cox_predict_risk",
]


@dataclass(frozen=True)
class FedAvgConfig:
    rounds: int = 500
    local_epochs: int = 1
    learning_rate: float = 0.01
    client_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0 or self.local_epochs < 1 or self.learning_rate <= 0:
            raise ValueError("rounds, local_epochs and learning_rate must be positive")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ValueError("client_fraction must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class Standardizer:
    """Zero-mean, unit-variance scaling; missing values map to the mean."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def from_moments(cls, n, total, total_sq) -> "Standardizer":
        n = np.maximum(np.asarray(n, dtype=float), 1.0)
        mean = np.asarray(total, dtype=float) / n
        var = np.maximum(np.asarray(total_sq, dtype=float) / n - mean**2, 0.0)
        scale = np.sqrt(var)
        return cls(mean, np.where(scale > 0, scale, 1.0))

    @staticmethod
    def moments(X):
        ok = ~np.isnan(X)
        Z = np.where(ok, X, 0.0)
        return ok.sum(0), Z.sum(0), (Z**2).sum(0)

    @classmethod
    def fit(cls, X) -> "Standardizer":
        return cls.from_moments(*cls.moments(np.asarray(X, dtype=float)))

    def transform(self, X) -> np.ndarray:
        Z = (np.asarray(X, dtype=float) - self.mean) / self.scale
        return np.where(np.isnan(Z), 0.0, Z)

    def apply(self, data: SurvivalDataset) -> SurvivalDataset:
        return SurvivalDataset(self.transform(data.X), data.time, data.event)


def _loss_and_grad(beta, X, time, event):
    if not event.any():
        raise ValueError("partial likelihood needs at least one event")
    beta = np.asarray(beta, dtype=float)
    order = np.argsort(time, kind="stable")
    t, Xs = time[order], X[order]
    eta = Xs @ beta
    shift = eta.max()
    w = np.exp(eta - shift)
    s0 = np.cumsum(w[::-1])[::-1]
    s1 = np.cumsum((w[:, None] * Xs)[::-1], axis=0)[::-1]
    ev = np.nonzero(event[order])[0]
    start = np.searchsorted(t, t[ev], side="left")  # risk set: t_j >= t_i
    loss = -float(np.sum(eta[ev] - (np.log(s0[start]) + shift)))
    grad = -(Xs[ev] - s1[start] / s0[start][:, None]).sum(axis=0)
    return loss, grad


def cox_neg_partial_loglik(beta, data: SurvivalDataset) -> float:
    """Negative Cox partial log-likelihood (Breslow ties)."""
    return _loss_and_grad(beta, data.X, data.time, data.event)[0]


def cox_gradient(beta, data: SurvivalDataset) -> np.ndarray:
    return _loss_and_grad(beta, data.X, data.time, data.event)[1]


def fit_cox_local(
    data: SurvivalDataset, learning_rate: float = 0.01, epochs: int = 100, beta0=None
) -> np.ndarray:
    """Full-batch gradient descent on the partial likelihood.

    ``data`` must already be standardized.  Each epoch halves the step
    until the loss does not increase, so the loss sequence is monotone.
    """
    beta = np.zeros(data.n_features) if beta0 is None else np.array(beta0, dtype=float)
    if epochs == 0:
        return beta
    loss, grad = _loss_and_grad(beta, data.X, data.time, data.event)
    for _ in range(epochs):
        if not math.isfinite(loss):
            raise ValueError("partial likelihood diverged; use a smaller learning rate")
        step = learning_rate
        for _ in range(60):
            cand = beta - step * grad
            cand_loss, cand_grad = _loss_and_grad(cand, data.X, data.time, data.event)
            if cand_loss <= loss:
                beta, loss, grad = cand, cand_loss, cand_grad
                break
            step /= 2.0
        else:
            break  # no descent direction left at float resolution
    return beta


def risk_set_summary(data: SurvivalDataset):
    """Distinct observed times with event and at-risk counts.

    Unlike :func:`~fedsurf.survival.event_table` censoring-only times are
    included, which lets a server rebuild at-risk counts at any time.
    """
    times, inverse = np.unique(data.time, return_inverse=True)
    d = np.bincount(inverse, weights=data.event.astype(float), minlength=len(times))
    n = len(data) - np.searchsorted(np.sort(data.time), times, side="left")
    return times, d, n.astype(float)


def shared_baseline_hazard(clients) -> StepFunction:
    """Pooled Nelson-Aalen cumulative hazard from per-client summaries.

    ``clients`` holds datasets or ``(times, d, n)`` summaries from
    :func:`risk_set_summary`.
    """
    summaries = [c if isinstance(c, tuple) else risk_set_summary(c) for c in clients]
    if not summaries or all(len(s[0]) == 0 for s in summaries):
        raise ValueError("no client summaries to merge")
    union = np.unique(np.concatenate([s[0][s[1] > 0] for s in summaries]))
    d = np.zeros(len(union))
    n = np.zeros(len(union))
    for times, dk, nk in summaries:
        idx = np.searchsorted(times, union, side="left")
        hit = idx < len(times)
        n[hit] += nk[idx[hit]]
        exact = hit & (times[np.minimum(idx, len(times) - 1)] == union)
        d[exact] += dk[idx[exact]]
    return StepFunction(union, np.cumsum(d / n), 0.0)


@dataclass(eq=False)
class CoxModel:
    """Linear-risk model ``S(t|x) = exp(-H0(t) exp(<beta, z>))`` on scaled features ``z``."""

    beta: np.ndarray
    baseline_cum_hazard: StepFunction
    standardizer: Standardizer | None = None
    trace: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if not self.baseline_cum_hazard.is_cumulative_hazard():
            raise ValueError("baseline must be a valid cumulative hazard")

    def _z(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.beta):
            raise ValueError(f"expected {len(self.beta)} features, got {X.shape[1]}")
        return X if self.standardizer is None else self.standardizer.transform(X)

    def risk(self, X) -> np.ndarray:
        return self._z(X) @ self.beta

    def survival_at(self, X, times) -> np.ndarray:
        H0 = self.baseline_cum_hazard(np.asarray(times, dtype=float))
        return np.exp(-np.outer(np.exp(self.risk(X)), H0))

    def to_dict(self) -> dict:
        d = {
            "format": "fedsurf-cox",
            "version": 1,
            "beta": self.beta.tolist(),
            "baseline_times": self.baseline_cum_hazard.times.tolist(),
            "baseline_values": self.baseline_cum_hazard.values.tolist(),
        }
        if self.standardizer is not None:
            d["mean"] = self.standardizer.mean.tolist()
            d["scale"] = self.standardizer.scale.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CoxModel":
        std = None
        if "mean" in d:
            std = Standardizer(np.array(d["mean"]), np.array(d["scale"]))
        H0 = StepFunction(d["baseline_times"], d["baseline_values"], 0.0)
        return cls(np.array(d["beta"]), H0, std)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


def cox_predict_risk(model: CoxModel, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("cox_predict_risk expects a single feature vector")
    return float(model.risk(x)[0])


def fit_cox(train: SurvivalDataset, learning_rate: float = 0.01, epochs: int = 500) -> CoxModel:
    """Local Cox model: standardize, descend, attach the local baseline."""
    std = Standardizer.fit(train.X)
    beta = fit_cox_local(std.apply(train), learning_rate, epochs)
    return CoxModel(beta, shared_baseline_hazard([train]), std)


def _validation_c_index(beta, val_sets, weights):
    scores, wts = [], []
    for (val, ctx), w in zip(val_sets, weights):
        try:
            scores.append(concordance_index_ipcw(ctx.G, val, val.X @ beta, ctx.tau))
            wts.append(w)
        except ValueError:
            continue
    return float(np.average(scores, weights=wts)) if scores else float("nan")


def fedavg_cox(clients, config: FedAvgConfig = FedAvgConfig()) -> CoxModel:
    """Federated Cox model trained with FedAvg.

    ``clients`` holds objects with ``local_train`` and ``local_val``
    datasets.  Feature moments and risk-set counts are exchanged once.
    Each round, the selected clients run ``local_epochs`` descent epochs from
    the broadcast coefficients and the server averages the results weighted
    by training-set size.  The coefficients with the best size-weighted
    validation C-index over all rounds are kept; the full trajectory is
    stored in ``model.trace``.
    """
    if not clients:
        raise ValueError("fedavg needs at least one client")
    moments = [Standardizer.moments(c.local_train.X) for c in clients]
    std = Standardizer.from_moments(*(sum(m[i] for m in moments) for i in range(3)))
    trains = [std.apply(c.local_train) for c in clients]
    for k, tr in enumerate(trains):
        if not tr.event.any():
            raise ValueError(f"client {k} has no events")
    sizes = np.array([len(tr) for tr in trains], dtype=float)
    val_sets, val_w = [], []
    for c, tr in zip(clients, trains):
        val = getattr(c, "local_val", None)
        if val is None or len(val) == 0:
            continue
        try:
            ctx = EvalContext.from_train(tr)
        except ValueError:
            continue
        val_sets.append((std.apply(val), ctx))
        val_w.append(len(val))
    baseline = shared_baseline_hazard([risk_set_summary(c.local_train) for c in clients])

    rng = np.random.default_rng(config.seed)
    n_pick = max(1, math.ceil(config.client_fraction * len(trains)))
    beta = np.zeros(trains[0].n_features)
    betas, val_c = [], []
    best, best_c = beta, -np.inf
    for _ in range(config.rounds):
        picked = np.arange(len(trains)) if n_pick == len(trains) else np.sort(
            rng.choice(len(trains), n_pick, replace=False))
        local = [fit_cox_local(trains[k], config.learning_rate, config.local_epochs, beta)
                 for k in picked]
        w = sizes[picked] / sizes[picked].sum()
        beta = np.sum(w[:, None] * np.array(local), axis=0)
        score = _validation_c_index(beta, val_sets, val_w)
        betas.append(beta)
        val_c.append(score)
        if score > best_c:
            best, best_c = beta, score
    found = np.isfinite(best_c)
    trace = {"betas": np.array(betas), "val_c_index": np.array(val_c),
             "best_round": int(np.nanargmax(val_c)) if found else -1}
    if not found:
        best = beta
    return CoxModel(best, baseline, std, trace)
