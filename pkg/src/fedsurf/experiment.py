"""Repeated-seed experiments comparing local and federated survival models."""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .cox import FedAvgConfig, fedavg_cox, fit_cox
from .datasets import builtin_paths
from .federation import FederationConfig, fedsurf_round, run_local_baselines, setup_clients
from .forest import ForestParams, dumps_forest
from .metrics import EvalContext, MetricsReport, evaluate_model
from .survival import Feature, Schema, SurvivalDataset, load_csv, load_schema, train_test_split

__all__ = [
    "MODELS",
    "ExperimentSpec",
    "RunResult",
    "generate_synthetic",
    "synthetic_beta",
    "load_dataset",
    "run_repetition",
    "run_experiment",
    "aggregate",
    "format_table",
]

MODELS = ("fedsurf", "fedsurf-ibs", "cox-local", "cox-fedavg")
OUTPUT_ENV = "FEDSURF_OUTPUT_DIR"


def synthetic_beta(d: int) -> np.ndarray:
    """Ground-truth coefficients of :func:`generate_synthetic`: 1, -1/2, 1/3, ..."""
    j = np.arange(d)
    return (-1.0) ** j / (j + 1.0)


def _censored_share(scale, rates):
    # P(C < T) for C ~ U(0, scale), T ~ Exp(rate), averaged over records
    x = rates * scale
    return float(np.mean(-np.expm1(-x) / x))


def generate_synthetic(n: int, d: int, censor_rate: float, seed, beta=None) -> SurvivalDataset:
    """Exponential event times with log-linear rate ``exp(<beta, x>)``.

    Features are standard normal.  Censoring times are uniform on
    ``[0, c]`` with ``c`` found by bisection so that the expected censored
    fraction equals ``censor_rate``.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    if not 0.0 <= censor_rate < 1.0:
        raise ValueError("censor_rate must lie in [0, 1)")
    beta = synthetic_beta(d) if beta is None else np.asarray(beta, dtype=float)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    rates = np.exp(X @ beta)
    T = rng.exponential(1.0 / rates)
    if censor_rate == 0.0:
        time, event = T, np.ones(n, dtype=bool)
    else:
        lo, hi = 1e-12, 1.0
        while _censored_share(hi, rates) > censor_rate:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if _censored_share(mid, rates) > censor_rate:
                lo = mid
            else:
                hi = mid
        C = rng.uniform(0.0, 0.5 * (lo + hi), size=n)
        time, event = np.minimum(T, C), T <= C
    schema = Schema(tuple(Feature(f"x{j}") for j in range(d)))
    return SurvivalDataset(X, time, event, schema)


@dataclass
class ExperimentSpec:
    dataset: str = "builtin:gbsg2"
    schema: str | None = None
    models: list[str] = field(default_factory=lambda: ["fedsurf", "fedsurf-ibs"])
    federation: FederationConfig = field(default_factory=FederationConfig)
    forest: ForestParams = field(default_factory=ForestParams)
    cox: FedAvgConfig = field(default_factory=FedAvgConfig)
    metrics: dict = field(default_factory=lambda: {"n_points": 100, "low": 0.05, "high": 0.95})
    repetitions: int = 5
    base_seed: int = 0
    test_fraction: float = 0.2
    output_dir: str | None = None

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        unknown = set(self.models) - set(MODELS)
        if unknown:
            raise ValueError(f"unknown models {sorted(unknown)}; choose from {MODELS}")

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "ExperimentSpec":
        d = dict(d)
        ds = d.pop("dataset", "builtin:gbsg2")
        if isinstance(ds, dict):
            d["schema"] = ds.get("schema")
            ds = ds["path"]
        if base is not None and not str(ds).startswith("builtin:"):
            ds = str((base / ds).resolve())
            if d.get("schema"):
                d["schema"] = str((base / d["schema"]).resolve())
        return cls(
            dataset=ds,
            schema=d.pop("schema", None),
            federation=FederationConfig(**d.pop("federation", {})),
            forest=ForestParams(**d.pop("forest", {})),
            cox=FedAvgConfig(**d.pop("cox", {})),
            **d,
        )

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        path = Path(path)
        with open(path) as fh:
            return cls.from_dict(json.load(fh), path.parent)

    def to_dict(self) -> dict:
        return asdict(self)


def load_dataset(spec: ExperimentSpec) -> SurvivalDataset:
    if spec.dataset.startswith("builtin:"):
        csv_path, schema_path = builtin_paths(spec.dataset.split(":", 1)[1])
        return load_csv(csv_path, load_schema(schema_path))
    if spec.schema is None:
        raise ValueError("a schema file is required for CSV datasets")
    return load_csv(spec.dataset, load_schema(spec.schema))


@dataclass
class RunResult:
    seed: int
    reports: list[MetricsReport] = field(default_factory=list)
    artifacts: dict[str, str] = field(default_factory=dict)
    error: str | None = None


def run_repetition(spec: ExperimentSpec, data: SurvivalDataset, rep: int) -> RunResult:
    """One seed: split, train every requested model, score on the test split."""
    seed = spec.base_seed + rep
    result = RunResult(seed)
    try:
        train, test = train_test_split(data, spec.test_fraction, seed)
        ctx = EvalContext.from_train(train, **spec.metrics)
        config = replace(spec.federation, seed=seed)
        split = config.split
        meta = {"split_type": split, "seed": seed}
        wants_forest = bool({"fedsurf", "fedsurf-ibs"} & set(spec.models))
        clients = setup_clients(train, config, replace(spec.forest, seed=seed), fit=wants_forest)

        for model in spec.models:
            if model in ("fedsurf", "fedsurf-ibs"):
                sampling = "uniform" if model == "fedsurf" else "inverse_ibs"
                server = fedsurf_round(clients, config, sampling)
                result.reports.append(evaluate_model(server.ensemble, test, ctx, model,
                                                     setting="federated", **meta))
                result.artifacts[f"{model}_seed{seed}.json"] = dumps_forest(server.ensemble)
                result.artifacts[f"messages_{model}_seed{seed}.jsonl"] = server.log.to_jsonl()
                if model == "fedsurf":
                    result.reports.extend(run_local_baselines(clients, test, ctx, model, **meta))
            elif model == "cox-local":
                epochs = spec.cox.rounds * spec.cox.local_epochs
                for c in clients:
                    cox = fit_cox(c.local_train, spec.cox.learning_rate, epochs)
                    result.reports.append(evaluate_model(cox, test, ctx, "coxph", setting="local",
                                                         client=c.client_id, **meta))
            elif model == "cox-fedavg":
                cox = fedavg_cox(clients, replace(spec.cox, seed=seed))
                result.reports.append(evaluate_model(cox, test, ctx, "coxph",
                                                     setting="federated", **meta))
                result.artifacts[f"coxph_seed{seed}.json"] = cox.dumps()
    except Exception as exc:  # recorded per run; remaining runs continue
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def aggregate(reports: list[MetricsReport]) -> dict:
    """Mean and (population) std of each metric per model and setting."""
    groups: dict = {}
    for r in reports:
        groups.setdefault(r.model, {}).setdefault(r.setting, []).append(r)
    out = {}
    for model, by_setting in groups.items():
        out[model] = {}
        for setting, rows in by_setting.items():
            c = np.array([r.c_index for r in rows])
            b = np.array([r.ibs for r in rows])
            out[model][setting] = {
                "n": len(rows),
                "c_index_mean": float(c.mean()), "c_index_std": float(c.std()),
                "ibs_mean": float(b.mean()), "ibs_std": float(b.std()),
            }
    return out


def format_table(agg: dict) -> str:
    """Plain-text table with metrics scaled by 100."""
    lines = [f"{'Model':<14}{'Metric':<9}{'Local':>14}{'Federated':>14}"]
    for model in sorted(agg):
        for metric in ("c_index", "ibs"):
            cells = []
            for setting in ("local", "federated"):
                s = agg[model].get(setting)
                cells.append("--" if s is None else
                             f"{100 * s[metric + '_mean']:.1f}±{100 * s[metric + '_std']:.1f}")
            lines.append(f"{model:<14}{metric:<9}{cells[0]:>14}{cells[1]:>14}")
    return "\n".join(lines) + "\n"


def _run_one(args):
    spec, data, rep = args
    return run_repetition(spec, data, rep)


def run_experiment(spec: ExperimentSpec, jobs: int = 1, write: bool = True) -> dict:
    """Run all repetitions and write per-run reports plus an aggregate table.

    Files written to ``spec.output_dir`` (or ``$FEDSURF_OUTPUT_DIR``):
    ``reports.jsonl``, ``reports.csv``, ``summary.json``, ``summary.txt``
    and one model/message-log file per run and federated model.
    """
    data = load_dataset(spec)
    tasks = [(spec, data, r) for r in range(spec.repetitions)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            runs = list(ex.map(_run_one, tasks))
    else:
        runs = [_run_one(t) for t in tasks]

    reports = [r for run in runs for r in run.reports]
    agg = aggregate(reports)
    summary = {
        "spec": spec.to_dict() | {"output_dir": None},
        "runs": [{"seed": run.seed, "ok": run.error is None, "error": run.error} for run in runs],
        "aggregate": agg,
        "ok": all(run.error is None for run in runs),
    }
    if write:
        out = Path(spec.output_dir or os.environ.get(OUTPUT_ENV, "fedsurf-output"))
        (out / "models").mkdir(parents=True, exist_ok=True)
        with open(out / "reports.jsonl", "w") as fh:
            for r in reports:
                fh.write(r.to_json() + "\n")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MetricsReport.CSV_FIELDS)
        w.writerows(r.csv_row() for r in reports)
        (out / "reports.csv").write_text(buf.getvalue())
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        (out / "summary.txt").write_text(format_table(agg))
        for run in runs:
            for name, text in run.artifacts.items():
                (out / "models" / name).write_text(text)
    return summary
