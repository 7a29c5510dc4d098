"""Command-line entry point: ``fedsurf {run,split,eval,synth}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .cox import CoxModel
from .experiment import OUTPUT_ENV, ExperimentSpec, generate_synthetic, load_dataset, run_experiment
from .federation import setup_clients
from .forest import forest_from_dict
from .metrics import EvalContext, evaluate_model
from .survival import kaplan_meier, save_csv, train_test_split


def _spec(args) -> ExperimentSpec:
    spec = ExperimentSpec.load(args.config) if args.config else ExperimentSpec()
    if args.seed is not None:
        spec = replace(spec, base_seed=args.seed)
    if getattr(args, "models", None):
        spec = replace(spec, models=[m.strip() for m in args.models.split(",") if m.strip()])
    if args.out:
        spec = replace(spec, output_dir=args.out)
    elif spec.output_dir is None:
        spec = replace(spec, output_dir=os.environ.get(OUTPUT_ENV, "fedsurf-output"))
    return spec


def cmd_run(args) -> int:
    spec = _spec(args)
    summary = run_experiment(spec, jobs=args.jobs)
    print((Path(spec.output_dir) / "summary.txt").read_text(), end="")
    for run in summary["runs"]:
        if not run["ok"]:
            print(f"seed {run['seed']} failed: {run['error']}", file=sys.stderr)
    return 0 if summary["ok"] else 1


def cmd_split(args) -> int:
    spec = _spec(args)
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(spec)
    seed = spec.base_seed
    train, test = train_test_split(data, spec.test_fraction, seed)
    save_csv(train, out / "train.csv")
    save_csv(test, out / "test.csv")
    clients = setup_clients(train, replace(spec.federation, seed=seed), spec.forest, fit=False)
    rows = ["client,time,survival"]
    for c in clients:
        save_csv(c.local_train, out / f"client{c.client_id}_train.csv")
        save_csv(c.local_val, out / f"client{c.client_id}_val.csv")
        km = kaplan_meier(c.local_train)
        rows += [f"{c.client_id},{t!r},{s!r}" for t, s in zip(km.times, km.values)]
        print(f"client {c.client_id}: {len(c.local_train)} train, {len(c.local_val)} val, "
              f"{c.local_train.censored_fraction:.0%} censored")
    (out / "kaplan_meier.csv").write_text("\n".join(rows) + "\n")
    return 0


def cmd_eval(args) -> int:
    spec = _spec(args)
    payload = json.loads(Path(args.model).read_text())
    fmt = payload.get("format")
    if fmt == "fedsurf-forest":
        model = forest_from_dict(payload)
    elif fmt == "fedsurf-cox":
        model = CoxModel.from_dict(payload)
    else:
        raise SystemExit(f"unrecognized model format {fmt!r}")
    data = load_dataset(spec)
    train, test = train_test_split(data, spec.test_fraction, spec.base_seed)
    ctx = EvalContext.from_train(train, **spec.metrics)
    report = evaluate_model(model, test, ctx, Path(args.model).stem, seed=spec.base_seed,
                            split_type=spec.federation.split)
    d = report.to_dict()
    d.pop("brier")
    print(json.dumps(d, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    data = generate_synthetic(args.n, args.d, args.censor_rate, args.seed if args.seed is not None else 0)
    out = Path(args.out or "synthetic.csv")
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "synthetic.csv"
    save_csv(data, out)
    out.with_suffix(".json").write_text(json.dumps(data.schema.to_dict(), indent=2) + "\n")
    print(f"wrote {len(data)} records ({data.censored_fraction:.1%} censored) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsurf", description="Federated survival forest simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, models=True):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int, help="override base_seed")
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./fedsurf-output)")
        if models:
            sp.add_argument("--models", help="comma list: fedsurf,fedsurf-ibs,cox-local,cox-fedavg")

    sp = sub.add_parser("run", help="run a full experiment")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1, help="max concurrent repetitions")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("split", help="write federation shards and client Kaplan-Meier curves")
    common(sp, models=False)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("eval", help="re-score a serialized model on the seed's test split")
    common(sp, models=False)
    sp.add_argument("--model", required=True, help="forest or Cox model JSON")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("synth", help="generate a synthetic survival dataset")
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--d", type=int, default=5)
    sp.add_argument("--censor-rate", type=float, default=0.3)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="CSV path or directory")
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
