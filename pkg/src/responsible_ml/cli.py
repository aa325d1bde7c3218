"""Command-line entry point: ``responsible-ml <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or contract error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import dataset as ds
from . import fairbatch, frtrain, metrics, mlclean, model, slicefinder, slicetuner
from .plotdata import emit_plot_data


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="random seed; required by gen-data, poison, train and tune")
    p.add_argument("--config", type=Path, help="JSON file with per-module sections")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default ./out)")
    return p


def _data_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", type=Path, required=required, help="dataset CSV")
    p.add_argument("--schema", type=Path, required=required, help="schema sidecar JSON")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="responsible-ml", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset (config section 'gen')")
    p.add_argument("--n", type=int, nargs=2, metavar=("N0", "N1"), help="group sizes")

    p = sub.add_parser("poison", parents=[common], help="flip a fraction of labels")
    _data_args(p)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--strategy", choices=["uniform", "targeted"], default="uniform")
    p.add_argument("--group", help="target group for --strategy targeted")

    p = sub.add_parser("metrics", parents=[common], help="fairness report for predictions")
    _data_args(p)
    p.add_argument("--predictions", type=Path, required=True, help="CSV with a 'prediction' column")

    p = sub.add_parser("train", parents=[common], help="train vanilla / FairBatch / FR-Train models")
    _data_args(p)
    p.add_argument("--method", choices=["vanilla", "fairbatch", "frtrain"], default="vanilla")
    p.add_argument("--validation", type=Path, help="clean validation CSV (frtrain)")
    p.add_argument("--test", type=Path, help="CSV to evaluate on (default: training data)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--alpha", type=float, help="FairBatch step size")
    p.add_argument("--eo-threshold", type=float, help="report whether EO disparity is at most this")

    p = sub.add_parser("tune", parents=[common], help="plan selective data acquisition")
    _data_args(p)
    p.add_argument("--pool", type=Path, required=True, help="CSV of examples available for acquisition")
    p.add_argument("--slices", type=Path, required=True, help="JSON list of predicates, e.g. [{\"z\": \"a\"}]")
    p.add_argument("--validation", type=Path, help="validation CSV for loss measurement")
    p.add_argument("--budget", type=float, required=True)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)

    p = sub.add_parser("find-slices", parents=[common], help="find problematic slices of a model")
    _data_args(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--strategy", choices=["lattice", "tree", "both"], default="lattice")
    p.add_argument("--k", type=int)
    p.add_argument("--min-size", type=int)

    p = sub.add_parser("clean", parents=[common], help="sanitize, deduplicate and reweigh")
    _data_args(p)

    sub.add_parser("demo-fig2", parents=[common], help="threshold-classifier fairness/poisoning example")
    sub.add_parser("demo-table1", parents=[common], help="six-example cleaning example")
    return parser


# ---------------------------------------------------------------------------


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ValueError(f"config section {name!r} must be an object")
    return dict(sec)


def _dataclass_from(cls, doc: dict, **overrides):
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    doc = {**doc, **{k: v for k, v in overrides.items() if v is not None}}
    return cls(**doc)


def _load(path: Path, schema: dict) -> ds.Dataset:
    return ds.load_csv(path, schema)


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _predicates(path: Path) -> list[ds.SlicePredicate]:
    doc = json.loads(path.read_text(encoding="utf-8"))
    return [ds.SlicePredicate(tuple(item.items())) for item in doc]


def cmd_gen_data(a, cfg, out: Path) -> int:
    g = _section(cfg, "gen")
    sizes = g.pop("sizes", {"a": 600, "b": 400})
    if a.n:
        sizes = dict(zip(list(sizes)[:2], a.n))
    means = {tuple(k.split(":")[:1]) + (int(k.split(":")[1]),): v for k, v in g.pop("means", {}).items()}
    spreads = {tuple(k.split(":")[:1]) + (int(k.split(":")[1]),): v for k, v in g.pop("spreads", {}).items()}
    params = ds.SyntheticParams(sizes=sizes, label_rates=g.pop("label_rates", {z: 0.5 for z in sizes}),
                                means=means, spreads=spreads, n_features=g.pop("n_features", 2),
                                seed=a.seed)
    if g:
        raise ValueError(f"unknown gen keys: {sorted(g)}")
    d = ds.gen_synthetic(params)
    ds.write_csv(d, out / "data.csv")
    _write_json(out / "schema.json", ds.schema_to_config(d, "id"))
    print(f"wrote {len(d)} examples to {out / 'data.csv'}")
    return 0


def cmd_poison(a, cfg, out: Path) -> int:
    schema = ds.load_schema(a.schema)
    d = _load(a.data, schema)
    poisoned, mask = ds.poison_label_flip(d, a.rate, a.seed, a.strategy, a.group)
    ds.write_csv(poisoned, out / "poisoned.csv", schema.get("id"))
    _write_json(out / "flip_mask.json", [int(i) for i in mask])
    print(f"flipped {len(mask)} of {len(d)} labels")
    return 0


def _read_predictions(path: Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and "prediction" not in rows[0]:
        raise ds.DataError(f"{path}: needs a 'prediction' column")
    try:
        return np.array([float(r["prediction"]) for r in rows])
    except ValueError as exc:
        raise ds.DataError(f"{path}: {exc}") from None


def cmd_metrics(a, cfg, out: Path) -> int:
    d = _load(a.data, ds.load_schema(a.schema))
    rep = metrics.fairness_report(_read_predictions(a.predictions), d)
    _write_json(out / "report.json", rep.to_dict())
    print(rep.to_json())
    return 0


def cmd_train(a, cfg, out: Path) -> int:
    schema = ds.load_schema(a.schema)
    d = _load(a.data, schema)
    tc = _dataclass_from(model.TrainConfig, _section(cfg, "train"), seed=a.seed, epochs=a.epochs,
                         lr=a.lr, batch_size=a.batch_size)
    if a.method == "vanilla":
        m = model.train_sgd(d, tc)
    elif a.method == "fairbatch":
        fb = _dataclass_from(fairbatch.FairBatchConfig, _section(cfg, "fairbatch"), alpha=a.alpha)
        sampler = fairbatch.make_fairbatch_sampler(d, fb, tc.seed, tc.batch_size)
        m = model.train_sgd(d, tc, sampler)
        (out / "lambda_path.csv").write_text(emit_plot_data(sampler, "lambda-path"), encoding="utf-8")
    else:
        if a.validation is None:
            raise UsageError("train --method frtrain needs --validation")
        val = _load(a.validation, schema)
        fr_doc = _section(cfg, "frtrain")
        if "ramp" in fr_doc and fr_doc["ramp"] is not None:
            fr_doc["ramp"] = tuple(fr_doc["ramp"])
        frc = _dataclass_from(frtrain.FRConfig, fr_doc, seed=tc.seed, epochs=a.epochs,
                              lr=a.lr, batch_size=a.batch_size)
        m, diag = frtrain.train_frtrain(d, val, frc)
        (out / "frtrain_diagnostics.csv").write_text(diag.to_csv(), encoding="utf-8")
    model.save_model(m, out / "model.json")
    test = _load(a.test, schema) if a.test else d
    rep = metrics.fairness_report(model.classify(m, test), test).to_dict()
    if a.eo_threshold is not None:
        rep["eo_fair"] = rep["eo_disparity"] <= a.eo_threshold
    _write_json(out / "report.json", rep)
    print(json.dumps(rep, indent=2, sort_keys=True))
    return 0


def cmd_tune(a, cfg, out: Path) -> int:
    schema = ds.load_schema(a.schema)
    d = _load(a.data, schema)
    pool = _load(a.pool, schema)
    preds = _predicates(a.slices)
    sec = _section(cfg, "tune")
    lam = a.lam if a.lam is not None else sec.pop("lam", 1.0)
    truth = sec.pop("truth", None)
    if "costs" in sec and sec["costs"] is not None:
        sec["costs"] = tuple(sec["costs"])
    pc = _dataclass_from(slicetuner.PlannerConfig, sec, seed=a.seed, tau=a.tau)
    if truth is not None:
        evaluator = slicetuner.PowerLawEvaluator([slicetuner.LearningCurve(b, a_) for b, a_ in truth],
                                                 seed=pc.seed)
    else:
        val = _load(a.validation, schema) if a.validation else d
        tc = _dataclass_from(model.TrainConfig, _section(cfg, "train"), seed=a.seed)
        evaluator = slicetuner.TrainingEvaluator(tc, val)
    provider = slicetuner.PoolProvider(pool, preds, pc.seed)
    trace = slicetuner.plan_acquisition(d, preds, a.budget, lam, pc, provider, evaluator)
    doc = trace.to_dict()
    doc["slices"] = [str(p) for p in preds]
    _write_json(out / "plan.json", doc)
    (out / "learning_curves.csv").write_text(emit_plot_data(trace, "learning-curve"), encoding="utf-8")
    print(f"spent {trace.spent:g} of {trace.budget:g}; final sizes {trace.final_sizes}; "
          f"equalized-error-rate gap {trace.gap:.4f}")
    return 0


def cmd_find_slices(a, cfg, out: Path) -> int:
    d = _load(a.data, ds.load_schema(a.schema))
    m = model.load_model(a.model)
    sec = _section(cfg, "slicefinder")
    if "features" in sec and sec["features"] is not None:
        sec["features"] = tuple(sec["features"])
    sc = _dataclass_from(slicefinder.SearchConfig, sec, k=a.k, min_size=a.min_size)
    rep = slicefinder.find_problematic(d, m, sc, a.strategy)
    _write_json(out / "slices.json", rep.to_dict())
    print(slicefinder.format_table(rep.slices, d))
    return 0


def cmd_clean(a, cfg, out: Path) -> int:
    schema = ds.load_schema(a.schema)
    d = _load(a.data, schema)
    cc = mlclean.CleanConfig.from_dict(_section(cfg, "clean"))
    cleaned, report = mlclean.mlclean_pipeline(d, cc)
    ds.write_csv(cleaned, out / "cleaned.csv", schema.get("id"))
    _write_json(out / "cleaning_report.json", report.to_dict())
    print("\n".join(report.trace()))
    return 0


def fig2_lines() -> list[str]:
    clean, poisoned = ds.make_fig2_fixture(), ds.make_poisoned_fig2_fixture()
    acc_clf = model.fit_threshold_max_accuracy(clean, "X")
    fair_clf = model.fit_threshold_fair(clean, "X", 1.0)
    pois_clf = model.fit_threshold_fair(poisoned, "X", 1.0)
    lines = []
    for label, clf, data in (("accurate classifier, clean data", acc_clf, clean),
                             ("fair classifier, clean data", fair_clf, clean),
                             ("fair classifier from poisoned data, poisoned data", pois_clf, poisoned),
                             ("fair classifier from poisoned data, clean data", pois_clf, clean)):
        yhat = clf.predict(data)
        lines.append(f"{label}: threshold X > {clf.threshold:g}  accuracy {metrics.accuracy(yhat, data):.1f}"
                     f"  DP {metrics.demographic_parity(yhat, data):.1f}")
    return lines


def cmd_demo_fig2(a, cfg, out: Path) -> int:
    lines = fig2_lines()
    (out / "fig2.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def cmd_demo_table1(a, cfg, out: Path) -> int:
    d = ds.make_table1_fixture()
    cleaned, report = mlclean.mlclean_pipeline(d, mlclean.CleanConfig())
    lines = report.trace()
    (out / "table1.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json(out / "cleaning_report.json", report.to_dict())
    print("\n".join(lines))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "poison": cmd_poison, "metrics": cmd_metrics, "train": cmd_train,
    "tune": cmd_tune, "find-slices": cmd_find_slices, "clean": cmd_clean,
    "demo-fig2": cmd_demo_fig2, "demo-table1": cmd_demo_table1,
}


RANDOMIZED = {"gen-data", "poison", "train", "tune"}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        cfg = json.loads(a.config.read_text(encoding="utf-8")) if a.config else {}
        if a.seed is None:
            if "seed" in cfg:
                a.seed = int(cfg["seed"])
            elif a.command in RANDOMIZED:
                raise UsageError(f"{a.command} is randomized: pass --seed or set 'seed' in --config")
            else:
                a.seed = 0
        a.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[a.command](a, cfg, a.out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (ds.DataError, ValueError, KeyError, OSError, model.TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
