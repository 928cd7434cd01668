"""Command-line front end.

Subcommands: data gen|load, model fit|finetune-suppress, imputer train,
surrogate train, explain, metrics mse|error-rate|agreement,
experiment run <name>, report table1|fig3|fig4.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric or
training failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .datasets import Dataset
from .errors import DataError, InputShapeError, NumericError, SchemaError, TrainingError
from .experiments.explain import METHOD_IDS, build_family, global_attribution, local_attribution
from .experiments.plots import save_bar_chart
from .experiments.recipes import (
    RECIPE_NAMES,
    derived_seed,
    make_recipe,
    recipe_from_doc,
    run_recipe,
)
from .experiments.store import load_dataset_ref, make_dataset, write_dataset_ref
from .imputer import ImputerHyper, ImputerModel, train_imputer
from .metrics import attribution_agreement, explanation_error_rate, value_function_mse
from .models import MlpClassifier, fit_mlp, model_from_doc, suppress_feature_finetune
from .models.trees import fit_isolation_forest, fit_random_forest
from .nn import TrainConfig
from .serialize import envelope, read_json, write_json_atomic
from .shapley import Attribution
from .surrogate import SurrogateHyper, SurrogateModel, train_surrogate

GEN_KINDS = ("outlier", "two_feature", "census_standin", "digits")
LOAD_KINDS = ("drug", "abalone", "census", "mnist")

# report name -> (recipe, artifacts to mention)
REPORTS = {
    "table1": ("mse_table", "value-function MSE comparison table"),
    "fig3": ("outlier_error_rates", "outlier explanation error-rate curve"),
    "fig4": ("two_feature_globals", "two-feature global-value chart"),
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; this CLI reserves 2 for
    data errors, so parse failures raise and map to exit code 1."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _parse_kv(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise _UsageError(f"expected key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _parse_sizes(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise _UsageError(f"expected comma-separated integers, got {text!r}")
    if not sizes or any(s < 1 for s in sizes):
        raise _UsageError(f"layer sizes must be positive integers, got {text!r}")
    return sizes


def _load_data(path: str) -> Dataset:
    return load_dataset_ref(path)


def _load_model(path: str):
    return model_from_doc(read_json(path))


def _seed(args) -> int:
    return args.seed if args.seed is not None else 0


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


def _cmd_data_gen(args) -> int:
    params = _parse_kv(args.param)
    params.setdefault("seed", _seed(args))
    data = make_dataset(args.kind, params)
    write_dataset_ref(args.out, args.kind, params, data)
    print(f"wrote {args.out}: {data.name} ({data.n_points} points, {data.n_features} features)")
    return 0


def _cmd_data_load(args) -> int:
    if args.kind == "mnist":
        if not args.labels_path:
            raise _UsageError("kind mnist needs --labels-path alongside --path")
        params = {"images_path": args.path, "labels_path": args.labels_path, "seed": _seed(args)}
    else:
        params = {"path": args.path, "seed": _seed(args)}
    data = make_dataset(args.kind, params)
    write_dataset_ref(args.out, args.kind, params, data)
    print(f"wrote {args.out}: {data.name} ({data.n_points} points, {data.n_features} features)")
    return 0


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


def _cmd_model_fit(args) -> int:
    data = _load_data(args.data)
    X_train, y_train = data.part("train")
    seed = _seed(args)
    if args.kind == "mlp":
        if y_train is None:
            raise DataError("mlp fitting needs labeled data")
        X_val, y_val = data.part("val")
        model, history = fit_mlp(
            X_train,
            y_train,
            hidden_sizes=_parse_sizes(args.hidden),
            val=(X_val, y_val),
            cfg=TrainConfig(
                learning_rate=args.lr,
                max_epochs=args.epochs,
                patience=args.patience,
                seed=seed,
            ),
        )
        extra = f"val loss {history.best_val_loss:.4f}"
    elif args.kind == "forest":
        if y_train is None:
            raise DataError("random-forest fitting needs labeled data")
        model = fit_random_forest(X_train, y_train, n_trees=args.trees, seed=seed)
        extra = f"{args.trees} trees"
    elif args.kind == "isolation":
        model = fit_isolation_forest(
            X_train, n_trees=args.trees, subsample_size=args.subsample, seed=seed
        )
        model.calibrate_threshold(X_train, args.contamination)
        extra = f"threshold {model.threshold:.4f}"
    else:
        raise _UsageError(f"unknown model kind {args.kind!r}")
    write_json_atomic(args.out, model.to_doc())
    print(f"wrote {args.out}: {args.kind} model ({extra})")
    return 0


def _cmd_model_suppress(args) -> int:
    model = _load_model(args.model)
    if not isinstance(model, MlpClassifier):
        raise DataError("finetune-suppress works on mlp classifiers only")
    data = _load_data(args.data)
    X_train, y_train = data.part("train")
    X_test, y_test = data.part("test")
    try:
        feature = int(args.feature)
    except ValueError:
        if args.feature not in data.feature_names:
            raise DataError(
                f"feature {args.feature!r} not in dataset columns {data.feature_names}"
            )
        feature = data.feature_names.index(args.feature)
    tuned, report = suppress_feature_finetune(
        model,
        X_train,
        y_train,
        feature,
        alpha=args.alpha,
        epochs=args.epochs,
        cfg=TrainConfig(
            learning_rate=args.lr, max_epochs=args.epochs, patience=None, seed=_seed(args)
        ),
        eval_data=(X_test, y_test),
    )
    write_json_atomic(args.out, tuned.to_doc())
    if args.report:
        write_json_atomic(
            args.report,
            envelope(
                "suppression-report",
                1,
                {
                    "feature_index": feature,
                    "alpha": args.alpha,
                    "agreement": report.agreement,
                    "accuracy_before": report.accuracy_before,
                    "accuracy_after": report.accuracy_after,
                    "mean_abs_fd_before": report.mean_abs_fd_before,
                    "mean_abs_fd_after": report.mean_abs_fd_after,
                },
            ),
        )
    print(
        f"wrote {args.out}: suppressed feature {feature}, "
        f"agreement {report.agreement:.4f}, "
        f"functional dependence {report.mean_abs_fd_before:.4f} -> "
        f"{report.mean_abs_fd_after:.4f}"
    )
    return 0


# --------------------------------------------------------------------------
# auxiliary model training
# --------------------------------------------------------------------------


def _cmd_imputer_train(args) -> int:
    data = _load_data(args.data)
    X_train, _ = data.part("train")
    X_val, _ = data.part("val")
    hyper = ImputerHyper(
        hidden_size=args.hidden,
        learning_rate=args.lr,
        latent_dim=args.latent,
        n_modes=args.modes,
        beta=args.beta,
        max_epochs=args.epochs,
        patience=args.patience,
    )
    imputer, history = train_imputer(X_train, X_val, data.schema, hyper, seed=_seed(args))
    write_json_atomic(args.out, imputer.to_doc())
    print(f"wrote {args.out}: conditional imputer (val loss {history.best_val_loss:.4f})")
    return 0


def _cmd_surrogate_train(args) -> int:
    model = _load_model(args.model)
    data = _load_data(args.data)
    X_train, _ = data.part("train")
    X_val, _ = data.part("val")
    hyper = SurrogateHyper(
        hidden_size=args.hidden,
        learning_rate=args.lr,
        max_epochs=args.epochs,
        patience=args.patience,
    )
    surrogate, history = train_surrogate(
        model, X_train, X_val, data.schema, hyper, seed=_seed(args)
    )
    write_json_atomic(args.out, surrogate.to_doc())
    print(f"wrote {args.out}: masked surrogate (val loss {history.best_val_loss:.4f})")
    return 0


# --------------------------------------------------------------------------
# explain
# --------------------------------------------------------------------------


def _aux_models(args):
    imputer = ImputerModel.from_doc(read_json(args.imputer)) if args.imputer else None
    surrogate = SurrogateModel.from_doc(read_json(args.surrogate)) if args.surrogate else None
    return imputer, surrogate


def _cmd_explain(args) -> int:
    if args.index is None and not getattr(args, "global"):
        raise _UsageError("explain needs --index I (local) or --global")
    if args.index is not None and getattr(args, "global"):
        raise _UsageError("--index and --global are mutually exclusive")
    if args.antithetic and args.samples % 2:
        raise _UsageError("--samples must be even when antithetic pairing is on")
    model = _load_model(args.model)
    data = _load_data(args.data)
    imputer, surrogate = _aux_models(args)
    seed = _seed(args)
    if getattr(args, "global"):
        att = global_attribution(
            model,
            data,
            args.method,
            n_samples=args.samples,
            seed=seed,
            imputer=imputer,
            surrogate=surrogate,
            part=args.part,
        )
    else:
        att = local_attribution(
            model,
            data,
            args.method,
            args.index,
            n_samples=args.samples,
            seed=seed,
            class_index=args.class_index,
            imputer=imputer,
            surrogate=surrogate,
            part=args.part,
            antithetic=args.antithetic,
        )
    write_json_atomic(args.out, att.to_doc())
    if args.svg:
        save_bar_chart(
            args.svg,
            att.feature_names or [f"x{i}" for i in range(len(att.values))],
            [(f"{args.method} ({att.scope})", att.values.tolist(), att.std_errors.tolist())],
            title=f"Shapley values ({att.value_function_id})",
            ylabel="attribution",
        )
    top = int(np.argmax(np.abs(att.values)))
    top_name = (att.feature_names or [f"x{i}" for i in range(len(att.values))])[top]
    print(
        f"wrote {args.out}: {att.scope} attribution via {att.value_function_id}, "
        f"{att.n_samples} samples, largest |value| at {top_name}"
    )
    return 0


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def _cmd_metrics_mse(args) -> int:
    model = _load_model(args.model)
    data = _load_data(args.data)
    imputer, surrogate = _aux_models(args)
    seed = _seed(args)
    X_part, _ = data.part(args.part)

    def factory(method=args.method):
        background = None
        if method == "off":
            background, _ = data.part("train")
        elif method == "empirical":
            background = X_part
        return build_family(
            method,
            model,
            background=background,
            imputer=imputer,
            surrogate=surrogate,
            seed=derived_seed(seed, "vf", method),
        )

    report = value_function_mse(
        model,
        factory,
        X_part,
        args.samples,
        seed=derived_seed(seed, "mse", args.method),
        dataset_id=data.name,
    )
    if args.out:
        write_json_atomic(args.out, report.to_doc())
    print(
        f"mse[{args.method}] on {data.name}/{args.part}: "
        f"{report.mse:.6g} +/- {report.std_error:.2g} ({report.n_samples} samples)"
    )
    return 0


def _cmd_metrics_error_rate(args) -> int:
    try:
        truth = [int(part) for part in args.truth.split(",") if part.strip()]
    except ValueError:
        raise _UsageError(f"--truth expects comma-separated feature indices, got {args.truth!r}")
    attributions = [
        Attribution.from_doc(read_json(path, "attribution")) for path in args.attributions
    ]
    rate = explanation_error_rate(attributions, truth)
    if args.out:
        write_json_atomic(
            args.out,
            envelope(
                "error-rate-report",
                1,
                {
                    "error_rate": rate,
                    "n_attributions": len(attributions),
                    "ground_truth_features": truth,
                },
            ),
        )
    print(f"error rate: {rate:.4f} over {len(attributions)} attributions (truth {truth})")
    return 0


def _cmd_metrics_agreement(args) -> int:
    att_a = Attribution.from_doc(read_json(args.a, "attribution"))
    att_b = Attribution.from_doc(read_json(args.b, "attribution"))
    report = attribution_agreement(att_a, att_b, n_sigmas=args.n_sigmas)
    if args.out:
        write_json_atomic(
            args.out,
            envelope(
                "agreement-report",
                1,
                {
                    "spearman_rho": report.spearman_rho,
                    "max_abs_diff": report.max_abs_diff,
                    "within_error_bars": report.within_error_bars,
                    "n_sigmas": args.n_sigmas,
                },
            ),
        )
    print(
        f"spearman rho {report.spearman_rho:.4f}, max |diff| {report.max_abs_diff:.4g}, "
        f"within error bars: {report.within_error_bars}"
    )
    return 0


# --------------------------------------------------------------------------
# experiment / report
# --------------------------------------------------------------------------


def _recipe_from_args(args, name: str):
    doc = {}
    if args.config:
        doc = dict(read_json(args.config))
        doc.pop("format", None)
        doc.pop("version", None)
    doc["name"] = name
    if args.out_dir is not None:
        doc["out_dir"] = args.out_dir
    doc.setdefault("out_dir", f"artifacts/{name}")
    if args.seed is not None:
        doc["seed"] = args.seed
    data_paths = dict(doc.get("data_paths", {}))
    data_paths.update(_parse_kv(getattr(args, "data_path", None)))
    doc["data_paths"] = data_paths
    stages = {k: dict(v) for k, v in doc.get("stages", {}).items()}
    for key, value in _parse_kv(getattr(args, "set", None)).items():
        if "." not in key:
            raise _UsageError(f"--set expects stage.field=value, got {key!r}")
        stage_name, field_name = key.split(".", 1)
        stages.setdefault(stage_name, {})[field_name] = value
    doc["stages"] = stages
    return recipe_from_doc(doc)


def _run_and_summarize(recipe, threads: int) -> int:
    manifest = run_recipe(recipe, threads=threads)
    print(f"recipe {recipe.name}: {manifest['status']} (out_dir {recipe.out_dir})")
    for record in manifest["stages"]:
        print(f"  stage {record['name']}: {record['status']} ({record['seconds']}s)")
        for artifact in record["artifacts"]:
            print(f"    {artifact['path']}")
    return 0


def _cmd_experiment_run(args) -> int:
    return _run_and_summarize(_recipe_from_args(args, args.name), args.threads)


def _cmd_report(args) -> int:
    recipe_name, description = REPORTS[args.which]
    print(f"report {args.which}: {description}")
    return _run_and_summarize(_recipe_from_args(args, recipe_name), args.threads)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="onshap", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    parser.add_argument(
        "--out-dir", default=None, help="artifact directory for experiment/report runs"
    )
    parser.add_argument(
        "--config", default=None, help="JSON config mirroring recipe fields; flags override it"
    )
    parser.add_argument("--threads", type=int, default=1, help="worker threads within a stage")
    top = parser.add_subparsers(dest="command", required=True)

    # data
    data = top.add_parser("data", help="generate or load datasets").add_subparsers(
        dest="subcommand", required=True
    )
    gen = data.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--kind", choices=GEN_KINDS, required=True)
    gen.add_argument(
        "--param",
        action="append",
        metavar="KEY=VALUE",
        help="generator parameter, e.g. sigma=0.05 (repeatable)",
    )
    gen.add_argument("--out", required=True, help="dataset reference JSON to write")
    gen.set_defaults(func=_cmd_data_gen)
    load = data.add_parser("load", help="reference a dataset file on disk")
    load.add_argument("--kind", choices=LOAD_KINDS, required=True)
    load.add_argument("--path", required=True, help="source data file")
    load.add_argument("--labels-path", default=None, help="labels file (mnist only)")
    load.add_argument("--out", required=True, help="dataset reference JSON to write")
    load.set_defaults(func=_cmd_data_load)

    # model
    model = top.add_parser("model", help="fit or fine-tune classifiers").add_subparsers(
        dest="subcommand", required=True
    )
    fit = model.add_parser("fit", help="fit a classifier on the train split")
    fit.add_argument("--data", required=True, help="dataset reference JSON")
    fit.add_argument("--kind", choices=("mlp", "forest", "isolation"), default="mlp")
    fit.add_argument("--hidden", default="50", help="mlp hidden sizes, comma separated")
    fit.add_argument("--lr", type=float, default=1e-3)
    fit.add_argument("--epochs", type=int, default=200)
    fit.add_argument("--patience", type=int, default=10)
    fit.add_argument("--trees", type=int, default=100, help="ensemble size (forest/isolation)")
    fit.add_argument("--subsample", type=int, default=256, help="isolation-forest subsample")
    fit.add_argument(
        "--contamination", type=float, default=0.01, help="isolation threshold quantile"
    )
    fit.add_argument("--out", required=True, help="model JSON to write")
    fit.set_defaults(func=_cmd_model_fit)
    sup = model.add_parser(
        "finetune-suppress", help="fine-tune to hide a binary feature's influence"
    )
    sup.add_argument("--model", required=True, help="mlp model JSON")
    sup.add_argument("--data", required=True, help="dataset reference JSON")
    sup.add_argument("--feature", required=True, help="feature index or column name")
    sup.add_argument("--alpha", type=float, default=3.0, help="dependence penalty weight")
    sup.add_argument("--epochs", type=int, default=200)
    sup.add_argument("--lr", type=float, default=1e-3)
    sup.add_argument("--out", required=True, help="fine-tuned model JSON to write")
    sup.add_argument("--report", default=None, help="optional suppression report JSON")
    sup.set_defaults(func=_cmd_model_suppress)

    # imputer / surrogate
    imp = top.add_parser("imputer", help="train the generative conditional imputer")
    imp_sub = imp.add_subparsers(dest="subcommand", required=True)
    imp_train = imp_sub.add_parser("train", help="train on the train/val splits")
    imp_train.add_argument("--data", required=True)
    imp_train.add_argument("--hidden", type=int, default=128)
    imp_train.add_argument("--lr", type=float, default=1e-3)
    imp_train.add_argument("--latent", type=int, default=4)
    imp_train.add_argument("--modes", type=int, default=1)
    imp_train.add_argument("--beta", type=float, default=0.5)
    imp_train.add_argument("--epochs", type=int, default=1000)
    imp_train.add_argument("--patience", type=int, default=100)
    imp_train.add_argument("--out", required=True)
    imp_train.set_defaults(func=_cmd_imputer_train)
    sur = top.add_parser("surrogate", help="train the supervised masked surrogate")
    sur_sub = sur.add_subparsers(dest="subcommand", required=True)
    sur_train = sur_sub.add_parser("train", help="train against a fitted model")
    sur_train.add_argument("--model", required=True)
    sur_train.add_argument("--data", required=True)
    sur_train.add_argument("--hidden", type=int, default=512)
    sur_train.add_argument("--lr", type=float, default=1e-3)
    sur_train.add_argument("--epochs", type=int, default=300)
    sur_train.add_argument("--patience", type=int, default=30)
    sur_train.add_argument("--out", required=True)
    sur_train.set_defaults(func=_cmd_surrogate_train)

    # explain
    explain = top.add_parser("explain", help="local or global Shapley attribution")
    explain.add_argument("--model", required=True, help="model JSON")
    explain.add_argument("--data", required=True, help="dataset reference JSON")
    explain.add_argument("--method", choices=METHOD_IDS, default="off")
    explain.add_argument("--index", type=int, default=None, help="point index within --part")
    explain.add_argument(
        "--global",
        action="store_true",
        help="average local attributions over the labeled --part",
    )
    explain.add_argument("--samples", type=int, default=2000, help="MC samples")
    explain.add_argument(
        "--class",
        dest="class_index",
        type=int,
        default=None,
        help="class to explain (default: model prediction)",
    )
    explain.add_argument("--part", choices=("train", "val", "test"), default="test")
    explain.add_argument("--imputer", default=None, help="imputer JSON (method unsupervised)")
    explain.add_argument("--surrogate", default=None, help="surrogate JSON (method supervised)")
    explain.add_argument(
        "--no-antithetic", dest="antithetic", action="store_false", help="disable paired sampling"
    )
    explain.add_argument("--svg", default=None, help="optional bar chart path")
    explain.add_argument("--out", required=True, help="attribution JSON to write")
    explain.set_defaults(func=_cmd_explain)

    # metrics
    metrics = top.add_parser("metrics", help="evaluation metrics").add_subparsers(
        dest="subcommand", required=True
    )
    mse = metrics.add_parser("mse", help="value-function mean squared error")
    mse.add_argument("--model", required=True)
    mse.add_argument("--data", required=True)
    mse.add_argument("--method", choices=METHOD_IDS, required=True)
    mse.add_argument("--samples", type=int, default=10_000)
    mse.add_argument("--part", choices=("train", "val", "test"), default="test")
    mse.add_argument("--imputer", default=None)
    mse.add_argument("--surrogate", default=None)
    mse.add_argument("--out", default=None, help="optional report JSON")
    mse.set_defaults(func=_cmd_metrics_mse)
    err = metrics.add_parser("error-rate", help="top-k explanation error rate")
    err.add_argument("attributions", nargs="+", help="attribution JSON files")
    err.add_argument("--truth", required=True, help="comma-separated true feature indices")
    err.add_argument("--out", default=None)
    err.set_defaults(func=_cmd_metrics_error_rate)
    agree = metrics.add_parser("agreement", help="rank agreement of two attributions")
    agree.add_argument("--a", required=True, help="attribution JSON")
    agree.add_argument("--b", required=True, help="attribution JSON")
    agree.add_argument("--n-sigmas", type=float, default=3.0)
    agree.add_argument("--out", default=None)
    agree.set_defaults(func=_cmd_metrics_agreement)

    # experiment / report
    experiment = top.add_parser("experiment", help="run a named recipe").add_subparsers(
        dest="subcommand", required=True
    )
    run = experiment.add_parser("run", help="run all stages of a recipe with caching")
    run.add_argument("name", choices=RECIPE_NAMES)
    run.add_argument(
        "--data-path",
        action="append",
        metavar="KEY=PATH",
        help="source file for a recipe input, e.g. drug=/data/drug_consumption.data",
    )
    run.add_argument(
        "--set",
        action="append",
        metavar="STAGE.FIELD=VALUE",
        help="stage config override, e.g. explain.n_orderings=600",
    )
    run.set_defaults(func=_cmd_experiment_run)
    report = top.add_parser("report", help="produce a standard report artifact")
    report.add_argument("which", choices=tuple(REPORTS))
    report.add_argument("--data-path", action="append", metavar="KEY=PATH")
    report.add_argument("--set", action="append", metavar="STAGE.FIELD=VALUE")
    report.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help prints and exits itself
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (DataError, SchemaError, InputShapeError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except (TrainingError, NumericError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
