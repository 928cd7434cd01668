"""Command-line interface: subcommands, exit codes, artifact behavior."""

import json
import os

import numpy as np
import pytest

from onshap.cli import main
from onshap.models import model_from_doc
from onshap.serialize import read_json, write_json_atomic
from onshap.shapley import Attribution


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small dataset plus fitted model shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data.json")
    model = str(root / "model.json")
    assert (
        main(
            [
                "--seed",
                "5",
                "data",
                "gen",
                "--kind",
                "two_feature",
                "--param",
                "n_points=900",
                "--out",
                data,
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "--seed",
                "5",
                "model",
                "fit",
                "--data",
                data,
                "--kind",
                "mlp",
                "--hidden",
                "8",
                "--epochs",
                "15",
                "--out",
                model,
            ]
        )
        == 0
    )
    return {"root": root, "data": data, "model": model}


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "explain" in capsys.readouterr().out


def test_unknown_flag_is_usage_error():
    assert main(["explain", "--bogus"]) == 1


def test_missing_subcommand_is_usage_error():
    assert main(["data"]) == 1


def test_unknown_recipe_name_is_usage_error():
    assert main(["experiment", "run", "not_a_recipe"]) == 1


def test_data_gen_writes_loadable_ref(workspace):
    doc = read_json(workspace["data"], "dataset-ref")
    assert doc["kind"] == "two_feature"


def test_data_load_missing_file_is_data_error(tmp_path):
    code = main(
        [
            "data",
            "load",
            "--kind",
            "abalone",
            "--path",
            str(tmp_path / "nope.data"),
            "--out",
            str(tmp_path / "ref.json"),
        ]
    )
    assert code == 2


def test_mnist_load_without_labels_is_usage_error(tmp_path):
    code = main(
        [
            "data",
            "load",
            "--kind",
            "mnist",
            "--path",
            str(tmp_path / "imgs"),
            "--out",
            str(tmp_path / "ref.json"),
        ]
    )
    assert code == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_model_fit_divergence_is_numeric_error(workspace, tmp_path):
    code = main(
        [
            "model",
            "fit",
            "--data",
            workspace["data"],
            "--kind",
            "mlp",
            "--lr",
            "1e300",
            "--epochs",
            "5",
            "--out",
            str(tmp_path / "bad.json"),
        ]
    )
    assert code == 3


def test_explain_local_is_byte_identical_across_runs(workspace, tmp_path):
    outs = [str(tmp_path / f"att{i}.json") for i in (1, 2)]
    for out in outs:
        code = main(
            [
                "--seed",
                "7",
                "explain",
                "--model",
                workspace["model"],
                "--data",
                workspace["data"],
                "--method",
                "off",
                "--index",
                "3",
                "--samples",
                "1000",
                "--out",
                out,
            ]
        )
        assert code == 0
    with open(outs[0], "rb") as fh_a, open(outs[1], "rb") as fh_b:
        assert fh_a.read() == fh_b.read()


def test_explain_requires_index_or_global(workspace, tmp_path):
    code = main(
        [
            "explain",
            "--model",
            workspace["model"],
            "--data",
            workspace["data"],
            "--out",
            str(tmp_path / "att.json"),
        ]
    )
    assert code == 1


def test_explain_odd_samples_with_antithetic_is_usage_error(workspace, tmp_path):
    code = main(
        [
            "explain",
            "--model",
            workspace["model"],
            "--data",
            workspace["data"],
            "--index",
            "0",
            "--samples",
            "7",
            "--out",
            str(tmp_path / "att.json"),
        ]
    )
    assert code == 1


def test_explain_missing_auxiliary_names_artifact(workspace, tmp_path, capsys):
    for method, artifact in (("unsupervised", "imputer"), ("supervised", "surrogate")):
        code = main(
            [
                "explain",
                "--model",
                workspace["model"],
                "--data",
                workspace["data"],
                "--method",
                method,
                "--index",
                "0",
                "--out",
                str(tmp_path / "att.json"),
            ]
        )
        assert code == 2
        assert artifact in capsys.readouterr().err


def test_explain_global_constant_model_attributes_nothing(workspace, tmp_path):
    # zeroing the output layer makes the classifier constant; every
    # Shapley value of a constant game is exactly zero
    model = model_from_doc(read_json(workspace["model"]))
    model.net.weights[-1][:] = 0.0
    model.net.biases[-1][:] = 0.0
    const_path = str(tmp_path / "const.json")
    write_json_atomic(const_path, model.to_doc())
    out = str(tmp_path / "att.json")
    code = main(
        [
            "explain",
            "--model",
            const_path,
            "--data",
            workspace["data"],
            "--method",
            "off",
            "--global",
            "--samples",
            "400",
            "--out",
            out,
        ]
    )
    assert code == 0
    att = Attribution.from_doc(read_json(out, "attribution"))
    assert np.all(np.abs(att.values) <= 3 * att.std_errors + 1e-12)


def test_explain_svg_written(workspace, tmp_path):
    svg = str(tmp_path / "att.svg")
    code = main(
        [
            "explain",
            "--model",
            workspace["model"],
            "--data",
            workspace["data"],
            "--method",
            "off",
            "--index",
            "1",
            "--samples",
            "200",
            "--svg",
            svg,
            "--out",
            str(tmp_path / "att.json"),
        ]
    )
    assert code == 0
    with open(svg) as fh:
        assert "<svg" in fh.read(500)


def test_surrogate_train_then_supervised_explain(workspace, tmp_path):
    surrogate = str(tmp_path / "surrogate.json")
    code = main(
        [
            "--seed",
            "5",
            "surrogate",
            "train",
            "--model",
            workspace["model"],
            "--data",
            workspace["data"],
            "--hidden",
            "16",
            "--epochs",
            "20",
            "--patience",
            "5",
            "--out",
            surrogate,
        ]
    )
    assert code == 0
    out = str(tmp_path / "att.json")
    code = main(
        [
            "explain",
            "--model",
            workspace["model"],
            "--data",
            workspace["data"],
            "--method",
            "supervised",
            "--surrogate",
            surrogate,
            "--index",
            "0",
            "--samples",
            "200",
            "--out",
            out,
        ]
    )
    assert code == 0
    att = Attribution.from_doc(read_json(out, "attribution"))
    assert att.value_function_id == "surrogate"


def test_imputer_train_then_unsupervised_explain(workspace, tmp_path):
    imputer = str(tmp_path / "imputer.json")
    code = main(
        [
            "--seed",
            "5",
            "imputer",
            "train",
            "--data",
            workspace["data"],
            "--hidden",
            "16",
            "--latent",
            "2",
            "--epochs",
            "20",
            "--patience",
            "5",
            "--out",
            imputer,
        ]
    )
    assert code == 0
    out = str(tmp_path / "att.json")
    code = main(
        [
            "explain",
            "--model",
            workspace["model"],
            "--data",
            workspace["data"],
            "--method",
            "unsupervised",
            "--imputer",
            imputer,
            "--index",
            "0",
            "--samples",
            "200",
            "--out",
            out,
        ]
    )
    assert code == 0
    att = Attribution.from_doc(read_json(out, "attribution"))
    assert att.value_function_id == "generative"


def test_metrics_mse_prints_report(workspace, tmp_path, capsys):
    out = str(tmp_path / "mse.json")
    code = main(
        [
            "metrics",
            "mse",
            "--model",
            workspace["model"],
            "--data",
            workspace["data"],
            "--method",
            "empirical",
            "--samples",
            "2000",
            "--out",
            out,
        ]
    )
    assert code == 0
    assert "mse[empirical]" in capsys.readouterr().out
    doc = read_json(out, "mse-report")
    assert doc["mse"] >= 0.0


def test_metrics_error_rate_and_agreement(workspace, tmp_path, capsys):
    paths = []
    for i in (0, 1):
        path = str(tmp_path / f"att{i}.json")
        assert (
            main(
                [
                    "--seed",
                    str(i),
                    "explain",
                    "--model",
                    workspace["model"],
                    "--data",
                    workspace["data"],
                    "--method",
                    "off",
                    "--index",
                    str(i),
                    "--samples",
                    "200",
                    "--out",
                    path,
                ]
            )
            == 0
        )
        paths.append(path)
    code = main(["metrics", "error-rate", *paths, "--truth", "0"])
    assert code == 0
    assert "error rate:" in capsys.readouterr().out
    code = main(["metrics", "agreement", "--a", paths[0], "--b", paths[1]])
    assert code == 0
    assert "spearman rho" in capsys.readouterr().out
    code = main(["metrics", "error-rate", *paths, "--truth", "zero"])
    assert code == 1


def test_experiment_run_with_config_and_overrides(tmp_path, capsys):
    out_dir = str(tmp_path / "artifacts")
    config = str(tmp_path / "config.json")
    with open(config, "w") as fh:
        json.dump(
            {
                "seed": 99,
                "out_dir": str(tmp_path / "ignored-by-flag"),
                "stages": {
                    "data": {"n_points": 900},
                    "model": {"max_epochs": 15},
                    "off_global": {"n_samples": 1500},
                },
            },
            fh,
        )
    code = main(
        [
            "--config",
            config,
            "--out-dir",
            out_dir,
            "--seed",
            "11",
            "experiment",
            "run",
            "two_feature_globals",
            "--set",
            "on_global.n_samples=1500",
        ]
    )
    assert code == 0
    assert "completed" in capsys.readouterr().out
    manifest = json.load(open(os.path.join(out_dir, "manifest.json")))
    # CLI flags override config fields; config supplies the rest
    assert manifest["seed"] == 11
    assert manifest["out_dir"] == out_dir
    assert not os.path.exists(str(tmp_path / "ignored-by-flag"))
    assert manifest["results"]["on"]["n_samples"] == 1500


def test_experiment_missing_data_path_is_data_error(tmp_path, capsys):
    code = main(
        ["--out-dir", str(tmp_path / "a"), "experiment", "run", "drug_validation"]
    )
    assert code == 2
    assert "data_paths['drug']" in capsys.readouterr().err


def test_report_fig4_runs_small(tmp_path, capsys):
    out_dir = str(tmp_path / "report")
    code = main(
        [
            "--out-dir",
            out_dir,
            "--seed",
            "5",
            "report",
            "fig4",
            "--set",
            "data.n_points=900",
            "--set",
            "model.max_epochs=15",
            "--set",
            "off_global.n_samples=1500",
            "--set",
            "on_global.n_samples=1500",
        ]
    )
    assert code == 0
    assert "two-feature" in capsys.readouterr().out
    assert os.path.exists(os.path.join(out_dir, "global-values.svg"))
    assert os.path.exists(os.path.join(out_dir, "global-values.csv"))


def test_model_suppress_round_trip(tmp_path, capsys):
    data = str(tmp_path / "census.json")
    model = str(tmp_path / "model.json")
    assert (
        main(
            [
                "--seed",
                "3",
                "data",
                "gen",
                "--kind",
                "census_standin",
                "--param",
                "n_points=1000",
                "--out",
                data,
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "--seed",
                "3",
                "model",
                "fit",
                "--data",
                data,
                "--hidden",
                "8",
                "--epochs",
                "15",
                "--out",
                model,
            ]
        )
        == 0
    )
    tuned = str(tmp_path / "tuned.json")
    report = str(tmp_path / "suppression.json")
    code = main(
        [
            "--seed",
            "3",
            "model",
            "finetune-suppress",
            "--model",
            model,
            "--data",
            data,
            "--feature",
            "sensitive",
            "--epochs",
            "15",
            "--out",
            tuned,
            "--report",
            report,
        ]
    )
    assert code == 0
    assert "agreement" in capsys.readouterr().out
    doc = read_json(report, "suppression-report")
    assert 0.0 <= doc["agreement"] <= 1.0
    assert doc["mean_abs_fd_after"] <= doc["mean_abs_fd_before"]


def test_isolation_model_fit(tmp_path):
    data = str(tmp_path / "outlier.json")
    model = str(tmp_path / "forest.json")
    assert (
        main(
            [
                "--seed",
                "2",
                "data",
                "gen",
                "--kind",
                "outlier",
                "--param",
                "sigma=0.05",
                "--param",
                "n_points=600",
                "--out",
                data,
            ]
        )
        == 0
    )
    code = main(
        [
            "--seed",
            "2",
            "model",
            "fit",
            "--data",
            data,
            "--kind",
            "isolation",
            "--trees",
            "30",
            "--out",
            model,
        ]
    )
    assert code == 0
    doc = read_json(model)
    assert doc["format"] == "isolation-forest"
