"""End-to-end CLI pipeline on a miniature experiment."""

import json

import pytest
import yaml

from fedsurg import cli


def _config(tmp_path):
    doc = {
        "seed": 9,
        "output_dir": str(tmp_path / "out"),
        "features": {"n_continuous": 6, "n_binary": 3,
                     "hc_vocab_sizes": [10, 5]},
        "arch": {"embed_dim": 3, "branch_hidden": 5, "merge_hidden": 7},
        "train": {"rounds": 2, "batch_size": 64, "patience": 2},
        "evaluate": {"n_boot": 10},
        "sites": [
            {"name": "a", "role": "development", "n_patients": 150,
             "target_prevalence": [0.2, 0.1, 0.15, 0.05]},
            {"name": "b", "role": "development", "n_patients": 120,
             "target_prevalence": [0.1, 0.05, 0.2, 0.02]},
            {"name": "x", "role": "external", "n_patients": 100,
             "target_prevalence": [0.15, 0.08, 0.1, 0.03]},
        ],
    }
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path, tmp_path / "out"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("cli")
    cfg_path, out = _config(tmp_path)
    assert cli.main(["generate", "--config", str(cfg_path)]) == 0
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    assert cli.main(["evaluate", "--config", str(cfg_path)]) == 0
    assert cli.main(["compare", "--config", str(cfg_path)]) == 0
    return cfg_path, out


def test_generate_artifacts(pipeline):
    _, out = pipeline
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["sites"]) == {"a", "b", "x"}
    for name, entry in manifest["sites"].items():
        assert (out / "cohorts" / f"{name}.csv").exists()
        assert entry["n_encounters"] > 0
        assert set(entry["prevalence"]) == {"icu", "mv", "aki", "mortality"}
        ex = entry["exclusions"]
        assert ex["n_retained"] == entry["n_encounters"]


def test_train_artifacts(pipeline):
    _, out = pipeline
    for name in ("local_a", "local_b", "central", "fedavg", "fedprox",
                 "scaffold"):
        assert (out / "checkpoints" / f"{name}.ckpt").exists(), name
        assert (out / "history" / f"{name}.csv").exists(), name
    assert (out / "checkpoints" / "central_preprocessor.json").exists()


def test_evaluate_artifacts(pipeline):
    _, out = pipeline
    report = json.loads((out / "reports" / "report.json").read_text())
    models = {c["model"] for c in report}
    assert models == {"local_a", "local_b", "central", "fedavg", "fedprox",
                      "scaffold"}
    sites = {c["site"] for c in report}
    assert sites == {"a", "b", "x"}
    assert len(report) == len(models) * len(sites) * 4
    assert (out / "scores" / "fedavg__x.csv").exists()
    assert (out / "reports" / "report.csv").exists()


def test_compare_artifacts(pipeline):
    _, out = pipeline
    verdicts = json.loads((out / "reports" / "compare.json").read_text())
    assert verdicts
    pairings = {(v["model_a"], v["model_b"]) for v in verdicts}
    assert ("scaffold", "fedavg") in pairings
    assert ("scaffold", "central") in pairings
    for v in verdicts:
        assert isinstance(v["ci_overlap"], bool)


def test_single_paradigm_flags(pipeline, tmp_path):
    cfg_path, out = pipeline
    assert cli.main(["train", "--config", str(cfg_path),
                     "--paradigm", "federated", "--algo", "fedavg"]) == 0


def test_bad_config_exits_nonzero(tmp_path):
    missing = tmp_path / "missing.yaml"
    assert cli.main(["generate", "--config", str(missing)]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"seed": 1, "sites": []}))
    assert cli.main(["generate", "--config", str(bad)]) == 2


def test_train_without_cohorts_errors(tmp_path):
    cfg_path, _ = _config(tmp_path)
    with pytest.raises(SystemExit):
        cli.main(["train", "--config", str(cfg_path)])
