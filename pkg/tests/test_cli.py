import csv
import hashlib
import json
import os

import numpy as np
import pytest

from myoscan import cli
from myoscan.errors import ConvergenceError, DataError
from myoscan.evaluation import auc_score, cross_validate
from myoscan.pipeline import Workspace, check_hygiene, read_features

from conftest import VERBS


def sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


class TestExitCodes:
    def test_unknown_key_is_config_error(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[cae]\nbogus = 1\n")
        assert cli.main(["phantom-gen", "--config", str(bad), "--out", str(tmp_path / "w")]) == 2

    def test_disallowed_value_is_config_error(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[cae]\nd = 64\n")
        assert cli.main(["features", "--config", str(bad), "--out", str(tmp_path / "w")]) == 2

    def test_bad_threads(self, tmp_path):
        assert cli.main(["report", "--threads", "0", "--out", str(tmp_path)]) == 2

    def test_unknown_verb_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["frobnicate", "--out", "x"])
        assert exc.value.code == 2

    @pytest.mark.parametrize("verb", [v for v in VERBS if v != "phantom-gen"])
    def test_missing_inputs_are_data_errors(self, verb, tmp_path, tiny_config):
        assert cli.main([verb, "--config", tiny_config, "--out", str(tmp_path)]) == 3

    def test_convergence_failure_exits_4(self, tmp_path, tiny_config, monkeypatch):
        def boom(ws, cfg):
            raise ConvergenceError("no progress")

        monkeypatch.setitem(cli.STAGES, "classify", boom)
        assert cli.main(["classify", "--config", tiny_config, "--out", str(tmp_path)]) == 4


class TestWorkspace:
    def test_every_verb_writes_a_manifest(self, tiny_workspace):
        for verb in VERBS:
            with open(os.path.join(tiny_workspace, f"run_{verb}.json")) as fh:
                run = json.load(fh)
            assert run["verb"] == verb and len(run["config_hash"]) == 64
            for rel, digest in run["outputs"].items():
                assert sha(os.path.join(tiny_workspace, rel)) == digest

    def test_stage_seeds_recorded(self, tiny_workspace):
        with open(os.path.join(tiny_workspace, "run_classify.json")) as fh:
            run = json.load(fh)
        assert set(run["stage_seeds"]) == {"cv"}

    def test_feature_table_shape(self, tiny_workspace):
        ids, ffr, X = read_features(Workspace(tiny_workspace), "auto", 128, 0)
        assert X.shape == (8, 128) and len(ids) == 8
        assert np.all(X >= 0)

    def test_classify_auc_matches_scores(self, tiny_workspace):
        folder = os.path.join(tiny_workspace, "classify")
        name = next(f for f in os.listdir(folder) if f.endswith(".json"))
        with open(os.path.join(folder, name)) as fh:
            roc = json.load(fh)
        recomputed = [auc_score(np.array(s), np.array(roc["labels"])) for s in roc["repeat_scores"]]
        np.testing.assert_allclose(recomputed, roc["aucs"], atol=1e-12)
        assert roc["auc"] == pytest.approx(np.mean(recomputed))

    def test_sweep_rows(self, tiny_workspace):
        with open(os.path.join(tiny_workspace, "sweep", "sweep.csv")) as fh:
            rows = list(csv.DictReader(fh))
        axes = [r["axis"] for r in rows]
        assert axes.count("clusters") == 2 and axes.count("seed") == 2 and axes.count("cutoff") == 2

    def test_report_has_seed_range(self, tiny_workspace):
        with open(os.path.join(tiny_workspace, "report", "report.md")) as fh:
            text = fh.read()
        assert "min AUC" in text and "max AUC" in text

    def test_hygiene_rejects_training_ids(self, tiny_workspace):
        ws = Workspace(tiny_workspace)
        with pytest.raises(DataError):
            check_hygiene(ws, ["p0000", "p0005"])
        check_hygiene(ws, ["p0004", "p0005"])

    def test_seed_override_changes_hash(self, tiny_config, tmp_path):
        assert cli.main(["phantom-gen", "--config", tiny_config, "--out", str(tmp_path), "--seed", "11"]) == 0
        with open(tmp_path / "run_phantom-gen.json") as fh:
            assert json.load(fh)["seed"] == 11


def test_perfect_features_give_unit_auc():
    rng = np.random.default_rng(0)
    y = np.r_[np.zeros(12, int), np.ones(12, int)]
    X = np.c_[y * 5.0 + rng.normal(0, 0.1, 24), rng.normal(size=24)]
    res = cross_validate(X, y, folds=4, repeats=2, seed=0, C_grid=(1.0,), gamma_grid=(0.5,))
    assert res.auc == 1.0
