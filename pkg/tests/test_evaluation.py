import csv
import json

import numpy as np
import pytest
import torch
from PIL import Image
from scipy import stats

from coordinet import evaluation, training
from coordinet.data import SceneConfig, synthesize
from coordinet.evaluation import (TABLE_COLUMNS, AblationSpec, UnsupportedModeError, build_model, calibration,
                                  calibration_arrays, cell_configs, confidence_overlay, export_confidence_maps,
                                  format_table, rankdata, run_ablation, spearman)
from coordinet.geometry import Pose, random_quaternions
from coordinet.model import CoordiNet, ModelConfig

SMALL_MODEL = {"encoder_widths": [8, 16, 32, 64], "decoder_width": 32, "uncertainty_width": 16, "image_size": [64, 64]}
SMALL_SCENE = {"image_size": [64, 64], "focal": 32.0}


class TestSpearman:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scipy(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=200)
        b = a + rng.normal(size=200) * (seed + 0.5)
        if seed % 2:  # ties
            a, b = np.round(a, 1), np.round(b)
        assert spearman(a, b) == pytest.approx(stats.spearmanr(a, b).statistic, abs=1e-9)

    def test_rankdata_matches_scipy(self):
        x = np.array([3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5])
        np.testing.assert_array_equal(rankdata(x), stats.rankdata(x))

    def test_perfect_ranking(self):
        err = np.random.default_rng(1).exponential(size=50)
        assert spearman(3.0 * err, err) == pytest.approx(1.0)
        assert spearman(-err, err) == pytest.approx(-1.0)

    def test_independent_near_zero(self):
        rng = np.random.default_rng(2)
        err = rng.exponential(size=1000)
        assert abs(spearman(rng.permutation(err), err)) < 0.2

    def test_constant_undefined(self):
        assert spearman(np.ones(20), np.arange(20)) is None


class TestCalibration:
    def test_report(self):
        rng = np.random.default_rng(3)
        err = rng.exponential(size=(100, 4))
        sigma = err * 2.0
        sigma[:, 3] = 0.7
        rep = calibration_arrays(sigma, err)
        assert rep.spearman["Tx"] == pytest.approx(1.0) and rep.undefined == ["R"]
        assert rep.n_above(0.3) == 3
        assert sum(r["count"] for r in rep.deciles["Tx"]) == 100
        means = [r["mean_error"] for r in rep.deciles["Ty"]]
        assert means == sorted(means)
        assert all(-1 <= v <= 1 for v in rep.spearman.values() if v is not None)

    def test_from_predictions_and_poses(self):
        rng = np.random.default_rng(4)
        n = 30
        gt = [Pose(rng.normal(size=3), q) for q in random_quaternions(n, rng)]
        offsets = rng.exponential(size=(n, 3))
        pred = {"t": np.stack([g.t for g in gt]) + offsets, "q": np.stack([g.q for g in gt]),
                "logvars": np.column_stack([2 * np.log(offsets), np.zeros(n)])}
        rep = calibration(pred, gt)
        assert rep.spearman["Tx"] == pytest.approx(1.0) and rep.spearman["R"] is None

    def test_too_few(self):
        with pytest.raises(ValueError):
            calibration_arrays(np.ones((5, 4)), np.ones((5, 4)))


class TestOverlay:
    def test_uniform_confidence_is_identity(self):
        img = np.random.default_rng(5).uniform(size=(32, 32, 3))
        np.testing.assert_allclose(confidence_overlay(img, np.full((2, 2), 0.3)), img, atol=1e-6)

    def test_one_hot_confidence(self):
        img = np.ones((32, 32, 3))
        conf = np.zeros((4, 4))
        conf[1, 2] = 5.0
        out = confidence_overlay(img, conf)
        lit = out[..., 0] > 0
        rows, cols = np.nonzero(lit)
        # the lit patch stays within the upsampled footprint of cell (1, 2) and its bilinear halo
        assert rows.min() >= 4 and rows.max() < 20 and cols.min() >= 12 and cols.max() < 28
        assert out.max() == pytest.approx(1.0, abs=0.02)
        assert out[0, 0].sum() == 0 and out[31, 31].sum() == 0

    def test_gap_model_rejected(self, tmp_path):
        model = CoordiNet(ModelConfig(**{**SMALL_MODEL, "pooling": "gap"}))
        with pytest.raises(UnsupportedModeError):
            export_confidence_maps(model, np.zeros((1, 64, 64, 3), np.uint8), tmp_path)

    def test_export_writes_pngs(self, tmp_path):
        torch.manual_seed(0)
        model = CoordiNet(ModelConfig(**SMALL_MODEL))
        imgs = synthesize(SceneConfig(**SMALL_SCENE), [0], 3, seed=0).images
        paths = export_confidence_maps(model, imgs, tmp_path / "maps")
        assert len(paths) == 3
        back = np.asarray(Image.open(paths[0]))
        assert back.shape == (64, 64, 3) and back.max() <= imgs[0].max()


def tiny_spec(**kw):
    base = dict(model=SMALL_MODEL, scene=SMALL_SCENE, train={"epochs": 1, "batch_size": 8, "lr": 1e-3},
                train_sequences=[0], test_sequences=[100], n_frames=16, test_frames=8)
    return AblationSpec(**{**base, **kw})


class TestAblation:
    def test_cells(self):
        assert len(AblationSpec().cells()) == 4
        oat = AblationSpec(style="one-at-a-time",
                           factors={"loss": ["heteroscedastic", "homoscedastic", "plain"], "conv": ["coord", "plain"]})
        cells = oat.cells()
        assert len(cells) == 4
        for c in cells:
            assert sum(c[k] != oat.reference[k] for k in c) <= 1

    def test_controlled_variables(self, monkeypatch):
        spec = AblationSpec(factors={"pooling": ["cwap", "gap"]})
        cwap_cell, gap_cell = spec.cells()
        (m1, t1), (m2, t2) = cell_configs(spec, cwap_cell), cell_configs(spec, gap_cell)
        assert t1 == t2
        e1, e2 = build_model(m1, spec.seed).encoder.state_dict(), build_model(m2, spec.seed).encoder.state_dict()
        assert all(torch.equal(e1[k], e2[k]) for k in e1)

        seen = []
        real_batch = training._batch
        monkeypatch.setattr(training, "_batch", lambda ds, idx: seen.append(tuple(idx)) or real_batch(ds, idx))
        spec = tiny_spec(factors={"pooling": ["cwap", "gap"]})
        run_ablation(spec)
        half = len(seen) // 2
        assert seen[:half] == seen[half:]

    def test_single_cell_and_table(self, tmp_path):
        spec = tiny_spec(factors={"loss": ["heteroscedastic"]})
        rows = run_ablation(spec, tmp_path)
        assert len(rows) == 1 and rows[0]["status"] == "ok"
        assert rows[0]["n"] == 8 and rows[0]["median_translation"] >= 0
        with open(tmp_path / "ablation.tsv") as fh:
            table = list(csv.reader(fh, delimiter="\t"))
        assert tuple(table[0]) == TABLE_COLUMNS == ("Loss", "Coord", "CWAP", "Split", "Rot", "Median err.", "Mean err")
        assert table[1][:5] == ["heterosc.", "X", "X", "X", "geo."]
        assert json.loads((tmp_path / "ablation.json").read_text())[0]["id"] == rows[0]["id"]
        assert (tmp_path / "ablation.md").read_text().startswith("| Loss")

    def test_resume_skips_completed(self, tmp_path, monkeypatch):
        spec = tiny_spec(factors={"loss": ["heteroscedastic", "plain"]})
        first = run_ablation(spec, tmp_path)
        (tmp_path / "cells" / (first[1]["id"] + ".json")).unlink()
        calls = []
        real = evaluation.run_cell
        monkeypatch.setattr(evaluation, "run_cell", lambda *a: calls.append(a[1]) or real(*a))
        second = run_ablation(spec, tmp_path)
        assert [c["loss"] for c in calls] == ["plain"]
        assert second[0] == first[0]
        assert second[1]["median_translation"] == pytest.approx(first[1]["median_translation"], abs=1e-6)

    def test_failed_cell_does_not_abort(self, monkeypatch):
        spec = tiny_spec(factors={"loss": ["heteroscedastic", "plain"]})
        real_train = evaluation.train

        def flaky(model, data, cfg, **kw):
            if cfg.loss_mode == "plain":
                raise training.TrainingAborted("boom", {"total": float("nan")})
            return real_train(model, data, cfg, **kw)

        monkeypatch.setattr(evaluation, "train", flaky)
        rows = run_ablation(spec)
        assert [r["status"] for r in rows] == ["ok", "failed"]
        assert "failed" in format_table(rows)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            AblationSpec(factors={"dropout": [0, 1]})
        with pytest.raises(ValueError):
            AblationSpec(train_sequences=[1, 2], test_sequences=[2])
