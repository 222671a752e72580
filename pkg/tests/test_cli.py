import csv
import json

import numpy as np
import pytest
import yaml

from coordinet.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main, resolve_config
from coordinet.data import SceneConfig, dataset_from_manifest, generate_trajectory, load_manifest, synthesize
from coordinet.fusion import (PoseObservation, benchmark_stream, evaluate_arrays, read_fused, smoothness_score,
                              write_observations)
from coordinet.geometry import Pose

SMALL = {
    "seed": 0,
    "scene": {"image_size": [64, 64], "focal": 32.0, "occlusion_prob": 0.3},
    "data": {"root": "dataset", "splits": {"train": [0], "val": [1], "test": [2]}, "n_frames": 12},
    "model": {"encoder_widths": [8, 16, 32, 64], "decoder_width": 32, "uncertainty_width": 16, "image_size": [64, 64]},
    "train": {"epochs": 1, "batch_size": 4, "lr": 1e-3},
    "finetune": {"epochs": 1, "batch_size": 4, "lr": 1e-3},
}


def write_config(path, cfg=SMALL):
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def run(cmd, out, config=None, *sets):
    argv = [cmd, "--out", str(out)]
    if config:
        argv += ["--config", config]
    for s in sets:
        argv += ["--set", s]
    return main(argv)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A generated dataset and a trained checkpoint shared by the read-only tests."""
    root = tmp_path_factory.mktemp("ws")
    cfg = write_config(root / "run.yaml")
    assert run("generate", root, cfg) == EXIT_OK
    assert run("train", root, cfg) == EXIT_OK
    return root, cfg


class TestConfig:
    def test_overrides(self, tmp_path):
        cfg = resolve_config(write_config(tmp_path / "c.yaml"), ["train.epochs=3", "fuse.filter.gating=false"], seed=9)
        assert cfg["train"]["epochs"] == 3 and cfg["train"]["batch_size"] == 4
        assert cfg["fuse"]["filter"] == {"gating": False} and cfg["seed"] == 9
        assert resolve_config(None, ["train.lr=1e-4"])["train"]["lr"] == 1e-4

    def test_resolved_config_written(self, tmp_path):
        assert run("generate", tmp_path, None, "data.n_frames=3", "data.splits={train: [0]}") == EXIT_OK
        resolved = yaml.safe_load((tmp_path / "resolved_config.yaml").read_text())
        assert resolved["command"] == "generate" and resolved["data"]["n_frames"] == 3

    def test_bad_yaml(self, tmp_path):
        (tmp_path / "bad.yaml").write_text("train: [unclosed")
        assert run("generate", tmp_path, str(tmp_path / "bad.yaml")) == EXIT_CONFIG

    def test_bad_set(self, tmp_path):
        assert run("generate", tmp_path, None, "novalue") == EXIT_CONFIG

    def test_plain_vs_heteroscedastic_config_diff(self, tmp_path):
        a = resolve_config(None, ["train.loss_mode=plain"])
        b = resolve_config(None, ["train.loss_mode=heteroscedastic"])
        diff = [(s, k) for s in a for k in (a[s] if isinstance(a[s], dict) else [None])
                if (a[s].get(k) if k else a[s]) != (b[s].get(k) if k else b[s])]
        assert diff == [("train", "loss_mode")]


class TestGenerate:
    def test_three_frames_one_sequence(self, tmp_path):
        assert run("generate", tmp_path, None, "data.n_frames=3", "data.splits={train: [4]}") == EXIT_OK
        assert len(list((tmp_path / "dataset" / "4").glob("*.png"))) == 3
        assert len(load_manifest(tmp_path / "dataset" / "manifest.csv")) == 3

    def test_reproducible(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml")
        for name in ("a", "b"):
            assert run("generate", tmp_path / name, cfg, "data.n_frames=4") == EXIT_OK
        a = (tmp_path / "a/dataset/manifest.csv").read_bytes()
        assert a == (tmp_path / "b/dataset/manifest.csv").read_bytes()
        assert (tmp_path / "a/dataset/2/000003.png").read_bytes() == (tmp_path / "b/dataset/2/000003.png").read_bytes()

    def test_load_back(self, workspace):
        root, _ = workspace
        m = load_manifest(root / "dataset" / "manifest.csv")
        ds = dataset_from_manifest(m, "test")
        mem = synthesize(SceneConfig(**SMALL["scene"]), [2], 12, seed=0)
        assert np.array_equal(ds.images, mem.images)

    def test_unwritable(self, tmp_path):
        (tmp_path / "file").write_text("x")
        assert run("generate", tmp_path, None, f"data.root={tmp_path / 'file' / 'sub'}",
                   "data.n_frames=3", "data.splits={train: [0]}") == EXIT_DATA


class TestTrain:
    def test_outputs(self, workspace):
        root, _ = workspace
        assert (root / "checkpoints" / "final.pt").exists()
        assert (root / "training.png").exists()
        recs = [json.loads(line) for line in open(root / "train_log.jsonl")]
        assert any(r["kind"] == "epoch" and "val_median_translation" in r for r in recs)

    def test_resume_continues_steps(self, workspace, tmp_path):
        root, cfg = workspace
        out = tmp_path / "resumed"
        assert run("train", out, cfg, f"data.root={root / 'dataset'}",
                   f"train.resume={root / 'checkpoints' / 'final.pt'}") == EXIT_OK
        steps = [json.loads(line)["step"] for line in open(out / "train_log.jsonl") if '"step"' in line]
        assert steps[0] == 4 and max(steps) == 6  # 12 frames / batch 4 = 3 steps per epoch

    def test_numeric_abort(self, workspace, tmp_path):
        root, cfg = workspace
        code = run("train", tmp_path, cfg, f"data.root={root / 'dataset'}", "train.lr=1e30", "train.epochs=3")
        assert code == EXIT_NUMERIC
        assert (tmp_path / "checkpoints" / "last_good.pt").exists()

    def test_missing_dataset(self, tmp_path):
        assert run("train", tmp_path, None, "data.root=nowhere") == EXIT_DATA

    def test_reproducible(self, workspace, tmp_path):
        root, cfg = workspace
        reports = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run("train", out, cfg, f"data.root={root / 'dataset'}") == EXIT_OK
            assert run("eval", out, cfg, f"data.root={root / 'dataset'}", "eval.plots=false") == EXIT_OK
            reports.append(json.loads((out / "report.json").read_text())["overall"])
        for k, v in reports[0].items():
            assert reports[1][k] == pytest.approx(v, abs=1e-6)


class TestEval:
    def test_report_matches_library(self, workspace):
        root, cfg = workspace
        assert run("eval", root, cfg) == EXIT_OK
        report = json.loads((root / "report.json").read_text())
        with open(root / "observations_2.csv") as fh:
            rows = list(csv.reader(fh))[1:]
        pred = np.array([[float(x) for x in r[1:8]] for r in rows])
        ds = dataset_from_manifest(load_manifest(root / "dataset" / "manifest.csv"), "test")
        ref = evaluate_arrays(pred[:, :3], pred[:, 3:], ds.t, ds.q)
        assert report["overall"]["median_translation"] == pytest.approx(ref.median_translation, abs=1e-6)
        assert report["overall"]["median_rotation"] == pytest.approx(ref.median_rotation, abs=1e-4)
        assert "calibration" in report and (root / "trajectory_2.png").exists()

    def test_report_round_trip(self, workspace):
        root, cfg = workspace
        assert run("eval", root, cfg, "eval.plots=false") == EXIT_OK
        report = json.loads((root / "report.json").read_text())
        with open(root / "report.tsv") as fh:
            rows = list(csv.DictReader(fh, delimiter="\t"))
        assert rows[0]["sequence"] == "all"
        for k in ("median_translation", "mean_rotation", "max_translation"):
            assert float(rows[0][k]) == report["overall"][k]

    def test_ground_truth_as_prediction(self, workspace, tmp_path):
        root, cfg = workspace
        assert run("eval", root, cfg, "eval.plots=false") == EXIT_OK
        out = tmp_path / "gt"
        assert run("eval", out, cfg, f"data.root={root / 'dataset'}",
                   f"eval.predictions={root / 'ground_truth_2.csv'}", "eval.plots=false") == EXIT_OK
        overall = json.loads((out / "report.json").read_text())["overall"]
        assert overall["max_translation"] < 1e-6 and overall["max_rotation"] < 1e-3

    def test_missing_checkpoint(self, workspace, tmp_path):
        root, cfg = workspace
        assert run("eval", tmp_path, cfg, f"data.root={root / 'dataset'}") == EXIT_CONFIG


class TestFinetuneAndExport:
    def test_finetune(self, workspace, tmp_path):
        root, cfg = workspace
        assert run("finetune-uncertainty", tmp_path, cfg, f"data.root={root / 'dataset'}",
                   f"finetune.checkpoint={root / 'checkpoints' / 'final.pt'}") == EXIT_OK
        assert (tmp_path / "checkpoints" / "finetuned.pt").exists()

    def test_finetune_on_training_split_rejected(self, workspace, tmp_path):
        root, cfg = workspace
        assert run("finetune-uncertainty", tmp_path, cfg, f"data.root={root / 'dataset'}", "finetune.split=train",
                   f"finetune.checkpoint={root / 'checkpoints' / 'final.pt'}") == EXIT_CONFIG

    def test_export(self, workspace, tmp_path):
        root, cfg = workspace
        assert run("export-confidence", tmp_path, cfg, f"data.root={root / 'dataset'}", "export.count=3",
                   f"export.checkpoint={root / 'checkpoints' / 'final.pt'}") == EXIT_OK
        assert len(list((tmp_path / "confidence").glob("*.png"))) == 3


def _stream_file(path, obs):
    write_observations(path, obs)
    return str(path)


class TestFuse:
    def test_single_observation_passthrough(self, tmp_path):
        o = PoseObservation(0.0, Pose([1.0, 2.0, 3.0], [0, 0, 0, 1.0]), [1, 1, 1, 0.1])
        src = _stream_file(tmp_path / "obs.csv", [o])
        assert run("fuse", tmp_path, None, f"fuse.observations={src}") == EXIT_OK
        fused = read_fused(tmp_path / "fused.csv")
        np.testing.assert_allclose(fused.t[0], [1, 2, 3])

    def test_benchmark_fixture(self, tmp_path):
        traj = generate_trajectory(SceneConfig(), 300, rng_seed=1)
        obs, _ = benchmark_stream(traj.poses, traj.timestamps, seed=1)
        src = _stream_file(tmp_path / "obs.csv", obs)
        gt = _stream_file(tmp_path / "gt.csv", [PoseObservation(t, p, np.ones(4)) for p, t in zip(traj, traj.timestamps)])
        assert run("fuse", tmp_path, None, f"fuse.observations={src}", f"fuse.ground_truth={gt}") == EXIT_OK
        rep = json.loads((tmp_path / "fusion_report.json").read_text())
        assert rep["fused"]["smoothness"] <= rep["raw"]["smoothness"]
        assert rep["fused"]["mean_translation"] <= rep["fused_fixed"]["mean_translation"]
        assert rep["filter"]["fused"]["covariance_source"] == "network"
        assert rep["filter"]["fused_fixed"]["covariance_source"] == "fixed"
        assert (tmp_path / "fusion.png").exists()
        assert smoothness_score(read_fused(tmp_path / "fused.csv").t) == pytest.approx(rep["fused"]["smoothness"])

    def test_fixed_and_network_configs_differ(self, tmp_path):
        o = [PoseObservation(i * 0.1, Pose([i, 0.0, 0.0], [0, 0, 0, 1.0]), [1, 1, 1, 0.1]) for i in range(3)]
        src = _stream_file(tmp_path / "obs.csv", o)
        assert run("fuse", tmp_path / "n", None, f"fuse.observations={src}") == EXIT_OK
        assert run("fuse", tmp_path / "f", None, f"fuse.observations={src}",
                   "fuse.filter.covariance_source=fixed") == EXIT_OK
        a = (tmp_path / "n" / "resolved_config.yaml").read_text()
        assert a != (tmp_path / "f" / "resolved_config.yaml").read_text()

    def test_malformed_stream(self, tmp_path):
        (tmp_path / "obs.csv").write_text("not,a,stream\n")
        assert run("fuse", tmp_path, None, f"fuse.observations={tmp_path / 'obs.csv'}") == EXIT_DATA

    def test_missing_stream_option(self, tmp_path):
        assert run("fuse", tmp_path) == EXIT_CONFIG


class TestAblate:
    def test_one_cell_and_resume(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml", {**SMALL, "ablate": {
            "factors": {"loss": ["heteroscedastic"]}, "train": {"epochs": 1, "batch_size": 8},
            "train_sequences": [0], "test_sequences": [100], "n_frames": 8, "test_frames": 8}})
        assert run("ablate", tmp_path, cfg) == EXIT_OK
        out = capsys.readouterr().out
        header = [c.strip() for c in out.splitlines()[0].strip("|").split("|")]
        assert header == ["Loss", "Coord", "CWAP", "Split", "Rot", "Median err.", "Mean err"]
        rows = json.loads((tmp_path / "ablation" / "ablation.json").read_text())
        assert len(rows) == 1
        cell = next((tmp_path / "ablation" / "cells").glob("*.json"))
        stamp = cell.stat().st_mtime_ns
        assert run("ablate", tmp_path, cfg) == EXIT_OK
        assert cell.stat().st_mtime_ns == stamp

    def test_unknown_option(self, tmp_path):
        assert run("ablate", tmp_path, None, "ablate.bogus=1") == EXIT_CONFIG
