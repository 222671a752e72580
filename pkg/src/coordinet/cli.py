"""Command-line entry point: ``coordinet <command> --config run.yaml --out RUN_DIR``.

Every command writes its fully resolved configuration to
``RUN_DIR/resolved_config.yaml`` before doing any work.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys

import numpy as np
import torch
import yaml

from . import plotting
from .data import (EmptyViewError, ManifestError, SceneConfig, dataset_from_manifest, generate_dataset, load_image,
                   load_manifest)
from .evaluation import AblationSpec, calibration, export_confidence_maps, format_table, run_ablation
from .fusion import (FilterConfig, FilterDivergence, PoseObservation, StreamError, evaluate_arrays,
                     read_observations, run_filter, smoothness_score, write_fused, write_observations)
from .geometry import InvalidInputError, Pose
from .losses import LossDiagnosticsError
from .model import CheckpointError, CoordiNet, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainingAborted, TrainingConfigError, finetune_uncertainty, predict, train

log = logging.getLogger("coordinet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "scene": {},
    "data": {
        "root": "dataset",
        "splits": {"train": list(range(0, 20)), "val": [50, 51], "test": [100, 101, 102, 103]},
        "n_frames": 200,
    },
    "model": {},
    "train": {"epochs": 10, "lr": 1e-4, "batch_size": 32, "checkpoint_every": 1, "resume": None},
    "finetune": {"checkpoint": None, "split": "val", "epochs": 5, "lr": 1e-4},
    "eval": {"checkpoint": None, "split": "test", "predictions": None, "plots": True},
    "fuse": {"observations": None, "ground_truth": None, "filter": {}, "compare_fixed": True, "plots": True},
    "ablate": {"workers": 1},
    "export": {"checkpoint": None, "split": "test", "count": 8},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set(cfg: dict, assignment: str):
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        try:
            value = float(value)  # YAML 1.1 reads "1e-4" as a string
        except ValueError:
            pass
    node[parts[-1]] = value


def resolve_config(path: str | None, sets=(), seed: int | None = None) -> dict:
    user = {}
    if path:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path} must contain a mapping")
    cfg = _merge(DEFAULTS, user)
    for s in sets:
        _set(cfg, s)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _path(out_dir, p):
    if p is None:
        return None
    return p if os.path.isabs(p) else os.path.join(out_dir, p)


def _manifest_path(cfg, out_dir):
    root = _path(out_dir, cfg["data"]["root"])
    return os.path.join(root, "manifest.csv") if os.path.isdir(root) else root


def _train_config(cfg, section="train", **override) -> TrainConfig:
    fields = set(TrainConfig.__dataclass_fields__)
    opts = {k: v for k, v in cfg[section].items() if k in fields}
    opts.setdefault("seed", cfg["seed"])
    opts.update(override)
    try:
        return TrainConfig(**opts)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _load_model(cfg, out_dir, section):
    ckpt = _path(out_dir, cfg[section].get("checkpoint")) or os.path.join(out_dir, "checkpoints", "final.pt")
    if not os.path.exists(ckpt):
        raise ConfigError(f"checkpoint not found: {ckpt}")
    model, _ = load_checkpoint(ckpt)
    return model, ckpt


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=float)


# -- commands ------------------------------------------------------------------

def cmd_generate(cfg, out_dir):
    scene = SceneConfig(**cfg["scene"])
    splits = {k: [int(s) for s in v] for k, v in cfg["data"]["splits"].items() if v}
    root = _path(out_dir, cfg["data"]["root"])
    manifest = generate_dataset(scene, root, splits, int(cfg["data"]["n_frames"]), int(cfg["seed"]))
    log.info("wrote %d images and %s", len(manifest), os.path.join(root, "manifest.csv"))
    return manifest


def cmd_train(cfg, out_dir):
    manifest = load_manifest(_manifest_path(cfg, out_dir))
    mcfg = ModelConfig(**cfg["model"])
    train_ds = dataset_from_manifest(manifest, "train", mcfg.image_size)
    val_ds = dataset_from_manifest(manifest, "val", mcfg.image_size) if manifest.select("val") else None
    tcfg = _train_config(cfg, checkpoint_dir=os.path.join(out_dir, "checkpoints"))
    torch.manual_seed(tcfg.seed)
    model = CoordiNet(mcfg)

    def validate(m, ds):
        p = predict(m, ds)
        rep = evaluate_arrays(p["t"], p["q"], ds.t, ds.q)
        return {"val_median_translation": rep.median_translation, "val_median_rotation": rep.median_rotation}

    resume = _path(out_dir, cfg["train"].get("resume"))
    model, tlog = train(model, train_ds, tcfg, val_dataset=val_ds, resume_from=resume, evaluate=validate)
    tlog.write_jsonl(os.path.join(out_dir, "train_log.jsonl"))
    if tlog.steps:
        plotting.plot_training(tlog, os.path.join(out_dir, "training.png"))
    log.info("final checkpoint at step %s", model.provenance.get("step"))
    return model


def cmd_finetune(cfg, out_dir):
    model, _ = _load_model(cfg, out_dir, "finetune")
    manifest = load_manifest(_manifest_path(cfg, out_dir))
    heldout = dataset_from_manifest(manifest, cfg["finetune"]["split"], model.config.image_size)
    tcfg = _train_config(cfg, "finetune", checkpoint_dir=os.path.join(out_dir, "finetune"))
    model = finetune_uncertainty(model, heldout, tcfg)
    path = os.path.join(out_dir, "checkpoints", "finetuned.pt")
    save_checkpoint(model, path)
    log.info("wrote %s", path)
    return model


def _read_poses(path):
    """Pose rows from any CSV sharing the observation / fused column prefix."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0][:8]) != ("timestamp", "tx", "ty", "tz", "qx", "qy", "qz", "qw"):
        raise StreamError(f"{path}: not a pose stream")
    try:
        a = np.array([[float(x) for x in r[:8]] for r in rows[1:] if r]).reshape(-1, 8)
    except ValueError as exc:
        raise StreamError(f"{path}: {exc}") from None
    return a[:, 0], a[:, 1:4], a[:, 4:8] / np.linalg.norm(a[:, 4:8], axis=1, keepdims=True)


def cmd_eval(cfg, out_dir):
    ecfg = cfg["eval"]
    manifest = load_manifest(_manifest_path(cfg, out_dir))
    if ecfg.get("predictions"):
        recs = manifest.select(ecfg["split"])
        _, pt, pq = _read_poses(_path(out_dir, ecfg["predictions"]))
        if len(pt) != len(recs):
            raise StreamError(f"predictions have {len(pt)} rows, split has {len(recs)}")
        gt_t, gt_q = np.stack([r.t for r in recs]), np.stack([r.q for r in recs])
        seq = np.array([r.sequence_id for r in recs])
        ts = np.array([r.timestamp for r in recs])
        pred = {"t": pt, "q": pq, "logvars": None}
    else:
        model, _ = _load_model(cfg, out_dir, "eval")
        ds = dataset_from_manifest(manifest, ecfg["split"], model.config.image_size)
        pred = predict(model, ds)
        gt_t, gt_q, seq, ts = ds.t, ds.q, ds.sequence_ids, ds.timestamps

    report = {"overall": evaluate_arrays(pred["t"], pred["q"], gt_t, gt_q).to_dict(), "sequences": {}}
    for sid in np.unique(seq):
        m = seq == sid
        report["sequences"][str(int(sid))] = evaluate_arrays(pred["t"][m], pred["q"][m], gt_t[m], gt_q[m]).to_dict()
        if pred["logvars"] is not None:
            obs = [PoseObservation.from_logvars(t, Pose(pred["t"][i], pred["q"][i]), pred["logvars"][i])
                   for i, t in zip(np.nonzero(m)[0], ts[m])]
            write_observations(os.path.join(out_dir, f"observations_{int(sid)}.csv"), obs)
            gt_obs = [PoseObservation(t, Pose(gt_t[i], gt_q[i]), np.ones(4)) for i, t in zip(np.nonzero(m)[0], ts[m])]
            write_observations(os.path.join(out_dir, f"ground_truth_{int(sid)}.csv"), gt_obs)
        if ecfg.get("plots", True):
            plotting.plot_trajectory_errors(gt_t[m], pred["t"][m], os.path.join(out_dir, f"trajectory_{int(sid)}.png"),
                                            title=f"sequence {int(sid)}")
    if pred["logvars"] is not None and len(gt_t) >= 10:
        cal = calibration(pred, [Pose(t, q) for t, q in zip(gt_t, gt_q)])
        report["calibration"] = cal.to_dict()
        if ecfg.get("plots", True):
            plotting.plot_calibration(cal, os.path.join(out_dir, "calibration.png"))
    _write_json(os.path.join(out_dir, "report.json"), report)
    _write_report_tsv(os.path.join(out_dir, "report.tsv"), report)
    log.info("overall: median %.3f m / %.2f deg", report["overall"]["median_translation"],
             report["overall"]["median_rotation"])
    return report


def _write_report_tsv(path, report):
    cols = ["n", "median_translation", "mean_translation", "max_translation", "median_rotation",
            "mean_rotation", "max_rotation", "smoothness"]
    with open(path, "w") as fh:
        fh.write("\t".join(["sequence"] + cols) + "\n")
        for name, rep in [("all", report["overall"])] + list(report["sequences"].items()):
            fh.write("\t".join([name] + [repr(rep[c]) for c in cols]) + "\n")


def cmd_fuse(cfg, out_dir):
    fcfg = cfg["fuse"]
    if not fcfg.get("observations"):
        raise ConfigError("fuse.observations is required")
    obs = read_observations(_path(out_dir, fcfg["observations"]))
    fields = set(FilterConfig.__dataclass_fields__)
    base = {k: v for k, v in (fcfg.get("filter") or {}).items() if k in fields}
    runs = {"fused": FilterConfig(**base)}
    if fcfg.get("compare_fixed") and runs["fused"].covariance_source != "fixed":
        runs["fused_fixed"] = FilterConfig(**{**base, "covariance_source": "fixed"})
    results = {name: run_filter(obs, fc) for name, fc in runs.items()}
    for name, res in results.items():
        write_fused(os.path.join(out_dir, f"{name}.csv"), res)

    raw_t = np.stack([o.pose.t for o in obs])
    raw_q = np.stack([o.pose.q for o in obs])
    report = {"n": len(obs), "accepted": {k: int(r.accepted.sum()) for k, r in results.items()},
              "filter": {k: fc.__dict__ for k, fc in runs.items()}}
    if fcfg.get("ground_truth"):
        _, gt_t, gt_q = _read_poses(_path(out_dir, fcfg["ground_truth"]))
        report["raw"] = evaluate_arrays(raw_t, raw_q, gt_t, gt_q).to_dict()
        for name, r in results.items():
            report[name] = evaluate_arrays(r.t, r.q, gt_t, gt_q).to_dict()
    else:
        gt_t = None
        report["raw"] = {"smoothness": _safe_smoothness(raw_t)}
        for name, r in results.items():
            report[name] = {"smoothness": _safe_smoothness(r.t)}
    _write_json(os.path.join(out_dir, "fusion_report.json"), report)
    if fcfg.get("plots", True) and len(obs) > 1:
        plotting.plot_fusion(gt_t if gt_t is not None else raw_t, raw_t,
                             {("EKF (network cov.)" if k == "fused" else "EKF (fixed cov.)"): r.t for k, r in results.items()},
                             os.path.join(out_dir, "fusion.png"), accepted=results["fused"].accepted)
    return report


def _safe_smoothness(t):
    try:
        return smoothness_score(t, skip_degenerate=True)
    except InvalidInputError:
        return None


def cmd_ablate(cfg, out_dir):
    acfg = dict(cfg["ablate"])
    workers = int(acfg.pop("workers", 1))
    fields = set(AblationSpec.__dataclass_fields__)
    unknown = set(acfg) - fields
    if unknown:
        raise ConfigError(f"unknown ablate options {sorted(unknown)}")
    acfg.setdefault("seed", cfg["seed"])
    acfg.setdefault("scene", cfg["scene"])
    acfg.setdefault("model", cfg["model"])
    spec = AblationSpec(**acfg)
    rows = run_ablation(spec, os.path.join(out_dir, "ablation"), workers=workers)
    plotting.plot_ablation(rows, os.path.join(out_dir, "ablation", "ablation.png"))
    print(format_table(rows))
    return rows


def cmd_export(cfg, out_dir):
    model, _ = _load_model(cfg, out_dir, "export")
    manifest = load_manifest(_manifest_path(cfg, out_dir))
    recs = manifest.select(cfg["export"]["split"])[: int(cfg["export"]["count"])]
    if not recs:
        raise ManifestError(f"no images in split {cfg['export']['split']!r}")
    images = np.stack([load_image(os.path.join(manifest.root, r.image), model.config.image_size) for r in recs])
    names = [r.image.replace("/", "_") for r in recs]
    return export_confidence_maps(model, images, os.path.join(out_dir, "confidence"), names)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "finetune-uncertainty": cmd_finetune,
    "eval": cmd_eval,
    "fuse": cmd_fuse,
    "ablate": cmd_ablate,
    "export-confidence": cmd_export,
}


def build_parser():
    p = argparse.ArgumentParser(prog="coordinet", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", "-c", help="YAML run configuration")
    p.add_argument("--out", "-o", default="run", help="run directory (default: ./run)")
    p.add_argument("--seed", type=int, help="global seed, overrides the config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set train.epochs=2")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.set, args.seed)
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "resolved_config.yaml"), "w") as fh:
            yaml.safe_dump({"command": args.command, **cfg}, fh, sort_keys=True)
        torch.manual_seed(int(cfg["seed"]))
        COMMANDS[args.command](cfg, args.out)
    except (ConfigError, TrainingConfigError, CheckpointError, TypeError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (ManifestError, StreamError, EmptyViewError, InvalidInputError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (TrainingAborted, FilterDivergence, LossDiagnosticsError) as exc:
        log.error("numerical abort: %s", exc)
        if isinstance(exc, TrainingAborted) and exc.checkpoint:
            log.error("last good checkpoint: %s", exc.checkpoint)
        return EXIT_NUMERIC
    except ValueError as exc:  # invalid option values surfaced by library constructors
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
