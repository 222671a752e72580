"""Ablation runs, uncertainty calibration, and confidence-map overlays."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import PoseDataset, SceneConfig, synthesize
from .fusion import evaluate_arrays
from .geometry import Pose, quat_angular_error
from .model import CoordiNet, ModelConfig, images_to_tensor
from .training import TrainConfig, TrainingAborted, predict, train

log = logging.getLogger(__name__)

TERMS = ("Tx", "Ty", "Tz", "R")
FACTORS = ("loss", "conv", "pooling", "rotation", "split")
TABLE_COLUMNS = ("Loss", "Coord", "CWAP", "Split", "Rot", "Median err.", "Mean err")


class UnsupportedModeError(ValueError):
    pass


# -- calibration -----------------------------------------------------------

def rankdata(x) -> np.ndarray:
    """1-based ranks, ties get their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float | None:
    """Rank correlation; ``None`` when either input is constant."""
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0:
        return None
    return float(np.clip((ra * rb).sum() / denom, -1.0, 1.0))


@dataclass
class CalibrationReport:
    n: int
    spearman: dict                     # term -> rho or None
    undefined: list                    # terms whose correlation is undefined
    deciles: dict                      # term -> [{decile, count, mean_sigma, mean_error}]
    mean_sigma: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def n_above(self, threshold: float) -> int:
        return sum(1 for v in self.spearman.values() if v is not None and v > threshold)


def calibration_arrays(sigma, abs_err) -> CalibrationReport:
    """``sigma`` and ``abs_err`` are ``(N, 4)`` in the order Tx, Ty, Tz, R."""
    sigma = np.asarray(sigma, dtype=np.float64)
    abs_err = np.asarray(abs_err, dtype=np.float64)
    if sigma.shape != abs_err.shape or sigma.ndim != 2 or sigma.shape[1] != 4:
        raise ValueError("sigma and errors must both be (N, 4)")
    if len(sigma) < 10:
        raise ValueError("calibration needs at least 10 samples")
    rho, undefined, deciles, mean_sigma = {}, [], {}, {}
    for k, name in enumerate(TERMS):
        rho[name] = spearman(sigma[:, k], abs_err[:, k])
        if rho[name] is None:
            undefined.append(name)
        order = np.argsort(sigma[:, k], kind="mergesort")
        rows = []
        for d, chunk in enumerate(np.array_split(order, 10)):
            rows.append({"decile": d + 1, "count": int(len(chunk)),
                         "mean_sigma": float(sigma[chunk, k].mean()), "mean_error": float(abs_err[chunk, k].mean())})
        deciles[name] = rows
        mean_sigma[name] = float(sigma[:, k].mean())
    return CalibrationReport(len(sigma), rho, undefined, deciles, mean_sigma)


def prediction_errors(pred_t, pred_q, gt_t, gt_q) -> np.ndarray:
    """``(N, 4)``: per-axis absolute translation error (m) and rotation error (rad)."""
    et = np.abs(np.asarray(pred_t, float) - np.asarray(gt_t, float))
    er = np.radians(quat_angular_error(pred_q, gt_q))
    return np.column_stack([et, er])


def calibration(predictions, gts) -> CalibrationReport:
    """Rank correlation between predicted sigma = exp(s/2) and absolute error.

    ``predictions`` is a dict with ``t``, ``q``, ``logvars`` arrays (as returned
    by :func:`coordinet.training.predict`) or a sequence of per-image dicts;
    ``gts`` is a sequence of :class:`Pose` or a :class:`PoseDataset`.
    """
    if not isinstance(predictions, dict):
        predictions = {k: np.stack([np.asarray(p[k]) for p in predictions]) for k in ("t", "q", "logvars")}
    if isinstance(gts, PoseDataset):
        gt_t, gt_q = gts.t, gts.q
    else:
        gts = list(gts)
        gt_t, gt_q = np.stack([g.t for g in gts]), np.stack([g.q for g in gts])
    if len(gt_t) != len(predictions["t"]):
        raise ValueError("predictions and ground truth differ in length")
    sigma = np.exp(np.asarray(predictions["logvars"], float) / 2.0)
    return calibration_arrays(sigma, prediction_errors(predictions["t"], predictions["q"], gt_t, gt_q))


# -- confidence maps -----------------------------------------------------------

def confidence_overlay(image: np.ndarray, confidence: np.ndarray) -> np.ndarray:
    """``image * upsample(confidence) / max``; ``image`` is ``(H, W, 3)`` float in [0, 1]."""
    H, W = image.shape[:2]
    c = torch.as_tensor(np.asarray(confidence, dtype=np.float32)).reshape(1, 1, *np.shape(confidence)[-2:])
    up = F.interpolate(c, size=(H, W), mode="bilinear", align_corners=False)[0, 0].numpy().astype(np.float64)
    up = up / up.max()
    return np.asarray(image, dtype=np.float64) * up[..., None]


@torch.no_grad()
def confidence_maps(model: CoordiNet, images) -> np.ndarray:
    if model.config.pooling != "cwap":
        raise UnsupportedModeError("confidence maps exist only for CWAP pooling")
    model.eval()
    return model(images_to_tensor(images)).confidence[:, 0].double().numpy()


def export_confidence_maps(model: CoordiNet, images, out_dir, names=None) -> list:
    """Write one overlay PNG per image; returns the written paths."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    maps = confidence_maps(model, images)
    os.makedirs(out_dir, exist_ok=True)
    floats = images.astype(np.float64) / 255.0 if images.dtype == np.uint8 else images.astype(np.float64)
    paths = []
    for i, (img, cm) in enumerate(zip(floats, maps)):
        overlay = confidence_overlay(img, cm)
        name = names[i] if names is not None else f"confidence_{i:05d}.png"
        path = os.path.join(out_dir, name)
        Image.fromarray(np.round(np.clip(overlay, 0, 1) * 255).astype(np.uint8)).save(path)
        paths.append(path)
    return paths


# -- ablation ------------------------------------------------------------------

REFERENCE = {"loss": "heteroscedastic", "conv": "coord", "pooling": "cwap", "rotation": "geodesic", "split": True}


@dataclass
class AblationSpec:
    """Cells toggled against ``reference``.

    ``style="grid"`` crosses every value in ``factors``; ``style="one-at-a-time"``
    varies one factor per row from the reference, as in a classic ablation table.
    """
    factors: dict = field(default_factory=lambda: {"loss": ["heteroscedastic", "plain"], "pooling": ["cwap", "gap"]})
    reference: dict = field(default_factory=lambda: dict(REFERENCE))
    style: str = "grid"
    seed: int = 0
    model: dict = field(default_factory=dict)      # ModelConfig overrides
    train: dict = field(default_factory=dict)      # TrainConfig overrides
    scene: dict = field(default_factory=dict)      # SceneConfig overrides
    train_sequences: list = field(default_factory=lambda: list(range(20)))
    test_sequences: list = field(default_factory=lambda: list(range(100, 104)))
    n_frames: int = 200
    test_frames: int = 100
    data_seed: int = 0

    def __post_init__(self):
        unknown = set(self.factors) - set(FACTORS) | set(self.reference) - set(FACTORS)
        if unknown:
            raise ValueError(f"unknown ablation factors {sorted(unknown)}")
        if self.style not in ("grid", "one-at-a-time"):
            raise ValueError(f"unknown ablation style {self.style!r}")
        if set(self.train_sequences) & set(self.test_sequences):
            raise ValueError("train and test sequences overlap")
        self.reference = {**REFERENCE, **self.reference}

    def cells(self) -> list:
        if self.style == "grid":
            names = list(self.factors)
            return [{**self.reference, **dict(zip(names, combo))}
                    for combo in itertools.product(*(self.factors[n] for n in names))]
        out = [dict(self.reference)]
        for name, values in self.factors.items():
            for v in values:
                if v != self.reference[name]:
                    out.append({**self.reference, name: v})
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def cell_id(cell: dict) -> str:
    return "-".join(f"{k}={cell[k]}" for k in FACTORS)


def cell_configs(spec: AblationSpec, cell: dict) -> tuple[ModelConfig, TrainConfig]:
    mcfg = ModelConfig(**{**spec.model, "conv": cell["conv"], "pooling": cell["pooling"]})
    tcfg = TrainConfig(**{**spec.train, "seed": spec.seed, "loss_mode": cell["loss"],
                          "rotation_mode": cell["rotation"], "split_translation": bool(cell["split"])})
    return mcfg, tcfg


def build_model(config: ModelConfig, seed: int) -> CoordiNet:
    """Encoder weights depend only on ``seed`` and the encoder config."""
    torch.manual_seed(seed)
    return CoordiNet(config)


def ablation_data(spec: AblationSpec) -> tuple[PoseDataset, PoseDataset]:
    scene = SceneConfig(**spec.scene)
    return (synthesize(scene, spec.train_sequences, spec.n_frames, spec.data_seed),
            synthesize(scene, spec.test_sequences, spec.test_frames, spec.data_seed))


def run_cell(spec: AblationSpec, cell: dict, train_data: PoseDataset, test_data: PoseDataset) -> dict:
    row = {**cell, "id": cell_id(cell)}
    try:
        mcfg, tcfg = cell_configs(spec, cell)
        model = build_model(mcfg, spec.seed)
        model, tlog = train(model, train_data, tcfg)
        p = predict(model, test_data)
        rep = evaluate_arrays(p["t"], p["q"], test_data.t, test_data.q)
        row.update(status="ok", **rep.to_dict(), wall_time=tlog.wall_time)
    except (TrainingAborted, FloatingPointError, ValueError, RuntimeError) as exc:
        log.warning("ablation cell %s failed: %s", row["id"], exc)
        row.update(status="failed", error=str(exc))
    return row


def _run_cell_star(args):
    return run_cell(*args)


def run_ablation(spec: AblationSpec, out_dir=None, workers: int = 1, train_data=None, test_data=None) -> list:
    """Train and evaluate every cell; completed cells under ``out_dir`` are reused."""
    cells = spec.cells()
    if train_data is None or test_data is None:
        train_data, test_data = ablation_data(spec)
    done, pending = {}, []
    cell_dir = os.path.join(out_dir, "cells") if out_dir else None
    if cell_dir:
        os.makedirs(cell_dir, exist_ok=True)
    for cell in cells:
        path = os.path.join(cell_dir, cell_id(cell) + ".json") if cell_dir else None
        if path and os.path.exists(path):
            with open(path) as fh:
                row = json.load(fh)
            if row.get("status") == "ok":
                done[cell_id(cell)] = row
                continue
        pending.append(cell)

    def _store(row):
        done[row["id"]] = row
        if cell_dir:
            tmp = os.path.join(cell_dir, row["id"] + ".json.tmp")
            with open(tmp, "w") as fh:
                json.dump(row, fh, indent=2)
            os.replace(tmp, os.path.join(cell_dir, row["id"] + ".json"))

    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for row in pool.map(_run_cell_star, [(spec, c, train_data, test_data) for c in pending]):
                _store(row)
    else:
        for cell in pending:
            _store(run_cell(spec, cell, train_data, test_data))
    rows = [done[cell_id(c)] for c in cells]
    if out_dir:
        write_ablation_table(rows, out_dir)
    return rows


def table_row(row: dict) -> dict:
    mark = lambda b: "X" if b else ""
    ok = row.get("status") == "ok"
    return {
        "Loss": {"heteroscedastic": "heterosc.", "homoscedastic": "homosc.", "plain": "Lt + Lr"}[row["loss"]],
        "Coord": mark(row["conv"] == "coord"),
        "CWAP": mark(row["pooling"] == "cwap"),
        "Split": mark(bool(row["split"])),
        "Rot": "geo." if row["rotation"] == "geodesic" else "L1",
        "Median err.": f"{row['median_translation']:.2f} / {row['median_rotation']:.2f}" if ok else "failed",
        "Mean err": f"{row['mean_translation']:.2f} / {row['mean_rotation']:.2f}" if ok else "failed",
    }


def format_table(rows) -> str:
    body = [table_row(r) for r in rows]
    widths = {c: max(len(c), *(len(b[c]) for b in body)) for c in TABLE_COLUMNS}
    line = lambda vals: "| " + " | ".join(v.ljust(widths[c]) for c, v in zip(TABLE_COLUMNS, vals)) + " |"
    out = [line(TABLE_COLUMNS), "|" + "|".join("-" * (widths[c] + 2) for c in TABLE_COLUMNS) + "|"]
    out += [line([b[c] for c in TABLE_COLUMNS]) for b in body]
    return "\n".join(out)


def write_ablation_table(rows, out_dir):
    with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
        json.dump(rows, fh, indent=2)
    with open(os.path.join(out_dir, "ablation.tsv"), "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            b = table_row(r)
            w.writerow([b[c] for c in TABLE_COLUMNS])
    with open(os.path.join(out_dir, "ablation.md"), "w") as fh:
        fh.write(format_table(rows) + "\n")
