"""Training loops: joint pose/uncertainty training, ablation regimes, and
uncertainty-head fine-tuning with everything else frozen."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import PoseDataset
from .losses import LOSS_MODES, LossDiagnosticsError, PoseLoss
from .model import PARAMETER_GROUPS, CoordiNet, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

FREEZABLE = PARAMETER_GROUPS + ("loss",)


class TrainingConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; ``checkpoint`` holds the last good weights."""

    def __init__(self, message, breakdown: dict | None = None, checkpoint: str | None = None):
        super().__init__(message)
        self.breakdown = breakdown
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    loss_mode: str = "heteroscedastic"
    rotation_mode: str = "geodesic"
    split_translation: bool = True
    lr: float = 1e-4
    lr_schedule: str = "constant"       # or "cosine": decays to zero over the run
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    freeze: tuple = ()
    checkpoint_every: int = 0           # epochs; 0 writes only the final checkpoint
    checkpoint_dir: str | None = None
    homoscedastic_init: tuple = (0.0, 0.0, 0.0, -3.0)
    log_every: int = 1

    def __post_init__(self):
        self.freeze = tuple(self.freeze)
        self.homoscedastic_init = tuple(self.homoscedastic_init)
        if self.lr <= 0:
            raise TrainingConfigError("learning rate must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise TrainingConfigError(f"unknown loss mode {self.loss_mode!r}")
        unknown = set(self.freeze) - set(FREEZABLE)
        if unknown:
            raise TrainingConfigError(f"freeze mask names unknown parameter groups {sorted(unknown)}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise TrainingConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise TrainingConfigError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze"] = list(self.freeze)
        d["homoscedastic_init"] = list(self.homoscedastic_init)
        return d

    def hash(self) -> str:
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class TrainLog:
    config_hash: str = ""
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    wall_time: float = 0.0

    def add_step(self, step: int, epoch: int, losses: dict):
        if self.steps and step <= self.steps[-1]["step"]:
            raise ValueError("step indices must increase")
        self.steps.append({"step": step, "epoch": epoch, "config_hash": self.config_hash, **losses})

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps({"kind": "step", **rec}) + "\n")
            for rec in self.epochs:
                fh.write(json.dumps({"kind": "epoch", "config_hash": self.config_hash, **rec}) + "\n")


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


@torch.no_grad()
def predict(model: CoordiNet, dataset: PoseDataset, batch_size: int = 64) -> dict:
    """Inference over a dataset; numpy arrays ``t``, ``q``, ``logvars``."""
    was_training = model.training
    model.eval()
    out = {"t": [], "q": [], "logvars": []}
    for start in range(0, len(dataset), batch_size):
        x = torch.from_numpy(dataset.images[start:start + batch_size]).permute(0, 3, 1, 2).float() / 255.0
        o = model(x)
        out["t"].append(o.t.double().numpy())
        out["q"].append(o.q.double().numpy())
        out["logvars"].append(o.logvars.double().numpy())
    model.train(was_training)
    return {k: np.concatenate(v) if v else np.zeros((0, 3 if k == "t" else 4)) for k, v in out.items()}


def _batch(dataset: PoseDataset, idx):
    x = torch.from_numpy(dataset.images[idx]).permute(0, 3, 1, 2).float() / 255.0
    return x, torch.from_numpy(dataset.t[idx]).float(), torch.from_numpy(dataset.q[idx]).float()


def _apply_freeze(model: CoordiNet, loss_fn: PoseLoss, freeze) -> list:
    """Sets requires_grad and eval() on frozen groups; returns trainable parameters."""
    params = []
    for name in PARAMETER_GROUPS:
        module = getattr(model, name)
        frozen = name in freeze
        for p in module.parameters():
            p.requires_grad_(not frozen)
            if not frozen:
                params.append(p)
        module.train(not frozen)
    for p in loss_fn.parameters():
        p.requires_grad_("loss" not in freeze)
        if "loss" not in freeze:
            params.append(p)
    return params


def _save(model, loss_fn, opt, config, step, epoch, path):
    model.provenance["step"] = step
    save_checkpoint(model, path, extra={
        "step": step, "epoch": epoch, "train_config": config.to_dict(),
        "optimizer": opt.state_dict() if opt is not None else None,
        "loss_state": loss_fn.state_dict(),
    })


def train(model: CoordiNet, dataset: PoseDataset, config: TrainConfig, val_dataset: PoseDataset | None = None,
          resume_from: str | None = None, evaluate=None) -> tuple[CoordiNet, TrainLog]:
    """Optimize ``model`` on ``dataset`` with Adam.

    ``evaluate(model, val_dataset) -> dict`` supplies per-epoch validation
    metrics when given.
    """
    if len(dataset) == 0:
        raise TrainingConfigError("training dataset is empty")
    seed_everything(config.seed)
    loss_fn = PoseLoss(config.loss_mode, config.rotation_mode, config.split_translation, config.homoscedastic_init)
    start_step, start_epoch, extra = 0, 0, {}
    if resume_from is not None:
        model, extra = load_checkpoint(resume_from, expect=model.config)
        start_step, start_epoch = int(extra.get("step", 0)), int(extra.get("epoch", 0))
        if extra.get("loss_state"):
            loss_fn.load_state_dict(extra["loss_state"])
    elif not model.provenance.get("normalized"):
        scale = float(np.mean(dataset.t.std(axis=0))) or 1.0
        model.set_translation_normalization(dataset.t.mean(axis=0), scale)
        model.provenance["normalized"] = True

    params = _apply_freeze(model, loss_fn, config.freeze)
    opt = torch.optim.Adam(params, lr=config.lr) if params else None
    if opt is not None and extra.get("optimizer"):
        opt.load_state_dict(extra["optimizer"])

    trained = set(model.provenance.get("train_sequences", []))
    trained.update(int(s) for s in np.unique(dataset.sequence_ids))
    model.provenance["train_sequences"] = sorted(trained)

    ckpt_dir = config.checkpoint_dir
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
    final_path = os.path.join(ckpt_dir, "final.pt") if ckpt_dir else None

    tlog = TrainLog(config_hash=config.hash())
    gen = np.random.default_rng(np.random.SeedSequence([config.seed, start_epoch]))
    step = start_step
    t0 = time.time()
    n = len(dataset)
    total_steps = (start_epoch + config.epochs) * -(-n // config.batch_size)
    for epoch in range(start_epoch, start_epoch + config.epochs):
        order = gen.permutation(n)
        for b in range(0, n, config.batch_size):
            idx = np.sort(order[b:b + config.batch_size])
            x, gt_t, gt_q = _batch(dataset, idx)
            out = model(x)
            try:
                bd = loss_fn(out.t, out.q_raw, out.logvars, gt_t, gt_q)
            except LossDiagnosticsError as exc:
                _abort(model, loss_fn, opt, config, step, epoch, ckpt_dir, exc.breakdown.as_floats())
            if opt is not None:
                if config.lr_schedule == "cosine":
                    for group in opt.param_groups:
                        group["lr"] = config.lr * 0.5 * (1 + math.cos(math.pi * step / total_steps))
                opt.zero_grad(set_to_none=True)
                bd.total.backward()
                if not all(torch.isfinite(p.grad).all() for p in params if p.grad is not None):
                    _abort(model, loss_fn, opt, config, step, epoch, ckpt_dir, bd.as_floats())
                opt.step()
            step += 1
            if step % config.log_every == 0:
                tlog.add_step(step, epoch, bd.as_floats())
        rec = {"epoch": epoch + 1, "step": step, "elapsed": time.time() - t0}
        if evaluate is not None and val_dataset is not None and len(val_dataset):
            rec.update(evaluate(model, val_dataset))
        tlog.epochs.append(rec)
        log.info("epoch %d step %d %s", epoch + 1, step, {k: v for k, v in rec.items() if k != "elapsed"})
        if ckpt_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            _save(model, loss_fn, opt, config, step, epoch + 1, os.path.join(ckpt_dir, f"epoch_{epoch + 1:04d}.pt"))
    model.provenance["step"] = step
    if final_path:
        _save(model, loss_fn, opt, config, step, start_epoch + config.epochs, final_path)
    tlog.wall_time = time.time() - t0
    model.loss_fn = loss_fn
    model.eval()
    return model, tlog


def _abort(model, loss_fn, opt, config, step, epoch, ckpt_dir, breakdown):
    path = None
    if ckpt_dir:
        path = os.path.join(ckpt_dir, "last_good.pt")
        _save(model, loss_fn, opt, config, step, epoch, path)
    raise TrainingAborted(f"non-finite loss or gradient at step {step}: {breakdown}", breakdown, path)


def finetune_uncertainty(model: CoordiNet, heldout: PoseDataset, config: TrainConfig | None = None,
                         train_sequences=None) -> CoordiNet:
    """Retrain only the log-variance decoder on sequences the model never saw."""
    if heldout is None or len(heldout) == 0:
        raise TrainingConfigError("held-out dataset is empty")
    seen = set(model.provenance.get("train_sequences", [])) if train_sequences is None else set(train_sequences)
    overlap = seen & {int(s) for s in np.unique(heldout.sequence_ids)}
    if overlap:
        raise TrainingConfigError(f"held-out data shares sequences with training data: {sorted(overlap)}")
    config = config or TrainConfig()
    cfg = TrainConfig(**{**config.to_dict(), "loss_mode": "heteroscedastic",
                         "freeze": ("encoder", "pose_decoder")})
    provenance = dict(model.provenance)
    model, _ = train(model, heldout, cfg)
    provenance["finetuned_sequences"] = sorted({int(s) for s in np.unique(heldout.sequence_ids)})
    model.provenance = {**provenance, "step": model.provenance.get("step")}
    return model
