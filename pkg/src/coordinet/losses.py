"""Joint pose / log-variance objective and its ablation variants.

Every loss works on batched torch tensors:

* ``pred_t``, ``gt_t``: ``(B, 3)`` translations in meters
* ``pred_q``: ``(B, 4)`` raw quaternion outputs (normalized here)
* ``gt_q``: ``(B, 4)`` unit quaternions, either sign
* ``logvars``: ``(B, 4)`` as ``(s_Tx, s_Ty, s_Tz, s_R)`` with ``s = log sigma^2``

Per-sample totals are averaged over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .geometry import InvalidInputError, geodesic_distance_torch, quat_to_matrix_torch

TERMS = ("Tx", "Ty", "Tz", "R")
LOSS_MODES = ("heteroscedastic", "homoscedastic", "plain")
ROTATION_MODES = ("geodesic", "l1")


class LossDiagnosticsError(FloatingPointError):
    """Non-finite loss; carries the offending breakdown."""

    def __init__(self, message: str, breakdown: "LossBreakdown"):
        super().__init__(message)
        self.breakdown = breakdown


@dataclass
class LossBreakdown:
    total: torch.Tensor
    raw: dict = field(default_factory=dict)
    weighted: dict = field(default_factory=dict)
    penalty: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        out = {"total": float(self.total.detach())}
        for name, group in (("raw", self.raw), ("weighted", self.weighted), ("penalty", self.penalty)):
            for k, v in group.items():
                out[f"{name}_{k}"] = float(v.detach().mean())
        return out

    def check_finite(self):
        if not torch.isfinite(self.total).all():
            raise LossDiagnosticsError(f"non-finite loss: {self.as_floats()}", self)


def translation_losses(pred_t: torch.Tensor, gt_t: torch.Tensor) -> torch.Tensor:
    """Per-axis L1 losses, ``(B, 3)``."""
    return (pred_t - gt_t).abs()


def rotation_loss(pred_q: torch.Tensor, gt_q: torch.Tensor, mode: str = "geodesic") -> torch.Tensor:
    """Per-sample rotation loss ``(B,)``; radians in geodesic mode."""
    norm = pred_q.norm(dim=-1, keepdim=True)
    if (norm <= 0).any():
        raise InvalidInputError("zero-norm predicted quaternion")
    if mode == "geodesic":
        return geodesic_distance_torch(quat_to_matrix_torch(pred_q), quat_to_matrix_torch(gt_q))
    if mode == "l1":
        q = pred_q / norm
        sign = torch.where((q * gt_q).sum(-1, keepdim=True) < 0, -1.0, 1.0).to(gt_q.dtype)
        return (q - sign * gt_q).abs().sum(-1)
    raise ValueError(f"unknown rotation mode {mode!r}")


def raw_losses(pred_t, pred_q, gt_t, gt_q, rotation_mode="geodesic", split_translation=True) -> dict:
    """Unweighted per-sample loss terms keyed by term name.

    With ``split_translation=False`` the three axis terms collapse into one
    Euclidean term stored under ``"T"``.
    """
    out = {}
    if split_translation:
        lt = translation_losses(pred_t, gt_t)
        out.update(Tx=lt[:, 0], Ty=lt[:, 1], Tz=lt[:, 2])
    else:
        out["T"] = (pred_t - gt_t).norm(dim=-1)
    out["R"] = rotation_loss(pred_q, gt_q, rotation_mode)
    return out


def _weighted(raw: dict, logvars: torch.Tensor) -> LossBreakdown:
    index = {"Tx": 0, "Ty": 1, "Tz": 2, "T": 0, "R": 3}
    weighted, penalty = {}, {}
    per_sample = 0.0
    for k, L in raw.items():
        s = logvars[..., index[k]]
        weighted[k] = L * torch.exp(-s)
        penalty[k] = s.expand_as(L)
        per_sample = per_sample + weighted[k] + penalty[k]
    bd = LossBreakdown(total=per_sample.mean(), raw=raw, weighted=weighted, penalty=penalty)
    return bd


def heteroscedastic_loss(pred_t, pred_q, logvars, gt_t, gt_q, rotation_mode="geodesic",
                         split_translation=True) -> LossBreakdown:
    """``sum_i L_i exp(-s_i) + s_i`` with per-image log-variances."""
    raw = raw_losses(pred_t, pred_q, gt_t, gt_q, rotation_mode, split_translation)
    bd = _weighted(raw, logvars)
    bd.check_finite()
    return bd


def homoscedastic_loss(pred_t, pred_q, weights: torch.Tensor, gt_t, gt_q, rotation_mode="geodesic",
                       split_translation=True) -> LossBreakdown:
    """Same objective with one dataset-global ``weights`` 4-vector."""
    logvars = weights.reshape(1, 4).expand(pred_t.shape[0], 4)
    return heteroscedastic_loss(pred_t, pred_q, logvars, gt_t, gt_q, rotation_mode, split_translation)


def plain_loss(pred_t, pred_q, gt_t, gt_q, rotation_mode="geodesic", split_translation=True) -> LossBreakdown:
    raw = raw_losses(pred_t, pred_q, gt_t, gt_q, rotation_mode, split_translation)
    total = sum(raw.values()).mean()
    bd = LossBreakdown(total=total, raw=raw, weighted=dict(raw), penalty={})
    bd.check_finite()
    return bd


class PoseLoss(nn.Module):
    """Dispatches to one of the three regimes; owns the homoscedastic scalars."""

    def __init__(self, mode="heteroscedastic", rotation_mode="geodesic", split_translation=True,
                 homoscedastic_init=(0.0, 0.0, 0.0, -3.0)):
        super().__init__()
        if mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {mode!r}")
        if rotation_mode not in ROTATION_MODES:
            raise ValueError(f"unknown rotation mode {rotation_mode!r}")
        self.mode = mode
        self.rotation_mode = rotation_mode
        self.split_translation = split_translation
        if mode == "homoscedastic":
            self.weights = nn.Parameter(torch.tensor(homoscedastic_init, dtype=torch.float32))

    def forward(self, pred_t, pred_q, logvars, gt_t, gt_q) -> LossBreakdown:
        kw = dict(rotation_mode=self.rotation_mode, split_translation=self.split_translation)
        if self.mode == "heteroscedastic":
            return heteroscedastic_loss(pred_t, pred_q, logvars, gt_t, gt_q, **kw)
        if self.mode == "homoscedastic":
            return homoscedastic_loss(pred_t, pred_q, self.weights.to(pred_t.dtype), gt_t, gt_q, **kw)
        return plain_loss(pred_t, pred_q, gt_t, gt_q, **kw)


def gaussian_nll(abs_err: torch.Tensor, logvars: torch.Tensor) -> torch.Tensor:
    """Per-sample objective value for fixed errors, i.e. what the log-variances minimize.

    ``abs_err`` is ``(B, 4)``: three axis errors (m) and rotation error (rad).
    """
    return (abs_err * torch.exp(-logvars) + logvars).sum(-1)
