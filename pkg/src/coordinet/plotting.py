"""Figures written next to the delimited reports (PNG, Agg backend)."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

# error colormap: blue at ~1 m, red beyond 5 m
ERROR_CMAP = "jet"
ERROR_RANGE = (1.0, 5.0)


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_trajectory_errors(gt_t, pred_t, path, title="", cmap=ERROR_CMAP, vrange=ERROR_RANGE):
    """Top-down view of predicted positions coloured by translation error."""
    gt_t, pred_t = np.asarray(gt_t), np.asarray(pred_t)
    err = np.linalg.norm(pred_t - gt_t, axis=1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4))
        ax.plot(gt_t[:, 0], gt_t[:, 1], color="0.6", lw=1, label="ground truth")
        sc = ax.scatter(pred_t[:, 0], pred_t[:, 1], c=err, cmap=cmap, vmin=vrange[0], vmax=vrange[1], s=6)
        fig.colorbar(sc, ax=ax, label="translation error (m)")
        ax.set_aspect("equal")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        ax.set_title(title)
        ax.legend(loc="upper right")
        return _save(fig, path)


def plot_fusion(gt_t, raw_t, fused, path, accepted=None, title=""):
    """Raw predictions, one or more fused tracks (``{label: (N, 3)}``) and ground truth."""
    gt_t, raw_t = np.asarray(gt_t), np.asarray(raw_t)
    if not isinstance(fused, dict):
        fused = {"EKF": fused}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 4.5))
        ax.plot(gt_t[:, 0], gt_t[:, 1], color="tab:green", lw=1.5, label="ground truth")
        ax.plot(raw_t[:, 0], raw_t[:, 1], color="tab:red", lw=0.6, alpha=0.7, label="network")
        for (label, track), color in zip(fused.items(), ("tab:blue", "tab:purple", "tab:orange")):
            track = np.asarray(track)
            ax.plot(track[:, 0], track[:, 1], color=color, lw=1.2, label=label)
        if accepted is not None:
            rej = ~np.asarray(accepted, bool)
            if rej.any():
                ax.scatter(raw_t[rej, 0], raw_t[rej, 1], marker="x", color="k", s=14, label="rejected")
        ax.set_aspect("equal")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        ax.set_title(title)
        ax.legend(loc="best")
        return _save(fig, path)


def plot_calibration(report, path):
    """Mean error against mean predicted sigma per decile, one panel per output."""
    names = list(report.deciles)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(names), figsize=(3 * len(names), 2.8))
        for ax, name in zip(np.atleast_1d(axes), names):
            rows = report.deciles[name]
            s = [r["mean_sigma"] for r in rows]
            e = [r["mean_error"] for r in rows]
            ax.plot(s, e, "o-", ms=3)
            lim = max(max(s), max(e))
            ax.plot([0, lim], [0, lim], ls=":", color="0.5")
            rho = report.spearman[name]
            ax.set_title(f"{name}  rho={rho:.2f}" if rho is not None else f"{name}  rho=undefined")
            ax.set_xlabel("predicted sigma")
        np.atleast_1d(axes)[0].set_ylabel("mean |error|")
        fig.tight_layout()
        return _save(fig, path)


def plot_training(tlog, path):
    steps = [r["step"] for r in tlog.steps]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.plot(steps, [r["total"] for r in tlog.steps], lw=0.8, label="total")
        for key in ("raw_Tx", "raw_R", "raw_T"):
            if tlog.steps and key in tlog.steps[0]:
                ax.plot(steps, [r[key] for r in tlog.steps], lw=0.8, label=key)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        return _save(fig, path)


def plot_ablation(rows, path):
    ok = [r for r in rows if r.get("status") == "ok"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(ok) + 1), 3))
        x = np.arange(len(ok))
        ax.bar(x - 0.2, [r["median_translation"] for r in ok], 0.4, label="median")
        ax.bar(x + 0.2, [r["mean_translation"] for r in ok], 0.4, label="mean")
        ax.set_xticks(x)
        ax.set_xticklabels([f"{r['loss'][:6]}\n{r['conv']}/{r['pooling']}\n{r['rotation'][:3]}/{'split' if r['split'] else 'single'}"
                            for r in ok], fontsize=6)
        ax.set_ylabel("translation error (m)")
        ax.legend()
        return _save(fig, path)
