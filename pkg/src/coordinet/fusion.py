"""Error-state EKF over absolute pose measurements, plus trajectory metrics.

State: position, orientation quaternion, linear velocity, body angular
velocity. The covariance lives on the 12-dim error state
``[dp, dtheta, dv, domega]`` where ``dtheta`` is a right-multiplied rotation
increment, ``q_true = q * Exp(dtheta)``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .geometry import (InvalidInputError, Pose, quat_angular_error, quat_from_rotvec, quat_multiply,
                       quat_normalize, quat_conjugate, quat_to_matrix, quat_to_rotvec, translation_error)

log = logging.getLogger(__name__)

OBS_COLUMNS = ("timestamp", "tx", "ty", "tz", "qx", "qy", "qz", "qw", "var_tx", "var_ty", "var_tz", "var_r")
FUSED_COLUMNS = ("timestamp", "tx", "ty", "tz", "qx", "qy", "qz", "qw", "accepted", "mahalanobis")
PSD_TOL = 1e-9


class StreamError(ValueError):
    pass


class DegenerateSegmentError(ValueError):
    pass


class FilterDivergence(FloatingPointError):
    pass


@dataclass
class PoseObservation:
    timestamp: float
    pose: Pose
    variances: np.ndarray   # (var_tx, var_ty, var_tz, var_r): m^2, m^2, m^2, rad^2

    def __post_init__(self):
        self.variances = np.asarray(self.variances, dtype=np.float64).reshape(4)
        if not np.all(np.isfinite(self.variances)) or np.any(self.variances <= 0):
            raise InvalidInputError(f"measurement variances must be positive and finite: {self.variances}")

    @classmethod
    def from_logvars(cls, timestamp, pose, logvars):
        return cls(timestamp, pose, np.exp(np.asarray(logvars, dtype=np.float64)))


@dataclass
class FilterConfig:
    accel_noise: float = 1.0            # m^2/s^3, white-noise acceleration density
    angular_accel_noise: float = 0.05   # rad^2/s^3
    covariance_source: str = "network"  # network | fixed
    fixed_variances: tuple | None = None  # used when source is fixed; None -> stream mean
    gating: bool = True
    gate_probability: float = 0.999
    init_velocity_var: float = 25.0
    init_angular_velocity_var: float = 1.0
    check_psd: bool = True

    def __post_init__(self):
        if self.accel_noise <= 0 or self.angular_accel_noise <= 0:
            raise InvalidInputError("process noise densities must be positive")
        if not 0.0 < self.gate_probability < 1.0:
            raise InvalidInputError("gate probability must lie in (0, 1)")
        if self.covariance_source not in ("network", "fixed"):
            raise InvalidInputError(f"unknown covariance source {self.covariance_source!r}")
        if self.fixed_variances is not None:
            self.fixed_variances = tuple(float(v) for v in self.fixed_variances)

    @property
    def gate_threshold(self) -> float:
        return float(chi2.ppf(self.gate_probability, df=6))


@dataclass
class FilterState:
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    w: np.ndarray
    P: np.ndarray
    timestamp: float = 0.0

    def copy(self) -> "FilterState":
        return FilterState(self.p.copy(), self.q.copy(), self.v.copy(), self.w.copy(), self.P.copy(), self.timestamp)

    @property
    def pose(self) -> Pose:
        return Pose(self.p, self.q)

    @classmethod
    def from_observation(cls, obs: PoseObservation, config: FilterConfig) -> "FilterState":
        var = obs.variances
        P = np.diag(np.concatenate([var[:3], np.full(3, var[3]), np.full(3, config.init_velocity_var),
                                    np.full(3, config.init_angular_velocity_var)]))
        return cls(obs.pose.t.copy(), obs.pose.q.copy(), np.zeros(3), np.zeros(3), P, obs.timestamp)


def _check_psd(P, where):
    lo = np.linalg.eigvalsh(P).min()
    if lo < -PSD_TOL:
        raise FilterDivergence(f"covariance lost PSD after {where}: min eigenvalue {lo:.3e}")


def predict(state: FilterState, dt: float, config: FilterConfig) -> FilterState:
    """Constant-velocity propagation by ``dt`` seconds."""
    if not dt > 0:
        raise InvalidInputError(f"dt must be positive, got {dt}")
    s = state.copy()
    dq = quat_from_rotvec(s.w * dt)
    s.p = s.p + s.v * dt
    s.q = quat_normalize(quat_multiply(s.q, dq))
    s.timestamp = state.timestamp + dt

    I3 = np.eye(3)
    F = np.eye(12)
    F[0:3, 6:9] = dt * I3
    F[3:6, 3:6] = quat_to_matrix(dq).T
    F[3:6, 9:12] = dt * I3
    Q = np.zeros((12, 12))
    for (a, b), density in (((0, 6), config.accel_noise), ((3, 9), config.angular_accel_noise)):
        Q[a:a + 3, a:a + 3] = density * dt ** 3 / 3.0 * I3
        Q[a:a + 3, b:b + 3] = density * dt ** 2 / 2.0 * I3
        Q[b:b + 3, a:a + 3] = density * dt ** 2 / 2.0 * I3
        Q[b:b + 3, b:b + 3] = density * dt * I3
    P = F @ state.P @ F.T + Q
    s.P = 0.5 * (P + P.T)
    if config.check_psd:
        _check_psd(s.P, "predict")
    return s


def _innovation(state: FilterState, obs: PoseObservation) -> np.ndarray:
    dtheta = quat_to_rotvec(quat_multiply(quat_conjugate(state.q), obs.pose.q))
    return np.concatenate([obs.pose.t - state.p, dtheta])


def measurement_covariance(variances) -> np.ndarray:
    v = np.asarray(variances, dtype=np.float64)
    return np.diag([v[0], v[1], v[2], v[3], v[3], v[3]])


def update(state: FilterState, obs: PoseObservation, config: FilterConfig,
           variances=None) -> tuple[FilterState, bool, float]:
    """Measurement update with Mahalanobis gating.

    Returns ``(state, accepted, squared_mahalanobis)``; a rejected measurement
    leaves ``state`` untouched. ``variances`` overrides the observation's own.
    """
    var = obs.variances if variances is None else np.asarray(variances, dtype=np.float64)
    if np.any(var <= 0) or not np.all(np.isfinite(var)):
        raise InvalidInputError(f"measurement variances must be positive and finite: {var}")
    H = np.zeros((6, 12))
    H[:, :6] = np.eye(6)
    R = measurement_covariance(var)
    y = _innovation(state, obs)
    S = H @ state.P @ H.T + R
    S = 0.5 * (S + S.T)
    S_inv_y = np.linalg.solve(S, y)
    d2 = float(y @ S_inv_y)
    if config.gating and d2 > config.gate_threshold:
        return state, False, d2
    K = np.linalg.solve(S, H @ state.P).T  # P H^T S^-1, S symmetric
    dx = K @ y
    IKH = np.eye(12) - K @ H
    P = IKH @ state.P @ IKH.T + K @ R @ K.T  # Joseph form keeps P PSD
    s = state.copy()
    s.p = s.p + dx[0:3]
    s.q = quat_normalize(quat_multiply(s.q, quat_from_rotvec(dx[3:6])))
    s.v = s.v + dx[6:9]
    s.w = s.w + dx[9:12]
    s.P = 0.5 * (P + P.T)
    if config.check_psd:
        _check_psd(s.P, "update")
    return s, True, d2


@dataclass
class FusionResult:
    timestamps: np.ndarray
    t: np.ndarray           # (N, 3)
    q: np.ndarray           # (N, 4)
    accepted: np.ndarray    # (N,) bool
    mahalanobis: np.ndarray  # (N,) squared distance; 0 for the initializing observation
    position_var: np.ndarray = field(default=None)  # (N, 3) posterior diagonal

    @property
    def poses(self) -> list:
        return [Pose(t, q) for t, q in zip(self.t, self.q)]


def run_filter(observations, config: FilterConfig | None = None) -> FusionResult:
    """Fuse an ordered observation stream; one output pose per input timestamp."""
    config = config or FilterConfig()
    observations = list(observations)
    if not observations:
        raise StreamError("observation stream is empty")
    ts = np.array([o.timestamp for o in observations], dtype=np.float64)
    bad = np.nonzero(np.diff(ts) <= 0)[0]
    if len(bad):
        raise StreamError(f"timestamps not strictly increasing at index {bad[0] + 1}")

    fixed = None
    if config.covariance_source == "fixed":
        fixed = (np.asarray(config.fixed_variances) if config.fixed_variances is not None
                 else np.mean([o.variances for o in observations], axis=0))

    def obs_var(o):
        return fixed if fixed is not None else o.variances

    first = observations[0]
    state = FilterState.from_observation(PoseObservation(first.timestamp, first.pose, obs_var(first)), config)
    n = len(observations)
    out_t, out_q = np.zeros((n, 3)), np.zeros((n, 4))
    accepted, d2s, pvar = np.ones(n, bool), np.zeros(n), np.zeros((n, 3))
    out_t[0], out_q[0], pvar[0] = state.p, state.q, np.diag(state.P)[:3]
    for i in range(1, n):
        o = observations[i]
        state = predict(state, o.timestamp - state.timestamp, config)
        state, accepted[i], d2s[i] = update(state, o, config, variances=obs_var(o))
        out_t[i], out_q[i], pvar[i] = state.p, state.q, np.diag(state.P)[:3]
    return FusionResult(ts, out_t, out_q, accepted, d2s, pvar)


# -- metrics -------------------------------------------------------------

def smoothness_score(positions, skip_degenerate: bool = False) -> float:
    """Mean norm of the change between consecutive unit direction vectors (0 = straight line)."""
    T = np.asarray(positions, dtype=np.float64)
    if T.ndim != 2 or T.shape[1] != 3:
        raise InvalidInputError("positions must be an (N, 3) array")
    d = np.diff(T, axis=0)
    norms = np.linalg.norm(d, axis=1)
    zero = norms == 0
    if zero.any():
        if not skip_degenerate:
            raise DegenerateSegmentError(f"duplicate consecutive positions at index {np.nonzero(zero)[0][0]}")
        log.warning("smoothness: skipped %d zero-length segments", int(zero.sum()))
        d, norms = d[~zero], norms[~zero]
    if len(d) < 2:
        raise InvalidInputError("smoothness needs at least 3 distinct consecutive positions")
    u = d / norms[:, None]
    return float(np.mean(np.linalg.norm(np.diff(u, axis=0), axis=1)))


@dataclass
class TrajectoryReport:
    n: int
    median_translation: float   # m
    mean_translation: float
    max_translation: float
    median_rotation: float      # degrees
    mean_rotation: float
    max_rotation: float
    smoothness: float | None

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def summary(self) -> str:
        return (f"median {self.median_translation:.3f} m / {self.median_rotation:.2f} deg, "
                f"mean {self.mean_translation:.3f} m / {self.mean_rotation:.2f} deg, "
                f"max {self.max_translation:.3f} m")


def evaluate_arrays(pred_t, pred_q, gt_t, gt_q) -> TrajectoryReport:
    pred_t, gt_t = np.asarray(pred_t, float).reshape(-1, 3), np.asarray(gt_t, float).reshape(-1, 3)
    pred_q, gt_q = np.asarray(pred_q, float).reshape(-1, 4), np.asarray(gt_q, float).reshape(-1, 4)
    if len(pred_t) != len(gt_t) or len(pred_q) != len(gt_q) or len(pred_t) != len(pred_q):
        raise InvalidInputError(f"sequence lengths differ: {len(pred_t)} predicted vs {len(gt_t)} ground truth")
    if len(pred_t) == 0:
        raise InvalidInputError("empty trajectory")
    et = translation_error(pred_t, gt_t)
    er = quat_angular_error(pred_q, gt_q)
    try:
        smooth = smoothness_score(pred_t, skip_degenerate=True)
    except InvalidInputError:
        smooth = None
    return TrajectoryReport(len(et), float(np.median(et)), float(np.mean(et)), float(np.max(et)),
                            float(np.median(er)), float(np.mean(er)), float(np.max(er)), smooth)


def evaluate_trajectory(pred, gt) -> TrajectoryReport:
    """Median/mean/max errors and smoothness for aligned sequences of poses."""
    pred, gt = list(pred), list(gt)
    if len(pred) != len(gt):
        raise InvalidInputError(f"sequence lengths differ: {len(pred)} vs {len(gt)}")
    if not pred:
        raise InvalidInputError("empty trajectory")
    return evaluate_arrays([p.t for p in pred], [p.q for p in pred], [g.t for g in gt], [g.q for g in gt])


# -- stream files -----------------------------------------------------------

def write_observations(path, observations):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBS_COLUMNS)
        for o in observations:
            w.writerow([f"{o.timestamp:.6f}", *(f"{v:.9g}" for v in o.pose.t), *(f"{v:.9g}" for v in o.pose.q),
                        *(f"{v:.9g}" for v in o.variances)])


def read_observations(path) -> list:
    out = []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != OBS_COLUMNS:
        raise StreamError(f"{path}: expected header {','.join(OBS_COLUMNS)}")
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(OBS_COLUMNS):
            raise StreamError(f"{path}:{lineno}: expected {len(OBS_COLUMNS)} fields, got {len(row)}")
        try:
            v = np.array([float(x) for x in row])
            out.append(PoseObservation(v[0], Pose(v[1:4], quat_normalize(v[4:8])), v[8:12]))
        except (ValueError, InvalidInputError) as exc:
            raise StreamError(f"{path}:{lineno}: {exc}") from None
    return out


def write_fused(path, result: FusionResult):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FUSED_COLUMNS)
        for i in range(len(result.timestamps)):
            w.writerow([f"{result.timestamps[i]:.6f}", *(f"{v:.9g}" for v in result.t[i]),
                        *(f"{v:.9g}" for v in result.q[i]), int(result.accepted[i]), f"{result.mahalanobis[i]:.6g}"])


def read_fused(path) -> FusionResult:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != FUSED_COLUMNS:
        raise StreamError(f"{path}: expected header {','.join(FUSED_COLUMNS)}")
    a = np.array([[float(x) for x in r] for r in rows[1:] if r]).reshape(-1, len(FUSED_COLUMNS))
    return FusionResult(a[:, 0], a[:, 1:4], a[:, 4:8], a[:, 8].astype(bool), a[:, 9])


# -- benchmark stream -----------------------------------------------------------

def benchmark_stream(gt_poses, timestamps, seed: int = 0, sigma_t=(0.3, 3.0), sigma_r_deg=(0.5, 5.0),
                     n_outliers: int = 5, outlier_offset: float = 50.0, honest_outliers: bool = True):
    """Noisy observations of a ground-truth path with per-frame noise levels.

    Each frame draws its own translation/rotation noise scale log-uniformly from
    the given ranges and reports it as its variance. ``n_outliers`` frames get a
    displacement of ``outlier_offset`` meters; their reported variance is either
    honest (``offset^2``) or the frame's small nominal one.
    Returns ``(observations, outlier_indices)``.
    """
    rng = np.random.default_rng(seed)
    n = len(gt_poses)
    st = np.exp(rng.uniform(np.log(sigma_t[0]), np.log(sigma_t[1]), n))
    sr = np.radians(np.exp(rng.uniform(np.log(sigma_r_deg[0]), np.log(sigma_r_deg[1]), n)))
    outliers = np.sort(rng.choice(np.arange(1, n), size=min(n_outliers, n - 1), replace=False)) if n_outliers else []
    obs = []
    for i, (g, ts) in enumerate(zip(gt_poses, timestamps)):
        t = g.t + rng.normal(0.0, st[i], 3)
        q = quat_multiply(g.q, quat_from_rotvec(rng.normal(0.0, sr[i], 3)))
        var = np.array([st[i] ** 2] * 3 + [sr[i] ** 2])
        if i in outliers:
            direction = rng.normal(size=3)
            t = t + outlier_offset * direction / np.linalg.norm(direction)
            if honest_outliers:
                var[:3] = outlier_offset ** 2
        obs.append(PoseObservation(float(ts), Pose(t, quat_normalize(q)), var))
    return obs, np.asarray(outliers, dtype=int)
