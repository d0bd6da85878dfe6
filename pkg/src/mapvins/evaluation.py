"""Trajectory accuracy and estimator consistency metrics.

Logs store the body-to-world rotation (TUM-style quaternion) and the body
position; estimate/ground-truth rows are associated by nearest timestamp
within 1 ms.  Covariances, when logged, are 6x6 pose blocks in the filter's
error-state convention (orientation error theta with
R_GtoI_true = Exp(-theta) R_GtoI_est, then position).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .geometry import quat_to_rot, rot_to_rotvec, rotation_error, umeyama_align

ASSOC_TOL = 1e-3  # s


class NoOverlap(Exception):
    """Fewer than two associated estimate/ground-truth pairs."""


class SegmentTooLong(Exception):
    """No trajectory segment reaches the requested length."""


class SingularCovariance(Exception):
    """Logged pose covariance is not invertible."""


@dataclass
class TrajectoryLog:
    times: np.ndarray
    positions: np.ndarray
    quats: np.ndarray                     # body-to-world, (x, y, z, w)
    covariances: np.ndarray | None = None  # (n, 6, 6) pose error covariance

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(-1, 4)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if self.covariances is not None:
            self.covariances = np.asarray(self.covariances, dtype=float)

    def __len__(self) -> int:
        return len(self.times)

    def rotation(self, i: int) -> np.ndarray:
        return quat_to_rot(self.quats[i])


def associate(est: TrajectoryLog, gt: TrajectoryLog, tol: float = ASSOC_TOL):
    """Indices of nearest-timestamp pairs within the gate."""
    j = np.searchsorted(gt.times, est.times)
    j = np.clip(j, 1, len(gt) - 1)
    left = gt.times[j - 1]
    right = gt.times[j]
    pick = np.where(est.times - left <= right - est.times, j - 1, j)
    ok = np.abs(gt.times[pick] - est.times) <= tol
    return np.flatnonzero(ok), pick[ok]


@dataclass
class AteResult:
    rot_rmse_deg: float
    pos_rmse_m: float
    n_pairs: int


def ate(est: TrajectoryLog, gt: TrajectoryLog, alignment: str = "se3") -> AteResult:
    """Absolute trajectory error after optional global alignment."""
    ie, ig = associate(est, gt)
    if len(ie) < 2:
        raise NoOverlap(f"only {len(ie)} associated pairs")
    p_est = est.positions[ie]
    p_gt = gt.positions[ig]

    if alignment == "none":
        R_a = np.eye(3)
        p_aligned = p_est
    elif alignment in ("se3", "sim3"):
        T = umeyama_align(p_est, p_gt, with_scale=(alignment == "sim3"))
        R_a = T.rotation()
        p_aligned = T.apply(p_est)
    else:
        raise ValueError(f"unknown alignment {alignment!r}")

    pos_err = np.linalg.norm(p_aligned - p_gt, axis=1)
    ang = np.empty(len(ie))
    for k, (a, b) in enumerate(zip(ie, ig)):
        R_est = R_a @ quat_to_rot(est.quats[a])
        R_gt = quat_to_rot(gt.quats[b])
        ang[k] = np.linalg.norm(rot_to_rotvec(R_gt.T @ R_est))
    return AteResult(
        rot_rmse_deg=float(np.degrees(np.sqrt(np.mean(ang ** 2)))),
        pos_rmse_m=float(np.sqrt(np.mean(pos_err ** 2))),
        n_pairs=len(ie),
    )


@dataclass
class RpeStats:
    length: float
    n: int
    pos_median: float
    pos_q1: float
    pos_q3: float
    pos_lo: float
    pos_hi: float
    rot_median_deg: float
    rot_q1_deg: float
    rot_q3_deg: float


def rpe(est: TrajectoryLog, gt: TrajectoryLog, lengths) -> dict:
    """Relative pose error over fixed ground-truth path lengths."""
    ie, ig = associate(est, gt)
    if len(ie) < 2:
        raise NoOverlap(f"only {len(ie)} associated pairs")
    p_gt = gt.positions[ig]
    p_est = est.positions[ie]
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p_gt, axis=0), axis=1))])

    R_gt = [quat_to_rot(gt.quats[i]) for i in ig]
    R_est = [quat_to_rot(est.quats[i]) for i in ie]

    out = {}
    for L in lengths:
        ends = np.searchsorted(cum, cum + L)
        pos_err, rot_err = [], []
        for i in range(len(cum)):
            j = ends[i]
            if j >= len(cum):
                continue
            dp_gt = R_gt[i].T @ (p_gt[j] - p_gt[i])
            dp_est = R_est[i].T @ (p_est[j] - p_est[i])
            pos_err.append(np.linalg.norm(dp_est - dp_gt))
            dR = (R_gt[i].T @ R_gt[j]).T @ (R_est[i].T @ R_est[j])
            rot_err.append(np.linalg.norm(rot_to_rotvec(dR)))
        if not pos_err:
            raise SegmentTooLong(f"no {L} m segment fits the trajectory")
        pos = np.asarray(pos_err)
        rot = np.degrees(rot_err)
        out[float(L)] = RpeStats(
            length=float(L), n=len(pos),
            pos_median=float(np.median(pos)),
            pos_q1=float(np.percentile(pos, 25)),
            pos_q3=float(np.percentile(pos, 75)),
            pos_lo=float(pos.min()), pos_hi=float(pos.max()),
            rot_median_deg=float(np.median(rot)),
            rot_q1_deg=float(np.percentile(rot, 25)),
            rot_q3_deg=float(np.percentile(rot, 75)),
        )
    return out


@dataclass
class NeesResult:
    per_frame: np.ndarray
    mean: float
    dof: int
    interval: tuple  # 95% interval for the mean over the frame count


def nees(est: TrajectoryLog, gt: TrajectoryLog) -> NeesResult:
    """Pose normalized estimation error squared against the logged covariance."""
    if est.covariances is None:
        raise ValueError("estimate log carries no covariance")
    ie, ig = associate(est, gt)
    if len(ie) < 1:
        raise NoOverlap("no associated pairs")
    vals = np.empty(len(ie))
    for k, (a, b) in enumerate(zip(ie, ig)):
        R_est_GtoI = quat_to_rot(est.quats[a]).T
        R_gt_GtoI = quat_to_rot(gt.quats[b]).T
        e = np.empty(6)
        e[:3] = rotation_error(R_gt_GtoI, R_est_GtoI)
        e[3:] = gt.positions[ig[k]] - est.positions[ie[k]]
        P = est.covariances[a]
        try:
            vals[k] = e @ np.linalg.solve(P, e)
        except np.linalg.LinAlgError as exc:
            raise SingularCovariance(f"frame {a}: {exc}") from exc
    n = len(vals)
    dof = 6
    interval = (chi2.ppf(0.025, n * dof) / n, chi2.ppf(0.975, n * dof) / n)
    return NeesResult(vals, float(vals.mean()), dof, interval)


def recall_curve(est: TrajectoryLog, gt: TrajectoryLog, thresholds) -> np.ndarray:
    """Fraction of frames with position error under each threshold."""
    ie, ig = associate(est, gt)
    err = np.linalg.norm(est.positions[ie] - gt.positions[ig], axis=1)
    thresholds = np.asarray(thresholds, dtype=float)
    if len(err) == 0:
        return np.zeros(len(thresholds))
    return np.array([(err <= th).mean() for th in thresholds])
