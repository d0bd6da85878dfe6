"""Filter state vector, joint covariance, clone window, and EKF mechanics.

Error-state layout (all row/column indices into the covariance):

    [0:3]   IMU orientation error theta        (R_true = Exp(-theta) R_est)
    [3:6]   IMU position error
    [6:9]   IMU velocity error
    [9:12]  gyro bias error
    [12:15] accel bias error
    then 6 per pose clone in timestamp order (theta, position)
    then 3 per in-state landmark in insertion order

The filter loop is the single writer of a StateVector; everything here
mutates in place and re-symmetrizes the covariance after each operation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import chi2

from .geometry import Pose, quat_identity, quat_multiply, quat_normalize, rotvec_to_quat

IMU_DIM = 15
CLONE_DIM = 6
LANDMARK_DIM = 3

ATT = slice(0, 3)
POS = slice(3, 6)
VEL = slice(6, 9)
BG = slice(9, 12)
BA = slice(12, 15)


class UnknownId(Exception):
    """Requested clone timestamp or landmark id is not in the state."""


class InnovationTestFailure(Exception):
    """Measurement rejected by the chi-square innovation gate."""


class SingularInnovation(Exception):
    """Innovation covariance is not positive definite."""


@lru_cache(maxsize=256)
def chi2_threshold(dof: int, prob: float = 0.95) -> float:
    return float(chi2.ppf(prob, dof))


def chi2_gate(r, S, dof: int, prob: float = 0.95) -> bool:
    """Mahalanobis gate: accept iff r' S^-1 r < chi-square quantile."""
    r = np.asarray(r, dtype=float)
    try:
        factor = cho_factor(np.asarray(S, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise SingularInnovation(str(exc)) from exc
    gamma = float(r @ cho_solve(factor, r))
    return gamma < chi2_threshold(dof, prob)


@dataclass
class ImuState:
    q: np.ndarray = field(default_factory=quat_identity)  # {G}->{I}
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q = quat_normalize(np.asarray(self.q, dtype=float))
        for name in ("p", "v", "bg", "ba"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3).copy())

    def pose(self) -> Pose:
        return Pose(self.q.copy(), self.p.copy())

    def copy(self) -> "ImuState":
        return ImuState(self.q.copy(), self.p.copy(), self.v.copy(), self.bg.copy(), self.ba.copy())


class StateVector:
    """IMU state + clone window + in-state landmarks + joint covariance."""

    def __init__(self, imu: ImuState | None = None, time: float = 0.0,
                 P0: np.ndarray | None = None, max_clones: int = 11):
        self.imu = imu if imu is not None else ImuState()
        self.time = float(time)
        self.clones: dict[float, Pose] = {}
        self.landmarks: dict[int, np.ndarray] = {}
        # first-estimate linearization points: frozen at insertion so the
        # measurement Jacobians keep a consistent nullspace across updates
        self.clone_fej: dict[float, Pose] = {}
        self.landmark_fej: dict[int, np.ndarray] = {}
        self.max_clones = int(max_clones)
        if P0 is None:
            P0 = np.zeros((IMU_DIM, IMU_DIM))
        P0 = np.asarray(P0, dtype=float)
        if P0.shape != (IMU_DIM, IMU_DIM):
            raise ValueError("initial covariance must be 15x15")
        self.P = P0.copy()

    # ---- indexing ------------------------------------------------------

    @property
    def dim(self) -> int:
        return IMU_DIM + CLONE_DIM * len(self.clones) + LANDMARK_DIM * len(self.landmarks)

    def clone_index(self, timestamp: float) -> int:
        for i, t in enumerate(self.clones):
            if t == timestamp:
                return IMU_DIM + CLONE_DIM * i
        raise UnknownId(f"no clone at t={timestamp}")

    def landmark_index(self, feature_id: int) -> int:
        base = IMU_DIM + CLONE_DIM * len(self.clones)
        for i, fid in enumerate(self.landmarks):
            if fid == feature_id:
                return base + LANDMARK_DIM * i
        raise UnknownId(f"no landmark {feature_id}")

    def newest_clone_time(self) -> float | None:
        return next(reversed(self.clones)) if self.clones else None

    def oldest_clone_time(self) -> float | None:
        return next(iter(self.clones)) if self.clones else None

    # ---- structural operations ----------------------------------------

    def augment_clone(self, timestamp: float) -> None:
        """Clone the current IMU pose into the window at ``timestamp``.

        The cloning map is an exact copy of the IMU orientation/position
        error, so the covariance is augmented by duplicating those rows and
        columns at the new clone's block.
        """
        newest = self.newest_clone_time()
        if newest is not None and timestamp <= newest:
            raise ValueError(f"clone time {timestamp} not after newest clone {newest}")

        n_clone_rows = IMU_DIM + CLONE_DIM * len(self.clones)
        # source row in the old covariance for every row of the new one
        src = list(range(n_clone_rows)) + list(range(6)) + list(range(n_clone_rows, self.dim))
        idx = np.asarray(src)
        self.P = self.P[np.ix_(idx, idx)]

        # rebuild landmark-after-clone ordering by inserting the clone entry
        self.clones[timestamp] = self.imu.pose()
        self.clone_fej[timestamp] = self.imu.pose()
        self._symmetrize()

    def marginalize(self, clone_times=(), landmark_ids=()) -> None:
        """Drop clones/landmarks: delete their covariance rows and columns."""
        drop = []
        for t in clone_times:
            drop.extend(range(self.clone_index(t), self.clone_index(t) + CLONE_DIM))
        for fid in landmark_ids:
            drop.extend(range(self.landmark_index(fid), self.landmark_index(fid) + LANDMARK_DIM))
        if not drop:
            return
        self.P = np.delete(np.delete(self.P, drop, axis=0), drop, axis=1)
        for t in clone_times:
            del self.clones[t]
            self.clone_fej.pop(t, None)
        for fid in landmark_ids:
            del self.landmarks[fid]
            self.landmark_fej.pop(fid, None)

    def add_landmark(self, feature_id: int, position, P_ff: np.ndarray,
                     P_fx: np.ndarray) -> None:
        """Append a landmark block with given covariance and state cross-covariance."""
        if feature_id in self.landmarks:
            raise ValueError(f"landmark {feature_id} already in state")
        n = self.dim
        P_new = np.zeros((n + 3, n + 3))
        P_new[:n, :n] = self.P
        P_new[n:, n:] = P_ff
        P_new[n:, :n] = P_fx
        P_new[:n, n:] = P_fx.T
        self.P = P_new
        self.landmarks[feature_id] = np.asarray(position, dtype=float).reshape(3).copy()
        self.landmark_fej[feature_id] = self.landmarks[feature_id].copy()
        self._symmetrize()

    # ---- EKF update ----------------------------------------------------

    def ekf_update(self, H: np.ndarray, r: np.ndarray, R_meas: np.ndarray,
                   gate_prob: float | None = None) -> None:
        """Standard EKF update with Joseph-form covariance.

        ``H`` maps the full error state to the residual.  With ``gate_prob``
        set, the stacked innovation is chi-square gated first and
        InnovationTestFailure raised on rejection (state untouched).
        """
        H = np.atleast_2d(np.asarray(H, dtype=float))
        r = np.atleast_1d(np.asarray(r, dtype=float))
        R_meas = np.atleast_2d(np.asarray(R_meas, dtype=float))
        if H.shape[1] != self.dim:
            raise ValueError(f"H has {H.shape[1]} cols, state dim is {self.dim}")

        S = H @ self.P @ H.T + R_meas
        S = 0.5 * (S + S.T)
        if gate_prob is not None:
            if not chi2_gate(r, S, dof=len(r), prob=gate_prob):
                raise InnovationTestFailure(f"{len(r)}-dof innovation gate failed")

        try:
            factor = cho_factor(S)
        except np.linalg.LinAlgError as exc:
            raise SingularInnovation(str(exc)) from exc
        K = cho_solve(factor, H @ self.P).T

        I_KH = np.eye(self.dim) - K @ H
        self.P = I_KH @ self.P @ I_KH.T + K @ R_meas @ K.T
        self._symmetrize()
        self._apply_correction(K @ r)

    def _apply_correction(self, dx: np.ndarray) -> None:
        self.imu.q = quat_normalize(quat_multiply(rotvec_to_quat(-dx[ATT]), self.imu.q))
        self.imu.p += dx[POS]
        self.imu.v += dx[VEL]
        self.imu.bg += dx[BG]
        self.imu.ba += dx[BA]
        for i, pose in enumerate(self.clones.values()):
            j = IMU_DIM + CLONE_DIM * i
            pose.q = quat_normalize(quat_multiply(rotvec_to_quat(-dx[j:j + 3]), pose.q))
            pose.t += dx[j + 3:j + 6]
        base = IMU_DIM + CLONE_DIM * len(self.clones)
        for i, pos in enumerate(self.landmarks.values()):
            j = base + LANDMARK_DIM * i
            pos += dx[j:j + 3]

    def _symmetrize(self) -> None:
        self.P = 0.5 * (self.P + self.P.T)

    # ---- utilities ------------------------------------------------------

    def pose_covariance(self) -> np.ndarray:
        """6x6 covariance of the current IMU (orientation, position) error."""
        return self.P[:6, :6].copy()

    def copy(self) -> "StateVector":
        out = StateVector(self.imu.copy(), self.time, max_clones=self.max_clones)
        out.clones = {t: pose.copy() for t, pose in self.clones.items()}
        out.landmarks = {fid: p.copy() for fid, p in self.landmarks.items()}
        out.clone_fej = {t: pose.copy() for t, pose in self.clone_fej.items()}
        out.landmark_fej = {fid: p.copy() for fid, p in self.landmark_fej.items()}
        out.P = self.P.copy()
        return out


def initial_covariance(sigma_theta=0.002, sigma_p=0.001, sigma_v=0.005,
                       sigma_bg=1e-4, sigma_ba=1e-3) -> np.ndarray:
    d = np.concatenate([
        np.full(3, sigma_theta ** 2),
        np.full(3, sigma_p ** 2),
        np.full(3, sigma_v ** 2),
        np.full(3, sigma_bg ** 2),
        np.full(3, sigma_ba ** 2),
    ])
    return np.diag(d)


def select_clone_to_marginalize(state: StateVector, protected=()) -> float | None:
    """Oldest clone not in ``protected`` once the window is over capacity.

    A clone anchoring an in-flight map update is passed in ``protected`` by
    the driver so a late render is never applied against a dropped clone.
    """
    if len(state.clones) <= state.max_clones:
        return None
    for t in state.clones:
        if t not in protected:
            return t
    return None
