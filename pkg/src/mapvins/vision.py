"""Camera model, real-image measurement updates, and multi-view triangulation.

Measurements are normalized image coordinates (intrinsics applied at
ingestion), observed from pose clones through the extrinsic chain

    p_C = R_CfromI @ R_IfromG @ (p_G - p_IinG) + p_IinC
    z   = [x/z, y/z] + noise.

Features seen by several clones are either marginalized on the spot via the
left-nullspace projection of the stacked feature Jacobian (MSCKF path) or
promoted into the state and updated like any other state block (SLAM path).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .geometry import Pose, quat_identity, quat_to_rot, rot_to_quat, skew
from .state import CLONE_DIM, StateVector, chi2_gate


class BehindCamera(Exception):
    """Point is behind (or too close to) the image plane."""


class InsufficientBaseline(Exception):
    """Viewpoints too close together to triangulate."""


class DivergedRefinement(Exception):
    """Triangulation refinement left reprojection error above the gate."""


@dataclass
class CameraCalibration:
    q_CfromI: np.ndarray = field(default_factory=quat_identity)
    p_IinC: np.ndarray = field(default_factory=lambda: np.zeros(3))
    fx: float = 458.0
    fy: float = 458.0
    cx: float = 212.0
    cy: float = 120.0
    width: int = 424
    height: int = 240
    sigma_px: float = 1.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("intrinsics and image size must be positive")
        self.q_CfromI = np.asarray(self.q_CfromI, dtype=float).reshape(4)
        self.p_IinC = np.asarray(self.p_IinC, dtype=float).reshape(3)

    @property
    def sigma_norm(self) -> float:
        return self.sigma_px / self.fx

    def R_CfromI(self) -> np.ndarray:
        return quat_to_rot(self.q_CfromI)

    def camera_pose_in_global(self, imu_pose: Pose) -> Pose:
        """Pose {G}->{C} of the camera given the IMU pose {G}->{I}."""
        R_CI = self.R_CfromI()
        R_IG = imu_pose.rotation()
        R_CG = R_CI @ R_IG
        p_CinG = imu_pose.t - R_IG.T @ (R_CI.T @ self.p_IinC)
        return Pose(rot_to_quat(R_CG), p_CinG)

    def normalized_bounds(self):
        u0 = (0.0 - self.cx) / self.fx
        u1 = (self.width - self.cx) / self.fx
        v0 = (0.0 - self.cy) / self.fy
        v1 = (self.height - self.cy) / self.fy
        return u0, u1, v0, v1

    def pixel_to_normalized(self, px) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        return np.stack(
            [(px[..., 0] - self.cx) / self.fx, (px[..., 1] - self.cy) / self.fy], axis=-1
        )

    def normalized_to_pixel(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return np.stack(
            [uv[..., 0] * self.fx + self.cx, uv[..., 1] * self.fy + self.cy], axis=-1
        )


@dataclass
class BearingMeasurement:
    feature_id: int
    t: float
    uv: np.ndarray  # normalized coordinates
    sigma: float

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=float).reshape(2)
        if not np.isfinite(self.uv).all():
            raise ValueError("bearing must be finite")


@dataclass
class FeatureTrack:
    feature_id: int
    measurements: list = field(default_factory=list)
    status: str = "tracking"  # tracking | lost | in-state

    def add(self, meas: BearingMeasurement) -> None:
        if self.measurements and meas.t <= self.measurements[-1].t:
            raise ValueError("one measurement per clone, increasing time")
        self.measurements.append(meas)

    def __len__(self) -> int:
        return len(self.measurements)

    @property
    def first_time(self) -> float:
        return self.measurements[0].t

    @property
    def last_time(self) -> float:
        return self.measurements[-1].t


DEFAULT_Z_MIN = 0.05


def project(p_cam, z_min: float = DEFAULT_Z_MIN) -> np.ndarray:
    p_cam = np.asarray(p_cam, dtype=float)
    if p_cam[2] <= z_min:
        raise BehindCamera(f"z={p_cam[2]:.4f} <= {z_min}")
    return p_cam[:2] / p_cam[2]


def projection_jacobian(p_cam) -> np.ndarray:
    x, y, z = np.asarray(p_cam, dtype=float)
    iz = 1.0 / z
    return np.array([[iz, 0.0, -x * iz * iz], [0.0, iz, -y * iz * iz]])


def to_camera_frame(clone_pose: Pose, calib: CameraCalibration, p_f) -> np.ndarray:
    R_CI = calib.R_CfromI()
    R_IG = clone_pose.rotation()
    return R_CI @ (R_IG @ (np.asarray(p_f, dtype=float) - clone_pose.t)) + calib.p_IinC


def linearize_real(uv_meas, clone_pose: Pose, calib: CameraCalibration, p_f_hat,
                   z_min: float = DEFAULT_Z_MIN, fej_pose: Pose | None = None,
                   fej_point=None):
    """Residual and Jacobians of a bearing seen from a clone.

    Returns (r, H_T, H_f): H_T is 2x6 over the clone (theta, position) error,
    H_f is 2x3 over the global feature position.  The residual always uses
    the current estimates; when first-estimate linearization points are
    supplied, the Jacobians are evaluated there instead, so a state-resident
    landmark is always linearized at one fixed point across its lifetime.
    """
    p_f_hat = np.asarray(p_f_hat, dtype=float)
    p_c = to_camera_frame(clone_pose, calib, p_f_hat)
    z_hat = project(p_c, z_min)

    lin_pose = fej_pose if fej_pose is not None else clone_pose
    lin_point = np.asarray(fej_point, dtype=float) if fej_point is not None else p_f_hat
    p_c_lin = to_camera_frame(lin_pose, calib, lin_point)
    if p_c_lin[2] <= z_min:
        raise BehindCamera(f"linearization point z={p_c_lin[2]:.4f} <= {z_min}")
    H_L = projection_jacobian(p_c_lin)

    R_CI = calib.R_CfromI()
    R_IG = lin_pose.rotation()
    d_theta = R_CI @ skew(R_IG @ (lin_point - lin_pose.t))
    d_pos = -R_CI @ R_IG
    H_T = np.hstack([H_L @ d_theta, H_L @ d_pos])
    H_f = H_L @ (R_CI @ R_IG)
    r = np.asarray(uv_meas, dtype=float) - z_hat
    return r, H_T, H_f


# ---- triangulation ---------------------------------------------------------


@dataclass
class TriangulationResult:
    point: np.ndarray
    converged: bool
    rms: float              # normalized-coordinate reprojection RMS
    JtJ: np.ndarray = None  # Gauss-Newton normal matrix at the solution


def triangulate_views(rotations, centers, bearings, b_min: float = 0.02,
                      reproj_gate: float = 0.011, max_iters: int = 10,
                      z_min: float = DEFAULT_Z_MIN) -> TriangulationResult:
    """DLT plus Gauss-Newton refinement over generic calibrated views.

    ``rotations`` are {G}->{view} matrices, ``centers`` the view origins in
    {G}, ``bearings`` normalized coordinates.  The default reprojection gate
    is a 5 px equivalent at fx ~ 458.
    """
    R = np.asarray(rotations, dtype=float).reshape(-1, 3, 3)
    c = np.asarray(centers, dtype=float).reshape(-1, 3)
    z = np.asarray(bearings, dtype=float).reshape(-1, 2)
    m = R.shape[0]
    if m < 2:
        raise InsufficientBaseline(f"need >= 2 views, got {m}")
    spread = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=2).max()
    if spread < b_min:
        raise InsufficientBaseline(f"baseline {spread:.4f} m below {b_min}")

    A = np.empty((2 * m, 3))
    A[0::2] = R[:, 0, :] - z[:, 0:1] * R[:, 2, :]
    A[1::2] = R[:, 1, :] - z[:, 1:2] * R[:, 2, :]
    b = np.empty(2 * m)
    b[0::2] = np.einsum("mi,mi->m", A[0::2], c)
    b[1::2] = np.einsum("mi,mi->m", A[1::2], c)
    p, *_ = np.linalg.lstsq(A, b, rcond=None)

    def residuals_and_jacobian(pt):
        p_cam = np.einsum("mij,mj->mi", R, pt - c)
        if p_cam[:, 2].min() <= z_min:
            return None, None
        res = (z - p_cam[:, :2] / p_cam[:, 2:3]).reshape(-1)
        iz = 1.0 / p_cam[:, 2]
        H_L = np.zeros((m, 2, 3))
        H_L[:, 0, 0] = iz
        H_L[:, 1, 1] = iz
        H_L[:, 0, 2] = -p_cam[:, 0] * iz * iz
        H_L[:, 1, 2] = -p_cam[:, 1] * iz * iz
        return res, np.einsum("mij,mjk->mik", H_L, R).reshape(2 * m, 3)

    converged = False
    for _ in range(max_iters):
        r_all, J = residuals_and_jacobian(p)
        if r_all is None:
            raise DivergedRefinement("point moved behind a view during refinement")
        try:
            delta = np.linalg.solve(J.T @ J, J.T @ r_all)
        except np.linalg.LinAlgError as exc:
            raise InsufficientBaseline("normal equations singular") from exc
        p = p + delta
        if np.linalg.norm(delta) < 1e-10:
            converged = True
            break

    r_all, J = residuals_and_jacobian(p)
    if r_all is None:
        raise DivergedRefinement("refined point behind a view")
    rms = float(np.sqrt(np.mean(r_all ** 2)))
    if rms > reproj_gate:
        raise DivergedRefinement(f"reprojection rms {rms:.5f} above gate {reproj_gate}")
    return TriangulationResult(p, converged, rms, J.T @ J)


def triangulate(track: FeatureTrack, clones: dict, calib: CameraCalibration,
                cams: "CloneCameraCache | None" = None,
                **kwargs) -> TriangulationResult:
    """Triangulate a track against the clone window it was observed from."""
    rotations, centers, bearings = [], [], []
    for meas in track.measurements:
        if cams is not None:
            entry = cams.cur.get(meas.t)
            if entry is None:
                continue
            rotations.append(entry[0])
            centers.append(entry[1])
        else:
            clone = clones.get(meas.t)
            if clone is None:
                continue
            cam = calib.camera_pose_in_global(clone)
            rotations.append(cam.rotation())
            centers.append(cam.t)
        bearings.append(meas.uv)
    if len(rotations) < 2:
        raise InsufficientBaseline("fewer than 2 usable measurements")
    return triangulate_views(np.array(rotations), np.array(centers),
                             np.array(bearings), **kwargs)


# ---- stacked feature systems ------------------------------------------------


class CloneCameraCache:
    """Per-update camera frames of every clone, current and first-estimate.

    Rebuilding rotation matrices per measurement row dominates the runtime
    otherwise; one cache per update batch amortizes them across features.
    """

    def __init__(self, state: StateVector, calib: CameraCalibration):
        self.R_CI = calib.R_CfromI()
        self.p_IinC = calib.p_IinC
        self.cur = {}
        self.lin = {}
        for t, pose in state.clones.items():
            self.cur[t] = self._cam(pose)
            fej = state.clone_fej.get(t)
            self.lin[t] = self.cur[t] if fej is None else self._cam(fej)

    def _cam(self, pose: Pose):
        R_IG = pose.rotation()
        R_cam = self.R_CI @ R_IG
        center = pose.t - R_IG.T @ (self.R_CI.T @ self.p_IinC)
        return R_cam, center, R_IG, pose.t


def build_track_system(state: StateVector, track: FeatureTrack,
                       calib: CameraCalibration, p_f_hat, p_f_fej=None,
                       cams: CloneCameraCache | None = None,
                       z_min: float = DEFAULT_Z_MIN, use_fej: bool = False):
    """Stack residual rows of a track over every clone that saw it.

    Returns (r, H_x, H_f, sigmas); H_x spans the full error state.  By
    default everything is linearized at the current estimates, which is the
    self-consistent choice when the feature is triangulated from those same
    estimates and eliminated on the spot.  ``use_fej`` switches the clone
    Jacobians to the first-estimate poses for state-resident features.
    """
    if cams is None:
        cams = CloneCameraCache(state, calib)
    p_f_hat = np.asarray(p_f_hat, dtype=float)
    p_lin = np.asarray(p_f_fej, dtype=float) if p_f_fej is not None else p_f_hat

    used = [m for m in track.measurements if m.t in state.clones]
    if not used:
        raise ValueError("track has no measurements inside the window")
    m = len(used)
    R_cur = np.empty((m, 3, 3))
    c_cur = np.empty((m, 3))
    R_lin = np.empty((m, 3, 3))
    c_lin = np.empty((m, 3))
    R_IG_lin = np.empty((m, 3, 3))
    t_lin = np.empty((m, 3))
    uv = np.empty((m, 2))
    sig = np.empty(m)
    lin_src = cams.lin if use_fej else cams.cur
    for i, meas in enumerate(used):
        R_cur[i], c_cur[i], _, _ = cams.cur[meas.t]
        R_lin[i], c_lin[i], R_IG_lin[i], t_lin[i] = lin_src[meas.t]
        uv[i] = meas.uv
        sig[i] = meas.sigma

    pc = np.einsum("mij,mj->mi", R_cur, p_f_hat - c_cur)
    pc_lin = np.einsum("mij,mj->mi", R_lin, p_lin - c_lin)
    if pc[:, 2].min() <= z_min or pc_lin[:, 2].min() <= z_min:
        raise BehindCamera("feature behind a clone camera")
    r = (uv - pc[:, :2] / pc[:, 2:3]).reshape(-1)

    iz = 1.0 / pc_lin[:, 2]
    H_L = np.zeros((m, 2, 3))
    H_L[:, 0, 0] = iz
    H_L[:, 1, 1] = iz
    H_L[:, 0, 2] = -pc_lin[:, 0] * iz * iz
    H_L[:, 1, 2] = -pc_lin[:, 1] * iz * iz

    v = np.einsum("mij,mj->mi", R_IG_lin, p_lin - t_lin)
    skew_v = np.zeros((m, 3, 3))
    skew_v[:, 0, 1] = -v[:, 2]
    skew_v[:, 0, 2] = v[:, 1]
    skew_v[:, 1, 0] = v[:, 2]
    skew_v[:, 1, 2] = -v[:, 0]
    skew_v[:, 2, 0] = -v[:, 1]
    skew_v[:, 2, 1] = v[:, 0]
    d_theta = np.einsum("ij,mjk->mik", cams.R_CI, skew_v)
    H_theta = np.einsum("mij,mjk->mik", H_L, d_theta)
    H_pos = -np.einsum("mij,mjk->mik", H_L, R_lin)
    H_f = np.einsum("mij,mjk->mik", H_L, R_lin)

    H_x = np.zeros((2 * m, state.dim))
    for i, meas in enumerate(used):
        j = state.clone_index(meas.t)
        H_x[2 * i:2 * i + 2, j:j + 3] = H_theta[i]
        H_x[2 * i:2 * i + 2, j + 3:j + 6] = H_pos[i]
    sigmas = np.repeat(sig, 2)
    return r, H_x, H_f.reshape(2 * m, 3), sigmas


def left_nullspace(H_f: np.ndarray) -> np.ndarray:
    """Orthonormal basis N of the left nullspace: N' H_f = 0."""
    Q, R, _ = scipy.linalg.qr(H_f, mode="full", pivoting=True)
    diag = np.abs(np.diag(R[: H_f.shape[1], : H_f.shape[1]]))
    rank = int(np.sum(diag > max(diag.max(), 1e-30) * 1e-12)) if diag.size else 0
    return Q[:, rank:]


def project_feature_system(r, H_x, H_f, R_noise):
    """Eliminate the feature block by projecting onto the left nullspace of H_f."""
    N = left_nullspace(H_f)
    H_o = N.T @ H_x
    r_o = N.T @ r
    R_o = N.T @ R_noise @ N
    return r_o, H_o, R_o


@dataclass
class UpdateReport:
    used: list = field(default_factory=list)
    rejected: list = field(default_factory=list)
    rows: int = 0


def msckf_update(state: StateVector, tracks, calib: CameraCalibration,
                 gate_prob: float = 0.95, min_track_len: int = 2) -> UpdateReport:
    """Marginalize lost feature tracks into a single stacked EKF update.

    Each track is triangulated, linearized over its clones, projected onto
    the left nullspace of its feature Jacobian, and chi-square gated; the
    survivors are stacked into one update.  Per-feature failures are
    recorded, never fatal.
    """
    report = UpdateReport()
    rs, Hs, Rs = [], [], []
    cams = CloneCameraCache(state, calib)
    for track in tracks:
        if len(track) < min_track_len:
            report.rejected.append((track.feature_id, "short-track"))
            continue
        try:
            tri = triangulate(track, state.clones, calib, cams=cams)
        except (InsufficientBaseline, DivergedRefinement, BehindCamera) as exc:
            report.rejected.append((track.feature_id, type(exc).__name__))
            continue
        try:
            r, H_x, H_f, sigmas = build_track_system(state, track, calib, tri.point,
                                                     cams=cams)
        except (BehindCamera, ValueError) as exc:
            report.rejected.append((track.feature_id, type(exc).__name__))
            continue
        R_noise = np.diag(sigmas ** 2)
        r_o, H_o, R_o = project_feature_system(r, H_x, H_f, R_noise)
        if H_o.shape[0] == 0:
            report.rejected.append((track.feature_id, "no-rows"))
            continue
        S = H_o @ state.P @ H_o.T + R_o
        if not chi2_gate(r_o, 0.5 * (S + S.T), dof=len(r_o), prob=gate_prob):
            report.rejected.append((track.feature_id, "chi2"))
            continue
        rs.append(r_o)
        Hs.append(H_o)
        Rs.append(R_o)
        report.used.append(track.feature_id)

    if rs:
        r_all = np.concatenate(rs)
        H_all = np.vstack(Hs)
        R_all = scipy.linalg.block_diag(*Rs)
        state.ekf_update(H_all, r_all, R_all)
        report.rows = len(r_all)
    return report


def slam_update(state: StateVector, measurements, calib: CameraCalibration,
                gate_prob: float = 0.95) -> UpdateReport:
    """EKF update of in-state landmarks observed at the current clone."""
    report = UpdateReport()
    rs, Hs, sig = [], [], []
    for meas in measurements:
        if meas.feature_id not in state.landmarks:
            report.rejected.append((meas.feature_id, "not-in-state"))
            continue
        if meas.t not in state.clones:
            report.rejected.append((meas.feature_id, "no-clone"))
            continue
        clone = state.clones[meas.t]
        p_f = state.landmarks[meas.feature_id]
        try:
            r, H_T, H_f = linearize_real(
                meas.uv, clone, calib, p_f,
                fej_point=state.landmark_fej.get(meas.feature_id))
        except BehindCamera:
            report.rejected.append((meas.feature_id, "BehindCamera"))
            continue
        H = np.zeros((2, state.dim))
        j = state.clone_index(meas.t)
        H[:, j:j + CLONE_DIM] = H_T
        k = state.landmark_index(meas.feature_id)
        H[:, k:k + 3] = H_f
        S = H @ state.P @ H.T + meas.sigma ** 2 * np.eye(2)
        if not chi2_gate(r, S, dof=2, prob=gate_prob):
            report.rejected.append((meas.feature_id, "chi2"))
            continue
        rs.append(r)
        Hs.append(H)
        sig.extend([meas.sigma ** 2, meas.sigma ** 2])
        report.used.append(meas.feature_id)

    if rs:
        state.ekf_update(np.vstack(Hs), np.concatenate(rs), np.diag(sig))
        report.rows = 2 * len(report.used)
    return report


def promote_landmark(state: StateVector, track: FeatureTrack,
                     calib: CameraCalibration, gate_prob: float = 0.95,
                     max_rel_depth_sigma: float = 0.05,
                     init_inflation: float = 1.0) -> bool:
    """Move a long-lived track into the state with delayed initialization.

    QR-split of the stacked track system: the three feature-determining rows
    fix the landmark covariance and its cross-covariance with the state; the
    remaining rows are applied as a standard projected update afterwards.
    Requires (near-)uniform measurement noise across the track.

    Weakly triangulated features are refused: when the predicted position
    sigma exceeds ``max_rel_depth_sigma`` times the feature range, the
    linearization the init covariance rests on is no longer trustworthy and
    the feature stays on the marginalization path.
    """
    if track.feature_id in state.landmarks:
        return False
    try:
        cams = CloneCameraCache(state, calib)
        tri = triangulate(track, state.clones, calib, cams=cams)
        r, H_x, H_f, sigmas = build_track_system(state, track, calib, tri.point,
                                                 cams=cams)
    except (InsufficientBaseline, DivergedRefinement, BehindCamera, ValueError):
        return False
    if not tri.converged or H_f.shape[0] < 4:
        return False
    sigma = float(np.mean(sigmas))

    newest = state.clones[next(reversed(state.clones))]
    depth = np.linalg.norm(tri.point - newest.t)
    try:
        worst_var = sigma ** 2 * np.linalg.eigvalsh(np.linalg.inv(tri.JtJ)).max()
    except np.linalg.LinAlgError:
        return False
    if np.sqrt(worst_var) > max_rel_depth_sigma * depth:
        return False

    Q, Rq = np.linalg.qr(H_f, "complete")
    R1 = Rq[:3, :3]
    if np.abs(np.diag(R1)).min() < 1e-10:
        return False
    Q1, Q2 = Q[:, :3], Q[:, 3:]
    H1 = Q1.T @ H_x
    H2 = Q2.T @ H_x
    r2 = Q2.T @ r

    S = H2 @ state.P @ H2.T + sigma ** 2 * np.eye(H2.shape[0])
    if not chi2_gate(r2, 0.5 * (S + S.T), dof=len(r2), prob=gate_prob):
        return False

    R1_inv = np.linalg.inv(R1)
    P_ff = R1_inv @ (H1 @ state.P @ H1.T + sigma ** 2 * np.eye(3)) @ R1_inv.T
    P_fx = -R1_inv @ H1 @ state.P
    # inflating only the landmark block keeps the joint covariance PSD and
    # absorbs the linearization optimism of weak-parallax initialization
    P_ff = init_inflation * P_ff

    state.add_landmark(track.feature_id, tri.point, P_ff, P_fx)
    H2_aug = np.hstack([H2, np.zeros((H2.shape[0], 3))])
    state.ekf_update(H2_aug, r2, sigma ** 2 * np.eye(H2.shape[0]))
    track.status = "in-state"
    return True
