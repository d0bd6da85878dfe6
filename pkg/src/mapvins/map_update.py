"""Tightly-coupled updates from views synthesized out of the prior map.

Per camera frame the scheduler keeps at most one render in flight: a view is
requested at the current camera pose displaced by a small horizontal offset
(alternating sign, stereo-like baseline), synthesized from the map, and
delivered a configurable number of frames later.  Matched observations
update the filter through a bearing model whose only state dependence is the
feature position; the declared render pose error is folded into the
measurement noise instead of the state.

Measurement chain, with (s, R_m, t_m) the global-to-map sim3 and
(R_r, p_r) the render pose in {N}:

    p_N = s R_m p_G + t_m
    p_K = R_r (p_N - p_r)
    z   = [x/z, y/z] + n'

    H_f = s H_proj R_r R_m
    R'  = sigma_r^2 I + J diag(cov_theta, cov_pos) J',
    J   = s H_proj R_r [skew(R_m p_G) | I]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .geometry import Pose, Sim3Transform, rot_to_quat, skew
from .map_oracle import PriorMap, RenderQuality, RenderedView, render
from .state import StateVector, chi2_gate, chi2_threshold
from .vision import (
    BehindCamera,
    CameraCalibration,
    CloneCameraCache,
    DivergedRefinement,
    InsufficientBaseline,
    build_track_system,
    project_feature_system,
    projection_jacobian,
    triangulate_views,
)

DEFAULT_OFFSET = 0.10  # m, horizontal render baseline


class StaleRender(Exception):
    """Render completed after its trigger clone left the window."""


class BehindRenderCamera(Exception):
    """Feature behind (or too close to) the rendered viewpoint."""


@dataclass
class RenderRequest:
    trigger_time: float
    requested_pose_n: Pose
    offset_cam: np.ndarray
    seed: int


def plan_render(state: StateVector, pmap: PriorMap, calib: CameraCalibration,
                offset: float = DEFAULT_OFFSET, sign: float = 1.0,
                seed: int = 0) -> RenderRequest:
    """Render request at the current camera pose plus a horizontal offset.

    The offset is applied along the camera x-axis in meters; the requested
    orientation equals the current camera orientation mapped into {N}.
    """
    cam = calib.camera_pose_in_global(state.imu.pose())
    offset_cam = np.array([sign * offset, 0.0, 0.0])
    p_k_g = cam.t + cam.rotation().T @ offset_cam

    T_ng = pmap.map_to_global.inverse()
    R_kn = cam.rotation() @ T_ng.rotation().T
    pose_n = Pose(rot_to_quat(R_kn), T_ng.apply(p_k_g))
    return RenderRequest(state.time, pose_n, offset_cam, seed)


def nerf_bearing_model(p_f_g, render_pose_n: Pose, g_to_n: Sim3Transform,
                       z_min: float = 0.05) -> np.ndarray:
    """Predicted bearing of a global feature in a rendered view."""
    p_n = g_to_n.apply(np.asarray(p_f_g, dtype=float))
    p_k = render_pose_n.rotation() @ (p_n - render_pose_n.t)
    if p_k[2] <= z_min * g_to_n.s:
        raise BehindRenderCamera(f"z={p_k[2]:.4f} (map units)")
    return p_k[:2] / p_k[2]


def _nerf_row(z_n, p_f_hat_g, render_pose_n: Pose, g_to_n: Sim3Transform,
              z_min: float, p_f_fej=None):
    """Residual, feature Jacobian, and render pose-error Jacobian of one bearing."""
    p_f_hat_g = np.asarray(p_f_hat_g, dtype=float)
    p_n = g_to_n.apply(p_f_hat_g)
    R_r = render_pose_n.rotation()
    p_k = R_r @ (p_n - render_pose_n.t)
    if p_k[2] <= z_min * g_to_n.s:
        raise BehindRenderCamera(f"z={p_k[2]:.4f} (map units)")

    p_lin = np.asarray(p_f_fej, dtype=float) if p_f_fej is not None else p_f_hat_g
    p_k_lin = R_r @ (g_to_n.apply(p_lin) - render_pose_n.t)
    if p_k_lin[2] <= z_min * g_to_n.s:
        raise BehindRenderCamera(f"linearization point z={p_k_lin[2]:.4f}")

    s = g_to_n.s
    R_m = g_to_n.rotation()
    H_L = projection_jacobian(p_k_lin)
    H_f = s * H_L @ R_r @ R_m
    J = s * H_L @ R_r @ np.hstack([skew(R_m @ p_lin), np.eye(3)])
    r = np.asarray(z_n, dtype=float) - p_k[:2] / p_k[2]
    return r, H_f, J


def linearize_nerf(z_n, p_f_hat_g, render_pose_n: Pose, g_to_n: Sim3Transform,
                   sigma_r: float, theta_cov, pos_cov, z_min: float = 0.05,
                   p_f_fej=None):
    """Residual, feature Jacobian, and pose-error-inflated noise covariance.

    The residual uses the current feature estimate; the Jacobian chain is
    evaluated at the first-estimate point when one is supplied.
    """
    r, H_f, J = _nerf_row(z_n, p_f_hat_g, render_pose_n, g_to_n, z_min, p_f_fej)
    Sigma = np.zeros((6, 6))
    Sigma[:3, :3] = theta_cov
    Sigma[3:, 3:] = pos_cov
    R_prime = sigma_r ** 2 * np.eye(2) + J @ Sigma @ J.T
    return r, H_f, R_prime


def virtual_view_in_global(render_pose_n: Pose, pmap: PriorMap):
    """Metric-equivalent camera of a rendered view: ({G}->{K} rotation, center)."""
    T_ng = pmap.map_to_global.inverse()
    R_kg = render_pose_n.rotation() @ T_ng.rotation()
    center = pmap.map_to_global.apply(render_pose_n.t)
    return R_kg, center


def make_geometric_gate(state: StateVector, view: RenderedView, pmap: PriorMap,
                        quality: RenderQuality, current_bearing_by_id: dict,
                        fallback_radius: float = 0.10):
    """Filter-consistent verification predicate for descriptor matches.

    In-state landmarks are gated at 3 sigma of the predicted bearing residual
    using the filter covariance plus the inflated render noise; features
    without a state estimate fall back to a bearing-proximity radius against
    the current frame (the render viewpoint is only a small offset away).
    """
    T_ng = pmap.map_to_global.inverse()
    gate2 = chi2_threshold(2, 0.997)

    def verify(feature_id: int, view_uv) -> bool:
        if feature_id in state.landmarks:
            try:
                r, H_f, R_p = linearize_nerf(
                    view_uv, state.landmarks[feature_id], view.requested_pose,
                    T_ng, quality.sigma_r, view.theta_cov, view.pos_cov,
                )
            except BehindRenderCamera:
                return False
            k = state.landmark_index(feature_id)
            S = H_f @ state.P[k:k + 3, k:k + 3] @ H_f.T + R_p
            return float(r @ np.linalg.solve(S, r)) < gate2
        z_c = current_bearing_by_id.get(feature_id)
        if z_c is None:
            return False
        return float(np.linalg.norm(np.asarray(view_uv) - z_c)) < fallback_radius

    return verify


@dataclass
class MapUpdateReport:
    n_matches: int = 0
    slam_used: list = field(default_factory=list)
    msckf_used: list = field(default_factory=list)
    rejected: list = field(default_factory=list)
    skipped: int = 0
    consumed_ids: list = field(default_factory=list)
    rows: int = 0


def apply_map_update(state: StateVector, view: RenderedView, correspondences,
                     tracks: dict, calib: CameraCalibration, pmap: PriorMap,
                     quality: RenderQuality, gate_prob: float = 0.95,
                     min_msckf_track: int = 3, max_msckf_features: int = 15,
                     z_min: float = 0.05) -> MapUpdateReport:
    """Apply one rendered view's correspondences to the filter.

    Matched in-state landmarks take the SLAM path (direct rows over their
    blocks with inflated noise).  Matched tracked-but-not-in-state features
    have the map rows stacked under their real-image rows before the
    nullspace projection, so the eliminated feature passes the map
    information to the clones; those tracks are consumed (reported in
    ``consumed_ids``) so no measurement row is used twice.
    """
    if view.trigger_time is None or view.trigger_time not in state.clones:
        raise StaleRender(f"trigger clone {view.trigger_time} not in window")

    report = MapUpdateReport(n_matches=len(correspondences))
    T_ng = pmap.map_to_global.inverse()
    Sigma_pose = np.zeros((6, 6))
    Sigma_pose[:3, :3] = view.theta_cov
    Sigma_pose[3:, 3:] = view.pos_cov

    slam_rs, slam_Hs, slam_Js = [], [], []
    msckf_candidates = []
    for corr in correspondences:
        fid = corr.feature_id
        z_n = view.bearings[corr.view_index]
        if fid in state.landmarks:
            try:
                r, H_f, J = _nerf_row(z_n, state.landmarks[fid],
                                      view.requested_pose, T_ng, z_min,
                                      p_f_fej=state.landmark_fej.get(fid))
            except BehindRenderCamera:
                report.rejected.append((fid, "BehindRenderCamera"))
                continue
            R_p = quality.sigma_r ** 2 * np.eye(2) + J @ Sigma_pose @ J.T
            H = np.zeros((2, state.dim))
            k = state.landmark_index(fid)
            H[:, k:k + 3] = H_f
            S = H @ state.P @ H.T + R_p
            if not chi2_gate(r, 0.5 * (S + S.T), dof=2, prob=gate_prob):
                report.rejected.append((fid, "chi2"))
                continue
            slam_rs.append(r)
            slam_Hs.append(H)
            slam_Js.append(J)
            report.slam_used.append(fid)
        elif fid in tracks and len(tracks[fid]) >= min_msckf_track:
            msckf_candidates.append((corr, tracks[fid]))
        else:
            report.skipped += 1

    if slam_rs:
        # one render pose error is shared by every observation of the view,
        # so the stacked noise carries the full cross-covariance
        J_all = np.vstack(slam_Js)
        R_joint = (quality.sigma_r ** 2 * np.eye(2 * len(slam_rs))
                   + J_all @ Sigma_pose @ J_all.T)
        state.ekf_update(np.vstack(slam_Hs), np.concatenate(slam_rs), R_joint)
        report.rows += 2 * len(slam_rs)

    # longest tracks carry the most clone information
    msckf_candidates.sort(key=lambda ct: -len(ct[1]))
    R_kg, center_g = virtual_view_in_global(view.requested_pose, pmap)
    cams = CloneCameraCache(state, calib) if msckf_candidates else None

    rs, Hs, Rs = [], [], []
    for corr, track in msckf_candidates[:max_msckf_features]:
        fid = track.feature_id
        z_n = view.bearings[corr.view_index]
        rot_list, cen_list, uv_list = [], [], []
        for meas in track.measurements:
            entry = cams.cur.get(meas.t)
            if entry is None:
                continue
            rot_list.append(entry[0])
            cen_list.append(entry[1])
            uv_list.append(meas.uv)
        if not rot_list:
            report.rejected.append((fid, "no-clones"))
            continue
        rot_list.append(R_kg)
        cen_list.append(center_g)
        uv_list.append(z_n)
        try:
            tri = triangulate_views(np.array(rot_list), np.array(cen_list),
                                    np.array(uv_list))
            r_c, H_x, H_f_c, sigmas = build_track_system(state, track, calib, tri.point,
                                                         cams=cams)
            r_n, H_f_n, R_p = linearize_nerf(
                z_n, tri.point, view.requested_pose, T_ng,
                quality.sigma_r, view.theta_cov, view.pos_cov, z_min)
        except (InsufficientBaseline, DivergedRefinement, BehindCamera,
                BehindRenderCamera, ValueError) as exc:
            report.rejected.append((fid, type(exc).__name__))
            continue

        r_all = np.concatenate([r_c, r_n])
        H_x_all = np.vstack([H_x, np.zeros((2, state.dim))])
        H_f_all = np.vstack([H_f_c, H_f_n])
        R_full = scipy.linalg.block_diag(np.diag(sigmas ** 2), R_p)
        r_o, H_o, R_o = project_feature_system(r_all, H_x_all, H_f_all, R_full)
        if H_o.shape[0] == 0:
            report.rejected.append((fid, "no-rows"))
            continue
        S = H_o @ state.P @ H_o.T + R_o
        if not chi2_gate(r_o, 0.5 * (S + S.T), dof=len(r_o), prob=gate_prob):
            report.rejected.append((fid, "chi2"))
            continue
        rs.append(r_o)
        Hs.append(H_o)
        Rs.append(R_o)
        report.msckf_used.append(fid)
        report.consumed_ids.append(fid)

    if rs:
        r_all = np.concatenate(rs)
        state.ekf_update(np.vstack(Hs), r_all, scipy.linalg.block_diag(*Rs))
        report.rows += len(r_all)
    return report


class RenderScheduler:
    """One render in flight at a time, delivered with a fixed frame latency.

    Deterministic inline mode: the view is synthesized at request time (it
    depends only on request-time data) and handed back ``latency_frames``
    camera frames later, which is observationally identical to a worker
    thread with that processing time.  ``ThreadedRenderScheduler`` is the
    wall-clock variant behind the two-thread flag.
    """

    def __init__(self, pmap: PriorMap, quality: RenderQuality,
                 calib: CameraCalibration, offset: float = DEFAULT_OFFSET,
                 base_seed: int = 0, z_min: float = 0.05, max_range: float = 20.0):
        self.pmap = pmap
        self.quality = quality
        self.calib = calib
        self.offset = offset
        self.base_seed = base_seed
        self.z_min = z_min
        self.max_range = max_range
        self._sign = 1.0
        self._frame = -1
        self._pending: RenderedView | None = None
        self._due = -1
        self.last_request: RenderRequest | None = None
        self.issued = 0
        self.stale = 0

    def in_flight_trigger(self) -> float | None:
        return self._pending.trigger_time if self._pending is not None else None

    def step(self, state: StateVector) -> RenderedView | None:
        """Advance one camera frame; return the view due for application."""
        self._frame += 1
        out = self._take_due()
        if self._pending is None:
            self._issue(state)
            if out is None:
                out = self._take_due()  # zero-latency render completes now
        return out

    def note_stale(self) -> None:
        self.stale += 1

    def _take_due(self):
        if self._pending is not None and self._frame >= self._due:
            out, self._pending = self._pending, None
            return out
        return None

    def _issue(self, state: StateVector) -> None:
        request = self._make_request(state)
        view = self._render(request)
        self._pending = view
        self._due = self._frame + self.quality.latency_frames
        self.issued += 1

    def _make_request(self, state: StateVector) -> RenderRequest:
        seed = int(np.random.SeedSequence([self.base_seed, self._frame]).generate_state(1)[0])
        request = plan_render(state, self.pmap, self.calib, self.offset,
                              self._sign, seed)
        self._sign = -self._sign
        self.last_request = request
        return request

    def _render(self, request: RenderRequest) -> RenderedView:
        return render(self.pmap, request.requested_pose_n, self.quality,
                      seed=request.seed, calib=self.calib, z_min=self.z_min,
                      max_range=self.max_range, trigger_time=request.trigger_time)

    def close(self) -> None:
        pass


class ThreadedRenderScheduler(RenderScheduler):
    """Render worker on its own thread so the filter loop never blocks.

    The filter thread snapshots the request (pose, seed) and hands it to the
    worker; the completed view is consumed at the first frame boundary after
    it finishes.  Delivery timing is wall-clock dependent, so this mode is
    not byte-deterministic; the single-threaded scheduler is the default.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        import queue
        import threading

        self._jobs = queue.Queue(maxsize=1)
        self._results = queue.Queue()
        self._in_flight_req: RenderRequest | None = None
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._worker, daemon=True)
        self._thread.start()

    def _worker(self):
        while not self._stop.is_set():
            try:
                request = self._jobs.get(timeout=0.05)
            except Exception:
                continue
            self._results.put(self._render(request))

    def in_flight_trigger(self):
        req = self._in_flight_req
        return req.trigger_time if req is not None else None

    def step(self, state: StateVector):
        self._frame += 1
        out = None
        try:
            out = self._results.get_nowait()
            self._in_flight_req = None
        except Exception:
            pass
        if self._in_flight_req is None:
            request = self._make_request(state)
            self._in_flight_req = request
            self._jobs.put(request)
            self.issued += 1
        return out

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=1.0)
