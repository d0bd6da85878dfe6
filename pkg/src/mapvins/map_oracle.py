"""Prior map storage and the synthetic render-then-match observation oracle.

A PriorMap holds landmark positions and descriptors in the map frame {N}
plus the sim3 transform taking {N} points to the global frame {G}.  The
render operation synthesizes the observation set a render-and-match
pipeline would produce from a requested viewpoint: it draws a pose error
from the declared covariances, projects the landmarks visible from the
(hidden) actual pose, keeps a visibility fraction, and perturbs bearings
and descriptors.  The estimator-facing view exposes the requested pose and
the error covariance only; the actual pose and the landmark identities stay
hidden behind the truth record.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .geometry import Pose, Sim3Transform, rot_to_quat, rotvec_to_quat, quat_to_rot
from .vision import CameraCalibration

MAP_MAGIC = "MAPVINS-MAP v1"
DESCRIPTOR_DIM = 32


class EmptyWorld(Exception):
    """Cannot build a map from an empty world or trajectory."""


@dataclass
class RenderQuality:
    """Degradation model of the synthesized view."""

    visibility: float = 1.0
    sigma_d: float = 0.0           # descriptor noise (per component, renormalized)
    sigma_r: float = 0.0           # bearing noise, normalized units
    theta_cov: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    pos_cov: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    latency_frames: int = 0

    def __post_init__(self):
        if not (0.0 < self.visibility <= 1.0):
            raise ValueError("visibility must be in (0, 1]")
        if self.latency_frames < 0:
            raise ValueError("latency must be >= 0 frames")
        self.theta_cov = np.asarray(self.theta_cov, dtype=float).reshape(3, 3)
        self.pos_cov = np.asarray(self.pos_cov, dtype=float).reshape(3, 3)
        for C in (self.theta_cov, self.pos_cov):
            if np.linalg.eigvalsh(0.5 * (C + C.T)).min() < -1e-12:
                raise ValueError("pose error covariance must be PSD")

    def pose_covariance(self) -> np.ndarray:
        out = np.zeros((6, 6))
        out[:3, :3] = self.theta_cov
        out[3:, 3:] = self.pos_cov
        return out


_PRESET_TABLE = {
    # visibility, sigma_d, sigma_r (normalized; ~1 px at fx=458 is 0.0022)
    "full": (0.95, 0.05, 0.002),
    "half": (0.85, 0.10, 0.004),
    "low": (0.60, 0.20, 0.008),
}


def quality_preset(name: str, sigma_theta_deg: float = 0.5, sigma_pos: float = 0.01,
                   latency_frames: int = 0) -> RenderQuality:
    """Named render-quality level with the default declared pose error."""
    try:
        visibility, sigma_d, sigma_r = _PRESET_TABLE[name]
    except KeyError:
        raise ValueError(f"unknown quality preset {name!r}; "
                         f"options: {sorted(_PRESET_TABLE)}") from None
    st = np.radians(sigma_theta_deg)
    return RenderQuality(
        visibility=visibility,
        sigma_d=sigma_d,
        sigma_r=sigma_r,
        theta_cov=st ** 2 * np.eye(3),
        pos_cov=sigma_pos ** 2 * np.eye(3),
        latency_frames=latency_frames,
    )


@dataclass
class PriorMap:
    landmark_ids: np.ndarray
    positions_n: np.ndarray
    descriptors: np.ndarray
    keyframes_n: list
    map_to_global: Sim3Transform
    seed: int = 0

    def __post_init__(self):
        self.landmark_ids = np.asarray(self.landmark_ids, dtype=np.int64)
        self.positions_n = np.asarray(self.positions_n, dtype=float).reshape(-1, 3)
        self.descriptors = np.asarray(self.descriptors, dtype=float)
        if len(np.unique(self.landmark_ids)) != len(self.landmark_ids):
            raise ValueError("landmark ids must be unique")
        norms = np.linalg.norm(self.descriptors, axis=1)
        if self.descriptors.size and np.abs(norms - 1.0).max() > 1e-9:
            raise ValueError("descriptors must be unit vectors")
        # the map is immutable once built
        for arr in (self.landmark_ids, self.positions_n, self.descriptors):
            arr.setflags(write=False)

    @property
    def n_landmarks(self) -> int:
        return len(self.landmark_ids)


class _ViewTruth:
    """Ground truth of one render; not part of the estimator-facing surface."""

    def __init__(self, actual_pose: Pose, landmark_ids: np.ndarray):
        self.actual_pose = actual_pose
        self.landmark_ids = landmark_ids


class RenderedView:
    """Estimator-facing synthesized observation set at a requested pose."""

    def __init__(self, requested_pose: Pose, theta_cov, pos_cov, bearings,
                 descriptors, trigger_time=None, truth: _ViewTruth | None = None):
        self.requested_pose = requested_pose
        self.theta_cov = np.asarray(theta_cov, dtype=float)
        self.pos_cov = np.asarray(pos_cov, dtype=float)
        self.bearings = np.asarray(bearings, dtype=float).reshape(-1, 2)
        self.descriptors = np.asarray(descriptors, dtype=float)
        self.trigger_time = trigger_time
        self._truth = truth

    @property
    def n_observations(self) -> int:
        return len(self.bearings)


def render(pmap: PriorMap, requested_pose_n: Pose, quality: RenderQuality,
           seed: int, calib: CameraCalibration, z_min: float = 0.05,
           max_range: float = 20.0, trigger_time=None) -> RenderedView:
    """Synthesize the observation set of the map from a requested viewpoint.

    Deterministic per (map, pose, quality, seed).  An empty observation list
    is a valid result (viewpoint with no mapped content).
    """
    rng = np.random.default_rng(seed)
    T_ng = pmap.map_to_global.inverse()
    s_n = T_ng.s
    t_n = T_ng.t

    theta = _sample_cov(rng, quality.theta_cov)
    ptil = _sample_cov(rng, quality.pos_cov)

    # pose error acts as a rigid perturbation of the map content about the
    # {N}-image of the global origin; store the equivalent actual camera pose
    E = quat_to_rot(rotvec_to_quat(theta))
    R_req = requested_pose_n.rotation()
    R_act = R_req @ E
    p_act = t_n + E.T @ (requested_pose_n.t - t_n - s_n * ptil)
    actual = Pose(rot_to_quat(R_act), p_act)

    rel = (pmap.positions_n - p_act) @ R_act.T
    z = rel[:, 2]
    in_front = z > z_min * s_n
    uv = np.zeros((pmap.n_landmarks, 2))
    uv[in_front] = rel[in_front, :2] / z[in_front, None]

    u0, u1, v0, v1 = calib.normalized_bounds()
    rng_ok = np.linalg.norm(rel, axis=1) <= max_range * s_n
    vis = in_front & rng_ok
    vis &= (uv[:, 0] >= u0) & (uv[:, 0] <= u1) & (uv[:, 1] >= v0) & (uv[:, 1] <= v1)

    keep = rng.random(pmap.n_landmarks) < quality.visibility
    vis &= keep

    idx = np.flatnonzero(vis)
    uv = uv[idx]
    if quality.sigma_r > 0 and len(idx):
        uv = uv + rng.normal(scale=quality.sigma_r, size=uv.shape)
        inside = (uv[:, 0] >= u0) & (uv[:, 0] <= u1) & (uv[:, 1] >= v0) & (uv[:, 1] <= v1)
        idx, uv = idx[inside], uv[inside]

    desc = pmap.descriptors[idx].copy()
    if quality.sigma_d > 0 and len(idx):
        desc = desc + rng.normal(scale=quality.sigma_d, size=desc.shape)
        desc /= np.linalg.norm(desc, axis=1, keepdims=True)

    return RenderedView(
        requested_pose=requested_pose_n.copy(),
        theta_cov=quality.theta_cov,
        pos_cov=quality.pos_cov,
        bearings=uv,
        descriptors=desc,
        trigger_time=trigger_time,
        truth=_ViewTruth(actual, pmap.landmark_ids[idx].copy()),
    )


def _sample_cov(rng, C):
    C = 0.5 * (C + C.T)
    if np.allclose(C, 0):
        return np.zeros(3)
    w, V = np.linalg.eigh(C)
    w = np.maximum(w, 0.0)
    return V @ (np.sqrt(w) * rng.standard_normal(3))


@dataclass
class Correspondence:
    view_index: int      # observation index in the rendered view
    feature_id: int      # current-frame feature id
    distance: float


def match(view: RenderedView, descriptors, feature_ids, bearings=None,
          ratio: float = 0.8, verify=None) -> list:
    """Mutual nearest-neighbor matching with a ratio test.

    ``verify(feature_id, view_bearing)`` is an optional geometric predicate
    applied after the descriptor stage; the filter passes a gate built from
    its current state estimate.
    """
    descriptors = np.asarray(descriptors, dtype=float)
    feature_ids = np.asarray(feature_ids)
    if view.n_observations == 0 or len(descriptors) == 0:
        return []
    D = cdist(view.descriptors, descriptors)

    nn_vc = np.argmin(D, axis=1)   # per view obs, best current feature
    nn_cv = np.argmin(D, axis=0)   # per current feature, best view obs
    out = []
    for i in range(D.shape[0]):
        j = nn_vc[i]
        if nn_cv[j] != i:
            continue
        if not _ratio_ok(D[i, :], j, ratio) or not _ratio_ok(D[:, j], i, ratio):
            continue
        if verify is not None and not verify(int(feature_ids[j]), view.bearings[i]):
            continue
        out.append(Correspondence(i, int(feature_ids[j]), float(D[i, j])))
    return out


def _ratio_ok(row, best_idx, ratio):
    if len(row) < 2:
        return True
    best = row[best_idx]
    rest = np.delete(row, best_idx)
    second = rest.min()
    return best < ratio * second


def build_map(landmark_ids, positions_g, keyframes_g, map_to_global: Sim3Transform,
              stride: int = 10, seed: int = 0, descriptors=None,
              descriptor_dim: int = DESCRIPTOR_DIM) -> PriorMap:
    """Build a prior map from world content and a keyframe trajectory.

    World positions are taken into {N} through the inverse map transform;
    every ``stride``-th trajectory pose is recorded as a keyframe.  When the
    world does not supply descriptors, random unit descriptors are assigned.
    """
    landmark_ids = np.asarray(landmark_ids, dtype=np.int64)
    positions_g = np.asarray(positions_g, dtype=float).reshape(-1, 3)
    if len(keyframes_g) == 0 or len(landmark_ids) == 0:
        raise EmptyWorld("need landmarks and a non-empty keyframe trajectory")

    T_ng = map_to_global.inverse()
    positions_n = T_ng.apply(positions_g)

    if descriptors is None:
        rng = np.random.default_rng(seed)
        descriptors = rng.normal(size=(len(landmark_ids), descriptor_dim))
        descriptors /= np.linalg.norm(descriptors, axis=1, keepdims=True)

    R_n = T_ng.rotation()
    keyframes_n = []
    for pose in keyframes_g[::stride]:
        R_kn = pose.rotation() @ R_n.T
        keyframes_n.append(Pose(rot_to_quat(R_kn), T_ng.apply(pose.t)))

    return PriorMap(landmark_ids, positions_n, np.asarray(descriptors, dtype=float),
                    keyframes_n, map_to_global, seed=seed)


# ---- map file ---------------------------------------------------------------


def save_map(pmap: PriorMap, path) -> None:
    T = pmap.map_to_global
    with open(path, "w") as f:
        f.write(MAP_MAGIC + "\n")
        f.write(f"seed {pmap.seed}\n")
        f.write(f"descriptor_dim {pmap.descriptors.shape[1] if pmap.descriptors.size else DESCRIPTOR_DIM}\n")
        vals = [T.s, *T.q, *T.t]
        f.write("sim3 " + " ".join(f"{v:.17g}" for v in vals) + "\n")
        f.write(f"landmarks {pmap.n_landmarks}\n")
        for i in range(pmap.n_landmarks):
            row = [str(pmap.landmark_ids[i])]
            row += [f"{v:.17g}" for v in pmap.positions_n[i]]
            row += [f"{v:.17g}" for v in pmap.descriptors[i]]
            f.write(" ".join(row) + "\n")
        f.write(f"keyframes {len(pmap.keyframes_n)}\n")
        for pose in pmap.keyframes_n:
            vals = [*pose.q, *pose.t]
            f.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


def load_map(path) -> PriorMap:
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or lines[0] != MAP_MAGIC:
        raise ValueError(f"not a {MAP_MAGIC} file: {path}")
    k = 1
    seed = int(lines[k].split()[1]); k += 1
    dim = int(lines[k].split()[1]); k += 1
    vals = [float(v) for v in lines[k].split()[1:]]; k += 1
    T = Sim3Transform(vals[0], np.array(vals[1:5]), np.array(vals[5:8]))
    n = int(lines[k].split()[1]); k += 1
    ids = np.empty(n, dtype=np.int64)
    pos = np.empty((n, 3))
    desc = np.empty((n, dim))
    for i in range(n):
        parts = lines[k].split(); k += 1
        ids[i] = int(parts[0])
        pos[i] = [float(v) for v in parts[1:4]]
        desc[i] = [float(v) for v in parts[4:4 + dim]]
    m = int(lines[k].split()[1]); k += 1
    keyframes = []
    for _ in range(m):
        vals = [float(v) for v in lines[k].split()]; k += 1
        keyframes.append(Pose(np.array(vals[0:4]), np.array(vals[4:7])))
    return PriorMap(ids, pos, desc, keyframes, T, seed=seed)
