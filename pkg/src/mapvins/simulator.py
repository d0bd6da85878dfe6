"""Deterministic world and sensor synthesis.

The default scene is a room-sized box of surface landmarks plus a central
cluster, observed from a smooth closed orbit that always faces the cluster.
The orbit is parameterized by a phase variable with an optional C2 time warp
whose rate drops to zero over a dwell window, which yields exactly
stationary segments with analytically consistent IMU signals.

All randomness flows from explicit seeds; identical inputs give bit-identical
sensor streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose, rot_to_quat
from .propagation import DEFAULT_GRAVITY, ImuNoiseParams, ImuReading
from .vision import CameraCalibration


class OutOfRange(Exception):
    """Requested time outside the trajectory duration."""


class UnknownLandmark(Exception):
    """Displacement references landmark ids absent from the world."""


# ---- world ------------------------------------------------------------------


@dataclass
class EnvironmentChange:
    time: float
    kind: str                   # remove | displace | add
    fraction: float = 0.0       # remove
    group: str | None = None    # displace/remove restriction
    ids: np.ndarray | None = None
    offset: np.ndarray | None = None  # displace
    count: int = 0              # add
    region: tuple | None = None  # add: (lo, hi) box corners
    seed: int = 0


@dataclass
class WorldModel:
    ids: np.ndarray
    positions: np.ndarray
    descriptors: np.ndarray
    tags: np.ndarray            # per-landmark group name
    script: list = field(default_factory=list)
    next_id: int = 0

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.descriptors = np.asarray(self.descriptors, dtype=float)
        self.tags = np.asarray(self.tags)
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("landmark ids must be unique")
        if self.next_id <= (self.ids.max() if len(self.ids) else -1):
            self.next_id = int(self.ids.max()) + 1 if len(self.ids) else 0

    @property
    def n_landmarks(self) -> int:
        return len(self.ids)


def _unit_rows(rng, n, dim):
    d = rng.normal(size=(n, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def make_default_world(seed: int = 0, n_box: int = 900, n_cluster: int = 600,
                       room=((-4.0, -3.0, 0.0), (4.0, 3.0, 3.0)),
                       cluster_center=(0.0, 0.0, 0.8),
                       cluster_size=(1.6, 1.0, 0.5),
                       descriptor_dim: int = 32,
                       script=None) -> WorldModel:
    """Landmarks on the room-box surfaces plus a central cluster."""
    rng = np.random.default_rng(seed)
    lo = np.asarray(room[0], dtype=float)
    hi = np.asarray(room[1], dtype=float)
    size = hi - lo
    areas = np.array([size[1] * size[2], size[1] * size[2],
                      size[0] * size[2], size[0] * size[2],
                      size[0] * size[1], size[0] * size[1]])
    face = rng.choice(6, size=n_box, p=areas / areas.sum())
    box = rng.uniform(lo, hi, size=(n_box, 3))
    box[face == 0, 0] = lo[0]
    box[face == 1, 0] = hi[0]
    box[face == 2, 1] = lo[1]
    box[face == 3, 1] = hi[1]
    box[face == 4, 2] = lo[2]
    box[face == 5, 2] = hi[2]

    c = np.asarray(cluster_center, dtype=float)
    half = 0.5 * np.asarray(cluster_size, dtype=float)
    cluster = rng.uniform(c - half, c + half, size=(n_cluster, 3))

    n = n_box + n_cluster
    return WorldModel(
        ids=np.arange(n),
        positions=np.vstack([box, cluster]),
        descriptors=_unit_rows(rng, n, descriptor_dim),
        tags=np.array(["box"] * n_box + ["cluster"] * n_cluster),
        script=list(script) if script else [],
    )


def apply_environment_change(world: WorldModel, step: EnvironmentChange) -> WorldModel:
    """Return the changed world; maps built earlier are unaffected."""
    rng = np.random.default_rng(step.seed)
    if step.kind == "remove":
        mask = np.ones(world.n_landmarks, dtype=bool)
        pool = np.arange(world.n_landmarks)
        if step.group is not None:
            pool = pool[world.tags == step.group]
        k = int(round(step.fraction * len(pool)))
        if k > 0:
            drop = rng.choice(pool, size=k, replace=False)
            mask[drop] = False
        return replace(world, ids=world.ids[mask], positions=world.positions[mask],
                       descriptors=world.descriptors[mask], tags=world.tags[mask],
                       next_id=world.next_id)
    if step.kind == "displace":
        if step.ids is not None:
            wanted = np.asarray(step.ids, dtype=np.int64)
            missing = np.setdiff1d(wanted, world.ids)
            if len(missing):
                raise UnknownLandmark(f"ids not in world: {missing[:5]}")
            sel = np.isin(world.ids, wanted)
        elif step.group is not None:
            sel = world.tags == step.group
        else:
            raise ValueError("displace needs ids or group")
        positions = world.positions.copy()
        positions[sel] = positions[sel] + np.asarray(step.offset, dtype=float)
        return replace(world, positions=positions)
    if step.kind == "add":
        lo, hi = (np.asarray(v, dtype=float) for v in step.region)
        pos = rng.uniform(lo, hi, size=(step.count, 3))
        new_ids = np.arange(world.next_id, world.next_id + step.count)
        dim = world.descriptors.shape[1]
        return replace(
            world,
            ids=np.concatenate([world.ids, new_ids]),
            positions=np.vstack([world.positions, pos]),
            descriptors=np.vstack([world.descriptors, _unit_rows(rng, step.count, dim)]),
            tags=np.concatenate([world.tags, np.array(["added"] * step.count)]),
            next_id=world.next_id + step.count,
        )
    raise ValueError(f"unknown environment change kind {step.kind!r}")


def environment_preset(name: str, seed: int = 0) -> list:
    """Scripts mimicking post-mapping scene edits at desk scale."""
    if name in ("none", ""):
        return []
    if name == "whiteboard":
        # new content added on one wall: ~10% extra landmarks in a plane
        return [EnvironmentChange(
            time=0.0, kind="add", count=150,
            region=((3.95, -1.5, 0.8), (4.0, 1.5, 2.2)), seed=seed,
        )]
    if name == "table_moved":
        return [EnvironmentChange(
            time=0.0, kind="displace", group="cluster",
            offset=np.array([1.5, 0.0, 0.0]), seed=seed,
        )]
    raise ValueError(f"unknown environment preset {name!r}")


# ---- trajectory --------------------------------------------------------------


@dataclass
class TrajectorySpec:
    center: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.4]))
    radius_x: float = 2.2
    radius_y: float = 1.8
    z_amp: float = 0.25
    z_cycles: int = 2
    loops: float = 2.0
    duration: float = 60.0
    imu_rate: float = 200.0
    cam_rate: float = 30.0
    look_at: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.8]))
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    phase0: float = 0.0
    dwell: tuple | None = None      # (start s, length s) stationary window
    dwell_ramp: float = 1.5         # s, C2 transition into/out of the dwell

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.look_at = np.asarray(self.look_at, dtype=float).reshape(3)
        self.up = np.asarray(self.up, dtype=float).reshape(3)
        if self.duration <= 0 or self.imu_rate <= 0 or self.cam_rate <= 0:
            raise ValueError("duration and rates must be positive")
        if self.dwell is not None:
            t0, length = self.dwell
            if t0 < 0 or t0 + length > self.duration:
                raise ValueError("dwell window outside the trajectory")


@dataclass
class TrajectorySample:
    pose: Pose          # {G}->{I}, position of I in {G}
    velocity: np.ndarray
    angular_velocity: np.ndarray  # body frame
    acceleration: np.ndarray      # world frame


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * x * (x * (6.0 * x - 15.0) + 10.0)


def _smoothstep_d(x):
    if x <= 0.0 or x >= 1.0:
        return 0.0
    return 30.0 * x * x * (x - 1.0) * (x - 1.0)


def _warp_rate(spec: TrajectorySpec, t: float):
    """(rate, d rate/dt) of the phase warp; rate is 0 inside the dwell."""
    if spec.dwell is None:
        return 1.0, 0.0
    t0, length = spec.dwell
    t1 = t0 + length
    tau = min(spec.dwell_ramp, 0.49 * length) if length > 0 else spec.dwell_ramp
    if t <= t0 or t >= t1:
        return 1.0, 0.0
    if t < t0 + tau:
        x = (t - t0) / tau
        return 1.0 - _smoothstep(x), -_smoothstep_d(x) / tau
    if t > t1 - tau:
        x = (t1 - t) / tau
        return 1.0 - _smoothstep(x), _smoothstep_d(x) / tau
    return 0.0, 0.0


def _warp_integral(spec: TrajectorySpec) -> float:
    if spec.dwell is None:
        return spec.duration
    _, length = spec.dwell
    tau = min(spec.dwell_ramp, 0.49 * length) if length > 0 else spec.dwell_ramp
    return spec.duration - (length - tau)


def _phase(spec: TrajectorySpec, t: float):
    """Phase and its two time derivatives at t (closed form)."""
    omega = 2.0 * np.pi * spec.loops / _warp_integral(spec)
    if spec.dwell is None:
        return omega * t, omega, 0.0
    t0, length = spec.dwell
    t1 = t0 + length
    tau = min(spec.dwell_ramp, 0.49 * length) if length > 0 else spec.dwell_ramp

    def ramp_integral(x):  # integral of the quintic smoothstep from 0 to x
        return x ** 6 - 3.0 * x ** 5 + 2.5 * x ** 4

    # integral of the warp rate: 1 outside [t0, t1], smoothstep ramps inside
    if t <= t0:
        integral = t
    elif t < t0 + tau:
        x = (t - t0) / tau
        integral = t0 + tau * (x - ramp_integral(x))
    elif t <= t1 - tau:
        integral = t0 + 0.5 * tau
    elif t < t1:
        x = (t1 - t) / tau
        integral = t0 + 0.5 * tau + tau * (0.5 - x + ramp_integral(x))
    else:
        integral = t0 + tau + (t - t1)
    rate, drate = _warp_rate(spec, t)
    return omega * integral, omega * rate, omega * drate


def _curve(spec: TrajectorySpec, phi: float):
    """Position and its first two phase derivatives."""
    kz = spec.z_cycles / spec.loops if spec.loops else 0.0
    a = phi + spec.phase0
    p = spec.center + np.array([
        spec.radius_x * np.cos(a),
        spec.radius_y * np.sin(a),
        spec.z_amp * np.sin(kz * phi),
    ])
    dp = np.array([
        -spec.radius_x * np.sin(a),
        spec.radius_y * np.cos(a),
        spec.z_amp * kz * np.cos(kz * phi),
    ])
    ddp = np.array([
        -spec.radius_x * np.cos(a),
        -spec.radius_y * np.sin(a),
        -spec.z_amp * kz * kz * np.sin(kz * phi),
    ])
    return p, dp, ddp


def _kinematics(spec: TrajectorySpec, t: float):
    """(R_GtoI, p, v, w_body, a_world) at time t; body z-axis faces the target."""
    if t < -1e-12 or t > spec.duration + 1e-12:
        raise OutOfRange(f"t={t} outside [0, {spec.duration}]")
    phi, dphi, ddphi = _phase(spec, t)
    p, dp, ddp = _curve(spec, phi)
    v = dp * dphi
    a = ddp * dphi * dphi + dp * ddphi

    # look-at frame and its time derivative
    u = spec.look_at - p
    nu = np.linalg.norm(u)
    z = u / nu
    du = -v
    dz = (du - z * (z @ du)) / nu

    w = np.cross(spec.up, z)
    nw = np.linalg.norm(w)
    x = w / nw
    dw = np.cross(spec.up, dz)
    dx = (dw - x * (x @ dw)) / nw

    y = np.cross(z, x)
    dy = np.cross(dz, x) + np.cross(z, dx)

    R_GtoI = np.vstack([x, y, z])
    dR_ItoG = np.column_stack([dx, dy, dz])
    Omega = R_GtoI @ dR_ItoG  # R_GI' * dR_GI = skew(w_body)
    w_body = np.array([Omega[2, 1] - Omega[1, 2],
                       Omega[0, 2] - Omega[2, 0],
                       Omega[1, 0] - Omega[0, 1]]) * 0.5
    return R_GtoI, p, v, w_body, a


def sample_trajectory(spec: TrajectorySpec, t: float) -> TrajectorySample:
    """Ground-truth kinematics at time t; the body z-axis faces the target."""
    R_GtoI, p, v, w_body, a = _kinematics(spec, t)
    return TrajectorySample(Pose(rot_to_quat(R_GtoI), p), v, w_body, a)


# ---- sensors -----------------------------------------------------------------


def synthesize_imu(spec: TrajectorySpec, noise: ImuNoiseParams | None, seed: int,
                   gravity=DEFAULT_GRAVITY) -> list:
    """Seeded IMU stream: truth plus white noise and random-walk biases.

    Passing ``noise=None`` gives the exact noiseless signals.
    """
    g = np.asarray(gravity, dtype=float)
    dt = 1.0 / spec.imu_rate
    n = int(round(spec.duration * spec.imu_rate)) + 1
    rng = np.random.default_rng(seed)
    bg = np.zeros(3)
    ba = np.zeros(3)
    readings = []
    for k in range(n):
        t = min(k * dt, spec.duration)
        R, _, _, w_true, a_world = _kinematics(spec, t)
        w_m = w_true.copy()
        a_m = R @ (a_world - g)
        if noise is not None:
            w_m += bg + rng.standard_normal(3) * (noise.sigma_g / np.sqrt(dt))
            a_m += ba + rng.standard_normal(3) * (noise.sigma_a / np.sqrt(dt))
            bg = bg + rng.standard_normal(3) * (noise.sigma_wg * np.sqrt(dt))
            ba = ba + rng.standard_normal(3) * (noise.sigma_wa * np.sqrt(dt))
        readings.append(ImuReading(t, w_m, a_m))
    return readings


@dataclass
class FrameFeatures:
    t: float
    ids: np.ndarray
    uv: np.ndarray            # normalized coordinates
    descriptors: np.ndarray


def synthesize_camera(world: WorldModel, spec: TrajectorySpec,
                      calib: CameraCalibration, t: float, seed: int,
                      max_features: int = 75, descriptor_noise: float = 0.05,
                      z_min: float = 0.05, max_range: float = 20.0,
                      prefer_ids=None) -> FrameFeatures:
    """Project the visible world into the camera at time t with seeded noise.

    Landmark ids persist while visible, so tracks break exactly when a
    landmark leaves the frustum.  Under the per-frame cap, ids in
    ``prefer_ids`` (the front end's live tracks) are kept first, the way a
    tracker keeps following its existing features; remaining slots go to the
    lowest new ids for deterministic selection.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, int(round(t * 1e6))]))
    s = sample_trajectory(spec, t)
    cam = calib.camera_pose_in_global(s.pose)
    rel = (world.positions - cam.t) @ cam.rotation().T
    z = rel[:, 2]
    vis = z > z_min
    uv = np.zeros((world.n_landmarks, 2))
    uv[vis] = rel[vis, :2] / z[vis, None]
    u0, u1, v0, v1 = calib.normalized_bounds()
    vis &= (np.linalg.norm(rel, axis=1) <= max_range)
    vis &= (uv[:, 0] >= u0) & (uv[:, 0] <= u1) & (uv[:, 1] >= v0) & (uv[:, 1] <= v1)

    idx = np.flatnonzero(vis)
    if len(idx) > max_features:
        order = np.argsort(world.ids[idx])
        if prefer_ids:
            keep = np.isin(world.ids[idx], np.fromiter(prefer_ids, dtype=np.int64))
            order = np.concatenate([order[keep[order]], order[~keep[order]]])
        idx = idx[order[:max_features]]
    uv = uv[idx]
    sigma = calib.sigma_norm
    if sigma > 0 and len(idx):
        uv = uv + rng.normal(scale=sigma, size=uv.shape)
    desc = world.descriptors[idx].copy()
    if descriptor_noise > 0 and len(idx):
        desc = desc + rng.normal(scale=descriptor_noise, size=desc.shape)
        desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    return FrameFeatures(t, world.ids[idx].copy(), uv, desc)
