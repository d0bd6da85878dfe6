"""Experiment orchestration: the filter loop, logging, and metric emission.

Seed streams derived from the config seed (deterministic, documented):
    0 world content, 1 IMU noise, 2 camera frames, 3 render scheduler,
    4 initial state error, 5 map pose noise, 6 environment script.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .evaluation import TrajectoryLog, ate, nees, recall_curve, rpe
from .geometry import Sim3Transform, quat_inverse, quat_multiply, quat_normalize, rotvec_to_quat
from .map_oracle import PriorMap, build_map, match, quality_preset, save_map
from .map_update import (
    RenderScheduler,
    StaleRender,
    ThreadedRenderScheduler,
    apply_map_update,
    make_geometric_gate,
)
from .propagation import ImuNoiseParams, propagate
from .simulator import (
    TrajectorySpec,
    apply_environment_change,
    environment_preset,
    make_default_world,
    sample_trajectory,
    synthesize_camera,
    synthesize_imu,
)
from .state import ImuState, StateVector, initial_covariance, select_clone_to_marginalize
from .vision import (
    BearingMeasurement,
    CameraCalibration,
    FeatureTrack,
    msckf_update,
    promote_landmark,
    slam_update,
)

TRAJ_HEADER = "timestamp,px,py,pz,qx,qy,qz,qw"
IMU_HEADER = "timestamp,wx,wy,wz,ax,ay,az"
COV_HEADER = "timestamp," + ",".join(
    f"p{i}{j}" for i in range(6) for j in range(i, 6)
)
DIAG_HEADER = ("frame,timestamp,n_features,n_tracks,n_landmarks,slam_rows,"
               "msckf_rows,map_matches,map_accepted,map_rejected,map_skipped,"
               "render_latency,stale_total,pos_sigma")


def _stream_seed(base: int, stream: int) -> int:
    return int(np.random.SeedSequence([base, stream]).generate_state(1)[0])


def trajectory_spec(cfg: ExperimentConfig) -> TrajectorySpec:
    dwell = None
    if cfg.dwell_start >= 0 and cfg.dwell_length > 0:
        dwell = (cfg.dwell_start, cfg.dwell_length)
    return TrajectorySpec(
        radius_x=cfg.radius_x, radius_y=cfg.radius_y, z_amp=cfg.z_amp,
        z_cycles=cfg.z_cycles, loops=cfg.loops, duration=cfg.duration,
        imu_rate=cfg.imu_rate, cam_rate=cfg.cam_rate, dwell=dwell,
    )


def camera_calibration(cfg: ExperimentConfig) -> CameraCalibration:
    return CameraCalibration(
        fx=cfg.fx, fy=cfg.fy, cx=cfg.cx, cy=cfg.cy,
        width=cfg.width, height=cfg.height, sigma_px=cfg.sigma_px,
    )


def imu_noise(cfg: ExperimentConfig) -> ImuNoiseParams:
    return ImuNoiseParams(cfg.sigma_g, cfg.sigma_a, cfg.sigma_wg, cfg.sigma_wa)


def map_transform(cfg: ExperimentConfig) -> Sim3Transform:
    return Sim3Transform(cfg.map_scale, np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))


def world_room(cfg: ExperimentConfig):
    return ((-0.5 * cfg.room_x, -0.5 * cfg.room_y, 0.0),
            (0.5 * cfg.room_x, 0.5 * cfg.room_y, cfg.room_z))


def build_prior_map(cfg: ExperimentConfig) -> PriorMap:
    """Map of the unchanged world along the default trajectory keyframes."""
    world = make_default_world(seed=_stream_seed(cfg.seed, 0),
                               n_box=cfg.n_box, n_cluster=cfg.n_cluster,
                               room=world_room(cfg))
    spec = trajectory_spec(cfg)
    calib = camera_calibration(cfg)
    times = np.linspace(0.0, spec.duration, cfg.map_keyframe_count)
    keyframes = [calib.camera_pose_in_global(sample_trajectory(spec, t).pose)
                 for t in times]
    pmap = build_map(world.ids, world.positions, keyframes, map_transform(cfg),
                     stride=cfg.map_stride, seed=cfg.seed,
                     descriptors=world.descriptors)
    if cfg.map_pose_noise > 0:
        rng = np.random.default_rng(_stream_seed(cfg.seed, 5))
        s_n = pmap.map_to_global.inverse().s
        noisy = pmap.positions_n + rng.normal(
            scale=cfg.map_pose_noise * s_n, size=pmap.positions_n.shape)
        pmap = PriorMap(pmap.landmark_ids.copy(), noisy, pmap.descriptors.copy(),
                        pmap.keyframes_n, pmap.map_to_global, seed=pmap.seed)
    return pmap


@dataclass
class RunResult:
    out_dir: Path
    metrics: dict
    est_csv: Path
    gt_csv: Path
    diag_csv: Path


@dataclass
class _Logs:
    times: list = field(default_factory=list)
    est_pos: list = field(default_factory=list)
    est_quat: list = field(default_factory=list)  # body-to-world for the CSV
    gt_pos: list = field(default_factory=list)
    gt_quat: list = field(default_factory=list)
    cov: list = field(default_factory=list)
    diag: list = field(default_factory=list)


def run_experiment(cfg: ExperimentConfig, out_dir=None, pmap: PriorMap | None = None) -> RunResult:
    """Run one seeded experiment and write its artifacts.

    Deterministic in single-threaded mode: identical config gives
    byte-identical trajectory and diagnostics CSVs.
    """
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()

    spec = trajectory_spec(cfg)
    calib = camera_calibration(cfg)
    noise = imu_noise(cfg)

    world = make_default_world(seed=_stream_seed(cfg.seed, 0),
                               n_box=cfg.n_box, n_cluster=cfg.n_cluster,
                               room=world_room(cfg))
    script = environment_preset(cfg.environment, seed=_stream_seed(cfg.seed, 6))

    map_aided = cfg.mode == "map_aided"
    if map_aided and pmap is None:
        pmap = build_prior_map(cfg)

    readings = synthesize_imu(spec, noise, seed=_stream_seed(cfg.seed, 1))
    if cfg.dump_imu:
        write_imu_csv(readings, out / "imu.csv")
    cam_seed = _stream_seed(cfg.seed, 2)

    # initial state from truth, optionally with a sampled error drawn from P0
    s0 = sample_trajectory(spec, 0.0)
    P0 = initial_covariance(cfg.init_sigma_theta, cfg.init_sigma_pos,
                            cfg.init_sigma_vel, cfg.init_sigma_bg, cfg.init_sigma_ba)
    imu0 = ImuState(q=s0.pose.q, p=s0.pose.t, v=s0.velocity)
    if cfg.init_error == "sampled":
        rng0 = np.random.default_rng(_stream_seed(cfg.seed, 4))
        e0 = np.linalg.cholesky(P0) @ rng0.standard_normal(15)
        imu0 = ImuState(
            q=quat_normalize(quat_multiply(rotvec_to_quat(e0[0:3]), imu0.q)),
            p=imu0.p - e0[3:6], v=imu0.v - e0[6:9], bg=-e0[9:12], ba=-e0[12:15],
        )
    state = StateVector(imu0, time=0.0, P0=P0, max_clones=cfg.window_size)

    quality = quality_preset(cfg.quality, cfg.render_sigma_theta_deg,
                             cfg.render_sigma_pos, cfg.latency_frames)
    scheduler = None
    if map_aided:
        sched_cls = (ThreadedRenderScheduler if cfg.threads == "render_worker"
                     else RenderScheduler)
        scheduler = sched_cls(pmap, quality, calib, offset=cfg.render_offset,
                              base_seed=_stream_seed(cfg.seed, 3),
                              max_range=cfg.max_range)

    tracks: dict[int, FeatureTrack] = {}
    landmark_last_seen: dict[int, float] = {}
    landmark_born: dict[int, float] = {}
    frame_cache: dict[float, dict] = {}
    logs = _Logs()
    window_span = cfg.window_size * cfg.update_stride / cfg.cam_rate

    n_frames = int(round(spec.duration * spec.cam_rate)) + 1
    dt_cam = 1.0 / spec.cam_rate
    imu_times = np.array([r.t for r in readings])

    k = 0
    t_k = 0.0
    try:
        for k_cam in range(0, n_frames, cfg.update_stride):
            k = k_cam // cfg.update_stride
            t_k = min(k_cam * dt_cam, spec.duration)

            while script and script[0].time <= t_k:
                world = apply_environment_change(world, script.pop(0))

            if k > 0:
                lo = np.searchsorted(imu_times, state.time - 2.0 / cfg.imu_rate)
                hi = np.searchsorted(imu_times, t_k + 2.0 / cfg.imu_rate)
                propagate(state, readings[lo:hi], t_k, noise)
            state.augment_clone(t_k)

            active_ids = set(tracks) | set(state.landmarks)
            frame = synthesize_camera(world, spec, calib, t_k, cam_seed,
                                      max_features=cfg.max_features,
                                      descriptor_noise=cfg.descriptor_noise,
                                      max_range=cfg.max_range,
                                      prefer_ids=active_ids)
            frame_cache[t_k] = {
                "ids": frame.ids, "uv": frame.uv, "desc": frame.descriptors,
                "by_id": {int(f): uv for f, uv in zip(frame.ids, frame.uv)},
            }
            for old_t in [t for t in frame_cache if t < t_k - window_span - dt_cam]:
                del frame_cache[old_t]

            slam_meas = []
            seen = set()
            for fid, uv in zip(frame.ids, frame.uv):
                fid = int(fid)
                seen.add(fid)
                meas = BearingMeasurement(fid, t_k, uv, calib.sigma_norm)
                if fid in state.landmarks:
                    slam_meas.append(meas)
                    landmark_last_seen[fid] = t_k
                else:
                    tracks.setdefault(fid, FeatureTrack(fid)).add(meas)

            slam_rows = 0
            if slam_meas:
                slam_rows = slam_update(state, slam_meas, calib, cfg.gate_prob).rows

            map_stats = {"matches": 0, "accepted": 0, "rejected": 0, "skipped": 0}
            if scheduler is not None:
                view = scheduler.step(state)
                if view is not None:
                    cached = frame_cache.get(view.trigger_time)
                    if view.trigger_time not in state.clones or cached is None:
                        scheduler.note_stale()
                    else:
                        gate = make_geometric_gate(state, view, pmap, quality,
                                                   cached["by_id"])
                        corr = match(view, cached["desc"], cached["ids"], verify=gate)
                        try:
                            rep = apply_map_update(
                                state, view, corr, tracks, calib, pmap, quality,
                                gate_prob=cfg.gate_prob,
                                min_msckf_track=cfg.min_msckf_track,
                                max_msckf_features=cfg.max_msckf_features)
                        except StaleRender:
                            scheduler.note_stale()
                        else:
                            for fid in rep.consumed_ids:
                                tracks.pop(fid, None)
                            map_stats = {
                                "matches": rep.n_matches,
                                "accepted": len(rep.slam_used) + len(rep.msckf_used),
                                "rejected": len(rep.rejected),
                                "skipped": rep.skipped,
                            }

            # lost tracks: not observed this frame
            lost = [tr for fid, tr in tracks.items() if fid not in seen]
            msckf_rows = 0
            if lost:
                rep = msckf_update(state, lost, calib, cfg.gate_prob)
                msckf_rows = rep.rows
                for tr in lost:
                    tracks.pop(tr.feature_id, None)

            # window overflow: promote or consume tracks using the dropped clone
            protected = set()
            if scheduler is not None and scheduler.in_flight_trigger() is not None:
                protected.add(scheduler.in_flight_trigger())
            t_marg = select_clone_to_marginalize(state, protected)
            if t_marg is not None:
                affected = [tr for tr in tracks.values()
                            if any(m.t == t_marg for m in tr.measurements)]
                to_consume = []
                for tr in affected:
                    promoted = False
                    if (len(tr) >= cfg.promotion_length
                            and len(state.landmarks) < cfg.max_landmarks):
                        promoted = promote_landmark(state, tr, calib, cfg.gate_prob)
                    if promoted:
                        landmark_last_seen[tr.feature_id] = t_k
                        landmark_born[tr.feature_id] = t_k
                        tracks.pop(tr.feature_id, None)
                    elif len(tr) >= cfg.promotion_length:
                        to_consume.append(tr)
                    else:
                        tr.measurements = [m for m in tr.measurements if m.t != t_marg]
                if to_consume:
                    rep = msckf_update(state, to_consume, calib, cfg.gate_prob)
                    msckf_rows += rep.rows
                    used = set(rep.used)
                    for tr in to_consume:
                        if tr.feature_id in used:
                            tracks.pop(tr.feature_id, None)
                        else:
                            tr.measurements = [m for m in tr.measurements if m.t != t_marg]
                state.marginalize(clone_times=[t_marg])

            # landmarks leave the state when lost, and also when their fixed
            # linearization point has aged past the configured lifetime (the
            # feature re-promotes from a fresh track afterwards)
            stale_landmarks = [
                fid for fid, last in landmark_last_seen.items()
                if fid in state.landmarks
                and (t_k - last > window_span
                     or t_k - landmark_born.get(fid, t_k) > cfg.landmark_lifetime)
            ]
            if stale_landmarks:
                state.marginalize(landmark_ids=stale_landmarks)
                for fid in stale_landmarks:
                    del landmark_last_seen[fid]
                    landmark_born.pop(fid, None)

            truth = sample_trajectory(spec, t_k)
            logs.times.append(t_k)
            logs.est_pos.append(state.imu.p.copy())
            logs.est_quat.append(quat_inverse(state.imu.q))
            logs.gt_pos.append(truth.pose.t.copy())
            logs.gt_quat.append(quat_inverse(truth.pose.q))
            logs.cov.append(state.pose_covariance())
            P_pos = state.P[3:6, 3:6]
            logs.diag.append((
                k, t_k, len(frame.ids), len(tracks), len(state.landmarks),
                slam_rows, msckf_rows, map_stats["matches"], map_stats["accepted"],
                map_stats["rejected"], map_stats["skipped"], cfg.latency_frames,
                scheduler.stale if scheduler else 0,
                float(np.sqrt(max(np.trace(P_pos), 0.0) / 3.0)),
            ))
    except Exception as exc:
        raise RuntimeError(
            f"run failed at frame {k} (t={t_k:.3f} s): {exc}") from exc

    if scheduler is not None:
        scheduler.close()
    wall = time.perf_counter() - t_start
    est_csv, gt_csv, cov_csv, diag_csv = _write_run_files(out, logs)
    metrics = _compute_metrics(out, cfg, logs, wall)
    return RunResult(out, metrics, est_csv, gt_csv, diag_csv)


def write_imu_csv(readings, path) -> None:
    with open(path, "w") as f:
        f.write(IMU_HEADER + "\n")
        for r in readings:
            f.write(f"{r.t:.9f},{r.w[0]:.9f},{r.w[1]:.9f},{r.w[2]:.9f},"
                    f"{r.a[0]:.9f},{r.a[1]:.9f},{r.a[2]:.9f}\n")


def read_imu_csv(path):
    from .propagation import ImuReading

    readings = []
    with open(path) as f:
        header = f.readline().rstrip("\n")
        if header != IMU_HEADER:
            raise ValueError(f"{path}:1: expected header {IMU_HEADER!r}")
        for ln, line in enumerate(f, start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise ValueError(f"{path}:{ln}: expected 7 columns, got {len(parts)}")
            try:
                vals = [float(v) for v in parts]
            except ValueError as exc:
                raise ValueError(f"{path}:{ln}: {exc}") from exc
            readings.append(ImuReading(vals[0], vals[1:4], vals[4:7]))
    return readings


def _write_traj_csv(path: Path, times, positions, quats) -> None:
    with open(path, "w") as f:
        f.write(TRAJ_HEADER + "\n")
        for t, p, q in zip(times, positions, quats):
            f.write(f"{t:.9f},{p[0]:.9f},{p[1]:.9f},{p[2]:.9f},"
                    f"{q[0]:.9f},{q[1]:.9f},{q[2]:.9f},{q[3]:.9f}\n")


def _write_run_files(out: Path, logs: _Logs):
    est_csv = out / "est.csv"
    gt_csv = out / "gt.csv"
    cov_csv = out / "cov.csv"
    diag_csv = out / "diag.csv"
    _write_traj_csv(est_csv, logs.times, logs.est_pos, logs.est_quat)
    _write_traj_csv(gt_csv, logs.times, logs.gt_pos, logs.gt_quat)
    with open(cov_csv, "w") as f:
        f.write(COV_HEADER + "\n")
        for t, P in zip(logs.times, logs.cov):
            tri = [P[i][j] for i in range(6) for j in range(i, 6)]
            f.write(f"{t:.9f}," + ",".join(f"{v:.12e}" for v in tri) + "\n")
    with open(diag_csv, "w") as f:
        f.write(DIAG_HEADER + "\n")
        for row in logs.diag:
            f.write(",".join(
                f"{v:.9f}" if isinstance(v, float) else str(v) for v in row
            ) + "\n")
    return est_csv, gt_csv, cov_csv, diag_csv


def _logs_to_trajectories(logs: _Logs):
    cov = np.array([np.asarray(P) for P in logs.cov])
    est = TrajectoryLog(np.array(logs.times), np.array(logs.est_pos),
                        np.array(logs.est_quat), covariances=cov)
    gt = TrajectoryLog(np.array(logs.times), np.array(logs.gt_pos),
                       np.array(logs.gt_quat))
    return est, gt


def _compute_metrics(out: Path, cfg: ExperimentConfig, logs: _Logs, wall: float) -> dict:
    est, gt = _logs_to_trajectories(logs)
    res = ate(est, gt, alignment="se3")
    metrics = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "ate_rot_deg": res.rot_rmse_deg,
        "ate_pos_m": res.pos_rmse_m,
        "ate_pos_cm": res.pos_rmse_m * 100.0,
        "wall_time_s": wall,
        "frames": len(logs.times),
    }
    try:
        segs = rpe(est, gt, [2.0, 5.0, 10.0, 20.0])
        metrics["rpe"] = {
            str(L): {"pos_median": s.pos_median, "rot_median_deg": s.rot_median_deg,
                     "n": s.n}
            for L, s in segs.items()
        }
    except Exception as exc:
        metrics["rpe_error"] = str(exc)
    try:
        res_nees = nees(est, gt)
        metrics["nees_mean"] = res_nees.mean
        metrics["nees_interval"] = list(res_nees.interval)
    except Exception as exc:
        metrics["nees_error"] = str(exc)
    sigmas = np.array([row[-1] for row in logs.diag])
    threshold = 3.0 * float(np.median(sigmas))
    metrics["recall_threshold_m"] = threshold
    metrics["recall_at_threshold"] = float(recall_curve(est, gt, [threshold])[0])
    thresholds = [0.01, 0.025, 0.05, 0.075, 0.1, 0.2]
    metrics["recall_curve"] = dict(zip(map(str, thresholds),
                                       recall_curve(est, gt, thresholds).tolist()))
    err = np.linalg.norm(np.array(logs.est_pos) - np.array(logs.gt_pos), axis=1)
    metrics["max_pos_error_m"] = float(err.max())
    with open(out / "summary.json", "w") as f:
        json.dump(metrics, f, indent=2)
    with open(out / "metrics.csv", "w") as f:
        f.write("metric,value\n")
        for key in ("ate_rot_deg", "ate_pos_m", "nees_mean",
                    "recall_at_threshold", "max_pos_error_m", "wall_time_s"):
            if key in metrics:
                f.write(f"{key},{metrics[key]:.9f}\n")
    return metrics


def build_map_cmd(cfg: ExperimentConfig, out_path) -> PriorMap:
    pmap = build_prior_map(cfg)
    save_map(pmap, out_path)
    return pmap


def evaluate_files(est_path, gt_path, alignment: str = "se3",
                   lengths=(2.0, 5.0, 10.0, 20.0), out_dir=None) -> dict:
    """Metrics from trajectory CSVs; parse errors name the offending line."""
    est = read_trajectory_csv(est_path)
    gt = read_trajectory_csv(gt_path)
    res = ate(est, gt, alignment=alignment)
    metrics = {
        "ate_rot_deg": res.rot_rmse_deg,
        "ate_pos_m": res.pos_rmse_m,
        "pairs": res.n_pairs,
    }
    try:
        segs = rpe(est, gt, list(lengths))
        metrics["rpe"] = {str(L): {"pos_median": s.pos_median,
                                   "rot_median_deg": s.rot_median_deg}
                          for L, s in segs.items()}
    except Exception as exc:
        metrics["rpe_error"] = str(exc)
    thresholds = [0.01, 0.025, 0.05, 0.075, 0.1, 0.2]
    metrics["recall_curve"] = dict(zip(map(str, thresholds),
                                       recall_curve(est, gt, thresholds).tolist()))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval_metrics.csv", "w") as f:
            f.write("metric,value\n")
            f.write(f"ate_rot_deg,{metrics['ate_rot_deg']:.9f}\n")
            f.write(f"ate_pos_m,{metrics['ate_pos_m']:.9f}\n")
        with open(out / "recall.csv", "w") as f:
            f.write("threshold_m,fraction\n")
            for th, frac in metrics["recall_curve"].items():
                f.write(f"{th},{frac:.9f}\n")
        if "rpe" in metrics:
            with open(out / "rpe.csv", "w") as f:
                f.write("length_m,pos_median_m,rot_median_deg\n")
                for L, s in metrics["rpe"].items():
                    f.write(f"{L},{s['pos_median']:.9f},{s['rot_median_deg']:.9f}\n")
    return metrics


def read_trajectory_csv(path) -> TrajectoryLog:
    times, pos, quat = [], [], []
    with open(path) as f:
        header = f.readline().rstrip("\n")
        if header != TRAJ_HEADER:
            raise ValueError(f"{path}:1: expected header {TRAJ_HEADER!r}")
        for ln, line in enumerate(f, start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise ValueError(f"{path}:{ln}: expected 8 columns, got {len(parts)}")
            try:
                vals = [float(v) for v in parts]
            except ValueError as exc:
                raise ValueError(f"{path}:{ln}: {exc}") from exc
            times.append(vals[0])
            pos.append(vals[1:4])
            quat.append(vals[4:8])
    return TrajectoryLog(np.array(times), np.array(pos), np.array(quat))
