"""Experiment configuration: defaults, INI parsing, and validation.

The file format is flat ``key = value`` pairs under sections; unknown
sections or keys are rejected with the offending name.  Every CLI flag maps
onto one of these fields.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields


class ConfigError(Exception):
    pass


@dataclass
class ExperimentConfig:
    # [run]
    seed: int = 0
    mode: str = "map_aided"            # map_aided | odometry
    output_dir: str = "out"
    init_error: str = "sampled"        # sampled | zero
    threads: str = "single"            # single | render_worker
    dump_imu: int = 0                  # also write the IMU stream as imu.csv

    # [trajectory]
    duration: float = 60.0
    loops: float = 2.0
    imu_rate: float = 200.0
    cam_rate: float = 30.0
    radius_x: float = 2.2
    radius_y: float = 1.8
    z_amp: float = 0.25
    z_cycles: int = 2
    dwell_start: float = -1.0          # < 0 disables the stationary window
    dwell_length: float = 0.0

    # [world]
    n_box: int = 900
    n_cluster: int = 600
    room_x: float = 8.0
    room_y: float = 6.0
    room_z: float = 3.0
    environment: str = "none"          # none | whiteboard | table_moved

    # [imu]
    sigma_g: float = 1.7e-4
    sigma_a: float = 2.0e-3
    sigma_wg: float = 1.0e-5
    sigma_wa: float = 1.0e-4

    # [camera]
    fx: float = 458.0
    fy: float = 458.0
    cx: float = 212.0
    cy: float = 120.0
    width: int = 424
    height: int = 240
    sigma_px: float = 2.0
    max_features: int = 30
    descriptor_noise: float = 0.05

    # [filter]
    window_size: int = 11
    max_landmarks: int = 20
    promotion_length: int = 11
    landmark_lifetime: float = 6.0   # s; landmarks re-anchor after this span
    update_stride: int = 3           # filter consumes every n-th camera frame
    gate_prob: float = 0.95
    init_sigma_theta: float = 0.0087   # rad (~0.5 deg)
    init_sigma_pos: float = 0.001
    init_sigma_vel: float = 0.005
    init_sigma_bg: float = 1.0e-3
    init_sigma_ba: float = 1.0e-2

    # [map]
    quality: str = "half"              # full | half | low
    latency_frames: int = 2
    render_offset: float = 0.10
    map_scale: float = 1.0
    map_stride: int = 10
    map_keyframe_count: int = 5430     # candidate poses before the stride
    map_pose_noise: float = 0.0        # m, degrades the stored map geometry
    min_msckf_track: int = 3
    max_msckf_features: int = 24
    render_sigma_theta_deg: float = 0.2
    render_sigma_pos: float = 0.005
    max_range: float = 20.0

    def validate(self) -> None:
        if self.mode not in ("map_aided", "odometry"):
            raise ConfigError(f"mode must be map_aided or odometry, got {self.mode!r}")
        if self.init_error not in ("sampled", "zero"):
            raise ConfigError(f"init_error must be sampled or zero, got {self.init_error!r}")
        if self.threads not in ("single", "render_worker"):
            raise ConfigError(f"threads must be single or render_worker, got {self.threads!r}")
        if self.quality not in ("full", "half", "low"):
            raise ConfigError(f"quality must be full, half, or low, got {self.quality!r}")
        if self.environment not in ("none", "whiteboard", "table_moved"):
            raise ConfigError(f"unknown environment preset {self.environment!r}")
        if self.duration <= 0 or self.imu_rate <= 0 or self.cam_rate <= 0:
            raise ConfigError("duration and rates must be positive")
        if self.window_size < 3:
            raise ConfigError("window_size must be at least 3")
        if self.update_stride < 1:
            raise ConfigError("update_stride must be >= 1")
        if self.latency_frames < 0:
            raise ConfigError("latency_frames must be >= 0")
        if self.dwell_start >= 0 and self.dwell_start + self.dwell_length > self.duration:
            raise ConfigError("dwell window exceeds the trajectory duration")


_SECTIONS = {
    "run": ["seed", "mode", "output_dir", "init_error", "threads", "dump_imu"],
    "trajectory": ["duration", "loops", "imu_rate", "cam_rate", "radius_x",
                   "radius_y", "z_amp", "z_cycles", "dwell_start", "dwell_length"],
    "world": ["n_box", "n_cluster", "room_x", "room_y", "room_z", "environment"],
    "imu": ["sigma_g", "sigma_a", "sigma_wg", "sigma_wa"],
    "camera": ["fx", "fy", "cx", "cy", "width", "height", "sigma_px",
               "max_features", "descriptor_noise"],
    "filter": ["window_size", "max_landmarks", "promotion_length",
               "landmark_lifetime", "update_stride", "gate_prob",
               "init_sigma_theta", "init_sigma_pos", "init_sigma_vel",
               "init_sigma_bg", "init_sigma_ba"],
    "map": ["quality", "latency_frames", "render_offset", "map_scale",
            "map_stride", "map_keyframe_count", "map_pose_noise",
            "min_msckf_track", "max_msckf_features", "render_sigma_theta_deg",
            "render_sigma_pos", "max_range"],
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    ftype = _FIELD_TYPES[name]
    try:
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"field {name!r}: cannot parse {raw!r}") from exc


def load_config(path) -> ExperimentConfig:
    """Parse and fully validate an INI config file."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            setattr(cfg, key, _coerce(key, raw))
    cfg.validate()
    return cfg


def save_config(cfg: ExperimentConfig, path) -> None:
    parser = configparser.ConfigParser()
    for section, keys in _SECTIONS.items():
        parser[section] = {k: str(getattr(cfg, k)) for k in keys}
    with open(path, "w") as f:
        parser.write(f)
