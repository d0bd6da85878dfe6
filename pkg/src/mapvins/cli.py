"""Command-line entry points: build-map, run, evaluate, sweep."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, save_config
from .map_oracle import load_map
from .runner import build_map_cmd, evaluate_files, run_experiment


def _apply_overrides(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    valid = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in valid:
            raise ConfigError(f"unknown config field {key!r}")
        ftype = valid[key]
        if ftype in ("int", int):
            value = int(raw)
        elif ftype in ("float", float):
            value = float(raw)
        else:
            value = raw
        setattr(cfg, key, value)
    return cfg


def _base_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    if getattr(args, "quality", None):
        cfg.quality = args.quality
    if getattr(args, "latency_frames", None) is not None:
        cfg.latency_frames = args.latency_frames
    if getattr(args, "output", None):
        cfg.output_dir = args.output
    _apply_overrides(cfg, getattr(args, "set", None))
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = _base_config(args)
    pmap = load_map(args.map) if args.map else None
    result = run_experiment(cfg, pmap=pmap)
    m = result.metrics
    print(f"mode={m['mode']} seed={m['seed']} frames={m['frames']}")
    print(f"ATE: {m['ate_rot_deg']:.3f} deg / {m['ate_pos_cm']:.2f} cm")
    if "nees_mean" in m:
        lo, hi = m["nees_interval"]
        print(f"NEES mean {m['nees_mean']:.2f} (95% interval [{lo:.2f}, {hi:.2f}])")
    print(f"recall@{m['recall_threshold_m']*100:.1f}cm: {m['recall_at_threshold']:.3f}")
    print(f"wall time {m['wall_time_s']:.1f} s; artifacts in {result.out_dir}")
    return 0


def cmd_build_map(args) -> int:
    cfg = _base_config(args)
    pmap = build_map_cmd(cfg, args.output_map)
    print(f"map with {pmap.n_landmarks} landmarks, {len(pmap.keyframes_n)} keyframes "
          f"-> {args.output_map}")
    return 0


def cmd_evaluate(args) -> int:
    metrics = evaluate_files(args.est, args.gt, alignment=args.alignment,
                             lengths=args.lengths, out_dir=args.output)
    print(f"ATE: {metrics['ate_rot_deg']:.3f} deg / {metrics['ate_pos_m']*100:.2f} cm "
          f"({metrics['pairs']} pairs)")
    if "rpe" in metrics:
        for L, s in metrics["rpe"].items():
            print(f"RPE {L} m: {s['pos_median']*100:.2f} cm / {s['rot_median_deg']:.3f} deg")
    return 0


def cmd_sweep(args) -> int:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for mode in args.modes.split(","):
        for seed in range(args.seeds):
            cfg = _base_config(args)
            cfg.mode = mode
            cfg.seed = seed
            cfg.output_dir = str(out / f"{mode}_{seed}")
            result = run_experiment(cfg)
            m = result.metrics
            rows.append((mode, seed, m["ate_rot_deg"], m["ate_pos_m"]))
            print(f"{mode} seed {seed}: {m['ate_rot_deg']:.3f} deg / "
                  f"{m['ate_pos_m']*100:.2f} cm")
    with open(out / "sweep.csv", "w") as f:
        f.write("mode,seed,ate_rot_deg,ate_pos_m\n")
        for mode, seed, rot, pos in rows:
            f.write(f"{mode},{seed},{rot:.9f},{pos:.9f}\n")
    summary = {}
    for mode in args.modes.split(","):
        pos = [r[3] for r in rows if r[0] == mode]
        rot = [r[2] for r in rows if r[0] == mode]
        summary[mode] = {"ate_pos_median_m": float(np.median(pos)),
                         "ate_rot_median_deg": float(np.median(rot))}
    with open(out / "sweep_summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_init_config(args) -> int:
    save_config(ExperimentConfig(), args.output_config)
    print(f"default config written to {args.output_config}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mapvins",
        description="Map-aided visual-inertial estimator: simulate, run, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_mode=True):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int, help="master seed")
        if with_mode:
            p.add_argument("--mode", choices=["odometry", "map_aided"])
        p.add_argument("--quality", choices=["full", "half", "low"])
        p.add_argument("--latency-frames", type=int, dest="latency_frames")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config field (repeatable)")

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.add_argument("--output", help="output directory")
    p.add_argument("--map", help="prior map file (otherwise built in process)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("build-map", help="build and save a prior map")
    common(p, with_mode=False)
    p.add_argument("output_map", help="destination map file")
    p.set_defaults(func=cmd_build_map)

    p = sub.add_parser("evaluate", help="metrics from trajectory CSVs")
    p.add_argument("est", help="estimate CSV")
    p.add_argument("gt", help="ground-truth CSV")
    p.add_argument("--alignment", choices=["none", "se3", "sim3"], default="se3")
    p.add_argument("--lengths", type=float, nargs="+", default=[2.0, 5.0, 10.0, 20.0])
    p.add_argument("--output", help="directory for metric tables")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run a seed/mode grid and aggregate")
    common(p, with_mode=False)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--modes", default="odometry,map_aided")
    p.add_argument("--output", default="sweep_out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("init-config", help="write the default config file")
    p.add_argument("output_config")
    p.set_defaults(func=cmd_init_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
