import numpy as np
import pytest

from mapvins.cli import main
from mapvins.config import ConfigError, ExperimentConfig, load_config, save_config
from mapvins.map_oracle import load_map
from mapvins.runner import (
    COV_HEADER,
    DIAG_HEADER,
    IMU_HEADER,
    TRAJ_HEADER,
    build_map_cmd,
    evaluate_files,
    read_imu_csv,
    read_trajectory_csv,
    run_experiment,
    write_imu_csv,
)


def fast_cfg(**kw):
    base = dict(seed=9, duration=8.0, loops=0.27, output_dir="unused")
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_defaults_validate(self):
        ExperimentConfig().validate()

    def test_ini_roundtrip(self, tmp_path):
        cfg = ExperimentConfig(seed=42, mode="odometry", quality="low",
                               latency_frames=5, sigma_px=1.5)
        path = tmp_path / "exp.ini"
        save_config(cfg, path)
        loaded = load_config(path)
        assert loaded == cfg

    def test_unknown_key_rejected_by_name(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[run]\nseed = 1\nturbo = yes\n")
        with pytest.raises(ConfigError, match="turbo"):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[rocket]\nthrust = 9000\n")
        with pytest.raises(ConfigError, match="rocket"):
            load_config(path)

    def test_bad_value_names_field(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[run]\nseed = huh\n")
        with pytest.raises(ConfigError, match="seed"):
            load_config(path)

    def test_validation_errors(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(mode="psychic").validate()
        with pytest.raises(ConfigError):
            ExperimentConfig(quality="ultra").validate()
        with pytest.raises(ConfigError):
            ExperimentConfig(duration=60.0, dwell_start=55.0, dwell_length=20.0).validate()
        with pytest.raises(ConfigError):
            ExperimentConfig(update_stride=0).validate()


class TestRunExperiment:
    def test_deterministic_outputs(self, tmp_path):
        cfg = fast_cfg(mode="map_aided")
        a = run_experiment(cfg, out_dir=tmp_path / "a")
        b = run_experiment(cfg, out_dir=tmp_path / "b")
        assert a.est_csv.read_bytes() == b.est_csv.read_bytes()
        assert a.gt_csv.read_bytes() == b.gt_csv.read_bytes()
        assert a.diag_csv.read_bytes() == b.diag_csv.read_bytes()

    def test_odometry_mode_has_no_map_rows(self, tmp_path):
        cfg = fast_cfg(mode="odometry")
        res = run_experiment(cfg, out_dir=tmp_path)
        lines = res.diag_csv.read_text().strip().split("\n")
        header = lines[0].split(",")
        i_matches = header.index("map_matches")
        i_accepted = header.index("map_accepted")
        for line in lines[1:]:
            cols = line.split(",")
            assert cols[i_matches] == "0"
            assert cols[i_accepted] == "0"

    def test_csv_schemas(self, tmp_path):
        res = run_experiment(fast_cfg(mode="map_aided"), out_dir=tmp_path)
        assert res.est_csv.read_text().splitlines()[0] == TRAJ_HEADER
        assert res.gt_csv.read_text().splitlines()[0] == TRAJ_HEADER
        assert res.diag_csv.read_text().splitlines()[0] == DIAG_HEADER
        assert (tmp_path / "cov.csv").read_text().splitlines()[0] == COV_HEADER
        assert (tmp_path / "summary.json").exists()
        assert (tmp_path / "metrics.csv").exists()

    def test_paired_run_map_aided_halves_ate(self, tmp_path):
        kw = dict(seed=9, duration=30.0, loops=1.0)
        odo = run_experiment(ExperimentConfig(mode="odometry", **kw),
                             out_dir=tmp_path / "odo").metrics
        aided = run_experiment(ExperimentConfig(mode="map_aided", **kw),
                               out_dir=tmp_path / "map").metrics
        assert aided["ate_pos_m"] <= 0.5 * odo["ate_pos_m"]

    def test_render_worker_thread_mode_runs(self, tmp_path):
        # wall-clock render worker: valid artifacts, not necessarily
        # byte-identical to the deterministic mode
        cfg = fast_cfg(mode="map_aided", threads="render_worker")
        res = run_experiment(cfg, out_dir=tmp_path)
        assert res.est_csv.exists()
        assert np.isfinite(res.metrics["ate_pos_m"])
        assert res.metrics["ate_pos_m"] < 0.5

    def test_runtime_failure_names_frame(self, tmp_path, monkeypatch):
        import mapvins.runner as runner_mod

        def explode(*args, **kwargs):
            raise ValueError("sensor gremlin")

        monkeypatch.setattr(runner_mod, "synthesize_camera", explode)
        with pytest.raises(RuntimeError, match="frame 0"):
            run_experiment(fast_cfg(mode="odometry"), out_dir=tmp_path)

    def test_imu_csv_roundtrip_and_dump(self, tmp_path):
        cfg = fast_cfg(mode="odometry", duration=2.0, loops=0.07, dump_imu=1)
        run_experiment(cfg, out_dir=tmp_path)
        path = tmp_path / "imu.csv"
        assert path.read_text().splitlines()[0] == IMU_HEADER
        readings = read_imu_csv(path)
        assert len(readings) == 401  # 2 s at 200 Hz inclusive
        back = tmp_path / "imu2.csv"
        write_imu_csv(readings, back)
        assert back.read_bytes() == path.read_bytes()


class TestBuildMap:
    def test_default_keyframe_count(self, tmp_path):
        path = tmp_path / "prior.map"
        cfg = fast_cfg()
        pmap = build_map_cmd(cfg, path)
        assert len(pmap.keyframes_n) == 543

    def test_roundtrip_equality(self, tmp_path):
        path = tmp_path / "prior.map"
        cfg = fast_cfg()
        pmap = build_map_cmd(cfg, path)
        loaded = load_map(path)
        np.testing.assert_array_equal(loaded.landmark_ids, pmap.landmark_ids)
        np.testing.assert_array_equal(loaded.positions_n, pmap.positions_n)
        np.testing.assert_array_equal(loaded.descriptors, pmap.descriptors)

    def test_map_pose_noise_degrades_ate_monotonically(self, tmp_path):
        ates = []
        for noise in (0.0, 0.01, 0.05):
            cfg = ExperimentConfig(seed=9, mode="map_aided", duration=30.0,
                                   loops=1.0, map_pose_noise=noise)
            res = run_experiment(cfg, out_dir=tmp_path / f"n{noise}")
            ates.append(res.metrics["ate_pos_m"])
        assert ates[0] < ates[2]
        assert ates[1] <= ates[2]


class TestEvaluate:
    def test_identical_files_zero_metrics(self, tmp_path):
        res = run_experiment(fast_cfg(mode="odometry"), out_dir=tmp_path)
        metrics = evaluate_files(res.gt_csv, res.gt_csv, lengths=[1.0])
        assert metrics["ate_pos_m"] < 1e-12
        assert metrics["ate_rot_deg"] < 1e-10

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(TRAJ_HEADER + "\n0.0,1,2,3,0,0,0,1\n0.1,oops,2,3,0,0,0,1\n")
        with pytest.raises(ValueError, match=":3:"):
            read_trajectory_csv(path)

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time,x,y,z\n")
        with pytest.raises(ValueError, match="header"):
            read_trajectory_csv(path)

    def test_wrong_column_count_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(TRAJ_HEADER + "\n0.0,1,2,3\n")
        with pytest.raises(ValueError, match=":2:"):
            read_trajectory_csv(path)

    def test_output_tables(self, tmp_path):
        res = run_experiment(fast_cfg(mode="odometry"), out_dir=tmp_path / "run")
        out = tmp_path / "eval"
        evaluate_files(res.est_csv, res.gt_csv, lengths=[1.0], out_dir=out)
        assert (out / "eval_metrics.csv").read_text().splitlines()[0] == "metric,value"
        assert (out / "recall.csv").read_text().splitlines()[0] == "threshold_m,fraction"
        rpe_lines = (out / "rpe.csv").read_text().splitlines()
        assert rpe_lines[0] == "length_m,pos_median_m,rot_median_deg"


class TestCliMain:
    def test_init_config_and_run_and_evaluate(self, tmp_path):
        ini = tmp_path / "cfg.ini"
        assert main(["init-config", str(ini)]) == 0
        out = tmp_path / "run"
        code = main([
            "run", "--config", str(ini), "--seed", "3", "--mode", "odometry",
            "--output", str(out),
            "--set", "duration=5.0", "--set", "loops=0.17",
        ])
        assert code == 0
        assert (out / "est.csv").exists()
        code = main(["evaluate", str(out / "est.csv"), str(out / "gt.csv"),
                     "--lengths", "1.0", "--output", str(tmp_path / "eval")])
        assert code == 0

    def test_unknown_set_key_fails_cleanly(self, tmp_path):
        assert main(["run", "--set", "warp_drive=1",
                     "--output", str(tmp_path)]) == 2

    def test_build_map_cli(self, tmp_path):
        path = tmp_path / "m.map"
        assert main(["build-map", str(path), "--seed", "1"]) == 0
        assert load_map(path).n_landmarks == 1500

    def test_missing_file_evaluate(self, tmp_path):
        assert main(["evaluate", "nope.csv", "alsono.csv"]) == 1

    def test_sweep_writes_aggregate(self, tmp_path):
        out = tmp_path / "sw"
        code = main([
            "sweep", "--seeds", "1", "--modes", "odometry",
            "--output", str(out),
            "--set", "duration=5.0", "--set", "loops=0.17",
        ])
        assert code == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0] == "mode,seed,ate_rot_deg,ate_pos_m"
        assert len(lines) == 2
        assert (out / "sweep_summary.json").exists()
