import numpy as np
import pytest

from conftest import look_at_pose, random_quat
from mapvins.geometry import Pose, Sim3Transform, quat_identity, rot_to_quat
from mapvins.map_oracle import (
    Correspondence,
    PriorMap,
    RenderQuality,
    build_map,
    match,
    render,
)
from mapvins.map_update import (
    BehindRenderCamera,
    MapUpdateReport,
    RenderScheduler,
    StaleRender,
    apply_map_update,
    linearize_nerf,
    make_geometric_gate,
    nerf_bearing_model,
    plan_render,
    virtual_view_in_global,
)
from mapvins.state import ImuState, StateVector, initial_covariance
from mapvins.vision import (
    BearingMeasurement,
    CameraCalibration,
    FeatureTrack,
    InsufficientBaseline,
    project,
    to_camera_frame,
    triangulate,
)


def unit_descriptors(rng, n, dim=32):
    d = rng.normal(size=(n, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def make_world(seed=0, n=120, depth=(3.0, 6.0)):
    rng = np.random.default_rng(seed)
    pos = np.column_stack([
        rng.uniform(-1.5, 1.5, n),
        rng.uniform(-0.9, 0.9, n),
        rng.uniform(*depth, n),
    ])
    return np.arange(n), pos, unit_descriptors(rng, n)


def make_map(seed=0, transform=None, **kw):
    ids, pos, desc = make_world(seed, **kw)
    transform = transform if transform is not None else Sim3Transform.identity()
    return build_map(ids, pos, [Pose.identity()], transform, stride=1,
                     seed=seed, descriptors=desc), pos


class TestPlanRender:
    def test_identity_transform_offset(self):
        pmap, _ = make_map()
        st = StateVector(ImuState(), time=1.0, P0=initial_covariance())
        calib = CameraCalibration()
        req = plan_render(st, pmap, calib, sign=+1.0)
        np.testing.assert_allclose(req.requested_pose_n.t, [0.10, 0, 0], atol=1e-12)
        req = plan_render(st, pmap, calib, sign=-1.0)
        np.testing.assert_allclose(req.requested_pose_n.t, [-0.10, 0, 0], atol=1e-12)
        assert req.trigger_time == 1.0

    def test_scaled_transform_offset_magnitude(self):
        # with a scale-2 map->global transform the 10 cm camera offset maps
        # to an offset of 0.10 * s_n map units; checked via the sim3 oracle
        rng = np.random.default_rng(1)
        T = Sim3Transform(2.0, random_quat(rng), rng.normal(size=3))
        pmap, _ = make_map(transform=T)
        st = StateVector(ImuState(), time=0.0, P0=initial_covariance())
        calib = CameraCalibration()
        plus = plan_render(st, pmap, calib, sign=+1.0)
        minus = plan_render(st, pmap, calib, sign=-1.0)
        s_n = T.inverse().s
        gap = np.linalg.norm(plus.requested_pose_n.t - minus.requested_pose_n.t)
        assert abs(gap - 0.20 * s_n) < 1e-12
        # oracle: map the offset camera center through the composed sim3
        cam = calib.camera_pose_in_global(st.imu.pose())
        p_g = cam.t + cam.rotation().T @ np.array([0.10, 0, 0])
        np.testing.assert_allclose(
            plus.requested_pose_n.t, T.inverse().apply(p_g), atol=1e-12
        )

    def test_orientation_matches_camera(self):
        rng = np.random.default_rng(2)
        T = Sim3Transform(1.3, random_quat(rng), rng.normal(size=3))
        pmap, _ = make_map(transform=T)
        imu = ImuState(q=random_quat(rng), p=rng.normal(size=3))
        st = StateVector(imu, time=0.0, P0=initial_covariance())
        calib = CameraCalibration()
        req = plan_render(st, pmap, calib)
        R_kn = req.requested_pose_n.rotation()
        R_cg = calib.camera_pose_in_global(imu.pose()).rotation()
        np.testing.assert_allclose(
            R_kn @ T.inverse().rotation(), R_cg, atol=1e-12
        )


class TestNerfBearingModel:
    def test_identity_chain(self):
        uv = nerf_bearing_model([0, 0, 2.0], Pose.identity(), Sim3Transform.identity())
        np.testing.assert_allclose(uv, [0, 0], atol=1e-15)

    def test_pure_scale(self):
        T = Sim3Transform(2.0, quat_identity(), np.zeros(3))
        uv = nerf_bearing_model([1.0, 0, 2.0], Pose.identity(), T)
        np.testing.assert_allclose(uv, [0.5, 0.0], atol=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_random_chain_stepwise(self, seed):
        rng = np.random.default_rng(seed)
        T = Sim3Transform(rng.uniform(0.5, 2.0), random_quat(rng), rng.normal(size=3))
        p_f = rng.normal(size=3)
        # render pose looking at the feature's map-frame image
        p_n = T.apply(p_f)
        back = p_n - 3.0 * (p_n / np.linalg.norm(p_n) if np.linalg.norm(p_n) > 0 else [0, 0, 1])
        pose = look_at_pose(back, p_n)
        # step by step: {G} -> {N} -> {K}
        p_k = pose.rotation() @ (T.apply(p_f) - pose.t)
        uv = nerf_bearing_model(p_f, pose, T)
        np.testing.assert_allclose(uv, p_k[:2] / p_k[2], atol=1e-9)

    def test_behind_render_camera(self):
        with pytest.raises(BehindRenderCamera):
            nerf_bearing_model([0, 0, -1.0], Pose.identity(), Sim3Transform.identity())


class TestLinearizeNerf:
    def random_config(self, seed):
        rng = np.random.default_rng(seed)
        T = Sim3Transform(rng.uniform(0.5, 2.0), random_quat(rng), rng.normal(size=3))
        p_f = np.array([rng.uniform(-1, 1), rng.uniform(-0.6, 0.6), rng.uniform(2.5, 6)])
        p_n = T.apply(p_f)
        center_n = T.apply(p_f - np.array([0.2, 0.1, 4.0]))
        pose = look_at_pose(center_n, p_n)
        return rng, T, p_f, pose

    def test_zero_pose_cov_gives_sigma_identity(self):
        rng, T, p_f, pose = self.random_config(0)
        z = nerf_bearing_model(p_f, pose, T)
        _, _, R_p = linearize_nerf(z, p_f, pose, T, sigma_r=0.003,
                                   theta_cov=np.zeros((3, 3)), pos_cov=np.zeros((3, 3)))
        np.testing.assert_array_equal(R_p, 0.003 ** 2 * np.eye(2))

    @pytest.mark.parametrize("seed", range(20))
    def test_feature_jacobian_matches_finite_differences(self, seed):
        rng, T, p_f, pose = self.random_config(seed)
        z = nerf_bearing_model(p_f, pose, T) + rng.normal(size=2) * 0.01
        _, H_f, _ = linearize_nerf(z, p_f, pose, T, 0.001,
                                   np.zeros((3, 3)), np.zeros((3, 3)))
        eps = 1e-6
        H_fd = np.zeros((2, 3))
        for i in range(3):
            d = np.zeros(3)
            d[i] = eps
            plus = nerf_bearing_model(p_f + d, pose, T)
            minus = nerf_bearing_model(p_f - d, pose, T)
            H_fd[:, i] = (plus - minus) / (2 * eps)
        assert np.abs(H_f - H_fd).max() / np.abs(H_f).max() < 1e-5

    @pytest.mark.parametrize("seed", range(4))
    def test_monte_carlo_noise_inflation(self, seed):
        # the module's central numerical claim: the analytic inflated noise
        # matches the covariance of nonlinear residuals under sampled render
        # pose error
        rng = np.random.default_rng(seed)
        T = Sim3Transform(rng.uniform(0.5, 2.0), random_quat(rng), rng.normal(size=3))
        p_f = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3), rng.uniform(3, 5)])
        sigma_r = rng.uniform(0.001, 0.004)
        s_th = np.radians(rng.uniform(0.2, 1.0))
        s_p = rng.uniform(0.005, 0.02)
        quality = RenderQuality(
            visibility=1.0, sigma_d=0.0, sigma_r=sigma_r,
            theta_cov=s_th ** 2 * np.eye(3), pos_cov=s_p ** 2 * np.eye(3),
        )
        pmap = PriorMap(np.array([0]), T.apply(p_f)[None, :],
                        unit_descriptors(rng, 1), [Pose.identity()], T.inverse())
        # note: PriorMap.map_to_global maps {N}->{G}; content above is in {N}
        T_ng = T
        pose = look_at_pose(T_ng.apply(p_f - np.array([0.0, 0.0, 4.0])), T_ng.apply(p_f))
        calib = CameraCalibration()

        z_hat = nerf_bearing_model(p_f, pose, T_ng)
        _, _, R_p = linearize_nerf(z_hat, p_f, pose, T_ng, sigma_r,
                                   quality.theta_cov, quality.pos_cov)

        n = 10000
        residuals = np.empty((n, 2))
        kept = 0
        for i in range(n):
            view = render(pmap, pose, quality, seed=7777 + i, calib=calib,
                          max_range=100.0)
            if view.n_observations != 1:
                continue
            residuals[kept] = view.bearings[0] - z_hat
            kept += 1
        assert kept > 0.99 * n
        cov_mc = np.cov(residuals[:kept].T)
        err = np.linalg.norm(cov_mc - R_p) / np.linalg.norm(R_p)
        assert err < 0.10


def build_filter_scene(seed=0, n_clones=3, static=False, transform=None):
    """State whose clones saw the world landmarks, plus matching map."""
    pmap, pos_g = make_map(seed, transform=transform)
    calib = CameraCalibration()
    st = StateVector(ImuState(), time=0.0, P0=initial_covariance())
    st.time = -1.0
    target = pos_g.mean(axis=0)
    tracks = {}
    for k in range(n_clones):
        x = 0.0 if static else 0.15 * k
        pose = look_at_pose([x, 0.0, 0.0], target)
        st.imu.q, st.imu.p = pose.q.copy(), pose.t.copy()
        st.time = float(k)
        st.augment_clone(float(k))
        for fid, p in zip(range(len(pos_g)), pos_g):
            try:
                uv = project(to_camera_frame(pose, calib, p))
            except Exception:
                continue
            tracks.setdefault(fid, FeatureTrack(fid)).add(
                BearingMeasurement(fid, float(k), uv, calib.sigma_norm)
            )
        st._symmetrize()
    return st, pmap, pos_g, tracks, calib


class TestApplyMapUpdate:
    def quality(self):
        return RenderQuality(visibility=1.0, sigma_d=0.0, sigma_r=0.002,
                             theta_cov=np.radians(0.3) ** 2 * np.eye(3),
                             pos_cov=0.005 ** 2 * np.eye(3))

    def test_zero_correspondences_no_change(self):
        st, pmap, pos_g, tracks, calib = build_filter_scene()
        q = self.quality()
        view = render(pmap, plan_render(st, pmap, calib).requested_pose_n, q,
                      seed=0, calib=calib, trigger_time=2.0)
        P0 = st.P.copy()
        p0 = st.imu.p.copy()
        report = apply_map_update(st, view, [], tracks, calib, pmap, q)
        assert report.rows == 0
        np.testing.assert_array_equal(st.P, P0)
        np.testing.assert_array_equal(st.imu.p, p0)

    def test_stale_render_raises(self):
        st, pmap, pos_g, tracks, calib = build_filter_scene()
        q = self.quality()
        view = render(pmap, Pose.identity(), q, seed=0, calib=calib,
                      trigger_time=-5.0)
        with pytest.raises(StaleRender):
            apply_map_update(st, view, [], tracks, calib, pmap, q)

    def test_exact_landmark_measurement_zero_innovation(self):
        st, pmap, pos_g, tracks, calib = build_filter_scene(1)
        fid = 7
        st.add_landmark(fid, pos_g[fid], 1e-8 * np.eye(3), np.zeros((3, st.dim)))
        noiseless = RenderQuality()
        req = plan_render(st, pmap, calib)
        view = render(pmap, req.requested_pose_n, noiseless, seed=3, calib=calib,
                      trigger_time=2.0)
        row = int(np.flatnonzero(view._truth.landmark_ids == fid)[0])
        corr = [Correspondence(row, fid, 0.0)]
        p_before = st.imu.p.copy()
        lm_before = st.landmarks[fid].copy()
        report = apply_map_update(st, view, corr, {}, calib, pmap, noiseless)
        assert report.slam_used == [fid]
        np.testing.assert_allclose(st.imu.p, p_before, atol=1e-9)
        np.testing.assert_allclose(st.landmarks[fid], lm_before, atol=1e-9)

    def test_msckf_path_stacks_map_rows_and_consumes(self):
        st, pmap, pos_g, tracks, calib = build_filter_scene(2, n_clones=3)
        q = self.quality()
        req = plan_render(st, pmap, calib)
        view = render(pmap, req.requested_pose_n, q, seed=5, calib=calib,
                      trigger_time=2.0)
        fid = int(view._truth.landmark_ids[0])
        corr = [Correspondence(0, fid, 0.0)]
        report = apply_map_update(st, view, corr, tracks, calib, pmap, q)
        assert report.msckf_used == [fid]
        assert report.consumed_ids == [fid]
        # 3 real measurements + 1 map row pair, minus the eliminated feature
        assert report.rows == 2 * 4 - 3

    def test_map_unchanged_by_updates(self):
        st, pmap, pos_g, tracks, calib = build_filter_scene(3)
        pos_before = pmap.positions_n.copy()
        desc_before = pmap.descriptors.copy()
        q = self.quality()
        req = plan_render(st, pmap, calib)
        view = render(pmap, req.requested_pose_n, q, seed=1, calib=calib,
                      trigger_time=2.0)
        ids = view._truth.landmark_ids
        corr = [Correspondence(i, int(ids[i]), 0.0) for i in range(min(10, len(ids)))]
        apply_map_update(st, view, corr, tracks, calib, pmap, q)
        np.testing.assert_array_equal(pmap.positions_n, pos_before)
        np.testing.assert_array_equal(pmap.descriptors, desc_before)

    def test_static_camera_map_rows_enable_triangulation(self):
        # all clones at the same position: plain triangulation fails, the
        # render-offset ray makes the stacked system solvable
        st, pmap, pos_g, tracks, calib = build_filter_scene(4, static=True)
        q = self.quality()
        fid = 11
        with pytest.raises(InsufficientBaseline):
            triangulate(tracks[fid], st.clones, calib)
        req = plan_render(st, pmap, calib)
        view = render(pmap, req.requested_pose_n, q, seed=2, calib=calib,
                      trigger_time=2.0)
        where = np.flatnonzero(view._truth.landmark_ids == fid)
        assert len(where) == 1
        corr = [Correspondence(int(where[0]), fid, 0.0)]
        report = apply_map_update(st, view, corr, tracks, calib, pmap, q)
        assert report.msckf_used == [fid]

    def test_scale_equivalence_of_residual_stream(self):
        # a map with scale s and the equivalently pre-scaled unit-scale map
        # must produce identical bearings and residuals
        rng = np.random.default_rng(9)
        R = random_quat(rng)
        t = rng.normal(size=3)
        T_scaled = Sim3Transform(2.0, R, t)  # {N}->{G}
        T_unit = Sim3Transform(1.0, R, t)    # same world geometry, map units doubled
        # content: N positions of the same G world differ by the factor 2
        ids, pos_g, desc = make_world(9)
        pm_a = build_map(ids, pos_g, [Pose.identity()], T_scaled, stride=1,
                         descriptors=desc)
        pm_b = build_map(ids, pos_g, [Pose.identity()], T_unit, stride=1,
                         descriptors=desc)
        np.testing.assert_allclose(pm_b.positions_n, 2.0 * pm_a.positions_n, atol=1e-12)

        st = StateVector(ImuState(), time=0.0, P0=initial_covariance())
        calib = CameraCalibration()
        q = self.quality()
        req_a = plan_render(st, pm_a, calib)
        req_b = plan_render(st, pm_b, calib)
        va = render(pm_a, req_a.requested_pose_n, q, seed=31, calib=calib)
        vb = render(pm_b, req_b.requested_pose_n, q, seed=31, calib=calib)
        assert va.n_observations == vb.n_observations
        np.testing.assert_allclose(va.bearings, vb.bearings, atol=1e-9)

        T_ng_a = pm_a.map_to_global.inverse()
        T_ng_b = pm_b.map_to_global.inverse()
        for i in range(min(5, va.n_observations)):
            fid = int(va._truth.landmark_ids[i])
            ra, Ha, Rpa = linearize_nerf(va.bearings[i], pos_g[fid],
                                         req_a.requested_pose_n, T_ng_a,
                                         q.sigma_r, q.theta_cov, q.pos_cov)
            rb, Hb, Rpb = linearize_nerf(vb.bearings[i], pos_g[fid],
                                         req_b.requested_pose_n, T_ng_b,
                                         q.sigma_r, q.theta_cov, q.pos_cov)
            np.testing.assert_allclose(ra, rb, atol=1e-9)
            np.testing.assert_allclose(Ha, Hb, atol=1e-9)
            np.testing.assert_allclose(Rpa, Rpb, atol=1e-9)

    def test_geometric_gate_rejects_displaced_landmark(self):
        st, pmap, pos_g, tracks, calib = build_filter_scene(5)
        q = self.quality()
        req = plan_render(st, pmap, calib)
        view = render(pmap, req.requested_pose_n, q, seed=8, calib=calib,
                      trigger_time=2.0)
        current = {fid: tr.measurements[-1].uv for fid, tr in tracks.items()}
        gate = make_geometric_gate(st, view, pmap, q, current)
        fid = int(view._truth.landmark_ids[0])
        assert gate(fid, view.bearings[0])
        # a bearing wildly away from the current frame must fail
        assert not gate(fid, view.bearings[0] + np.array([0.5, 0.0]))


class TestRenderScheduler:
    def make(self, latency, seed=0):
        pmap, pos_g = make_map(seed)
        calib = CameraCalibration()
        q = RenderQuality(visibility=1.0, sigma_d=0.0, sigma_r=0.001,
                          latency_frames=latency)
        st = StateVector(ImuState(), time=0.0, P0=initial_covariance())
        return RenderScheduler(pmap, q, calib, base_seed=seed), st

    def test_zero_latency_delivers_at_trigger(self):
        sched, st = self.make(0)
        st.time = 5.0
        view = sched.step(st)
        assert view is not None
        assert view.trigger_time == 5.0

    def test_latency_three_delivers_old_trigger(self):
        sched, st = self.make(3)
        delivered = []
        for k in range(8):
            st.time = float(k)
            v = sched.step(st)
            delivered.append(v.trigger_time if v is not None else None)
        # first delivery at frame 3 carries the frame-0 trigger
        assert delivered[:4] == [None, None, None, 0.0]
        assert sched.issued >= 2

    def test_alternating_offset_sign(self):
        sched, st = self.make(0)
        signs = []
        for k in range(4):
            st.time = float(k)
            sched.step(st)
            signs.append(np.sign(sched.last_request.offset_cam[0]))
        assert signs == [1.0, -1.0, 1.0, -1.0]

    def test_single_render_in_flight(self):
        sched, st = self.make(4)
        for k in range(12):
            st.time = float(k)
            sched.step(st)
        # with latency 4 and deliver-then-reissue, at most every 4th frame issues
        assert sched.issued <= 4

    def test_stale_counting(self):
        sched, st = self.make(0)
        sched.note_stale()
        sched.note_stale()
        assert sched.stale == 2

    def test_latency_beyond_window_forces_stale(self):
        # delivery after the trigger clone left the window must hit the
        # StaleRender path when applied
        sched, st = self.make(15)
        calib = CameraCalibration()
        q = RenderQuality(visibility=1.0, sigma_d=0.0, sigma_r=0.001,
                          latency_frames=15)
        view = None
        for k in range(30):
            st.time = float(k)
            st.augment_clone(st.time)
            while len(st.clones) > st.max_clones:
                st.marginalize(clone_times=[next(iter(st.clones))])
            out = sched.step(st)
            if out is not None:
                view = out
                break
        assert view is not None
        assert view.trigger_time not in st.clones
        with pytest.raises(StaleRender):
            apply_map_update(st, view, [], {}, calib, sched.pmap, q)
