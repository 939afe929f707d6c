import numpy as np
import pytest

from helpers import estimate_table, truth_table
from viral_fusion.evaluation import evaluate
from viral_fusion.manifold import exp_so3, quat_to_rot, vec_to_quat
from viral_fusion.pipeline import (
    Estimator,
    MeasurementBuffers,
    OslRecord,
    PipelineConfig,
    StepConfig,
    UwbRecord,
    admit,
    create_step,
    dataset_records,
    outlier_gate,
    run,
    run_dataset,
)
from viral_fusion.sim import EUROC_ANCHORS, EUROC_ANTENNAS, OslStreamParams, OutlierSpec, Scenario, SensorRig, TrajectorySpec, simulate
from viral_fusion.solver import SolverConfig
from viral_fusion.state import ImuSample, NavState, UwbObservation

FAST = dict(solver=SolverConfig(window_size=10))


def rec(t, rng=5.0, anchor="100", snr=True, edge=True):
    return UwbRecord(t, "200", "A", anchor, rng, snr, edge)


# admission ---------------------------------------------------------------


def test_admit_quality_flags():
    b, cfg = MeasurementBuffers(), StepConfig()
    assert admit(b, rec(0.0, snr=False), cfg).reason == "snr"
    assert admit(b, rec(0.0, edge=False), cfg).reason == "edge"
    assert admit(b, rec(0.0), cfg).accepted
    assert len(b.uwb) == 1


def test_admit_rate_of_change():
    b, cfg = MeasurementBuffers(), StepConfig(rate_of_change_max=20.0)
    assert admit(b, rec(1.0, 5.0), cfg).accepted
    assert admit(b, rec(1.01, 10.0), cfg).reason == "rate"
    # a different anchor is tracked separately
    assert admit(b, rec(1.01, 10.0, anchor="101"), cfg).accepted
    assert admit(b, rec(1.02, 5.1), cfg).accepted


def test_admit_stale_records():
    b, cfg = MeasurementBuffers(), StepConfig(reorder_tolerance=0.05)
    assert admit(b, rec(1.0), cfg).accepted
    assert admit(b, rec(0.97, anchor="101"), cfg).accepted
    assert admit(b, rec(0.9, anchor="102"), cfg).reason == "stale"
    assert admit(b, rec(1.2, anchor="103"), cfg, horizon=1.2).reason == "stale"
    imu = ImuSample(1.0, np.zeros(3), np.zeros(3))
    assert admit(b, imu, cfg).accepted
    assert admit(b, ImuSample(0.9, np.zeros(3), np.zeros(3)), cfg).reason == "stale"
    assert [r.stamp for r in b.uwb] == [0.97, 1.0]


# step creation -----------------------------------------------------------


def _buffers_with_imu(t0=0.0, t1=1.0, rate=400.0):
    b = MeasurementBuffers()
    for k in range(int(round((t1 - t0) * rate)) + 1):
        t = t0 + k / rate
        b.add_imu(ImuSample(t, np.array([t, 0.0, 0.0]), np.array([0.0, 2 * t, 9.81])))
    return b


def test_imu_boundaries_interpolated():
    b = _buffers_with_imu()
    t0, t1 = 0.10125, 0.20125  # exactly between samples
    step = create_step(b, t0, t1, PipelineConfig(), {}, {})
    seg = step.segment
    assert seg.stamps[0] == t0 and seg.stamps[-1] == t1
    assert seg.gyro[0, 0] == pytest.approx(0.5 * (0.1 + 0.1025))
    assert np.allclose(seg.accel[-1], [0.0, 2 * t1, 9.81])
    assert np.all(np.diff(seg.stamps) > 0)


def test_imu_boundary_on_sample_uses_it():
    b = _buffers_with_imu()
    seg = create_step(b, 0.1, 0.2, PipelineConfig(), {}, {}).segment
    assert len(seg) == 41 and seg.stamps[0] == 0.1 and seg.stamps[-1] == 0.2


def test_imu_gap_rejected():
    b = _buffers_with_imu(0.0, 0.5)
    with pytest.raises(ValueError):
        create_step(b, 0.4, 0.6, PipelineConfig(), {}, {})


def test_osl_geodesic_interpolation():
    b = _buffers_with_imu()
    b.add_osl(OslRecord("vio", 0.0, np.array([1.0, 0, 0, 0]), np.zeros(3)))
    b.add_osl(OslRecord("vio", 0.2, vec_to_quat(np.array([0, 0, np.pi / 2])), np.array([0.2, 0, 0])))
    q, p = b.osl_pose("vio", 0.1, staleness=0.2)
    assert np.allclose(quat_to_rot(q), exp_so3(np.array([0, 0, np.pi / 4])), atol=1e-12)
    assert np.allclose(p, [0.1, 0, 0])
    step = create_step(b, 0.0, 0.1, PipelineConfig(osl_rate={"vio": 5.0}), {}, {})
    (d,) = step.osl
    assert np.allclose(d.dp, [0.1, 0, 0]) and d.dt == pytest.approx(0.1)


def test_stale_odometry_contributes_nothing():
    b = _buffers_with_imu()
    b.add_osl(OslRecord("vio", 0.0, np.array([1.0, 0, 0, 0]), np.zeros(3)))
    b.add_osl(OslRecord("vio", 0.6, np.array([1.0, 0, 0, 0]), np.zeros(3)))
    step = create_step(b, 0.2, 0.3, PipelineConfig(osl_rate={"vio": 10.0}), {}, {})
    assert step.osl == []


def test_uwb_offsets_within_interval():
    b = _buffers_with_imu()
    for t in (0.1, 0.125, 0.2, 0.2001):
        b.add_uwb(UwbRecord(t, "200", "A", "100", 3.0))
    anchors = {"100": np.ones(3)}
    antennas = {"200.A": np.zeros(3)}
    step = create_step(b, 0.1, 0.2, PipelineConfig(), anchors, antennas)
    # a record on the earlier boundary belongs to the previous interval
    assert [o.stamp for o in step.uwb] == [0.125, 0.2]
    assert step.uwb[0].dt == pytest.approx(0.025) and step.uwb[0].step == pytest.approx(0.1)
    assert all(0 < o.dt <= o.step for o in step.uwb)
    # unknown antennas are skipped
    b.add_uwb(UwbRecord(0.15, "201", "B", "100", 3.0))
    assert len(create_step(b, 0.1, 0.2, PipelineConfig(), anchors, antennas).uwb) == 2


# gating ------------------------------------------------------------------


def test_outlier_gate_threshold():
    x0 = NavState(p=np.array([3.0, 4.0, 0.0]))
    obs = lambda d: UwbObservation(d, np.zeros(3), np.zeros(3), 0.1, 0.1, 0.05)  # noqa: E731
    assert outlier_gate(obs(5.0), (x0, x0), 5.0)
    assert outlier_gate(obs(5.24), (x0, x0), 5.0)
    assert not outlier_gate(obs(6.0), (x0, x0), 5.0)
    assert not outlier_gate(obs(4.0), (x0, x0), 5.0)


# end to end ----------------------------------------------------------------


def short_scenario(duration=6.0, **kw):
    return Scenario(trajectory=TrajectorySpec(duration=duration), **kw)


@pytest.fixture(scope="module")
def nominal():
    ds = simulate(short_scenario(8.0), seed=3)
    init = {}

    def watch(est):
        if est.initialized and "t" not in init:
            init["t"] = est.horizon
            init["ranges"] = sum(1 for s in est.uwb_status.values() if s != "rejected:stale")

    res = run(dataset_records(ds), PipelineConfig(**FAST), ds.anchors, ds.antennas, progress=watch)
    return ds, res, init


def test_clean_startup_initializes_after_about_100_ranges(nominal):
    _, res, init = nominal
    assert init["t"] <= 1.25 + 0.1 + 1e-9
    assert init["ranges"] <= 110
    assert res.estimator.init_report["per_residual"] < PipelineConfig().init_cost_threshold


def test_nominal_run_accuracy(nominal):
    ds, res, _ = nominal
    report, _ = evaluate(estimate_table(res.estimates), truth_table(ds))
    assert report["rmse_pos_m"] < 0.1
    assert report["rmse_rot_deg"] < 6.0


def test_one_solve_per_step_and_contiguous_output(nominal):
    ds, res, _ = nominal
    stamps = np.array([e.stamp for e in res.estimates])
    assert np.allclose(np.diff(stamps), 0.1)
    assert stamps[0] == ds.imu.stamps[0] and stamps[-1] == pytest.approx(8.0)
    # after initialization every step produces exactly one solve and one estimate
    report_stamps = np.array([t for t, _ in res.reports])
    live = stamps[stamps >= report_stamps[0] - 1e-9]
    assert np.array_equal(report_stamps, live)
    assert all(e.solved for e in res.estimates)
    assert res.estimator.skipped_steps == 0


def test_window_invariants(nominal):
    _, res, _ = nominal
    w = res.estimator.window
    assert len(w) == 11
    w.validate()
    for obs in (o for u in w.uwb for o in u):
        assert 0 < obs.dt <= obs.step
    for pre, t0, t1 in zip(w.imu, w.stamps, w.stamps[1:]):
        assert pre.segment.stamps[0] == t0 and pre.segment.stamps[-1] == t1


def test_outputs_are_deterministic(nominal):
    ds, res, _ = nominal
    again = run(dataset_records(ds), PipelineConfig(**FAST), ds.anchors, ds.antennas)
    assert len(again.estimates) == len(res.estimates)
    for a, b in zip(again.estimates, res.estimates):
        assert a.stamp == b.stamp and np.array_equal(a.state.as_vector(), b.state.as_vector())
    assert [r.as_dict() for _, r in again.reports] == [r.as_dict() for _, r in res.reports]


def test_backlog_skips_optimization_without_gaps():
    ds = simulate(short_scenario(4.0), seed=4)
    recs = dataset_records(ds)
    est = Estimator(PipelineConfig(**FAST), ds.anchors, ds.antennas)
    held = False
    for r in recs:
        est.push(r)
        if not isinstance(r, ImuSample):
            continue
        # stall the loop for half a second once initialized
        if est.initialized and 2.5 <= r.stamp < 3.0:
            held = True
            continue
        est.spin()
    est.spin(flush=True)
    assert held and est.skipped_steps >= 3
    stamps = np.array([e.stamp for e in est.estimates])
    assert np.allclose(np.diff(stamps), 0.1)
    assert any(not e.solved for e in est.estimates)
    report, _ = evaluate(estimate_table(est.estimates), truth_table(ds))
    assert report["rmse_pos_m"] < 0.15


def test_high_rate_output_starts_at_window_state():
    ds = simulate(short_scenario(3.0), seed=5)
    est = Estimator(PipelineConfig(**FAST), ds.anchors, ds.antennas)
    for r in dataset_records(ds):
        est.push(r)
        if isinstance(r, ImuSample):
            est.spin()
    out = est.high_rate_output()
    assert out[0][0] == est.window.stamps[-1]
    assert np.array_equal(out[0][1].as_vector(), est.window.newest.as_vector())
    stamps = [t for t, _ in out]
    assert len(out) > 1 and np.all(np.diff(stamps) > 0)
    gt = ds.groundtruth
    t_last, s_last = out[-1]
    k = np.argmin(np.abs(gt.t - t_last))
    if abs(gt.t[k] - t_last) < 1e-6:
        assert np.linalg.norm(s_last.p - gt.p[k]) < 0.2


def test_odometry_dropout_stays_bounded(nominal):
    ds_nom, res_nom, _ = nominal
    nom, _ = evaluate(estimate_table(res_nom.estimates), truth_table(ds_nom))
    rig = SensorRig(osl=[OslStreamParams(dropouts=((3.0, 5.0),))])
    ds = simulate(short_scenario(8.0, rig=rig), seed=3)
    res = run_dataset(ds, PipelineConfig(**FAST))
    rep, _ = evaluate(estimate_table(res.estimates), truth_table(ds))
    assert rep["rmse_pos_m"] < 3 * nom["rmse_pos_m"]


def test_too_few_ranges_never_initializes():
    drop = tuple((a, 0.6, 10.0) for a in EUROC_ANCHORS)
    ds = simulate(short_scenario(3.0, uwb_dropouts=drop), seed=6)
    assert len(ds.uwb) <= 50
    res = run_dataset(ds, PipelineConfig(**FAST))
    assert res.estimates == [] and not res.estimator.initialized


def test_all_outlier_startup_rejected():
    out = OutlierSpec(probability=1.0, bias=2.0)
    ds = simulate(short_scenario(3.0, outliers=out), seed=7)
    res = run_dataset(ds, PipelineConfig(**FAST))
    assert not res.estimator.initialized
    assert res.estimator.init_report["per_residual"] > PipelineConfig().init_cost_threshold


def test_without_ranges_runs_in_local_frame():
    ds = simulate(short_scenario(4.0), seed=8)
    res = run_dataset(ds, PipelineConfig(**FAST), include_uwb=False)
    assert res.estimates and all(r.gauge_prior_active for _, r in res.reports)
    rep, _ = evaluate(estimate_table(res.estimates), truth_table(ds), align="yaw-trans")
    assert rep["rmse_pos_m"] < 0.5
