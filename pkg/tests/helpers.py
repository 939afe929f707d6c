"""Shared strategies and numeric helpers for the test suite."""

import numpy as np
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from viral_fusion.manifold import quat_normalize

# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE = []


def record_criterion(number, title, ok, detail):
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)


def vectors(bound=10.0):
    return arrays(np.float64, 3, elements=st.floats(-bound, bound, allow_nan=False, allow_infinity=False))


def rotation_vectors(max_angle=np.pi - 1e-6):
    """Rotation vectors with norm at most ``max_angle``."""
    return st.builds(
        lambda d, a: a * d / np.linalg.norm(d),
        arrays(np.float64, 3, elements=st.floats(-1, 1)).filter(lambda d: np.linalg.norm(d) > 1e-3),
        st.floats(0.0, max_angle),
    )


def quaternions():
    return arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 1e-2).map(
        quat_normalize
    )


def random_quats(rng, n):
    return quat_normalize(rng.normal(size=(n, 4)))


def random_rotvecs(rng, n, max_angle=np.pi):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * rng.uniform(0, max_angle, size=(n, 1))


def truth_segment(spec, t0, t1, rate=400.0):
    """Noise-free IMU segment sampled from an analytic trajectory on ``[t0, t1]``."""
    from viral_fusion.sim import ground_truth
    from viral_fusion.state import ImuSegment

    n = int(round((t1 - t0) * rate))
    t = t0 + np.arange(n + 1) / rate
    gt = ground_truth(spec, t)
    return ImuSegment(t, gt.omega, gt.accel), gt


def nav_at(gt, k):
    from viral_fusion.state import NavState

    return NavState(gt.q[k], gt.p[k], gt.v[k])


TAGS = ("q", "p", "v", "bg", "ba")


def fd_jacobian(fun, x0, x1, h=1e-6):
    """Central differences of ``fun(x0, x1)`` under retraction of every tangent axis of both nodes."""
    from viral_fusion.state import STATE_DIM

    cols = []
    for node in (0, 1):
        for j in range(STATE_DIM):
            d = np.zeros(STATE_DIM)
            d[j] = h
            if node == 0:
                plus, minus = fun(x0.retract(d), x1), fun(x0.retract(-d), x1)
            else:
                plus, minus = fun(x0, x1.retract(d)), fun(x0, x1.retract(-d))
            cols.append((np.atleast_1d(plus) - np.atleast_1d(minus)) / (2 * h))
    return np.stack(cols, axis=-1)


def block_errors(analytic, numeric, floor=1e-2):
    """Relative Frobenius error per ``(node, tag)`` column block.

    The denominator is floored so that blocks which are exactly zero compare
    on an absolute scale.
    """
    from viral_fusion.state import BLOCK, STATE_DIM

    out = {}
    for node in (0, 1):
        for tag in TAGS:
            sl = BLOCK[tag]
            cols = slice(node * STATE_DIM + sl.start, node * STATE_DIM + sl.stop)
            a, n = analytic[..., cols], numeric[..., cols]
            out[(node, tag)] = np.linalg.norm(a - n) / max(np.linalg.norm(n), floor)
    return out


def stack_nodes(configs):
    """Ten ``(n, .)`` arrays ``q0, p0, v0, bg0, ba0, q1, ..., ba1`` from ``(x0, x1, obs)`` triples."""
    return [np.array([getattr(c[node], tag) for c in configs]) for node in (0, 1) for tag in TAGS]


def fd_jacobian_batch(fun, nodes, h=1e-6):
    """Batched :func:`fd_jacobian`: ``fun`` maps the ten stacked node arrays to ``(n, rows)``."""
    from viral_fusion.manifold import retract_rotation

    cols = []
    for k in range(10):
        for j in range(3):
            d = np.zeros(3)
            d[j] = h
            out = []
            for sign in (1.0, -1.0):
                moved = list(nodes)
                if k % 5 == 0:
                    moved[k] = retract_rotation(nodes[k], sign * d)
                else:
                    moved[k] = nodes[k] + sign * d
                out.append(fun(*moved))
            cols.append((out[0] - out[1]) / (2 * h))
    return np.stack(cols, axis=-1)


def block_errors_batch(analytic, numeric, floor=1e-2):
    """Per configuration, the worst :func:`block_errors` value over the ten column blocks."""
    from viral_fusion.state import STATE_DIM

    worst = np.zeros(len(analytic))
    for start in range(0, 2 * STATE_DIM, 3):
        a, n = analytic[:, :, start:start + 3], numeric[:, :, start:start + 3]
        err = np.linalg.norm(a - n, axis=(1, 2)) / np.maximum(np.linalg.norm(n, axis=(1, 2)), floor)
        worst = np.maximum(worst, err)
    return worst


def random_state(rng, q=None):
    from viral_fusion.state import NavState

    return NavState(
        random_quats(rng, 1)[0] if q is None else q,
        rng.uniform(-5, 5, 3),
        rng.uniform(-2, 2, 3),
        rng.normal(0, 0.01, 3),
        rng.normal(0, 0.1, 3),
    )


def perturbed_rotation(rng, q, max_angle=0.5):
    from viral_fusion.manifold import quat_mul, vec_to_quat

    return quat_mul(q, vec_to_quat(random_rotvecs(rng, 1, max_angle)[0]))


def random_imu_configs(rng, n, samples=40, dt=0.0025):
    """``n`` (state, state, preintegration) triples with the newer attitude near the preintegrated one."""
    from viral_fusion.manifold import quat_mul
    from viral_fusion.preintegration import preintegrate_many
    from viral_fusion.state import GRAVITY, ImuBias, ImuNoiseParams, ImuSegment

    segs, biases = [], []
    for _ in range(n):
        t = np.arange(samples + 1) * dt
        segs.append(ImuSegment(t, rng.normal(0, 1.0, (samples + 1, 3)),
                               np.array([0, 0, GRAVITY]) + rng.normal(0, 2.0, (samples + 1, 3))))
        biases.append(ImuBias(rng.normal(0, 0.01, 3), rng.normal(0, 0.1, 3)))
    pres = preintegrate_many(segs, biases, ImuNoiseParams())
    out = []
    for pre in pres:
        x0 = random_state(rng)
        x1 = random_state(rng, perturbed_rotation(rng, quat_mul(x0.q, pre.gamma)))
        out.append((x0, x1, pre))
    return out


def random_osl_configs(rng, n):
    from viral_fusion.manifold import quat_mul
    from viral_fusion.state import OslDisplacement

    out = []
    for _ in range(n):
        x0 = random_state(rng)
        dq = random_quats(rng, 1)[0]
        x1 = random_state(rng, perturbed_rotation(rng, quat_mul(x0.q, dq)))
        obs = OslDisplacement(dq, rng.uniform(-1, 1, 3), 0.1, np.full(6, 0.05))
        out.append((x0, x1, obs))
    return out


def random_uwb_configs(rng, n, step=0.1):
    from viral_fusion.state import UwbObservation

    out = []
    for _ in range(n):
        x0 = random_state(rng)
        x1 = random_state(rng, perturbed_rotation(rng, x0.q, 1.0))
        obs = UwbObservation(
            float(rng.uniform(1, 10)),
            rng.uniform(-8, 8, 3) + np.array([0, 0, 10.0]),
            rng.uniform(-0.5, 0.5, 3),
            float(rng.uniform(1e-3, 1.0) * step),
            step,
            0.05,
        )
        out.append((x0, x1, obs))
    return out


EXACT_SPEC_KW = dict(kind="polynomial", yaw_mode="fixed", velocity0=(0.4, -0.3, 0.1),
                     acceleration=(0.2, 0.15, -0.05), yaw_rate=0.3, center=(0.5, -0.5, 1.2))


def truth_window(spec, t0=0.0, intervals=4, step=0.1, uwb_per_interval=4, osl=True, rng=None,
                 range_noise=0.0, antennas=None, rate=400.0):
    """Sliding window populated from an analytic trajectory.

    Nodes sit at ground truth. With ``range_noise`` the ranges are perturbed,
    so the optimum moves away from the truth.
    """
    from viral_fusion.manifold import quat_inv, quat_mul, quat_to_rot
    from viral_fusion.preintegration import preintegrate
    from viral_fusion.sim import EUROC_ANCHORS, EUROC_ANTENNAS, ground_truth
    from viral_fusion.solver import SlidingWindow
    from viral_fusion.state import ImuNoiseParams, OslDisplacement, UwbObservation

    antennas = EUROC_ANTENNAS if antennas is None else antennas
    anchors = [np.array(v, dtype=float) for v in EUROC_ANCHORS.values()]
    ants = [np.array(v, dtype=float) for v in antennas.values()]
    stamps = t0 + step * np.arange(intervals + 1)
    gt = ground_truth(spec, stamps)
    w = SlidingWindow(list(stamps), [nav_at(gt, k) for k in range(len(stamps))])
    count = 0
    for k in range(intervals):
        seg, _ = truth_segment(spec, stamps[k], stamps[k + 1], rate)
        w.imu.append(preintegrate(seg, None, ImuNoiseParams()))
        obs = []
        if osl:
            dq = quat_mul(quat_inv(gt.q[k]), gt.q[k + 1])
            dp = w.states[k].rot.T @ (gt.p[k + 1] - gt.p[k])
            obs.append(OslDisplacement(dq, dp, step, np.array([0.01] * 3 + [0.05] * 3)))
        w.osl.append(obs)
        uwb = []
        for j in range(uwb_per_interval):
            dt = step * (j + 1) / uwb_per_interval
            g = ground_truth(spec, [stamps[k] + dt])
            x, y = anchors[count % len(anchors)], ants[(count // len(anchors)) % len(ants)]
            d = float(np.linalg.norm(g.p[0] + quat_to_rot(g.q[0]) @ y - x))
            if range_noise:
                d += float(rng.normal(0, range_noise))
            uwb.append(UwbObservation(d, x, y, dt, step, 0.05))
            count += 1
        w.uwb.append(uwb)
    return w


def estimate_table(estimates):
    from viral_fusion.dataio import PoseTable

    return PoseTable(
        np.array([e.stamp for e in estimates]),
        np.array([e.state.q for e in estimates]),
        np.array([e.state.p for e in estimates]),
        np.array([e.state.v for e in estimates]),
    )


def truth_table(dataset):
    from viral_fusion.dataio import PoseTable

    gt = dataset.groundtruth
    return PoseTable(gt.t, gt.q, gt.p, gt.v)
