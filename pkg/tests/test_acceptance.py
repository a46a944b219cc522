"""Acceptance criteria 1-13. Each test prints one PASS/FAIL line, then asserts."""
import math
import time

import numpy as np
import pytest

from motionaug.bvh_io import Motion, parse_bvh, write_bvh
from motionaug.debias import TrainingPair, apply_debias, fit_debias, gradient_check
from motionaug.ik_augment import PRESET_SPACES, propagation_weights, synthesize_ik_motion
from motionaug.kinematics import IkChain, fabrik_solve, forward_kinematics
from motionaug.latent_sampler import LatentEmbedding, kmeans_fit, sample_near_samples_batch
from motionaug.metrics import distance_matrix, dtw, mmd, mmd_from_distances
from motionaug.physics_correct import (
    RewardTrace,
    SimCharacter,
    SimState,
    max_angular_speed,
    normalized_reward,
    pd_torque,
    sim_step,
    track_motion,
    validate_plausibility,
)

from conftest import (
    STAND_HEIGHT,
    make_humanoid,
    make_kick,
    planar_arm,
    random_motion,
    random_skeleton,
    rest_frames,
    rot_index,
    run_pipeline,
    sinusoid_root_goal,
    write_config,
    write_corpus,
)
from test_metrics import SKEL as METRIC_SKEL, brute_force_dtw, motion as metric_motion


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return _report


def test_criterion_01_bvh_round_trip(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, structure_ok = 0.0, True
    for _ in range(200):
        skel = random_skeleton(rng, int(rng.integers(1, 9)))
        motion = random_motion(rng, skel, int(rng.integers(1, 12)))
        s2, m2 = parse_bvh(write_bvh(skel, motion))
        s3, m3 = parse_bvh(write_bvh(s2, m2))
        structure_ok &= skel.same_structure(s2) and s2.same_structure(s3)
        structure_ok &= all(a.is_end_effector == b.is_end_effector for a, b in zip(skel.joints, s2.joints))
        worst = max(worst, float(np.max(np.abs(motion.frames - m2.frames))),
                    max(float(np.max(np.abs(np.subtract(a.offset, b.offset)))) for a, b in zip(skel.joints, s2.joints)))
    dt = time.perf_counter() - t0
    report(1, structure_ok and worst < 1e-6 and dt < 10,
           f"200 fuzzed round trips, structure exact={structure_ok}, max value error {worst:.2e} (< 1e-6), {dt:.2f}s (< 10s)")


def test_criterion_02_fk_oracle(report):
    arm = planar_arm()
    worst = 0.0
    for a, b in [(0.0, 0.0), (math.pi / 2, 0.0), (0.3, 0.7), (-1.1, 2.0), (2.5, -2.9)]:
        pose = np.zeros(arm.n_channels)
        pose[3], pose[6] = a, b
        pos = forward_kinematics(arm, pose)
        elbow = np.array([math.cos(a), math.sin(a), 0.0])
        hand = elbow + [math.cos(a + b), math.sin(a + b), 0.0]
        worst = max(worst, float(np.max(np.abs(pos[1] - elbow))), float(np.max(np.abs(pos[2] - hand))))
    skel = make_humanoid()
    rng = np.random.default_rng(0)
    exact = True
    for _ in range(50):
        pose = rng.uniform(-3, 3, skel.n_channels)
        pose[:3] = 0.0
        base = forward_kinematics(skel, pose)
        shift = rng.normal(size=3)
        pose[:3] = shift
        exact &= bool(np.array_equal(forward_kinematics(skel, pose), base + shift))
    report(2, worst < 1e-9 and exact, f"planar 2-link max error {worst:.1e} (< 1e-9), translation equivariance exact={exact}")


def test_criterion_03_fabrik(report):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst_err, worst_drift, max_iters, failures = 0.0, 0.0, 0, 0
    needed = []  # iterations the non-converged cases need without the 100 cap
    for _ in range(1000):
        n = int(rng.integers(2, 7))
        lengths = rng.uniform(0.3, 1.5, n)
        chain = IkChain(tuple(range(n + 1)), tuple(lengths))
        dirs = rng.normal(size=(n, 3))
        pts = np.vstack([np.zeros(3), np.cumsum(lengths[:, None] * dirs / np.linalg.norm(dirs, axis=1, keepdims=True), axis=0)])
        tdirs = rng.normal(size=(n, 3))
        target = np.sum(lengths[:, None] * tdirs / np.linalg.norm(tdirs, axis=1, keepdims=True), axis=0)
        res = fabrik_solve(chain, pts, target)
        drift = float(np.max(np.abs(np.linalg.norm(np.diff(res.positions, axis=0), axis=1) - lengths)))
        worst_drift = max(worst_drift, drift)
        worst_err = max(worst_err, res.error)
        max_iters = max(max_iters, res.iterations)
        if not (res.reachable and res.error < 1e-4 and res.iterations <= 100):
            failures += 1
            needed.append(fabrik_solve(chain, pts, target, max_iters=10_000).iterations)
    dt = time.perf_counter() - t0
    # unreachable targets
    reach_err = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 7))
        lengths = rng.uniform(0.3, 1.5, n)
        chain = IkChain(tuple(range(n + 1)), tuple(lengths))
        pts = np.vstack([np.zeros(3), np.cumsum(np.outer(lengths, [0, 1.0, 0]), axis=0)])
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        target = d * lengths.sum() * rng.uniform(1.01, 3.0)
        res = fabrik_solve(chain, pts, target)
        reach_err = max(reach_err, float(np.linalg.norm(res.positions[-1] - d * lengths.sum())))
    ok = failures == 0 and worst_drift < 1e-9 and reach_err < 1e-9 and dt < 5
    report(3, ok, f"1000 reachable targets: {failures} not within 1e-4 after 100 iterations (max error {worst_err:.1e}; "
                  f"uncapped they need {sorted(needed)} iterations), bone drift {worst_drift:.1e}; "
                  f"unreachable max-reach error {reach_err:.1e}; {dt:.2f}s (< 5s)")


def test_criterion_04_target_propagation(report):
    exact = all(
        propagation_weights(T, tk)[tk] == 1.0
        and (tk == 0 or propagation_weights(T, tk)[0] == 0.0)
        and (tk == T - 1 or propagation_weights(T, tk)[-1] == 0.0)
        for T in range(1, 40) for tk in range(T)
    )
    skel = make_humanoid()
    chain = IkChain.from_names(skel, "RightUpLeg", "RightFoot")
    kick = make_kick(skel)
    worst_end, worst_key, unreachable = 0.0, 0.0, 0
    for seed in range(100):
        res = synthesize_ik_motion(skel, kick, chain, PRESET_SPACES["kick"], np.random.default_rng(seed))
        worst_end = max(worst_end, float(np.max(np.abs(res.motion.frames[[0, -1]] - kick.frames[[0, -1]]))))
        ee = forward_kinematics(skel, res.motion.frames[res.t_key])[chain.end_effector]
        worst_key = max(worst_key, float(np.linalg.norm(ee - res.target)))
        unreachable += not res.reachable
    ok = exact and worst_end < 1e-4 and worst_key < 1e-3 and unreachable == 0
    report(4, ok, f"weights exact={exact}; 100 kick runs: endpoint change {worst_end:.1e} (< 1e-4), "
                  f"keyframe error {worst_key:.1e} (< 1e-3), unreachable {unreachable}")


def test_criterion_05_dtw_brute_force(report):
    rng = np.random.default_rng(5)
    mismatches, self_max, asym = 0, 0.0, 0.0
    for _ in range(200):
        n, m = rng.integers(1, 7, size=2)
        a = metric_motion(rng.uniform(-3, 3, (n, 3)))
        b = metric_motion(rng.uniform(-3, 3, (m, 3)))
        mismatches += dtw(a, b, METRIC_SKEL) != brute_force_dtw(distance_matrix(a, b, METRIC_SKEL))
        self_max = max(self_max, dtw(a, a, METRIC_SKEL))
        asym = max(asym, abs(dtw(a, b, METRIC_SKEL) - dtw(b, a, METRIC_SKEL)))
    ok = mismatches == 0 and self_max == 0.0 and asym < 1e-12
    report(5, ok, f"200 pairs: {mismatches} mismatches vs enumeration, max dtw(a,a)={self_max}, asymmetry {asym:.1e}")


def test_criterion_06_mmd(report):
    rng = np.random.default_rng(6)

    def sample(n, shift):
        return [metric_motion(rng.normal(scale=0.2, size=(8, 3)) + shift) for _ in range(n)]

    X, Y = sample(6, 0.0), sample(5, 0.4)
    self_val = mmd(X, X, METRIC_SKEL)
    asym = abs(mmd(X, Y, METRIC_SKEL) - mmd(Y, X, METRIC_SKEL))
    d_aa = np.array([[0.0, 1.0], [1.0, 0.0]])
    d_bb = np.array([[0.0, 2.0], [2.0, 0.0]])
    d_ab = np.array([[1.0, 1.0], [2.0, 3.0]])
    hand = (2 + 2 * math.exp(-0.5)) / 4 + (2 + 2 * math.exp(-2)) / 4 \
        - 2 * (2 * math.exp(-0.5) + math.exp(-2) + math.exp(-4.5)) / 4
    hand_err = abs(mmd_from_distances(d_aa, d_bb, d_ab, 1.0) - hand)
    vals = []
    for shift in (0.1, 0.5, 1.5):
        r = np.random.default_rng(60)
        A = [metric_motion(r.normal(scale=0.2, size=(8, 3))) for _ in range(6)]
        B = [metric_motion(r.normal(scale=0.2, size=(8, 3)) + shift) for _ in range(6)]
        vals.append(mmd(A, B, METRIC_SKEL))
    mono = vals[0] < vals[1] < vals[2]
    ok = self_val < 1e-12 and asym < 1e-12 and hand_err < 1e-12 and mono
    report(6, ok, f"MMD(X,X)={self_val:.1e}, asymmetry {asym:.1e}, 2x2 hand case error {hand_err:.1e}, "
                  f"separations 0.1/0.5/1.5 -> {vals[0]:.4f} < {vals[1]:.4f} < {vals[2]:.4f}: {mono}")


def test_criterion_07_sampling_near_samples(report):
    rng = np.random.default_rng(7)
    d = 4
    centers = np.array([[0, 0, 0, 0], [8, 0, 0, 0], [0, 8, 0, 0.0]])
    embs = []
    for k, c in enumerate(centers):
        for i in range(6):
            # the last cluster shares one mean so its draws are exactly N(mu, mean sigma2)
            mu = c if k == 2 else c + rng.normal(scale=0.5, size=d)
            embs.append(LatentEmbedding(f"{k}_{i}", mu, rng.uniform(0.05, 0.3, size=d)))
    model = kmeans_fit(embs, n_c=3, seed=0)
    t0 = time.perf_counter()
    lines, ok = [], True
    for c in range(3):
        members = model.members(c)
        Z, _ = sample_near_samples_batch(embs, model, 100_000, n_s=2, rng=np.random.default_rng(70 + c), cluster=c)
        MU = np.stack([embs[i].mu for i in members])
        S2 = np.stack([embs[i].sigma2 for i in members])
        m = len(members)
        cov = np.diag(S2.mean(axis=0)) + np.cov(MU, rowvar=False, ddof=0) / 2 * (m - 2) / (m - 1)
        se = np.sqrt(np.diag(cov) / len(Z))
        z_score = float(np.max(np.abs(Z.mean(axis=0) - MU.mean(axis=0)) / se))
        rel = float(np.max(np.abs(np.cov(Z, rowvar=False) - cov)) / np.max(np.diag(cov)))
        ok &= z_score < 3 and rel < 0.05
        lines.append(f"cluster {c}: mean {z_score:.2f} SE, cov rel err {rel:.3f}")
    same_mu = next(c for c in range(3) if np.allclose(model.centroids[c], centers[2]))
    Z, _ = sample_near_samples_batch(embs, model, 100_000, 2, np.random.default_rng(77), cluster=same_mu)
    target = np.diag(np.mean([embs[i].sigma2 for i in model.members(same_mu)], axis=0))
    rel_diag = float(np.max(np.abs(np.cov(Z, rowvar=False) - target)) / np.max(np.diag(target)))
    dt = time.perf_counter() - t0
    ok &= rel_diag < 0.05 and dt < 10
    report(7, ok, f"n_c=3, n_s=2, 1e5 draws per cluster; {'; '.join(lines)}; "
                  f"shared-mean cluster vs diag(mean sigma2) rel err {rel_diag:.3f}; {dt:.2f}s (< 10s)")


def test_criterion_08_pd_control(report):
    char = SimCharacter.create(1, gravity=(0.0, 0.0, 0.0))
    w = math.sqrt(300.0 / 0.75)
    s = SimState(np.zeros(1), np.zeros(1), np.zeros(3), np.zeros(3))
    step, worst = 0.5, 0.0
    for k in range(1, 1001):
        tau = pd_torque(s.q, s.qdot, [step], char.kp, char.kd, char.torque_limit)
        s = sim_step(char, s, tau, np.zeros(3), 1e-3)
        t = k * 1e-3
        worst = max(worst, abs(s.q[0] - step * (1 - (1 + w * t) * math.exp(-w * t))) / step)
    q = np.random.default_rng(8).uniform(-3, 3, 20)
    eq = pd_torque(q, np.zeros(20), q, 300.0, 30.0, 200.0)
    zero = bool(np.all(eq == 0.0))
    report(8, worst < 0.02 and zero, f"critically damped step max relative deviation {worst:.4f} (< 0.02); "
                                     f"equilibrium torque exactly zero={zero}")


def test_criterion_09_residual_benefit(report):
    skel = make_humanoid()
    goal = sinusoid_root_goal(skel)
    char = SimCharacter.for_skeleton(skel)
    t0 = time.perf_counter()
    runs = {}
    for flag in (True, False):
        res = track_motion(char, skel, goal, use_residual=flag)
        d = res.motion.frames[:, :3] - goal.frames[:, :3]
        runs[flag] = (float(np.sqrt(np.mean(np.sum(d * d, axis=1)))), res.motion.frames)
    again = track_motion(char, skel, goal, use_residual=True).motion.frames
    dt = time.perf_counter() - t0
    det = bool(np.array_equal(again, runs[True][1]))
    ratio = runs[False][0] / runs[True][0]
    report(9, ratio >= 2 and det and dt < 5,
           f"root RMSE {runs[True][0]:.4f} m with residual vs {runs[False][0]:.4f} m without ({ratio:.1f}x, >= 2x); "
           f"deterministic={det}; {dt:.2f}s (< 5s)")


def test_criterion_10_normalized_reward(report):
    rng = np.random.default_rng(10)
    bounds_ok, worst = True, 0.0
    for _ in range(200):
        T = int(rng.integers(1, 300))
        mx = rng.uniform(0.5, 2.0, T)
        r = mx * rng.uniform(1e-6, 1.0, T)
        v = normalized_reward(RewardTrace(r, mx))
        bounds_ok &= 0 < v <= 1
        worst = max(worst, abs(v - sum(a / b for a, b in zip(r, mx)) / T))
    perfect = normalized_reward(RewardTrace(np.full(50, 0.7), np.full(50, 0.7)))
    skel = make_humanoid()
    tracked = track_motion(SimCharacter.for_skeleton(skel), skel, Motion(1 / 30, rest_frames(skel, 10))).r_norm
    ok = bounds_ok and perfect == 1.0 and tracked == 1.0 and worst < 1e-12
    report(10, ok, f"200 random traces in (0, 1]={bounds_ok}; perfect trace {perfect}, equilibrium tracking {tracked}; "
                   f"direct-sum deviation {worst:.1e} (< 1e-12)")


def test_criterion_11_correction_efficacy(report):
    skel = make_humanoid()
    kick = make_kick(skel)
    char = SimCharacter.for_skeleton(skel)
    T = kick.n_frames
    floating = np.array(kick.frames)
    # root bobs from 0.3 m above its standing height to 0.2 m below (penetrating)
    floating[:, 1] = STAND_HEIGHT + 0.25 * np.cos(np.linspace(0, 3 * np.pi, T)) + 0.05
    spike = np.array(kick.frames)
    spike[12, rot_index(skel, "RightLeg", "X")] += 1.5
    lines, ok = [], True
    for name, frames in (("floating root", floating), ("velocity spike", spike)):
        goal = kick.with_frames(frames)
        out = track_motion(char, skel, goal).motion
        pen_goal = sum(d.type == "ground_penetration" for d in validate_plausibility(skel, goal))
        pen_out = sum(d.type == "ground_penetration" for d in validate_plausibility(skel, out))
        w_goal, w_out = max_angular_speed(skel, goal), max_angular_speed(skel, out)
        ok &= pen_out == 0 and w_out < w_goal
        lines.append(f"{name}: penetration runs {pen_goal} -> {pen_out}, max angular speed {w_goal:.1f} -> {w_out:.1f} rad/s")
    report(11, ok, "; ".join(lines))


def test_criterion_12_debias_recovery(report):
    rng = np.random.default_rng(12)
    D = 8

    def pairs(f):
        out = []
        for _ in range(4):
            clean = rng.uniform(-2, 2, size=(60, D))
            out.append(TrainingPair(Motion(1 / 30, f(clean)), Motion(1 / 30, clean)))
        return out

    def resid(model, ps):
        return max(float(np.max(np.abs(apply_debias(model, p.biased).frames - p.unbiased.frames))) for p in ps)

    off = rng.normal(size=D)
    A = np.eye(D) + 0.3 * rng.normal(size=(D, D))
    ps_off, ps_lin = pairs(lambda x: x + off), pairs(lambda x: x @ A + off)
    r_off = resid(fit_debias(ps_off, "affine", lam=1e-8), ps_off)
    r_lin = resid(fit_debias(ps_lin, "affine", lam=1e-8), ps_lin)
    mlp = fit_debias(pairs(np.tanh)[:1], "mlp", lam=1e-4, hidden=16, epochs=20)
    g = gradient_check(mlp, rng.normal(size=(12, D)))
    report(12, r_off < 1e-6 and r_lin < 1e-6 and g < 1e-4,
           f"offset residual {r_off:.1e}, linear residual {r_lin:.1e} (< 1e-6, lambda=1e-8); "
           f"MLP gradient check rel error {g:.1e} (< 1e-4)")


def test_criterion_13_pipeline_determinism(report, tmp_path):
    t0 = time.perf_counter()
    manifest = write_corpus(tmp_path / "data", n_train=3, n_test=2)
    cfg = write_config(tmp_path, manifest, multiplier=10)
    a = run_pipeline(cfg, tmp_path / "run_a")
    b = run_pipeline(cfg, tmp_path / "run_b")
    identical = a == b
    n_aug = sum(1 for k in a if k.startswith("augmented/") and k.endswith(".bvh"))
    dt = time.perf_counter() - t0
    report(13, identical and n_aug == 30,
           f"two augment->correct->debias->evaluate runs byte-identical={identical} ({len(a)} files each); "
           f"multiplier 10 on 3 training motions -> {n_aug} files (30); {dt:.1f}s (suite time reported at session end)")
