"""PD tracking with a PD-residual root force, on simplified dynamics.

The character is a set of decoupled per-DOF double integrators (one per
rotation channel) plus a point-mass root under gravity with an inelastic
ground contact. Joint torques come from a PD law toward the goal pose; the
root receives an external force from a second PD law on the root position
error, clamped in magnitude. There is no policy learning: the goal pose is
tracked directly.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .bvh_io import Motion, Skeleton, wrap_angle
from .kinematics import forward_kinematics, motion_positions


class SimulationDiverged(RuntimeError):
    def __init__(self, message: str, frame: int | None = None, step: int | None = None):
        super().__init__(message)
        self.frame = frame
        self.step = step


def _vec(x, n: int, name: str) -> np.ndarray:
    a = np.broadcast_to(np.asarray(x, dtype=float), (n,)).copy()
    if np.any(a <= 0) or not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be positive and finite")
    return a


@dataclass(frozen=True)
class SimCharacter:
    dof_count: int
    inertia: np.ndarray
    kp: np.ndarray
    kd: np.ndarray
    torque_limit: np.ndarray
    root_mass: float = 60.0
    root_kp: float = 500.0
    root_kd: float = 50.0
    residual_force_limit: float = 300.0
    gravity: tuple[float, float, float] = (0.0, -9.81, 0.0)
    ground_height: float = 0.0

    @classmethod
    def create(
        cls,
        dof_count: int,
        inertia=0.75,
        kp=300.0,
        kd=30.0,
        torque_limit=200.0,
        **kw,
    ) -> "SimCharacter":
        n = int(dof_count)
        return cls(
            n,
            _vec(inertia, n, "inertia"),
            _vec(kp, n, "kp"),
            _vec(kd, n, "kd"),
            _vec(torque_limit, n, "torque_limit"),
            **kw,
        )

    @classmethod
    def for_skeleton(cls, skeleton: Skeleton, **kw) -> "SimCharacter":
        return cls.create(int(skeleton.rotation_mask().sum()), **kw)

    def __post_init__(self):
        for name in ("root_mass", "root_kp", "root_kd", "residual_force_limit"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("inertia", "kp", "kd", "torque_limit"):
            if np.shape(getattr(self, name)) != (self.dof_count,):
                raise ValueError(f"{name} must have one entry per DOF")
        under = self.kd**2 < 4.0 * self.kp * self.inertia
        if np.any(under):
            warnings.warn(f"{int(under.sum())} DOF(s) have underdamped PD gains", stacklevel=3)


@dataclass(frozen=True)
class SimState:
    q: np.ndarray
    qdot: np.ndarray
    root_pos: np.ndarray
    root_vel: np.ndarray
    time: float = 0.0

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qdot))
            and np.all(np.isfinite(self.root_pos)) and np.all(np.isfinite(self.root_vel))
            and math.isfinite(self.time)
        )


def pd_torque(q, qdot, q_target, kp, kd, torque_limit) -> np.ndarray:
    """tau = clip(kp * wrap(q_target - q) - kd * qdot, +-torque_limit)."""
    q, qdot, q_target = (np.asarray(v, dtype=float) for v in (q, qdot, q_target))
    if not (q.shape == qdot.shape == q_target.shape):
        raise ValueError("PD inputs must share a shape")
    tau = np.asarray(kp) * wrap_angle(q_target - q) - np.asarray(kd) * qdot
    lim = np.asarray(torque_limit, dtype=float)
    return np.clip(tau, -lim, lim)


def pd_residual_force(root_pos, root_vel, goal_root_pos, kp: float, kd: float, limit: float) -> np.ndarray:
    """PD force on the root toward the goal root position, scaled down to at most ``limit``."""
    e = np.asarray(goal_root_pos, dtype=float) - np.asarray(root_pos, dtype=float)
    f = kp * e - kd * np.asarray(root_vel, dtype=float)
    n = float(np.linalg.norm(f))
    if n > limit:
        f = f * (limit / n)
    return f


def sim_step(
    char: SimCharacter,
    state: SimState,
    torques,
    residual_force,
    dt: float,
    ground_offset: float = 0.0,
) -> SimState:
    """One semi-implicit Euler step; ``ground_offset`` is the root height at which the body touches ground."""
    if not 0 < dt <= 0.01:
        raise ValueError("dt must lie in (0, 0.01]")
    tau = np.asarray(torques, dtype=float)
    if tau.shape != (char.dof_count,):
        raise ValueError("torque vector does not match DOF count")
    qdot = state.qdot + (tau / char.inertia) * dt
    q = state.q + qdot * dt
    acc = np.asarray(char.gravity, dtype=float) + np.asarray(residual_force, dtype=float) / char.root_mass
    root_vel = state.root_vel + acc * dt
    root_pos = state.root_pos + root_vel * dt
    floor = char.ground_height + ground_offset
    if root_pos[1] < floor:
        root_pos[1] = floor
        root_vel[1] = 0.0
    new = SimState(q, qdot, root_pos, root_vel, state.time + dt)
    if not new.is_finite():
        raise SimulationDiverged(f"non-finite state at t={new.time:.6f}")
    return new


@dataclass(frozen=True)
class RewardWeights:
    """Surrogate imitation reward: w_pose * exp(-a_pose |dq|^2) + w_root * exp(-a_root |droot|^2)."""

    w_pose: float = 0.8
    w_root: float = 0.2
    a_pose: float = 2.0
    a_root: float = 10.0

    def __post_init__(self):
        if abs(self.w_pose + self.w_root - 1.0) > 1e-9:
            raise ValueError("reward weights must sum to 1")
        if self.w_pose < 0 or self.w_root < 0 or self.a_pose <= 0 or self.a_root <= 0:
            raise ValueError("reward weights must be non-negative and scales positive")

    @property
    def max_reward(self) -> float:
        return self.w_pose + self.w_root


def imitation_reward(sim_q, goal_q, sim_root, goal_root, weights: RewardWeights = RewardWeights()) -> float:
    dq = wrap_angle(np.asarray(sim_q, dtype=float) - np.asarray(goal_q, dtype=float))
    dr = np.asarray(sim_root, dtype=float) - np.asarray(goal_root, dtype=float)
    if dq.shape != np.shape(goal_q) or dr.shape != np.shape(goal_root):
        raise ValueError("reward inputs differ in shape")
    return float(weights.w_pose * math.exp(-weights.a_pose * float(dq @ dq))
                 + weights.w_root * math.exp(-weights.a_root * float(dr @ dr)))


@dataclass
class RewardTrace:
    r_im: np.ndarray
    r_im_max: np.ndarray

    def __post_init__(self):
        self.r_im = np.asarray(self.r_im, dtype=float)
        self.r_im_max = np.asarray(self.r_im_max, dtype=float)
        if self.r_im.shape != self.r_im_max.shape:
            raise ValueError("reward and max-reward traces differ in length")


def normalized_reward(trace: RewardTrace) -> float:
    """Mean over frames of obtained reward divided by the frame's maximum."""
    if trace.r_im.size == 0:
        raise ValueError("empty reward trace")
    return float(np.mean(trace.r_im / trace.r_im_max))


# ---------------------------------------------------------------------------
# tracking

@dataclass
class TrackingResult:
    motion: Motion
    trace: RewardTrace
    diagnostics: dict = field(default_factory=dict)

    @property
    def r_norm(self) -> float:
        return normalized_reward(self.trace)


def _contact_offset(skeleton: Skeleton, pose: np.ndarray, root_pos: np.ndarray) -> float:
    """Root height above the lowest joint for this pose."""
    pos = forward_kinematics(skeleton, pose)
    return float(root_pos[1] - pos[:, 1].min())


def track_motion(
    char: SimCharacter,
    skeleton: Skeleton,
    goal: Motion,
    dt: float = 1.0 / 300.0,
    substeps: int = 10,
    weights: RewardWeights = RewardWeights(),
    use_residual: bool = True,
) -> TrackingResult:
    """Simulate the character tracking ``goal`` and record the resulting motion.

    Every recorded frame is lifted if any joint would sit below the ground.
    """
    skeleton.check_pose_width(goal.width)
    if abs(dt * substeps - goal.frame_time) > 1e-9 * max(1.0, goal.frame_time) + 1e-12:
        raise ValueError(f"dt * substeps = {dt * substeps} != frame_time {goal.frame_time}")
    rot = np.flatnonzero(skeleton.rotation_mask())
    if len(rot) != char.dof_count:
        raise ValueError("character DOF count does not match skeleton rotation channels")
    tr_idx = skeleton.root_translation_indices()
    goal_q = goal.frames[:, rot]
    if tr_idx is not None:
        goal_root = goal.frames[:, tr_idx]
    else:
        goal_root = np.zeros((goal.n_frames, 3))

    out = np.array(goal.frames)
    r_im = np.empty(goal.n_frames)
    max_force = 0.0
    lifts = 0

    def pose_of(state: SimState) -> np.ndarray:
        p = np.array(out[0])
        p[rot] = state.q
        if tr_idx is not None:
            p[tr_idx] = state.root_pos
        return p

    def settle(state: SimState) -> SimState:
        # lift the whole body so no joint is under the ground
        nonlocal lifts
        if tr_idx is None:
            return state
        floor = char.ground_height + _contact_offset(skeleton, pose_of(state), state.root_pos)
        if state.root_pos[1] < floor - 1e-12:
            lifts += 1
            rp, rv = state.root_pos.copy(), state.root_vel.copy()
            rp[1] = floor
            rv[1] = max(rv[1], 0.0)
            return replace(state, root_pos=rp, root_vel=rv)
        return state

    state = settle(SimState(goal_q[0].copy(), np.zeros(len(rot)), goal_root[0].copy(), np.zeros(3), 0.0))
    step = 0
    for t in range(goal.n_frames):
        if t > 0:
            offset = _contact_offset(skeleton, pose_of(state), state.root_pos) if tr_idx is not None else -np.inf
            for _ in range(substeps):
                tau = pd_torque(state.q, state.qdot, goal_q[t], char.kp, char.kd, char.torque_limit)
                if use_residual:
                    force = pd_residual_force(state.root_pos, state.root_vel, goal_root[t],
                                              char.root_kp, char.root_kd, char.residual_force_limit)
                else:
                    force = np.zeros(3)
                max_force = max(max_force, float(np.linalg.norm(force)))
                try:
                    state = sim_step(char, state, tau, force, dt, offset)
                except SimulationDiverged as e:
                    raise SimulationDiverged(f"frame {t}: {e}", frame=t, step=step) from None
                step += 1
            state = settle(state)
        out[t] = pose_of(state)
        r_im[t] = imitation_reward(state.q, goal_q[t], state.root_pos, goal_root[t], weights)

    trace = RewardTrace(r_im, np.full(goal.n_frames, weights.max_reward))
    diagnostics = {"max_residual_force": max_force, "ground_lifts": lifts, "steps": step}
    return TrackingResult(goal.with_frames(out), trace, diagnostics)


# ---------------------------------------------------------------------------
# plausibility checks

@dataclass(frozen=True)
class PlausibilityThresholds:
    ground_height: float = 0.0
    ground_eps: float = 0.01
    contact_height: float = 0.05
    foot_speed_max: float = 0.3
    bone_radius: float = 0.03
    angular_speed_max: float = 25.0
    foot_joints: tuple[str, ...] | None = None


@dataclass(frozen=True)
class Diagnostic:
    type: str
    start_frame: int
    end_frame: int
    magnitude: float

    def to_dict(self) -> dict:
        return {"type": self.type, "start_frame": self.start_frame,
                "end_frame": self.end_frame, "magnitude": self.magnitude}


def _runs(kind: str, values: np.ndarray) -> list[Diagnostic]:
    """Contiguous runs of positive ``values`` (per-frame violation magnitudes)."""
    out = []
    flagged = np.flatnonzero(values > 0)
    if not len(flagged):
        return out
    start = prev = int(flagged[0])
    for f in flagged[1:]:
        f = int(f)
        if f != prev + 1:
            out.append(Diagnostic(kind, start, prev, float(values[start:prev + 1].max())))
            start = f
        prev = f
    out.append(Diagnostic(kind, start, prev, float(values[start:prev + 1].max())))
    return out


def segment_distance(p1, q1, p2, q2) -> np.ndarray:
    """Minimum distance between segments p1-q1 and p2-q2 (broadcast over leading axes).

    Segments must have nonzero length.
    """
    p1, q1, p2, q2 = (np.asarray(v, dtype=float) for v in (p1, q1, p2, q2))
    d1, d2, r = q1 - p1, q2 - p2, p1 - p2
    a = np.sum(d1 * d1, axis=-1)
    e = np.sum(d2 * d2, axis=-1)
    b = np.sum(d1 * d2, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    f = np.sum(d2 * r, axis=-1)
    denom = a * e - b * b
    parallel = denom <= 1e-12 * a * e
    s = np.where(parallel, 0.0, np.clip((b * f - c * e) / np.where(parallel, 1.0, denom), 0.0, 1.0))
    t = (b * s + f) / e
    s = np.where(t < 0, np.clip(-c / a, 0.0, 1.0), np.where(t > 1, np.clip((b - c) / a, 0.0, 1.0), s))
    t = np.clip(t, 0.0, 1.0)
    return np.linalg.norm((p1 + d1 * s[..., None]) - (p2 + d2 * t[..., None]), axis=-1)


def bone_segments(skeleton: Skeleton) -> list[tuple[int, int]]:
    return [(j.parent, i) for i, j in enumerate(skeleton.joints)
            if j.parent is not None and np.linalg.norm(j.offset) > 0]


def _tree_distance_table(skeleton: Skeleton) -> np.ndarray:
    n = skeleton.n_joints
    depth = [0] * n
    for i, j in enumerate(skeleton.joints):
        if j.parent is not None:
            depth[i] = depth[j.parent] + 1
    D = np.zeros((n, n), dtype=int)
    for a in range(n):
        for b in range(a + 1, n):
            x, y, d = a, b, 0
            while x != y:
                if depth[x] >= depth[y]:
                    x = skeleton.joints[x].parent
                else:
                    y = skeleton.joints[y].parent
                d += 1
            D[a, b] = D[b, a] = d
    return D


def non_adjacent_segment_pairs(skeleton: Skeleton) -> list[tuple[int, int]]:
    """Segment index pairs whose endpoints are at least two tree edges apart."""
    segs = bone_segments(skeleton)
    D = _tree_distance_table(skeleton)
    pairs = []
    for i in range(len(segs)):
        for k in range(i + 1, len(segs)):
            if min(D[u, v] for u in segs[i] for v in segs[k]) >= 2:
                pairs.append((i, k))
    return pairs


def default_foot_joints(skeleton: Skeleton) -> list[int]:
    """Leaf joints whose rest-pose height is near the lowest leaf."""
    rest = forward_kinematics(skeleton, np.zeros(skeleton.n_channels))
    parents = {j.parent for j in skeleton.joints}
    leaves = [i for i in range(skeleton.n_joints) if i not in parents]
    y = rest[leaves, 1]
    span = float(rest[:, 1].max() - rest[:, 1].min()) or 1.0
    return [leaf for leaf, h in zip(leaves, y) if h <= y.min() + 0.1 * span]


def validate_plausibility(
    skeleton: Skeleton,
    motion: Motion,
    thresholds: PlausibilityThresholds = PlausibilityThresholds(),
) -> list[Diagnostic]:
    """Flag ground penetration, footskate, limb interpenetration and angular-velocity spikes."""
    skeleton.check_pose_width(motion.width)
    th = thresholds
    pos = motion_positions(skeleton, motion.frames)
    T = motion.n_frames
    diags: list[Diagnostic] = []

    depth = (th.ground_height - th.ground_eps) - pos[:, :, 1].min(axis=1)
    diags += _runs("ground_penetration", np.maximum(depth, 0.0))

    if th.foot_joints is None:
        feet = default_foot_joints(skeleton)
    else:
        feet = [skeleton.index(n) for n in th.foot_joints]
    skate = np.zeros(T)
    if T > 1 and feet:
        fp = pos[:, feet, :]
        horiz = np.linalg.norm(fp[1:, :, [0, 2]] - fp[:-1, :, [0, 2]], axis=2) / motion.frame_time
        low = np.minimum(fp[1:, :, 1], fp[:-1, :, 1]) < th.ground_height + th.contact_height
        excess = np.where(low & (horiz > th.foot_speed_max), horiz, 0.0)
        skate[:-1] = excess.max(axis=1)
    diags += _runs("footskate", skate)

    segs = bone_segments(skeleton)
    pairs = non_adjacent_segment_pairs(skeleton)
    pen = np.zeros(T)
    if pairs:
        ia = np.array([segs[i] for i, _ in pairs])
        ib = np.array([segs[k] for _, k in pairs])
        dist = segment_distance(pos[:, ia[:, 0]], pos[:, ia[:, 1]], pos[:, ib[:, 0]], pos[:, ib[:, 1]])
        gap = 2.0 * th.bone_radius - dist
        pen = np.maximum(gap.max(axis=1), 0.0)
    diags += _runs("interpenetration", pen)

    spikes = np.zeros(T)
    rot = skeleton.rotation_mask()
    if T > 1 and rot.any():
        speed = np.abs(wrap_angle(np.diff(motion.frames[:, rot], axis=0))) / motion.frame_time
        peak = speed.max(axis=1)
        spikes[:-1] = np.where(peak > th.angular_speed_max, peak, 0.0)
    diags += _runs("velocity_spike", spikes)
    return diags


def max_angular_speed(skeleton: Skeleton, motion: Motion) -> float:
    rot = skeleton.rotation_mask()
    if motion.n_frames < 2:
        return 0.0
    return float(np.max(np.abs(wrap_angle(np.diff(motion.frames[:, rot], axis=0)))) / motion.frame_time)
