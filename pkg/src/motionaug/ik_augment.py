"""Keyframe-anchored IK motion synthesis.

A target for the end effector on the keyframe is drawn from a cylindrical
sampling box around the root, the resulting offset is faded linearly to zero
toward both ends of the clip, and IK is solved frame by frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bvh_io import Motion, Skeleton
from .kinematics import (
    DEFAULT_MAX_ITERS,
    DEFAULT_TOLERANCE,
    IkChain,
    forward_kinematics,
    ik_frame_detailed,
)


@dataclass(frozen=True)
class TargetSamplingSpace:
    """Multipliers on keyframe radius/height and an additive azimuth offset range."""

    radial_range: tuple[float, float]
    height_range: tuple[float, float]
    angle_range: tuple[float, float]

    def __post_init__(self):
        for name in ("radial_range", "height_range", "angle_range"):
            lo, hi = (float(v) for v in getattr(self, name))
            if lo > hi:
                raise ValueError(f"{name}: lower bound exceeds upper bound")
            object.__setattr__(self, name, (lo, hi))
        lo, hi = self.angle_range
        if lo <= -math.pi or hi > math.pi:
            raise ValueError("angle offsets must lie in (-pi, pi]")

    @classmethod
    def from_dict(cls, d: dict) -> "TargetSamplingSpace":
        return cls(tuple(d["radial_range"]), tuple(d["height_range"]), tuple(d["angle_range"]))

    def to_dict(self) -> dict:
        return {"radial_range": list(self.radial_range), "height_range": list(self.height_range),
                "angle_range": list(self.angle_range)}


# per-class presets used for the punch / kick / walk experiments
PRESET_SPACES = {
    "punch": TargetSamplingSpace((0.5, 2.0), (1.0, 1.0), (-1.7, 1.7)),
    "kick": TargetSamplingSpace((0.8, 1.2), (0.8, 1.2), (-0.785, 0.785)),
    "walk": TargetSamplingSpace((0.5, 2.0), (1.0, 1.0), (-0.3, 0.3)),
}

IDENTITY_SPACE = TargetSamplingSpace((1.0, 1.0), (1.0, 1.0), (0.0, 0.0))


@dataclass(frozen=True)
class KeyframeInfo:
    t_key: int
    p_key: np.ndarray
    root: np.ndarray
    local: np.ndarray  # p_key - root, world-aligned axes
    r: float
    h: float
    theta: float


def to_cylindrical(v) -> tuple[float, float, float]:
    """(radius in the XZ plane, height along Y, azimuth atan2(z, x))."""
    x, y, z = (float(c) for c in v)
    theta = math.atan2(z, x)
    return math.hypot(x, z), y, (math.pi if theta == -math.pi else theta)


def detect_keyframe(skeleton: Skeleton, motion: Motion, chain: IkChain) -> KeyframeInfo:
    """Frame where the end effector is farthest from the root (earliest on ties)."""
    ee = chain.end_effector
    best_t, best_d = 0, -1.0
    best = None
    for t, frame in enumerate(motion.frames):
        pos = forward_kinematics(skeleton, frame)
        local = pos[ee] - pos[0]
        d = float(np.linalg.norm(local))
        if d > best_d:
            best_t, best_d, best = t, d, (pos[ee], pos[0], local)
    p_key, root, local = best
    r, h, theta = to_cylindrical(local)
    if r < 1e-9:
        raise ValueError(f"keyframe {best_t}: end effector lies on the root's vertical axis")
    return KeyframeInfo(best_t, p_key.copy(), root.copy(), local.copy(), r, h, theta)


def sample_target(space: TargetSamplingSpace, key: KeyframeInfo, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw of (u_r * r, u_h * h, theta + u_theta), returned in world space."""
    if key.r <= 0:
        raise ValueError("keyframe radius must be positive")
    u_r = rng.uniform(*space.radial_range)
    u_h = rng.uniform(*space.height_range)
    u_t = rng.uniform(*space.angle_range)
    x, y, z = key.local
    c, s = math.cos(u_t), math.sin(u_t)
    # rotating the horizontal component keeps the identity space exact
    new_local = np.array([u_r * (x * c - z * s), u_h * y, u_r * (x * s + z * c)])
    return key.p_key + (new_local - key.local)


def propagation_weights(n_frames: int, t_key: int) -> np.ndarray:
    """Linear ramp: 0 at the clip ends, 1 on the keyframe."""
    if not 0 <= t_key < n_frames:
        raise ValueError("t_key out of range")
    t = np.arange(n_frames, dtype=float)
    f = np.zeros(n_frames)
    last = n_frames - 1
    if t_key > 0:
        f[: t_key + 1] = t[: t_key + 1] / t_key
    if t_key < last:
        f[t_key + 1:] = (last - t[t_key + 1:]) / (last - t_key)
    f[t_key] = 1.0
    return f


def propagate_targets(end_effector_traj, t_key: int, p_sample) -> np.ndarray:
    traj = np.asarray(end_effector_traj, dtype=float)
    diff = np.asarray(p_sample, dtype=float) - traj[t_key]
    f = propagation_weights(len(traj), t_key)
    out = traj + f[:, None] * diff
    out[t_key] = np.asarray(p_sample, dtype=float)
    return out


@dataclass
class SynthesisResult:
    motion: Motion
    t_key: int
    target: np.ndarray
    reachable: bool
    unreachable_frames: list[int] = field(default_factory=list)
    keyframe_error: float = 0.0


def synthesize_ik_motion(
    skeleton: Skeleton,
    motion: Motion,
    chain: IkChain,
    space: TargetSamplingSpace,
    rng: np.random.Generator,
    tolerance: float = DEFAULT_TOLERANCE,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> SynthesisResult:
    """One augmented motion: sample a keyframe target, propagate, solve IK per frame."""
    skeleton.check_pose_width(motion.width)
    key = detect_keyframe(skeleton, motion, chain)
    target = sample_target(space, key, rng)
    ee = chain.end_effector
    traj = np.stack([forward_kinematics(skeleton, f)[ee] for f in motion.frames])
    targets = propagate_targets(traj, key.t_key, target)
    frames = np.empty_like(motion.frames)
    unreachable = []
    key_err = 0.0
    for t, (frame, tgt) in enumerate(zip(motion.frames, targets)):
        res = ik_frame_detailed(skeleton, frame, chain, tgt, tolerance, max_iters)
        frames[t] = res.pose
        if not res.reachable:
            unreachable.append(t)
        if t == key.t_key:
            key_err = res.error
    return SynthesisResult(
        motion.with_frames(frames),
        key.t_key,
        target,
        key.t_key not in unreachable,
        unreachable,
        key_err,
    )
