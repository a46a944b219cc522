"""Forward kinematics and FABRIK inverse kinematics over skeleton chains."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .bvh_io import Skeleton

DEFAULT_TOLERANCE = 1e-4
DEFAULT_MAX_ITERS = 100


def _axis_matrix(axis: str, a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    if axis == "X":
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == "Y":
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_matrix(order: str, angles) -> np.ndarray:
    """Intrinsic rotation composed in channel order: R = R_a0 @ R_a1 @ R_a2."""
    R = np.eye(3)
    for axis, a in zip(order, angles):
        R = R @ _axis_matrix(axis, a)
    return R


def local_rotation(skeleton: Skeleton, i: int, pose: np.ndarray) -> np.ndarray:
    j = skeleton.joints[i]
    if not j.channels:
        return np.eye(3)
    return euler_to_matrix(j.rotation_order, pose[skeleton.rotation_indices(i)])


def forward_kinematics_full(skeleton: Skeleton, pose) -> tuple[np.ndarray, np.ndarray]:
    """World positions (J, 3) and world rotations (J, 3, 3) for one pose.

    The root translation is added last, so shifting it shifts every joint by
    exactly the same vector.
    """
    pose = np.asarray(pose, dtype=float)
    skeleton.check_pose_width(pose.shape[-1])
    J = skeleton.n_joints
    pos = np.empty((J, 3))
    rot = np.empty((J, 3, 3))
    for i, j in enumerate(skeleton.joints):
        R_local = local_rotation(skeleton, i, pose)
        off = np.asarray(j.offset)
        if j.parent is None:
            pos[i] = off
            rot[i] = R_local
        else:
            p = j.parent
            pos[i] = pos[p] + rot[p] @ off
            rot[i] = rot[p] @ R_local
    pos += skeleton.root_translation(pose)
    return pos, rot


def forward_kinematics(skeleton: Skeleton, pose) -> np.ndarray:
    """World-space joint positions, shape (n_joints, 3)."""
    return forward_kinematics_full(skeleton, pose)[0]


def motion_positions(skeleton: Skeleton, frames: np.ndarray) -> np.ndarray:
    """FK over every frame: (T, n_joints, 3)."""
    return np.stack([forward_kinematics(skeleton, f) for f in np.atleast_2d(frames)])


@dataclass(frozen=True)
class IkChain:
    """Root-to-end-effector joint path with fixed segment lengths."""

    joint_indices: tuple[int, ...]
    bone_lengths: tuple[float, ...]

    @classmethod
    def from_names(cls, skeleton: Skeleton, base: str, end: str) -> "IkChain":
        b, e = skeleton.index(base), skeleton.index(end)
        path = [e]
        while path[-1] != b:
            parent = skeleton.joints[path[-1]].parent
            if parent is None:
                raise ValueError(f"{base!r} is not an ancestor of {end!r}")
            path.append(parent)
        path.reverse()
        if len(path) < 2:
            raise ValueError("an IK chain needs at least two joints")
        lengths = tuple(float(np.linalg.norm(skeleton.joints[k].offset)) for k in path[1:])
        if min(lengths) <= 0:
            raise ValueError("zero-length bone in IK chain")
        return cls(tuple(path), lengths)

    @property
    def end_effector(self) -> int:
        return self.joint_indices[-1]

    @property
    def total_length(self) -> float:
        return float(sum(self.bone_lengths))


@dataclass
class FabrikResult:
    positions: np.ndarray
    iterations: int
    error: float
    reachable: bool
    errors: list[float] = field(default_factory=list)


def _check_lengths(positions: np.ndarray, lengths: np.ndarray, tol: float = 1e-6) -> None:
    actual = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    if np.any(np.abs(actual - lengths) > tol):
        raise ValueError("initial positions are inconsistent with chain bone lengths")


def _place(anchor: np.ndarray, toward: np.ndarray, length: float) -> np.ndarray:
    d = toward - anchor
    n = np.linalg.norm(d)
    if n == 0.0:
        # coincident joints: any direction keeps the bone length
        return anchor + np.array([length, 0.0, 0.0])
    return anchor + d * (length / n)


def fabrik_solve(
    chain: IkChain,
    initial_positions,
    target,
    tolerance: float = DEFAULT_TOLERANCE,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> FabrikResult:
    """Forward-and-backward reaching IK with a fixed chain base."""
    pts = np.array(initial_positions, dtype=float)
    target = np.asarray(target, dtype=float)
    if not np.all(np.isfinite(target)):
        raise ValueError("IK target must be finite")
    lengths = np.asarray(chain.bone_lengths)
    if pts.shape != (len(lengths) + 1, 3):
        raise ValueError("initial positions do not match chain size")
    _check_lengths(pts, lengths)
    base = pts[0].copy()
    n = len(pts)

    if np.linalg.norm(target - base) > lengths.sum():
        # out of reach: straighten the chain toward the target
        for k in range(n - 1):
            pts[k + 1] = _place(pts[k], target, lengths[k])
        err = float(np.linalg.norm(pts[-1] - target))
        return FabrikResult(pts, 1, err, False, [err])

    err = float(np.linalg.norm(pts[-1] - target))
    errors = [err]
    it = 0
    while err >= tolerance and it < max_iters:
        # backward pass: pin the end effector to the target
        pts[-1] = target
        for k in range(n - 2, -1, -1):
            pts[k] = _place(pts[k + 1], pts[k], lengths[k])
        # forward pass: re-pin the base
        pts[0] = base
        for k in range(n - 1):
            pts[k + 1] = _place(pts[k], pts[k + 1], lengths[k])
        err = float(np.linalg.norm(pts[-1] - target))
        errors.append(err)
        it += 1
    return FabrikResult(pts, it, err, True, errors)


def _minimal_rotation(a: np.ndarray, b: np.ndarray, fallback_axes: np.ndarray) -> np.ndarray | None:
    """Smallest rotation taking unit vector ``a`` onto ``b``; None when a == b."""
    c = float(np.clip(a @ b, -1.0, 1.0))
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        if c > 0:
            return None
        # antipodal: half turn about the first usable local axis orthogonal to a
        for cand in fallback_axes:
            perp = cand - (cand @ a) * a
            norm = np.linalg.norm(perp)
            if norm > 1e-9:
                return Rotation.from_rotvec(np.pi * perp / norm).as_matrix()
        raise ValueError("no axis available for antipodal rotation")
    angle = np.arctan2(s, c)
    return Rotation.from_rotvec(axis / s * angle).as_matrix()


def matrix_to_euler_near(order: str, R: np.ndarray, reference) -> np.ndarray:
    """Euler angles for ``R`` in ``order``, picking the solution nearest ``reference``."""
    reference = np.asarray(reference, dtype=float)
    with warnings.catch_warnings():
        # at gimbal lock scipy zeroes the third angle, which is still a valid solution
        warnings.simplefilter("ignore", UserWarning)
        a = Rotation.from_matrix(R).as_euler(order)
    if len(set(order)) == 3:
        alt = np.array([a[0] + np.pi, np.pi - a[1], a[2] + np.pi])
    else:
        alt = np.array([a[0] + np.pi, -a[1], a[2] + np.pi])
    best, best_d = None, np.inf
    for cand in (a, alt):
        cand = reference + np.mod(cand - reference + np.pi, 2 * np.pi) - np.pi
        d = float(np.sum((cand - reference) ** 2))
        if d < best_d:
            best, best_d = cand, d
    return best


def positions_to_pose(skeleton: Skeleton, chain: IkChain, solved_positions, reference_pose) -> np.ndarray:
    """Rewrite chain joint angles so FK reproduces ``solved_positions``.

    Each chain joint gets the minimal rotation that swings its outgoing bone
    onto the solved direction; joints outside the chain keep their angles.
    The end effector's own angles are left unchanged.
    """
    pose = np.array(reference_pose, dtype=float)
    solved = np.asarray(solved_positions, dtype=float)
    idx = chain.joint_indices
    _, rot = forward_kinematics_full(skeleton, pose)
    base_parent = skeleton.joints[idx[0]].parent
    parent_rot = rot[base_parent] if base_parent is not None else np.eye(3)
    for k, j in enumerate(idx[:-1]):
        child = skeleton.joints[idx[k + 1]]
        R_local = local_rotation(skeleton, j, pose)
        R_world = parent_rot @ R_local
        off = np.asarray(child.offset)
        cur = R_world @ off
        want = solved[k + 1] - solved[k]
        if np.linalg.norm(want) < 1e-12 or np.linalg.norm(cur) < 1e-12:
            raise ValueError("degenerate zero-length bone direction")
        delta = _minimal_rotation(cur / np.linalg.norm(cur), want / np.linalg.norm(want), R_world.T)
        if delta is not None:
            rot_idx = skeleton.rotation_indices(j)
            if not rot_idx:
                raise ValueError(f"chain joint {skeleton.joints[j].name!r} has no rotation channels")
            new_local = parent_rot.T @ delta @ R_world
            pose[rot_idx] = matrix_to_euler_near(skeleton.joints[j].rotation_order, new_local, pose[rot_idx])
            R_world = parent_rot @ local_rotation(skeleton, j, pose)
        parent_rot = R_world
    return pose


@dataclass
class IkFrameResult:
    pose: np.ndarray
    error: float
    reachable: bool
    iterations: int


def ik_frame_detailed(
    skeleton: Skeleton,
    pose,
    chain: IkChain,
    target,
    tolerance: float = DEFAULT_TOLERANCE,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> IkFrameResult:
    pose = np.asarray(pose, dtype=float)
    pts = forward_kinematics(skeleton, pose)[list(chain.joint_indices)]
    res = fabrik_solve(chain, pts, target, tolerance, max_iters)
    if res.iterations == 0:
        return IkFrameResult(pose.copy(), res.error, True, 0)
    new_pose = positions_to_pose(skeleton, chain, res.positions, pose)
    return IkFrameResult(new_pose, res.error, res.reachable, res.iterations)


def ik_frame(skeleton: Skeleton, pose, chain: IkChain, target, tolerance: float = DEFAULT_TOLERANCE,
             max_iters: int = DEFAULT_MAX_ITERS) -> np.ndarray:
    """Move the chain's end effector toward ``target``; returns the new pose."""
    return ik_frame_detailed(skeleton, pose, chain, target, tolerance, max_iters).pose
