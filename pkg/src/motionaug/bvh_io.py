"""BVH parsing/serialization and the skeleton/motion data model.

Angles are stored in radians internally; BVH files carry degrees and are
converted at the parse/write boundary. A pose is a flat vector laid out in
skeleton channel order (root translation and rotations first).
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

POSITION_CHANNELS = ("Xpos", "Ypos", "Zpos")
ROTATION_CHANNELS = ("Xrot", "Yrot", "Zrot")
ALL_CHANNELS = POSITION_CHANNELS + ROTATION_CHANNELS

_BVH_TO_LABEL = {
    "Xposition": "Xpos", "Yposition": "Ypos", "Zposition": "Zpos",
    "Xrotation": "Xrot", "Yrotation": "Yrot", "Zrotation": "Zrot",
}
_LABEL_TO_BVH = {v: k for k, v in _BVH_TO_LABEL.items()}

VALUE_FORMAT = "{:.6f}"


class BvhError(ValueError):
    """Malformed BVH document or inconsistent skeleton/motion data."""


def wrap_angle(x):
    """Wrap angles to the half-open interval (-pi, pi]."""
    x = np.asarray(x, dtype=float)
    y = np.mod(x + np.pi, 2.0 * np.pi) - np.pi
    # mod maps +pi to -pi; the interval is closed on the +pi side
    y = np.where(y == -np.pi, np.pi, y)
    # in-range values pass through untouched so tiny angles keep their precision
    return np.where((x > -np.pi) & (x <= np.pi), x, y)


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int | None
    offset: tuple[float, float, float]
    channels: tuple[str, ...] = ()
    is_end_effector: bool = False

    def __post_init__(self):
        off = tuple(float(v) for v in self.offset)
        if len(off) != 3 or not all(math.isfinite(v) for v in off):
            raise BvhError(f"joint {self.name!r}: offset must be 3 finite values")
        object.__setattr__(self, "offset", off)
        chans = tuple(self.channels)
        for c in chans:
            if c not in ALL_CHANNELS:
                raise BvhError(f"joint {self.name!r}: unknown channel {c!r}")
        if len(set(chans)) != len(chans):
            raise BvhError(f"joint {self.name!r}: duplicate channels")
        object.__setattr__(self, "channels", chans)

    @property
    def is_end_site(self) -> bool:
        return not self.channels and self.is_end_effector

    @property
    def rotation_order(self) -> str:
        """Rotation axes in declaration order, e.g. ``'ZXY'``."""
        return "".join(c[0] for c in self.channels if c.endswith("rot"))


@dataclass(frozen=True)
class Skeleton:
    """Joint hierarchy. End sites are joints without channels."""

    joints: tuple[Joint, ...]
    _offsets: tuple[int, ...] = field(init=False, repr=False, compare=False)
    _rot_idx: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        joints = tuple(self.joints)
        if not joints:
            raise BvhError("skeleton has no joints")
        roots = [i for i, j in enumerate(joints) if j.parent is None]
        if roots != [0]:
            raise BvhError("skeleton must have exactly one root, stored first")
        # leaves are always end effectors
        parents = {j.parent for j in joints}
        joints = tuple(
            replace(j, is_end_effector=True) if i not in parents and not j.is_end_effector else j
            for i, j in enumerate(joints)
        )
        object.__setattr__(self, "joints", joints)
        names = [j.name for j in joints]
        if len(set(names)) != len(names):
            raise BvhError("joint names must be unique")
        for i, j in enumerate(joints):
            if j.parent is not None and not 0 <= j.parent < i:
                raise BvhError(f"joint {j.name!r}: parent must precede child")
            n = len(j.channels)
            if i == 0:
                if n not in (3, 6):
                    raise BvhError("root must have 3 or 6 channels")
                if n == 3 and any(c.endswith("pos") for c in j.channels):
                    raise BvhError("a 3-channel root must carry rotations only")
                if n == 6 and sorted(c[0] for c in j.channels if c.endswith("pos")) != ["X", "Y", "Z"]:
                    raise BvhError("a 6-channel root needs X/Y/Z position and rotation channels")
            elif n not in (0, 3) or any(c.endswith("pos") for c in j.channels):
                raise BvhError(f"joint {j.name!r}: non-root joints carry 3 rotation channels")
            if n == 0 and i != 0 and not j.is_end_effector:
                raise BvhError(f"joint {j.name!r}: channel-less joints must be end sites")
        offsets, k = [], 0
        for j in joints:
            offsets.append(k)
            k += len(j.channels)
        object.__setattr__(self, "_offsets", tuple(offsets))
        object.__setattr__(self, "_rot_idx", tuple(
            tuple(start + k for k, c in enumerate(j.channels) if c.endswith("rot"))
            for start, j in zip(offsets, joints)
        ))

    # -- layout helpers -------------------------------------------------
    @property
    def root_index(self) -> int:
        return 0

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_channels(self) -> int:
        return self._offsets[-1] + len(self.joints[-1].channels)

    @property
    def names(self) -> list[str]:
        return [j.name for j in self.joints]

    def index(self, name: str) -> int:
        for i, j in enumerate(self.joints):
            if j.name == name:
                return i
        raise KeyError(f"no joint named {name!r}")

    def children(self, i: int) -> list[int]:
        return [k for k, j in enumerate(self.joints) if j.parent == i]

    def channel_slice(self, i: int) -> slice:
        start = self._offsets[i]
        return slice(start, start + len(self.joints[i].channels))

    def rotation_indices(self, i: int) -> list[int]:
        """Global pose indices of joint ``i``'s rotation channels, in declared order."""
        return list(self._rot_idx[i])

    def root_translation_indices(self) -> list[int] | None:
        """Pose indices of root X/Y/Z position, or None for a rotation-only root."""
        root = self.joints[0]
        if len(root.channels) != 6:
            return None
        return [root.channels.index(c) for c in POSITION_CHANNELS]

    def rotation_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_channels, dtype=bool)
        for i in range(self.n_joints):
            mask[self.rotation_indices(i)] = True
        return mask

    def nonroot_rotation_indices(self) -> np.ndarray:
        idx: list[int] = []
        for i in range(1, self.n_joints):
            idx.extend(self.rotation_indices(i))
        return np.asarray(idx, dtype=int)

    def root_translation(self, pose: np.ndarray) -> np.ndarray:
        idx = self.root_translation_indices()
        if idx is None:
            return np.zeros(3)
        return np.asarray(pose, dtype=float)[idx]

    def same_structure(self, other: "Skeleton") -> bool:
        """Names, parents and channel layout agree (offsets are not compared)."""
        if self.n_joints != other.n_joints:
            return False
        return all(
            a.name == b.name and a.parent == b.parent and a.channels == b.channels
            for a, b in zip(self.joints, other.joints)
        )

    def check_pose_width(self, width: int) -> None:
        if width != self.n_channels:
            raise BvhError(f"pose width {width} != skeleton channel count {self.n_channels}")


@dataclass(frozen=True)
class Motion:
    """Sampled motion: ``frames`` has shape (T, D), angles in radians."""

    frame_time: float
    frames: np.ndarray
    action_label: str | None = None

    def __post_init__(self):
        ft = float(self.frame_time)
        if not (ft > 0 and math.isfinite(ft)):
            raise BvhError("frame_time must be positive and finite")
        frames = np.array(self.frames, dtype=float)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise BvhError("frames must be a non-empty (T, D) array")
        if not np.all(np.isfinite(frames)):
            raise BvhError("frames contain non-finite values")
        frames.setflags(write=False)
        object.__setattr__(self, "frame_time", ft)
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def width(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return (self.n_frames - 1) * self.frame_time

    def with_frames(self, frames, frame_time: float | None = None) -> "Motion":
        return Motion(self.frame_time if frame_time is None else frame_time, frames, self.action_label)


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(r"[{}]|[^\s{}]+")


def _number(tok: str, what: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise BvhError(f"non-numeric token {tok!r} in {what}") from None
    if not math.isfinite(v):
        raise BvhError(f"non-finite value {tok!r} in {what}")
    return v


def _parse_hierarchy(text: str) -> list[dict]:
    toks = _TOKEN.findall(text)
    if not toks or toks[0] != "HIERARCHY":
        raise BvhError("document must start with HIERARCHY")
    pos = 1
    joints: list[dict] = []
    stack: list[int] = []

    def take() -> str:
        nonlocal pos
        if pos >= len(toks):
            raise BvhError("unexpected end of hierarchy")
        pos += 1
        return toks[pos - 1]

    while pos < len(toks):
        tok = take()
        if tok in ("ROOT", "JOINT") or tok == "End":
            if tok == "ROOT" and (joints or stack):
                raise BvhError("only one ROOT is allowed")
            if tok != "ROOT" and not stack:
                raise BvhError(f"{tok} outside of a parent block")
            if tok == "End":
                if take() != "Site":
                    raise BvhError("expected 'End Site'")
                name = joints[stack[-1]]["name"] + "_end"
                end = True
            else:
                name = take()
                end = False
            if take() != "{":
                raise BvhError(f"expected '{{' after {name}")
            if take() != "OFFSET":
                raise BvhError(f"missing OFFSET for {name}")
            offset = tuple(_number(take(), f"OFFSET of {name}") for _ in range(3))
            channels: tuple[str, ...] = ()
            if not end:
                if pos >= len(toks) or toks[pos] != "CHANNELS":
                    raise BvhError(f"missing CHANNELS for {name}")
                take()
                n_tok = take()
                if not n_tok.isdigit():
                    raise BvhError(f"bad channel count {n_tok!r} for {name}")
                raw = [take() for _ in range(int(n_tok))]
                try:
                    channels = tuple(_BVH_TO_LABEL[c] for c in raw)
                except KeyError as e:
                    raise BvhError(f"unknown channel {e.args[0]!r} for {name}") from None
            joints.append(dict(name=name, parent=stack[-1] if stack else None,
                               offset=offset, channels=channels, is_end_effector=end))
            stack.append(len(joints) - 1)
        elif tok == "}":
            if not stack:
                raise BvhError("unbalanced '}' in hierarchy")
            stack.pop()
        else:
            raise BvhError(f"unexpected token {tok!r} in hierarchy")
    if stack:
        raise BvhError("unbalanced braces: hierarchy block not closed")
    if not joints:
        raise BvhError("hierarchy declares no joints")
    return joints


def parse_bvh(text: str, action_label: str | None = None) -> tuple[Skeleton, Motion]:
    """Parse a complete BVH document into a skeleton and a motion (radians)."""
    m = re.search(r"^\s*MOTION\s*$", text, flags=re.MULTILINE)
    if m is None:
        raise BvhError("missing MOTION section")
    skeleton = Skeleton(tuple(Joint(**j) for j in _parse_hierarchy(text[: m.start()])))

    lines = [ln.strip() for ln in text[m.end():].splitlines()]
    lines = [ln for ln in lines if ln]
    if len(lines) < 2:
        raise BvhError("MOTION section lacks Frames/Frame Time")
    fm = re.fullmatch(r"Frames:\s*(\S+)", lines[0])
    tm = re.fullmatch(r"Frame Time:\s*(\S+)", lines[1])
    if fm is None or tm is None:
        raise BvhError("expected 'Frames:' and 'Frame Time:' lines")
    if not fm.group(1).isdigit():
        raise BvhError(f"bad frame count {fm.group(1)!r}")
    n_frames = int(fm.group(1))
    frame_time = _number(tm.group(1), "Frame Time")
    rows = lines[2:]
    if len(rows) != n_frames:
        raise BvhError(f"declared {n_frames} frames but found {len(rows)} rows")
    width = skeleton.n_channels
    data = np.empty((n_frames, width))
    for r, row in enumerate(rows):
        vals = row.split()
        if len(vals) != width:
            raise BvhError(f"frame {r}: {len(vals)} values, expected {width}")
        data[r] = [_number(v, f"frame {r}") for v in vals]
    if n_frames == 0:
        raise BvhError("motion has no frames")
    rot = skeleton.rotation_mask()
    data[:, rot] = np.deg2rad(data[:, rot])
    return skeleton, Motion(frame_time, data, action_label)


def read_bvh(path, action_label: str | None = None) -> tuple[Skeleton, Motion]:
    path = Path(path)
    try:
        return parse_bvh(path.read_text(encoding="utf-8"), action_label)
    except BvhError as e:
        raise BvhError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# writing

def _dfs_order(skeleton: Skeleton) -> list[int]:
    order: list[int] = []
    stack = [0]
    while stack:
        i = stack.pop()
        order.append(i)
        stack.extend(reversed(skeleton.children(i)))
    return order


def write_bvh(skeleton: Skeleton, motion: Motion) -> str:
    """Serialize to BVH text. Rotations are written in degrees with 6 decimals."""
    skeleton.check_pose_width(motion.width)
    order = _dfs_order(skeleton)
    out = ["HIERARCHY"]

    def fmt(vals: Iterable[float]) -> str:
        return " ".join(VALUE_FORMAT.format(v) for v in vals)

    depth_of = {}
    open_stack: list[int] = []
    for i in order:
        j = skeleton.joints[i]
        while open_stack and open_stack[-1] != j.parent:
            depth = len(open_stack) - 1
            out.append("\t" * depth + "}")
            open_stack.pop()
        depth = len(open_stack)
        depth_of[i] = depth
        pad = "\t" * depth
        if i == 0:
            out.append(f"ROOT {j.name}")
        elif j.is_end_site:
            out.append(f"{pad}End Site")
        else:
            out.append(f"{pad}JOINT {j.name}")
        out.append(pad + "{")
        out.append(f"{pad}\tOFFSET {fmt(j.offset)}")
        if not j.is_end_site:
            chans = " ".join(_LABEL_TO_BVH[c] for c in j.channels)
            out.append(f"{pad}\tCHANNELS {len(j.channels)} {chans}")
        open_stack.append(i)
    while open_stack:
        out.append("\t" * (len(open_stack) - 1) + "}")
        open_stack.pop()

    cols = np.concatenate([np.arange(skeleton.n_channels)[skeleton.channel_slice(i)] for i in order])
    data = np.array(motion.frames)
    rot = skeleton.rotation_mask()
    data[:, rot] = np.rad2deg(data[:, rot])
    data = data[:, cols]
    out.append("MOTION")
    out.append(f"Frames: {motion.n_frames}")
    out.append(f"Frame Time: {motion.frame_time:.9f}")
    for row in data:
        out.append(fmt(row))
    return "\n".join(out) + "\n"


def save_bvh(path, skeleton: Skeleton, motion: Motion) -> None:
    Path(path).write_text(write_bvh(skeleton, motion), encoding="utf-8")


# ---------------------------------------------------------------------------
# resampling

def _interp_frames(frames: np.ndarray, u: np.ndarray, rot_mask: np.ndarray) -> np.ndarray:
    """Sample frames at fractional source indices ``u``.

    Rotation channels interpolate along the shorter arc; the result is not
    re-wrapped so sample points that land on source frames reproduce them.
    """
    T = frames.shape[0]
    u = np.clip(u, 0.0, T - 1)
    i0 = np.minimum(np.floor(u).astype(int), T - 1)
    i1 = np.minimum(i0 + 1, T - 1)
    s = (u - i0)[:, None]
    a, b = frames[i0], frames[i1]
    delta = b - a
    delta[:, rot_mask] = wrap_angle(delta[:, rot_mask])
    return a + delta * s


def resample(motion: Motion, target_hz: float, rot_mask: np.ndarray | None = None) -> Motion:
    """Resample to ``target_hz``; output has floor(duration * hz) + 1 frames."""
    if not target_hz > 0:
        raise ValueError("target_hz must be positive")
    if motion.n_frames < 2:
        raise ValueError("resampling needs at least 2 frames")
    if rot_mask is None:
        rot_mask = np.zeros(motion.width, dtype=bool)
    new_ft = 1.0 / target_hz
    # frame times in files carry 9 decimals, so allow a little slack before flooring
    n_out = int(math.floor(motion.duration * target_hz + 1e-6)) + 1
    u = np.arange(n_out) * (new_ft / motion.frame_time)
    if abs(new_ft - motion.frame_time) <= 1e-12 * motion.frame_time:
        u = np.arange(n_out, dtype=float)
    return motion.with_frames(_interp_frames(motion.frames, u, rot_mask), new_ft)


def time_warp(
    motion: Motion,
    scale: float,
    rot_mask: np.ndarray | None = None,
    bounds: tuple[float, float] = (0.9, 1.1),
) -> Motion:
    """Stretch or shrink a motion in time to round(T * scale) frames.

    First and last frames are kept; frame_time is unchanged.
    """
    lo, hi = bounds
    if not lo <= scale <= hi:
        raise ValueError(f"scale {scale} outside [{lo}, {hi}]")
    T = motion.n_frames
    n_out = max(1, int(math.floor(T * scale + 0.5)))
    if rot_mask is None:
        rot_mask = np.zeros(motion.width, dtype=bool)
    if n_out == 1 or T == 1:
        u = np.zeros(n_out)
    else:
        u = np.arange(n_out) * (T - 1) / (n_out - 1)
    return motion.with_frames(_interp_frames(motion.frames, u, rot_mask))


# ---------------------------------------------------------------------------
# corpus manifest

@dataclass(frozen=True)
class CorpusEntry:
    id: str
    path: Path
    label: str | None
    split: str


def load_manifest(path) -> list[CorpusEntry]:
    """Read a corpus manifest: ``{"motions": [{"id", "path", "label", "split"}]}``.

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    records = doc["motions"] if isinstance(doc, dict) else doc
    entries = []
    seen = set()
    for rec in records:
        p = Path(rec["path"])
        if not p.is_absolute():
            p = path.parent / p
        mid = rec.get("id") or p.stem
        if mid in seen:
            raise ValueError(f"duplicate motion id {mid!r} in {path}")
        seen.add(mid)
        split = rec.get("split", "train")
        if split not in ("train", "test"):
            raise ValueError(f"motion {mid!r}: split must be 'train' or 'test'")
        entries.append(CorpusEntry(mid, p, rec.get("label"), split))
    return entries


def save_manifest(path, entries: Sequence[CorpusEntry]) -> None:
    path = Path(path)
    recs = []
    for e in entries:
        p = Path(e.path)
        try:
            p = p.relative_to(path.parent)
        except ValueError:
            pass
        recs.append({"id": e.id, "path": str(p), "label": e.label, "split": e.split})
    path.write_text(json.dumps({"motions": recs}, indent=2) + "\n", encoding="utf-8")
