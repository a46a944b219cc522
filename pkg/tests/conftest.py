import math
import time

import numpy as np
import pytest

from motionaug.bvh_io import Joint, Motion, Skeleton
from motionaug.kinematics import IkChain

ROT = ("Zrot", "Xrot", "Yrot")
ROOT_CHANNELS = ("Xpos", "Ypos", "Zpos") + ROT
STAND_HEIGHT = 0.95  # root height with straight legs, toes on the ground
SUITE_BUDGET_S = 120.0

_SESSION_START = time.perf_counter()


def pytest_terminal_summary(terminalreporter):
    # second half of acceptance criterion 13: the whole suite runs inside the budget
    dt = time.perf_counter() - _SESSION_START
    verdict = "PASS" if dt < SUITE_BUDGET_S else "FAIL"
    terminalreporter.write_line(f"[criterion 13] {verdict}: full suite wall time {dt:.1f}s (< {SUITE_BUDGET_S:.0f}s)")


def make_humanoid() -> Skeleton:
    """Hips, a spine and two hip-knee-ankle legs with toe end sites (metres, Y up)."""
    J = Joint
    joints = [
        J("Hips", None, (0, 0, 0), ROOT_CHANNELS),
        J("Spine", 0, (0, 0.2, 0), ROT),
        J("Head", 1, (0, 0.5, 0), ROT),
        J("Head_end", 2, (0, 0.15, 0), (), True),
        J("LeftUpLeg", 0, (0.1, 0, 0), ROT),
        J("LeftLeg", 4, (0, -0.45, 0), ROT),
        J("LeftFoot", 5, (0, -0.45, 0), ROT),
        J("LeftFoot_end", 6, (0, -0.05, 0.12), (), True),
        J("RightUpLeg", 0, (-0.1, 0, 0), ROT),
        J("RightLeg", 8, (0, -0.45, 0), ROT),
        J("RightFoot", 9, (0, -0.45, 0), ROT),
        J("RightFoot_end", 10, (0, -0.05, 0.12), (), True),
    ]
    return Skeleton(tuple(joints))


def rot_index(skel: Skeleton, joint: str, axis: str) -> int:
    i = skel.index(joint)
    k = skel.joints[i].channels.index(axis + "rot")
    return skel.channel_slice(i).start + k


def rest_frames(skel: Skeleton, T: int) -> np.ndarray:
    f = np.zeros((T, skel.n_channels))
    f[:, 1] = STAND_HEIGHT
    return f


def make_kick(skel: Skeleton, T: int = 31, knee_end: float = 2.0, knee_apex: float = 1.2, hip: float = -1.2,
              frame_time: float = 1 / 30) -> Motion:
    """Chambered kick on the left leg: the right knee opens and the hip flexes, apex in the middle frame."""
    f = rest_frames(skel, T)
    s = np.sin(np.pi * np.arange(T) / (T - 1))
    f[:, rot_index(skel, "RightUpLeg", "X")] = hip * s
    f[:, rot_index(skel, "RightLeg", "X")] = knee_end + (knee_apex - knee_end) * s
    return Motion(frame_time, f, "kick")


@pytest.fixture
def humanoid():
    return make_humanoid()


@pytest.fixture
def right_leg(humanoid):
    return IkChain.from_names(humanoid, "RightUpLeg", "RightFoot")


@pytest.fixture
def kick(humanoid):
    return make_kick(humanoid)


def planar_arm() -> Skeleton:
    """Two unit links along +X; rotations about Z bend the arm in the XY plane."""
    return Skeleton((
        Joint("Base", None, (0, 0, 0), ("Xpos", "Ypos", "Zpos", "Zrot", "Yrot", "Xrot")),
        Joint("Elbow", 0, (1, 0, 0), ("Zrot", "Yrot", "Xrot")),
        Joint("Hand", 1, (1, 0, 0), ("Zrot", "Yrot", "Xrot")),
        Joint("Hand_end", 2, (0.1, 0, 0), (), True),
    ))


@pytest.fixture
def arm():
    return planar_arm()


def random_skeleton(rng: np.random.Generator, n_joints: int) -> Skeleton:
    """Random tree in depth-first order with random channel orders and offsets."""
    orders = ["ZXY", "XYZ", "YZX", "ZYX", "XZY", "YXZ"]
    joints = []
    pos = ["Xpos", "Ypos", "Zpos"]
    rng.shuffle(pos)
    rot = [c + "rot" for c in orders[rng.integers(6)]]
    root_ch = tuple(pos + rot) if rng.random() < 0.5 else tuple(rot + pos)
    joints.append(Joint("j0", None, tuple(rng.normal(size=3)), root_ch))
    stack = [0]
    for i in range(1, n_joints):
        # pick a parent on the current DFS path so order stays depth-first
        depth = int(rng.integers(len(stack)))
        stack = stack[: depth + 1]
        parent = stack[-1]
        ch = tuple(c + "rot" for c in orders[rng.integers(6)])
        joints.append(Joint(f"j{i}", parent, tuple(rng.normal(size=3)), ch))
        stack.append(i)
    # end sites on every leaf
    parents = {j.parent for j in joints}
    out = []
    for i, j in enumerate(joints):
        out.append(j)
    leaves = [i for i in range(len(joints)) if i not in parents]
    return _with_end_sites(out, leaves, rng)


def _with_end_sites(joints, leaves, rng):
    # rebuild in DFS order with an End Site appended right after each leaf
    children = {i: [] for i in range(len(joints))}
    for i, j in enumerate(joints):
        if j.parent is not None:
            children[j.parent].append(i)
    new, remap = [], {}

    def visit(i):
        j = joints[i]
        remap[i] = len(new)
        new.append(Joint(j.name, None if j.parent is None else remap[j.parent], j.offset, j.channels))
        for c in children[i]:
            visit(c)
        if i in leaves and rng.random() < 0.7:
            new.append(Joint(j.name + "_end", remap[i], tuple(rng.normal(size=3)), (), True))

    visit(0)
    return Skeleton(tuple(new))


def random_motion(rng: np.random.Generator, skel: Skeleton, T: int) -> Motion:
    f = rng.uniform(-math.pi, math.pi, size=(T, skel.n_channels))
    tr = skel.root_translation_indices()
    if tr is not None:
        f[:, tr] = rng.normal(scale=50.0, size=(T, 3))
    return Motion(float(rng.uniform(0.005, 0.05)), f)


def sinusoid_root_goal(skel: Skeleton, amplitude: float = 0.3, omega: float = 1.0, duration: float = 2 * math.pi,
                       frame_time: float = 1 / 30) -> Motion:
    """Standing pose on the ground whose root sways along X as amplitude * sin(omega * t)."""
    T = int(round(duration / frame_time)) + 1
    f = rest_frames(skel, T)
    f[:, 0] = amplitude * np.sin(omega * np.arange(T) * frame_time)
    return Motion(frame_time, f, "sway")


def write_corpus(root, n_train: int = 3, n_test: int = 2, T: int = 21):
    """Kick variants as BVH files plus a manifest; returns the manifest path."""
    from pathlib import Path

    from motionaug.bvh_io import CorpusEntry, save_bvh, save_manifest

    root = Path(root)
    (root / "motions").mkdir(parents=True, exist_ok=True)
    skel = make_humanoid()
    entries = []
    for i in range(n_train + n_test):
        m = make_kick(skel, T=T, hip=-1.0 - 0.1 * i, knee_apex=1.2 + 0.05 * i)
        path = root / "motions" / f"kick{i:02d}.bvh"
        save_bvh(path, skel, m)
        entries.append(CorpusEntry(f"kick{i:02d}", path, "kick", "train" if i < n_train else "test"))
    manifest = root / "corpus.json"
    save_manifest(manifest, entries)
    return manifest


def write_config(root, manifest, **extra):
    import json
    from pathlib import Path

    doc = {"corpus": str(manifest), "seed": 7, "chain": {"base": "RightUpLeg", "end": "RightFoot"}}
    doc.update(extra)
    path = Path(root) / "config.json"
    path.write_text(json.dumps(doc))
    return path


def run_pipeline(config, out_root, jobs: int = 1) -> dict:
    """augment -> correct -> debias -> evaluate through the CLI; returns {relative path: bytes}."""
    import shutil
    from pathlib import Path

    from motionaug.bvh_io import load_manifest
    from motionaug.cli import main

    out_root = Path(out_root)
    base = ["--config", str(config), "--quiet", "--jobs", str(jobs)]
    aug, cor, deb, ev = (out_root / n for n in ("augmented", "corrected", "debiased", "metrics"))
    assert main(["augment", *base, "--out", str(aug)]) == 0
    assert main(["correct", *base, "--out", str(cor), "--input", str(aug)]) == 0
    # training pairs: the tracked originals against the originals themselves
    import json
    manifest = Path(json.loads(Path(config).read_text())["corpus"])
    entries = load_manifest(manifest)
    pairs = out_root / "pairs"
    (pairs / "unbiased").mkdir(parents=True)
    for e in entries:
        if e.split == "train":
            shutil.copy(e.path, pairs / "unbiased" / e.path.name)
    assert main(["correct", *base, "--out", str(pairs / "biased"), "--input", str(pairs / "unbiased")]) == 0
    for extra in ("correct_report.csv", "correct_report.json", "reward_traces.png"):
        (pairs / "biased" / extra).unlink(missing_ok=True)
    assert main(["debias", *base, "--out", str(deb), "--pairs", str(pairs), "--input", str(cor)]) == 0
    test_dir = out_root / "test"
    test_dir.mkdir()
    for e in entries:
        if e.split == "test":
            shutil.copy(e.path, test_dir / e.path.name)
    assert main(["evaluate", *base, "--out", str(ev), "--test", str(test_dir), "--candidates", str(deb)]) == 0
    return {str(p.relative_to(out_root)): p.read_bytes() for p in sorted(out_root.rglob("*")) if p.is_file()}
