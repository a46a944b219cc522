"""Sampling-near-samples over precomputed latent embeddings.

Training motions are represented by their encoder outputs (mean and
element-wise variance). Means are clustered with k-means; a draw picks a
cluster, averages the (mu, sigma2) of a few of its members and samples
z ~ N(mean mu, mean sigma2), which is then decoded into a motion.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .bvh_io import Motion

DEFAULT_N_CLUSTERS = 3
DEFAULT_N_SAMPLES = 2
MAX_LLOYD_ITERS = 300


@dataclass(frozen=True)
class LatentEmbedding:
    motion_id: str
    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float)
        s2 = np.array(self.sigma2, dtype=float)
        if mu.ndim != 1 or mu.shape != s2.shape:
            raise ValueError(f"{self.motion_id}: mu and sigma2 must be vectors of equal length")
        if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(s2)):
            raise ValueError(f"{self.motion_id}: non-finite embedding values")
        if np.any(s2 <= 0):
            raise ValueError(f"{self.motion_id}: variance must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", s2)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def _check_uniform_dim(embeddings: Sequence[LatentEmbedding]) -> int:
    if not embeddings:
        raise ValueError("empty embedding set")
    dims = {e.dim for e in embeddings}
    if len(dims) != 1:
        raise ValueError(f"embedding dimensions differ: {sorted(dims)}")
    return dims.pop()


def load_embeddings(path) -> list[LatentEmbedding]:
    """Read ``{"embeddings": [{"motion_id", "mu", "sigma2"}, ...]}`` (a bare list also works)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    records = doc["embeddings"] if isinstance(doc, dict) else doc
    embs = [LatentEmbedding(str(r["motion_id"]), r["mu"], r["sigma2"]) for r in records]
    _check_uniform_dim(embs)
    return embs


def save_embeddings(path, embeddings: Sequence[LatentEmbedding]) -> None:
    d = _check_uniform_dim(embeddings)
    doc = {
        "dim": d,
        "embeddings": [
            {"motion_id": e.motion_id, "mu": e.mu.tolist(), "sigma2": e.sigma2.tolist()}
            for e in embeddings
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    sse_history: tuple[float, ...] = ()

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == c)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a center
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans_fit(embeddings: Sequence[LatentEmbedding], n_c: int = DEFAULT_N_CLUSTERS, seed: int = 0) -> ClusterModel:
    """k-means++ seeding then Lloyd iterations on the embedding means."""
    _check_uniform_dim(embeddings)
    X = np.stack([e.mu for e in embeddings])
    if not 1 <= n_c <= len(X):
        raise ValueError(f"n_c={n_c} must be between 1 and the number of embeddings ({len(X)})")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, n_c, rng)
    labels = np.argmin(_sq_dists(X, C), axis=1)
    history = []
    for _ in range(MAX_LLOYD_ITERS):
        for c in range(n_c):
            members = labels == c
            if members.any():
                C[c] = X[members].mean(axis=0)
            else:
                # reseed an empty cluster at the point worst served by its center
                d_own = _sq_dists(X, C)[np.arange(len(X)), labels]
                far = int(np.argmax(d_own))
                C[c] = X[far]
                labels[far] = c
        d = _sq_dists(X, C)
        history.append(float(d[np.arange(len(X)), labels].sum()))
        new_labels = np.argmin(d, axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return ClusterModel(C, labels, tuple(history))


def _draw_members(members: np.ndarray, n_s: int, rng: np.random.Generator) -> np.ndarray:
    replace = len(members) < n_s
    return rng.choice(members, size=n_s, replace=replace)


def cluster_gaussian(embeddings: Sequence[LatentEmbedding], picked: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean of the picked members' mu and mean of their sigma2 (variances, not std devs)."""
    mu = np.mean([embeddings[i].mu for i in picked], axis=0)
    s2 = np.mean([embeddings[i].sigma2 for i in picked], axis=0)
    return mu, s2


def sample_near_samples(
    embeddings: Sequence[LatentEmbedding],
    model: ClusterModel,
    n_s: int = DEFAULT_N_SAMPLES,
    rng: np.random.Generator | None = None,
    cluster: int | None = None,
) -> tuple[np.ndarray, int]:
    """Draw one latent code near the training samples of a (uniformly chosen) cluster."""
    if not embeddings:
        raise ValueError("empty embedding set")
    if n_s < 1:
        raise ValueError("n_s must be at least 1")
    rng = np.random.default_rng() if rng is None else rng
    non_empty = [c for c in range(model.n_clusters) if len(model.members(c))]
    if cluster is None:
        cluster = int(non_empty[rng.integers(len(non_empty))])
    members = model.members(cluster)
    if not len(members):
        raise ValueError(f"cluster {cluster} has no members")
    mu, s2 = cluster_gaussian(embeddings, _draw_members(members, n_s, rng))
    z = mu + np.sqrt(s2) * rng.standard_normal(mu.shape[0])
    return z, cluster


def sample_near_samples_batch(
    embeddings: Sequence[LatentEmbedding],
    model: ClusterModel,
    size: int,
    n_s: int = DEFAULT_N_SAMPLES,
    rng: np.random.Generator | None = None,
    cluster: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised form of :func:`sample_near_samples` returning ``(Z, clusters)``.

    Same distribution as repeated single draws, not the same random stream.
    """
    if n_s < 1:
        raise ValueError("n_s must be at least 1")
    rng = np.random.default_rng() if rng is None else rng
    _check_uniform_dim(embeddings)
    MU = np.stack([e.mu for e in embeddings])
    S2 = np.stack([e.sigma2 for e in embeddings])
    non_empty = np.array([c for c in range(model.n_clusters) if len(model.members(c))])
    if cluster is None:
        clusters = non_empty[rng.integers(len(non_empty), size=size)]
    else:
        if not len(model.members(cluster)):
            raise ValueError(f"cluster {cluster} has no members")
        clusters = np.full(size, cluster)
    Z = np.empty((size, MU.shape[1]))
    for c in np.unique(clusters):
        rows = np.flatnonzero(clusters == c)
        members = model.members(c)
        m = len(members)
        if m >= n_s:
            # n_s distinct members per row via a random permutation prefix
            picks = members[np.argsort(rng.random((len(rows), m)), axis=1)[:, :n_s]]
        else:
            picks = members[rng.integers(m, size=(len(rows), n_s))]
        mu = MU[picks].mean(axis=1)
        s2 = S2[picks].mean(axis=1)
        Z[rows] = mu + np.sqrt(s2) * rng.standard_normal(mu.shape)
    return Z, clusters


class MotionDecoder(Protocol):
    latent_dim: int

    def decode(self, z: np.ndarray) -> Motion: ...


class LinearDecoder:
    """Fixed affine map from z to a (n_frames, width) motion. Stand-in for a trained decoder."""

    def __init__(self, weight, bias, n_frames: int, frame_time: float, action_label: str | None = None):
        self.weight = np.asarray(weight, dtype=float)
        self.bias = np.asarray(bias, dtype=float)
        self.n_frames = int(n_frames)
        self.frame_time = float(frame_time)
        self.action_label = action_label
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("decoder weight must be (out, d) with a matching bias")
        if self.weight.shape[0] % self.n_frames:
            raise ValueError("decoder output size must be a multiple of n_frames")

    @property
    def latent_dim(self) -> int:
        return self.weight.shape[1]

    def decode(self, z) -> Motion:
        out = self.weight @ np.asarray(z, dtype=float) + self.bias
        return Motion(self.frame_time, out.reshape(self.n_frames, -1), self.action_label)

    @classmethod
    def load(cls, path) -> "LinearDecoder":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(d["weight"], d["bias"], d["n_frames"], d["frame_time"], d.get("action_label"))

    def save(self, path) -> None:
        doc = {"weight": self.weight.tolist(), "bias": self.bias.tolist(), "n_frames": self.n_frames,
               "frame_time": self.frame_time, "action_label": self.action_label}
        Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


@dataclass
class LatentDraw:
    motion: Motion
    z: np.ndarray
    cluster: int


def generate_batch(
    embeddings: Sequence[LatentEmbedding],
    decoder: MotionDecoder,
    n_c: int = DEFAULT_N_CLUSTERS,
    n_s: int = DEFAULT_N_SAMPLES,
    count: int = 1,
    seed: int = 0,
    reuse_gaussian: bool = False,
) -> list[LatentDraw]:
    """Decode ``count`` independent sampling-near-samples draws.

    With ``reuse_gaussian`` each cluster's (mean mu, mean sigma2) is drawn once
    and reused for every later draw from that cluster.
    """
    if count == 0:
        return []
    d = _check_uniform_dim(embeddings)
    if decoder.latent_dim != d:
        raise ValueError(f"decoder expects d={decoder.latent_dim}, embeddings have d={d}")
    model = kmeans_fit(embeddings, n_c, seed)
    children = np.random.SeedSequence(seed).spawn(count)
    cached: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    out = []
    for ss in children:
        rng = np.random.default_rng(ss)
        if reuse_gaussian:
            non_empty = [c for c in range(model.n_clusters) if len(model.members(c))]
            c = int(non_empty[rng.integers(len(non_empty))])
            if c not in cached:
                cached[c] = cluster_gaussian(embeddings, _draw_members(model.members(c), n_s, rng))
            mu, s2 = cached[c]
            z = mu + np.sqrt(s2) * rng.standard_normal(d)
        else:
            z, c = sample_near_samples(embeddings, model, n_s, rng)
        out.append(LatentDraw(decoder.decode(z), z, c))
    return out
