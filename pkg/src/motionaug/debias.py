"""Framewise debiasing: learn a map from tracked (biased) poses back to the originals.

Two regressors are available. ``affine`` is closed-form ridge regression with
an unpenalized intercept. ``mlp`` is a one-hidden-layer ReLU network on
standardized inputs/targets, trained by full-batch gradient descent with a
backtracking step size so the training loss never increases.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bvh_io import Motion

KINDS = ("affine", "mlp")


@dataclass(frozen=True)
class TrainingPair:
    biased: Motion
    unbiased: Motion

    def __post_init__(self):
        if self.biased.frames.shape != self.unbiased.frames.shape:
            raise ValueError("training pair motions must have equal frame count and pose width")


@dataclass
class DebiasModel:
    kind: str
    params: dict[str, np.ndarray]
    training_lambda: float = 0.0
    loss_history: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.params["x_mean"].shape[0]

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ValueError(f"expected frames of width {self.dim}, got shape {X.shape}")
        p = self.params
        if self.kind == "affine":
            return (X - p["x_mean"]) @ p["W"] + p["y_mean"]
        Xs = (X - p["x_mean"]) / p["x_scale"]
        Ys = _mlp_forward(p, Xs)[0]
        return Ys * p["y_scale"] + p["y_mean"]

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "training_lambda": self.training_lambda,
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(self.params.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DebiasModel":
        if d["kind"] not in KINDS:
            raise ValueError(f"unknown debias model kind {d['kind']!r}")
        params = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["params"].items()}
        for k, v in params.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"parameter {k} is not finite")
        return cls(d["kind"], params, float(d.get("training_lambda", 0.0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DebiasModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _stack_pairs(pairs: Sequence[TrainingPair]) -> tuple[np.ndarray, np.ndarray]:
    if not pairs:
        raise ValueError("fit_debias needs at least one pair")
    widths = {p.biased.width for p in pairs}
    if len(widths) != 1:
        raise ValueError("training pairs differ in pose width")
    X = np.concatenate([p.biased.frames for p in pairs])
    Y = np.concatenate([p.unbiased.frames for p in pairs])
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("non-finite training frames")
    return X, Y


def ridge_solve(Xc: np.ndarray, Yc: np.ndarray, lam: float) -> np.ndarray:
    """Solve (X'X + lam I) W = X'Y; minimum-norm least squares when lam == 0."""
    if lam == 0:
        return np.linalg.lstsq(Xc, Yc, rcond=None)[0]
    A = Xc.T @ Xc + lam * np.eye(Xc.shape[1])
    return np.linalg.solve(A, Xc.T @ Yc)


def fit_affine(X: np.ndarray, Y: np.ndarray, lam: float) -> DebiasModel:
    x_mean, y_mean = X.mean(axis=0), Y.mean(axis=0)
    W = ridge_solve(X - x_mean, Y - y_mean, lam)
    return DebiasModel("affine", {"W": W, "x_mean": x_mean, "y_mean": y_mean}, lam)


# ---------------------------------------------------------------------------
# one-hidden-layer network

def _mlp_forward(p: dict, Xs: np.ndarray):
    pre = Xs @ p["W1"] + p["b1"]
    h = np.maximum(pre, 0.0)
    return h @ p["W2"] + p["b2"], pre, h


PARAM_NAMES = ("W1", "b1", "W2", "b2")


def mlp_loss_and_grads(p: dict, Xs: np.ndarray, Ys: np.ndarray, lam: float = 0.0):
    """Loss = mean over frames of 0.5 * ||f(x) - y||^2 + 0.5 * lam * (|W1|^2 + |W2|^2)."""
    n = Xs.shape[0]
    out, pre, h = _mlp_forward(p, Xs)
    R = out - Ys
    loss = 0.5 * float(np.sum(R * R)) / n + 0.5 * lam * float(np.sum(p["W1"] ** 2) + np.sum(p["W2"] ** 2))
    G = R / n
    gW2 = h.T @ G + lam * p["W2"]
    gb2 = G.sum(axis=0)
    Gh = (G @ p["W2"].T) * (pre > 0)
    gW1 = Xs.T @ Gh + lam * p["W1"]
    gb1 = Gh.sum(axis=0)
    return loss, {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2}


def init_mlp(dim_in: int, hidden: int, dim_out: int, rng: np.random.Generator) -> dict:
    return {
        "W1": rng.standard_normal((dim_in, hidden)) * np.sqrt(2.0 / dim_in),
        "b1": np.zeros(hidden),
        "W2": rng.standard_normal((hidden, dim_out)) * np.sqrt(1.0 / hidden),
        "b2": np.zeros(dim_out),
    }


def _scale(A: np.ndarray) -> np.ndarray:
    s = A.std(axis=0)
    return np.where(s > 1e-12, s, 1.0)


def fit_mlp(
    X: np.ndarray,
    Y: np.ndarray,
    lam: float,
    hidden: int = 512,
    epochs: int = 500,
    lr: float = 0.1,
    seed: int = 0,
) -> DebiasModel:
    x_mean, y_mean = X.mean(axis=0), Y.mean(axis=0)
    x_scale, y_scale = _scale(X), _scale(Y)
    Xs, Ys = (X - x_mean) / x_scale, (Y - y_mean) / y_scale
    rng = np.random.default_rng(seed)
    p = init_mlp(X.shape[1], hidden, Y.shape[1], rng)
    loss, grads = mlp_loss_and_grads(p, Xs, Ys, lam)
    history = [loss]
    step = lr
    for _ in range(epochs):
        accepted = False
        while step > 1e-12:
            trial = {k: p[k] - step * grads[k] for k in PARAM_NAMES}
            t_loss, t_grads = mlp_loss_and_grads(trial, Xs, Ys, lam)
            if t_loss <= loss:
                p, loss, grads = trial, t_loss, t_grads
                history.append(loss)
                step *= 1.2
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
    p.update(x_mean=x_mean, y_mean=y_mean, x_scale=x_scale, y_scale=y_scale)
    return DebiasModel("mlp", p, lam, history)


def fit_debias(
    pairs: Sequence[TrainingPair],
    kind: str = "affine",
    lam: float = 1e-6,
    seed: int = 0,
    hidden: int = 512,
    epochs: int = 500,
) -> DebiasModel:
    """Fit a framewise biased -> unbiased map on frames pooled across all pairs."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if lam < 0:
        raise ValueError("ridge coefficient must be non-negative")
    X, Y = _stack_pairs(pairs)
    if kind == "affine":
        return fit_affine(X, Y, lam)
    return fit_mlp(X, Y, lam, hidden=hidden, epochs=epochs, seed=seed)


def fit_debias_per_class(pairs: Sequence[TrainingPair], **kw) -> dict[str | None, DebiasModel]:
    groups: dict[str | None, list[TrainingPair]] = {}
    for p in pairs:
        groups.setdefault(p.unbiased.action_label, []).append(p)
    return {label: fit_debias(g, **kw) for label, g in sorted(groups.items(), key=lambda kv: str(kv[0]))}


def apply_debias(model: DebiasModel, motion: Motion) -> Motion:
    """Map every frame independently; frame count and frame time are kept."""
    if motion.width != model.dim:
        raise ValueError(f"motion width {motion.width} != model dimension {model.dim}")
    return motion.with_frames(model.predict(motion.frames))


def gradient_check(model: DebiasModel, frames: np.ndarray, targets: np.ndarray | None = None,
                   step: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients of the MLP loss.

    ``frames`` and ``targets`` are taken in the model's standardized space;
    random targets are drawn when none are given.
    """
    if model.kind != "mlp":
        raise ValueError("gradient check applies to the mlp kind")
    Xs = np.asarray(frames, dtype=float)
    p = {k: model.params[k].copy() for k in PARAM_NAMES}
    if targets is None:
        targets = np.random.default_rng(seed).standard_normal((Xs.shape[0], p["W2"].shape[1]))
    lam = model.training_lambda
    _, grads = mlp_loss_and_grads(p, Xs, targets, lam)
    worst = 0.0
    for k in PARAM_NAMES:
        flat = p[k].reshape(-1)
        g = grads[k].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            lp = mlp_loss_and_grads(p, Xs, targets, lam)[0]
            flat[i] = old - step
            lm = mlp_loss_and_grads(p, Xs, targets, lam)[0]
            flat[i] = old
            num = (lp - lm) / (2 * step)
            denom = max(abs(num) + abs(g[i]), 1e-8)
            worst = max(worst, abs(num - g[i]) / denom)
    return worst


def mean_frame_error(a: Motion, b: Motion) -> float:
    """Mean Euclidean distance between corresponding pose vectors."""
    return float(np.mean(np.linalg.norm(a.frames - b.frames, axis=1)))
