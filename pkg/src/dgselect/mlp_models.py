"""Bias-free 2-layer ReLU MLPs trained by plain minibatch SGD, with checkpoints.

Scores are ``V relu(U x)``. The training objective is the mean over domains
of each domain's mean softmax cross-entropy on its minibatch, plus an
optional penalty plugin (variance of domain risks, or inter-domain mixup).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .environment import DataError, Environment
from .linear_models import format_matrix, parse_matrix

PLUGIN_KINDS = ("erm", "vrex", "mixup")


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class Mlp2:
    U: np.ndarray
    U0: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        for name in ("U", "U0", "V"):
            a = np.array(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.U.shape != self.U0.shape or self.V.shape[1] != self.U.shape[0]:
            raise ValueError(f"inconsistent shapes U{self.U.shape} U0{self.U0.shape} V{self.V.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(d, h, K)"""
        return self.U.shape[1], self.U.shape[0], self.V.shape[0]

    def with_weights(self, U, V) -> "Mlp2":
        return Mlp2(U, self.U0, V)

    def scores(self, X) -> np.ndarray:
        return np.maximum(np.asarray(X, dtype=np.float64) @ self.U.T, 0.0) @ self.V.T

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.scores(X), axis=1)

    def accuracy(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))


def init_mlp(d: int, h: int, K: int, seed: int) -> Mlp2:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; U0 is a copy of U."""
    if min(d, h, K) < 1:
        raise ValueError("dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    U = rng.uniform(-1.0, 1.0, size=(h, d)) / math.sqrt(d)
    V = rng.uniform(-1.0, 1.0, size=(K, h)) / math.sqrt(h)
    return Mlp2(U, U.copy(), V)


@dataclass(frozen=True)
class TrainSchedule:
    steps: int = 3000
    checkpoint_every: int = 300
    learning_rate: float = 1e-2
    batch_size: int = 64
    seed: int = 0
    hidden: int = 256

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if not self.learning_rate > 0 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("learning_rate, batch_size and hidden must be positive")


@dataclass(frozen=True)
class PenaltyPlugin:
    kind: str = "erm"
    lam: float = 0.0
    alpha: float = 0.2

    def __post_init__(self):
        if self.kind not in PLUGIN_KINDS:
            raise ValueError(f"plugin kind must be one of {PLUGIN_KINDS}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")

    @classmethod
    def erm(cls) -> "PenaltyPlugin":
        return cls("erm")

    @classmethod
    def vrex(cls, lam: float) -> "PenaltyPlugin":
        return cls("vrex", lam=lam)

    @classmethod
    def mixup(cls, alpha: float) -> "PenaltyPlugin":
        return cls("mixup", alpha=alpha)


@dataclass(frozen=True, eq=False)
class MlpCheckpoint:
    step: int
    model: Mlp2
    train_loss: float
    train_accuracy: float

    @property
    def U(self):
        return self.model.U

    @property
    def U0(self):
        return self.model.U0

    @property
    def V(self):
        return self.model.V


# ---------------------------------------------------------------------------
# penalties


def vrex_penalty(per_domain_risks, lam: float) -> float:
    """lam times the population variance of the domain risks."""
    r = np.asarray(per_domain_risks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("need at least one risk")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    mean = math.fsum(r.tolist()) / r.size
    return lam * math.fsum(((r - mean) ** 2).tolist()) / r.size


@dataclass(frozen=True)
class MixedBatch:
    X: np.ndarray
    lam: np.ndarray
    y_a: np.ndarray
    y_b: np.ndarray

    def soft_targets(self, K: int) -> np.ndarray:
        T = np.zeros((len(self.lam), K))
        rows = np.arange(len(self.lam))
        T[rows, self.y_a] += self.lam
        T[rows, self.y_b] += 1.0 - self.lam
        return T


def mixup_batch(batch_a, batch_b, alpha: float, seed=None, lam=None) -> MixedBatch:
    """Pairwise convex combinations with Beta(alpha, alpha) weights.

    ``batch_a``/``batch_b`` are (X, y) pairs. ``lam`` forces the weights
    (scalar or per pair) instead of sampling them.
    """
    Xa, ya = (np.asarray(v) for v in batch_a)
    Xb, yb = (np.asarray(v) for v in batch_b)
    if Xa.shape != Xb.shape or ya.shape != yb.shape or len(ya) != len(Xa):
        raise ValueError(f"batch mismatch: {Xa.shape} vs {Xb.shape}")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    if lam is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        lam = rng.beta(alpha, alpha, size=len(ya))
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (len(ya),)).copy()
    X = lam[:, None] * Xa + (1.0 - lam[:, None]) * Xb
    return MixedBatch(X, lam, ya.astype(np.int64), yb.astype(np.int64))


# ---------------------------------------------------------------------------
# objective and gradient


def one_hot(y, K: int) -> np.ndarray:
    T = np.zeros((len(y), K))
    T[np.arange(len(y)), np.asarray(y, dtype=np.int64)] = 1.0
    return T


def _log_softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))


def batch_risk_and_grad(U, V, X, T):
    """Mean soft-target cross-entropy on one batch and its gradients w.r.t. U and V."""
    A = X @ U.T
    H = np.maximum(A, 0.0)
    Z = H @ V.T
    logp = _log_softmax(Z)
    b = X.shape[0]
    risk = float(-(T * logp).sum() / b)
    dZ = (np.exp(logp) * T.sum(axis=1, keepdims=True) - T) / b
    gV = dZ.T @ H
    dA = (dZ @ V) * (A > 0)
    gU = dA.T @ X
    return risk, gU, gV


def objective_and_grad(model: Mlp2, batches, plugin: PenaltyPlugin, U=None, V=None):
    """Objective over per-domain batches ``[(X_j, T_j), ...]`` with gradients.

    Returns (objective, per_domain_risks, grad_U, grad_V). Mixup batches are
    already mixed; their soft targets make the loss the mixed cross-entropy.
    """
    U = model.U if U is None else U
    V = model.V if V is None else V
    risks, gUs, gVs = [], [], []
    for X, T in batches:
        r, gU, gV = batch_risk_and_grad(U, V, X, T)
        risks.append(r)
        gUs.append(gU)
        gVs.append(gV)
    n = len(risks)
    r = np.array(risks)
    mean = math.fsum(risks) / n
    weights = np.full(n, 1.0 / n)
    obj = mean
    if plugin.kind == "vrex":
        obj += vrex_penalty(r, plugin.lam)
        weights = weights + plugin.lam * 2.0 * (r - mean) / n
    gU = sum(w * g for w, g in zip(weights, gUs))
    gV = sum(w * g for w, g in zip(weights, gVs))
    return obj, risks, gU, gV


# ---------------------------------------------------------------------------
# training


def _domain_batches(env: Environment, rng: np.random.Generator, batch_size: int):
    out = []
    for dom in env:
        size = min(batch_size, dom.m)
        out.append(rng.choice(dom.m, size=size, replace=False))
    return out


def _train_metrics(model: Mlp2, env: Environment) -> tuple[float, float]:
    losses, accs = [], []
    for dom in env:
        logp = _log_softmax(model.scores(dom.X))
        losses.append(float(-logp[np.arange(dom.m), dom.y].mean()))
        accs.append(float(np.mean(np.argmax(logp, axis=1) == dom.y)))
    return math.fsum(losses) / len(losses), math.fsum(accs) / len(accs)


def _snapshot(step: int, model: Mlp2, env: Environment) -> MlpCheckpoint:
    loss, acc = _train_metrics(model, env)
    return MlpCheckpoint(step, model, loss, acc)


def build_batches(env: Environment, indices, plugin: PenaltyPlugin, rng: np.random.Generator):
    """Per-domain (X, soft targets) for one step; mixup pairs domain j with domain j+1."""
    K = env.num_classes
    plain = [(dom.X[idx], dom.y[idx]) for dom, idx in zip(env, indices)]
    if plugin.kind != "mixup":
        return [(X, one_hot(y, K)) for X, y in plain]
    n = len(plain)
    out = []
    for j in range(n):
        (Xa, ya), (Xb, yb) = plain[j], plain[(j + 1) % n]
        size = min(len(ya), len(yb))
        mixed = mixup_batch((Xa[:size], ya[:size]), (Xb[:size], yb[:size]), plugin.alpha, rng)
        out.append((mixed.X, mixed.soft_targets(K)))
    return out


def train_mlp(env_train: Environment, schedule: TrainSchedule, plugin: PenaltyPlugin | None = None,
              init: Mlp2 | None = None, on_step: Callable | None = None) -> list[MlpCheckpoint]:
    """Minibatch SGD without momentum or weight decay.

    Checkpoints are taken at step 0, every ``checkpoint_every`` steps and at
    the final step. ``on_step(step, model, batches, objective)`` is called
    with the parameters *before* each update.
    """
    plugin = plugin or PenaltyPlugin.erm()
    d, K = env_train.feature_dim, env_train.num_classes
    model = init or init_mlp(d, schedule.hidden, K, schedule.seed)
    if model.dims[0] != d or model.dims[2] != K:
        raise DataError(f"model dims {model.dims} do not match data (d={d}, K={K})")
    rng = np.random.default_rng([schedule.seed, 1])
    checkpoints = [_snapshot(0, model, env_train)]
    U, V = model.U, model.V
    lr = schedule.learning_rate
    for step in range(schedule.steps):
        batches = build_batches(env_train, _domain_batches(env_train, rng, schedule.batch_size), plugin, rng)
        # divergence is reported below as NumericalError, not as numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            obj, risks, gU, gV = objective_and_grad(model, batches, plugin, U, V)
        if not math.isfinite(obj) or not (np.all(np.isfinite(gU)) and np.all(np.isfinite(gV))):
            raise NumericalError(
                f"non-finite objective at step {step}: objective={obj}, domain risks={risks}, "
                f"|U|={np.linalg.norm(U):.4g}, |V|={np.linalg.norm(V):.4g}, lr={lr}"
            )
        if on_step is not None:
            on_step(step, model.with_weights(U, V), batches, obj)
        U = U - lr * gU
        V = V - lr * gV
        done = step + 1
        if done % schedule.checkpoint_every == 0 or done == schedule.steps:
            checkpoints.append(_snapshot(done, model.with_weights(U, V), env_train))
    return checkpoints


# ---------------------------------------------------------------------------
# checkpoint files


def save_checkpoint(ckpt: MlpCheckpoint, path) -> None:
    d, h, K = ckpt.model.dims
    text = f"step {ckpt.step}\ndims {d} {h} {K}\n"
    text += format_matrix(ckpt.U) + format_matrix(ckpt.U0) + format_matrix(ckpt.V)
    Path(path).write_text(text)


def load_checkpoint(path) -> MlpCheckpoint:
    lines = Path(path).read_text().splitlines()
    try:
        step = int(lines[0].split()[1])
        d, h, K = (int(v) for v in lines[1].split()[1:4])
    except (IndexError, ValueError):
        raise DataError(f"{path}: malformed checkpoint header") from None
    pos = 2
    mats = []
    for _ in range(3):
        M, used = parse_matrix(lines[pos:])
        mats.append(M)
        pos += used
    U, U0, V = mats
    if U.shape != (h, d) or V.shape != (K, h):
        raise DataError(f"{path}: matrix shapes disagree with dims header")
    return MlpCheckpoint(step, Mlp2(U, U0, V), float("nan"), float("nan"))
