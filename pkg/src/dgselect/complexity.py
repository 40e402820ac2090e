"""Capacity estimates: Rademacher complexity of norm balls and the 2-layer MLP measure.

For the class {x -> <w, x> : ||w|| <= B} the supremum over the class for a
fixed sign vector is available in closed form,

    sup_w (1/m) sum_i s_i <w, x_i> = (B/m) ||sum_i s_i x_i||,

so the only randomness left in the Monte-Carlo estimators is the signs
(and, at domain level, the choice of one representative per domain).
Estimates are reported for the margin class and passed on to loss-class
bounds with a contraction factor of 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .environment import Environment


@dataclass(frozen=True)
class RademacherEstimate:
    mean: float
    std_error: float
    n_draws: int
    method: str  # "closed_form" | "monte_carlo"

    def __post_init__(self):
        if self.mean < 0 or self.std_error < 0:
            raise ValueError("Rademacher estimates are nonnegative")
        if self.method == "closed_form" and self.n_draws != 0:
            raise ValueError("closed-form estimates have no draws")


@dataclass(frozen=True)
class HypothesisClassSpec:
    norm_bound: float

    def __post_init__(self):
        if not self.norm_bound > 0:
            raise ValueError("norm_bound must be positive")


@dataclass(frozen=True)
class SpectralNormResult:
    value: float
    iterations: int
    converged: bool

    def __float__(self) -> float:
        return self.value


def _as_points(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.size == 0 or X.shape[0] == 0:
        raise ValueError("need at least one point")
    return X


def _check_B(B: float) -> None:
    if not B > 0:
        raise ValueError("norm bound B must be positive")


def linear_rad_closed_form(X, B: float) -> float:
    """Upper bound B * sqrt(sum ||x_i||^2) / m (Jensen applied to the exact expectation)."""
    X = _as_points(X)
    _check_B(B)
    return float(B * math.sqrt(float(np.sum(X * X))) / X.shape[0])


def _mean_and_se(values: np.ndarray) -> tuple[float, float]:
    # math.fsum is exactly rounded, so the mean does not depend on draw order
    n = values.size
    mean = math.fsum(values.tolist()) / n
    if n < 2:
        return mean, 0.0
    var = math.fsum(((values - mean) ** 2).tolist()) / (n - 1)
    return mean, math.sqrt(var / n)


def rademacher_signs(n_draws: int, m: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=(n_draws, m), dtype=np.int8) * 2 - 1


def linear_rad_monte_carlo(X, B: float, n_draws: int = 1000, seed: int = 0, signs=None) -> RademacherEstimate:
    """Average of (B/m)||sum_i s_i x_i|| over sign vectors.

    ``signs`` (draws x m, entries +-1) replaces the random draws; passing all
    2^m sign vectors gives the exact expectation.
    """
    X = _as_points(X)
    _check_B(B)
    m = X.shape[0]
    if signs is None:
        if n_draws < 1:
            raise ValueError("n_draws must be >= 1")
        signs = rademacher_signs(n_draws, m, seed)
    signs = np.asarray(signs, dtype=np.float64)
    if signs.ndim != 2 or signs.shape[1] != m:
        raise ValueError(f"signs must have shape (draws, {m})")
    sups = B * np.linalg.norm(signs @ X, axis=1) / m
    mean, se = _mean_and_se(sups)
    return RademacherEstimate(mean, se, signs.shape[0], "monte_carlo")


def domain_level_rad(env: Environment, B: float, n_draws: int = 1000, seed: int = 0, augment: bool = True) -> RademacherEstimate:
    """Domain-level complexity: one uniformly drawn sample and one sign per domain.

    With ``augment`` the constant bias feature is appended, matching the
    parameterisation of :class:`~dgselect.linear_models.LinearModel`.
    """
    _check_B(B)
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    n = env.n
    rng = np.random.default_rng(seed)
    picks = np.stack([rng.integers(0, dom.m, size=n_draws) for dom in env], axis=1)
    signs = rng.integers(0, 2, size=(n_draws, n)) * 2.0 - 1.0
    dim = env.feature_dim + (1 if augment else 0)
    total = np.zeros((n_draws, dim))
    for j, dom in enumerate(env):
        reps = dom.X[picks[:, j]]
        if augment:
            reps = np.hstack([reps, np.ones((n_draws, 1))])
        total += signs[:, j:j + 1] * reps
    sups = B * np.linalg.norm(total, axis=1) / n
    mean, se = _mean_and_se(sups)
    return RademacherEstimate(mean, se, n_draws, "monte_carlo")


def spectral_norm(M, tol: float = 1e-10, max_iter: int = 10_000, seed: int = 0) -> SpectralNormResult:
    """Largest singular value by power iteration on M^T M from a seeded unit start vector."""
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if not np.any(M):
        raise ValueError("spectral_norm needs a nonzero matrix")
    v = np.random.default_rng(seed).standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for it in range(1, max_iter + 1):
        u = M @ v
        w = M.T @ u
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector in the null space; restart from a fresh direction
            v = np.random.default_rng(seed + it).standard_normal(M.shape[1])
            v /= np.linalg.norm(v)
            continue
        v = w / nw
        new = math.sqrt(nw)  # ||M^T M v_old|| -> sigma^2 at convergence
        if abs(new - sigma) <= tol * new:
            return SpectralNormResult(float(np.linalg.norm(M @ v)), it, True)
        sigma = new
    return SpectralNormResult(float(np.linalg.norm(M @ v)), max_iter, False)


def neyshabur_complexity(U, U0, V, tol: float = 1e-10) -> float:
    """||V||_F * (||U - U0||_F + ||U0||_2) for first layer U (h x d), its init U0, and second layer V (K x h)."""
    U = np.asarray(U, dtype=np.float64)
    U0 = np.asarray(U0, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if U.shape != U0.shape or V.shape[1] != U.shape[0]:
        raise ValueError(f"inconsistent shapes U{U.shape} U0{U0.shape} V{V.shape}")
    spec = spectral_norm(U0, tol=tol).value if np.any(U0) else 0.0
    return float(np.linalg.norm(V) * (np.linalg.norm(U - U0) + spec))


def checkpoint_complexity(ckpt) -> float:
    return neyshabur_complexity(ckpt.U, ckpt.U0, ckpt.V)
