"""L2-regularised one-vs-rest linear classifiers.

Each class score ``w_k . [x, 1]`` is trained on

    ||w_k||^2 + (C / m) * sum_i loss(t_ik * w_k . [x_i, 1]),   t_ik = +1 if y_i == k else -1

The constant feature stands in for a bias and is penalised like every
other weight, so the whole parameter vector lives in a norm ball.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .environment import DataError

LOSS_KINDS = ("hinge", "logistic")


class TrainingError(DataError):
    pass


@dataclass(frozen=True)
class SvmConfig:
    loss_kind: str = "hinge"
    C: float = 1.0
    tol: float = 1e-8
    max_iter: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if not self.C > 0:
            raise ValueError("C must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")

    def with_C(self, C: float) -> "SvmConfig":
        return SvmConfig(self.loss_kind, float(C), self.tol, self.max_iter, self.seed)


@dataclass(frozen=True)
class SolverReport:
    """Per-class solver diagnostics.

    ``traces[k]`` holds the objective the solver monotonically decreases,
    one value per outer iteration: the dual objective for hinge, the primal
    for logistic. ``objectives[k]`` is the final primal objective.
    """

    iterations: tuple[int, ...]
    objectives: tuple[float, ...]
    converged: tuple[bool, ...]
    traces: tuple[tuple[float, ...], ...] = field(repr=False, default=())


@dataclass(frozen=True, eq=False)
class LinearModel:
    """K x (d + 1) weight matrix; the last column multiplies the constant feature."""

    W: np.ndarray
    trained_C: float
    solver_report: SolverReport | None = None

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        if W.ndim != 2:
            raise ValueError("W must be a matrix")
        if not np.all(np.isfinite(W)):
            raise TrainingError("non-finite weights")
        W.setflags(write=False)
        object.__setattr__(self, "W", W)

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W.shape[1] - 1

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.feature_dim:
            raise DataError(f"expected features of dimension {self.feature_dim}, got shape {X.shape}")
        return add_bias_feature(X) @ self.W.T

    def predict(self, X: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximiser: ties go to the lowest class index
        return np.argmax(self.scores(X), axis=1)


def add_bias_feature(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return np.hstack([X, np.ones((X.shape[0], 1))])


# ---------------------------------------------------------------------------
# solvers


@numba.njit(cache=True, nogil=True)
def _xorshift(state):
    state ^= (state << np.uint64(13)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    state ^= state >> np.uint64(7)
    state ^= (state << np.uint64(17)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    return state


@numba.njit(cache=True, nogil=True)
def _hinge_dcd(X, t, upper, tol, max_iter, seed):
    """Dual coordinate descent for min 0.5 a'Qa - sum(a), 0 <= a <= upper."""
    m, d = X.shape
    alpha = np.zeros(m)
    w = np.zeros(d)
    qdiag = np.empty(m)
    for i in range(m):
        s = 0.0
        for j in range(d):
            s += X[i, j] * X[i, j]
        qdiag[i] = s
    order = np.arange(m)
    state = np.uint64(seed) * np.uint64(2654435761) + np.uint64(0x9E3779B97F4A7C15)
    if state == 0:
        state = np.uint64(1)
    trace = np.empty(max_iter)
    prev = 0.0
    n_iter = 0
    converged = False
    for it in range(max_iter):
        for i in range(m - 1, 0, -1):
            state = _xorshift(state)
            k = np.int64(state % np.uint64(i + 1))
            tmp = order[i]
            order[i] = order[k]
            order[k] = tmp
        for p in range(m):
            i = order[p]
            if qdiag[i] == 0.0:
                continue
            g = 0.0
            for j in range(d):
                g += w[j] * X[i, j]
            g = t[i] * g - 1.0
            a_old = alpha[i]
            a_new = a_old - g / qdiag[i]
            if a_new < 0.0:
                a_new = 0.0
            elif a_new > upper:
                a_new = upper
            if a_new != a_old:
                step = (a_new - a_old) * t[i]
                for j in range(d):
                    w[j] += step * X[i, j]
                alpha[i] = a_new
        obj = 0.0
        for j in range(d):
            obj += w[j] * w[j]
        obj *= 0.5
        for i in range(m):
            obj -= alpha[i]
        trace[it] = obj
        n_iter = it + 1
        if abs(prev - obj) < tol * max(1.0, abs(obj)):
            converged = True
            break
        prev = obj
    return w, trace[:n_iter], n_iter, converged


def _hinge_primal(w, X, t, C):
    m = X.shape[0]
    return float(w @ w + C / m * np.maximum(0.0, 1.0 - t * (X @ w)).sum())


def _logistic_primal(w, X, t, C):
    m = X.shape[0]
    return float(w @ w + C / m * np.logaddexp(0.0, -t * (X @ w)).sum())


def _logistic_newton(X, t, C, tol, max_iter):
    m, d = X.shape
    w = np.zeros(d)
    obj = _logistic_primal(w, X, t, C)
    trace = [obj]
    converged = False
    for _ in range(max_iter):
        z = t * (X @ w)
        s = 0.5 * (1.0 - np.tanh(0.5 * z))  # sigmoid(-z), overflow-free
        grad = 2.0 * w - (C / m) * (X.T @ (t * s))
        H = (C / m) * (X.T * (s * (1.0 - s))) @ X
        H[np.diag_indices_from(H)] += 2.0
        step = np.linalg.solve(H, grad)
        slope = float(grad @ step)
        eta = 1.0
        while True:
            w_new = w - eta * step
            obj_new = _logistic_primal(w_new, X, t, C)
            if obj_new <= obj - 1e-4 * eta * slope or eta < 1e-10:
                break
            eta *= 0.5
        if obj_new > obj:
            converged = True
            break
        w, change, obj = w_new, obj - obj_new, obj_new
        trace.append(obj)
        if change < tol * max(1.0, abs(obj)):
            converged = True
            break
    return w, np.array(trace), len(trace) - 1, converged


def train_linear(X: np.ndarray, y: np.ndarray, config: SvmConfig, num_classes: int | None = None) -> LinearModel:
    """Fit one scorer per class against the rest.

    Hinge problems are solved in the dual by coordinate descent over a seeded
    random permutation; logistic problems by damped Newton in the primal.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise TrainingError("training set is empty")
    if y.shape != (X.shape[0],):
        raise TrainingError("labels do not match samples")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite feature value in training set")
    K = int(y.max()) + 1 if num_classes is None else num_classes
    missing = sorted(set(range(K)) - set(np.unique(y).tolist()))
    if missing:
        raise TrainingError(f"classes {missing} absent from the training set")
    Xa = add_bias_feature(X)
    m = Xa.shape[0]
    rows, iters, objs, conv, traces = [], [], [], [], []
    for k in range(K):
        t = np.where(y == k, 1.0, -1.0)
        if config.loss_kind == "hinge":
            # ||w||^2 + (C/m) sum hinge  ==  2 * (0.5 ||w||^2 + C/(2m) sum hinge)
            w, trace, n_iter, ok = _hinge_dcd(Xa, t, config.C / (2.0 * m), config.tol, config.max_iter, config.seed + k)
            obj = _hinge_primal(w, Xa, t, config.C)
        else:
            w, trace, n_iter, ok = _logistic_newton(Xa, t, config.C, config.tol, config.max_iter)
            obj = float(trace[-1])
        rows.append(w)
        iters.append(int(n_iter))
        objs.append(obj)
        conv.append(bool(ok))
        traces.append(tuple(float(v) for v in trace))
    report = SolverReport(tuple(iters), tuple(objs), tuple(conv), tuple(traces))
    return LinearModel(np.vstack(rows), config.C, report)


def train_linear_samples(dataset, config: SvmConfig, num_classes: int | None = None) -> LinearModel:
    """``train_linear`` on a list of :class:`~dgselect.environment.Sample`."""
    dataset = list(dataset)
    if not dataset:
        raise TrainingError("training set is empty")
    X = np.vstack([np.asarray(s.features, dtype=np.float64) for s in dataset])
    y = np.array([s.label for s in dataset], dtype=np.int64)
    return train_linear(X, y, config, num_classes)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    ramp_risk: float
    mean_margin: float


def ramp(margin):
    return np.clip(1.0 - np.asarray(margin, dtype=np.float64), 0.0, 1.0)


def margins(scores: np.ndarray, y: np.ndarray) -> np.ndarray:
    """score of the true class minus the best competing score."""
    scores = np.asarray(scores, dtype=np.float64)
    rows = np.arange(len(y))
    true = scores[rows, y]
    others = scores.copy()
    others[rows, y] = -np.inf
    return true - others.max(axis=1)


def evaluate(model: LinearModel, X: np.ndarray, y: np.ndarray) -> Metrics:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise DataError("cannot evaluate on an empty dataset")
    if y.shape != (X.shape[0],):
        raise DataError("labels do not match samples")
    if np.any(y >= model.num_classes):
        raise DataError("label outside the model's classes")
    s = model.scores(X)
    marg = margins(s, y)
    acc = float(np.mean(np.argmax(s, axis=1) == y))
    return Metrics(acc, float(ramp(marg).mean()), float(marg.mean()))


def evaluate_samples(model: LinearModel, dataset) -> Metrics:
    dataset = list(dataset)
    if not dataset:
        raise DataError("cannot evaluate on an empty dataset")
    X = np.vstack([np.asarray(s.features, dtype=np.float64) for s in dataset])
    y = np.array([s.label for s in dataset], dtype=np.int64)
    return evaluate(model, X, y)


@dataclass(frozen=True)
class WeightNorms:
    per_class: tuple[float, ...]
    max_norm: float


def weight_norm(model: LinearModel) -> WeightNorms:
    per = np.linalg.norm(model.W, axis=1)
    return WeightNorms(tuple(float(v) for v in per), float(per.max()) if per.size else 0.0)


# ---------------------------------------------------------------------------
# plain-text matrix dump


def format_matrix(M: np.ndarray) -> str:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    lines = [f"{M.shape[0]} {M.shape[1]}"]
    lines += [" ".join(format(float(v), ".17g") for v in row) for row in M]
    return "\n".join(lines) + "\n"


def parse_matrix(lines: list[str]) -> tuple[np.ndarray, int]:
    """Parse one dumped matrix from the head of ``lines``; returns it and the lines consumed."""
    try:
        rows, cols = (int(v) for v in lines[0].split())
        data = [[float(v) for v in lines[1 + r].split()] for r in range(rows)]
    except (IndexError, ValueError) as exc:
        raise DataError(f"malformed matrix dump: {exc}") from None
    M = np.array(data, dtype=np.float64).reshape(rows, cols)
    return M, rows + 1


def save_model(model: LinearModel, path) -> None:
    Path(path).write_text(f"C {format(model.trained_C, '.17g')}\n" + format_matrix(model.W))


def load_model(path) -> LinearModel:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("C "):
        raise DataError(f"{path}: missing C header")
    W, _ = parse_matrix(lines[1:])
    return LinearModel(W, float(lines[0].split()[1]))
