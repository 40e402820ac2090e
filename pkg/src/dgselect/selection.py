"""Choosing the regularisation strength C, and the sweeps that motivate the choice.

Two validation criteria are provided. Domain-wise CV holds out whole
source domains and so estimates risk on unseen domains without bias;
instance-wise CV holds out samples of the very domains it trains on and is
optimistic for that purpose. Ties between grid points go to the smaller C.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .environment import DataError, Environment, split_environment
from .linear_models import LinearModel, SvmConfig, evaluate, train_linear

CRITERIA = ("domain_wise", "instance_wise")


class SelectionError(DataError):
    pass


@dataclass(frozen=True)
class CGrid:
    log2_values: tuple[int, ...] = tuple(range(-10, 11))

    def __post_init__(self):
        vals = tuple(int(v) for v in self.log2_values)
        if not vals:
            raise ValueError("grid is empty")
        if list(vals) != sorted(set(vals)):
            raise ValueError("grid must be sorted and unique")
        object.__setattr__(self, "log2_values", vals)

    @classmethod
    def parse(cls, text: str) -> "CGrid":
        """``"-10..10"`` or ``"-2,0,3"``."""
        text = text.strip()
        try:
            if ".." in text:
                lo, hi = text.split("..")
                return cls(tuple(range(int(lo), int(hi) + 1)))
            return cls(tuple(int(v) for v in text.split(",")))
        except ValueError:
            raise ValueError(f"bad grid {text!r}; use LO..HI or a comma list") from None

    @property
    def Cs(self) -> list[float]:
        return [2.0 ** v for v in self.log2_values]

    def __len__(self) -> int:
        return len(self.log2_values)


@dataclass
class SelectionResult:
    criterion: str
    chosen_C: float
    per_C_scores: dict[float, float]
    final_heldout_accuracy: float | None = None

    @property
    def ln_C_selected(self) -> float:
        return math.log(self.chosen_C)

    @property
    def log2_C_selected(self) -> float:
        return math.log2(self.chosen_C)


def select_best(Cs: Sequence[float], scores: Sequence[float]) -> float:
    """The smallest C among the maximisers of ``scores``."""
    order = sorted(range(len(Cs)), key=lambda i: Cs[i])
    best = order[0]
    for i in order[1:]:
        if scores[i] > scores[best]:
            best = i
    return Cs[best]


def _map(fn: Callable, items: list, threads: int = 1) -> list:
    if threads <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _fit(env: Environment, config: SvmConfig) -> LinearModel:
    X, y = env.pooled()
    return train_linear(X, y, config, env.num_classes)


def _accuracy(model: LinearModel, env: Environment) -> float:
    X, y = env.pooled()
    return evaluate(model, X, y).accuracy


# ---------------------------------------------------------------------------
# validation folds


def domain_wise_folds(env: Environment) -> Iterator[tuple[Environment, Environment]]:
    """(train, validation) pairs, each validation set one whole source domain."""
    if env.n < 2:
        raise SelectionError("domain-wise CV needs at least 2 source domains")
    for dom in env:
        yield env.without(dom.id), env.subset([dom.id])


def instance_wise_folds(env: Environment, k_folds: int, seed: int) -> Iterator[tuple[Environment, Environment]]:
    """k-fold split stratified by class within every source domain."""
    if k_folds < 2:
        raise SelectionError("k_folds must be >= 2")
    assignment = []
    for j, dom in enumerate(env):
        rng = np.random.default_rng([seed, j])
        fold_of = np.empty(dom.m, dtype=np.int64)
        for c in np.unique(dom.y):
            idx = rng.permutation(np.flatnonzero(dom.y == c))
            if idx.size < k_folds:
                raise SelectionError(
                    f"domain {dom.id!r}: class {c} has {idx.size} samples, fewer than {k_folds} folds"
                )
            fold_of[idx] = np.arange(idx.size) % k_folds
        assignment.append(fold_of)
    for f in range(k_folds):
        train = [dom.take(np.flatnonzero(a != f)) for dom, a in zip(env, assignment)]
        val = [dom.take(np.flatnonzero(a == f)) for dom, a in zip(env, assignment)]
        yield (
            Environment(tuple(train), env.num_classes, env.feature_dim),
            Environment(tuple(val), env.num_classes, env.feature_dim),
        )


def _check_trainable(train: Environment) -> None:
    X, y = train.pooled()
    missing = set(range(train.num_classes)) - set(np.unique(y).tolist())
    if missing:
        raise SelectionError(f"a CV fold has no training samples of classes {sorted(missing)}")


def _cv_scores(folds, grid: CGrid, config: SvmConfig, threads: int):
    folds = list(folds)
    for train, _ in folds:
        _check_trainable(train)
    jobs = [(ci, fi) for ci in range(len(grid)) for fi in range(len(folds))]
    Cs = grid.Cs

    def job(cf):
        ci, fi = cf
        train, val = folds[fi]
        model = _fit(train, config.with_C(Cs[ci]))
        return _accuracy(model, val), model

    out = _map(job, jobs, threads)
    acc = np.array([a for a, _ in out]).reshape(len(grid), len(folds))
    models = [[out[ci * len(folds) + fi][1] for fi in range(len(folds))] for ci in range(len(grid))]
    return acc, models


def _cross_validate(criterion, folds, grid, config, threads):
    acc, models = _cv_scores(folds, grid, config, threads)
    scores = [math.fsum(row) / len(row) for row in acc.tolist()]
    Cs = grid.Cs
    chosen = select_best(Cs, scores)
    result = SelectionResult(criterion, chosen, dict(zip(Cs, scores)))
    return result, models[Cs.index(chosen)]


def domain_wise_cv(env_train: Environment, grid: CGrid, svm_base_config: SvmConfig, seed: int = 0, threads: int = 1) -> SelectionResult:
    """Leave-one-source-domain-out CV; score is the mean held-out-domain accuracy.

    ``seed`` is unused by the fold construction (folds are the domains) and
    kept for a uniform signature.
    """
    return _cross_validate("domain_wise", domain_wise_folds(env_train), grid, svm_base_config, threads)[0]


def instance_wise_cv(env_train: Environment, grid: CGrid, k_folds: int, svm_base_config: SvmConfig, seed: int = 0, threads: int = 1) -> SelectionResult:
    return _cross_validate(
        "instance_wise", instance_wise_folds(env_train, k_folds, seed), grid, svm_base_config, threads
    )[0]


# ---------------------------------------------------------------------------
# held-out evaluation and sweeps


@dataclass(frozen=True)
class HeldoutMetrics:
    accuracy: float
    ramp_risk: float


def heldout_metrics(train: Environment, test: Environment, heldout_domain_id: str, config: SvmConfig) -> HeldoutMetrics:
    """Train on every train split except the held-out domain's; score its test split."""
    if heldout_domain_id not in train.ids:
        raise KeyError(f"unknown domain {heldout_domain_id!r}")
    sources = train.without(heldout_domain_id)
    model = _fit(sources, config)
    target = test[heldout_domain_id]
    met = evaluate(model, target.X, target.y)
    return HeldoutMetrics(met.accuracy, met.ramp_risk)


def evaluate_heldout(env: Environment, heldout_domain_id: str, C: float, config: SvmConfig, seed: int, train_frac: float = 0.5) -> HeldoutMetrics:
    if heldout_domain_id not in env.ids:
        raise KeyError(f"unknown domain {heldout_domain_id!r}")
    if env.n < 2:
        raise SelectionError("held-out evaluation needs at least one other domain")
    train, test = split_environment(env, train_frac, seed)
    return heldout_metrics(train, test, heldout_domain_id, config.with_C(C))


@dataclass
class SweepCurves:
    """Accuracy-vs-C curves; ``*_runs`` arrays are (seeds x grid)."""

    Cs: list[float]
    log2_values: list[int]
    seeds: list[int]
    iid_runs: np.ndarray
    dg_runs: np.ndarray
    worst_runs: np.ndarray

    @property
    def iid_mean(self):
        return self.iid_runs.mean(axis=0)

    @property
    def dg_mean(self):
        return self.dg_runs.mean(axis=0)

    @property
    def worst_mean(self):
        return self.worst_runs.mean(axis=0)

    def argmax_C(self, curve: str) -> float:
        return select_best(self.Cs, getattr(self, f"{curve}_mean").tolist())

    def per_seed_argmax_C(self, curve: str) -> list[float]:
        runs = getattr(self, f"{curve}_runs")
        return [select_best(self.Cs, row.tolist()) for row in runs]

    def records(self) -> list[dict]:
        rows = []
        for i, (C, lg) in enumerate(zip(self.Cs, self.log2_values)):
            rows.append(
                {
                    "C": C,
                    "log2C": lg,
                    "iid_mean": float(self.iid_runs[:, i].mean()),
                    "iid_std": float(self.iid_runs[:, i].std()),
                    "dg_mean": float(self.dg_runs[:, i].mean()),
                    "dg_std": float(self.dg_runs[:, i].std()),
                    "worst_mean": float(self.worst_runs[:, i].mean()),
                    "worst_std": float(self.worst_runs[:, i].std()),
                }
            )
        return rows


def c_sweep(env: Environment, grid: CGrid, seeds: Iterable[int], config: SvmConfig | None = None, train_frac: float = 0.5, threads: int = 1) -> SweepCurves:
    """i.i.d. and held-out-domain accuracy for every C and split seed."""
    if env.n < 2:
        raise SelectionError("c_sweep needs at least 2 domains")
    config = config or SvmConfig()
    seeds = list(seeds)
    Cs = grid.Cs
    splits = {s: split_environment(env, train_frac, s) for s in seeds}

    def job(sc):
        s, ci = sc
        train, test = splits[s]
        cfg = config.with_C(Cs[ci])
        iid = _accuracy(_fit(train, cfg), test)
        per = [heldout_metrics(train, test, dom_id, cfg).accuracy for dom_id in env.ids]
        return iid, math.fsum(per) / len(per), min(per)

    jobs = [(s, ci) for s in seeds for ci in range(len(Cs))]
    out = np.array(_map(job, jobs, threads)).reshape(len(seeds), len(Cs), 3)
    return SweepCurves(Cs, list(grid.log2_values), seeds, out[:, :, 0], out[:, :, 1], out[:, :, 2])


# ---------------------------------------------------------------------------
# criterion comparison (one row per seed, target domain and criterion)


@dataclass(frozen=True)
class ComparisonRow:
    seed: int
    target: str
    criterion: str
    chosen_C: float
    ln_C: float
    accuracy: float


def select_and_evaluate(train: Environment, test: Environment, target: str, criterion: str, grid: CGrid,
                        config: SvmConfig, k_folds: int = 5, seed: int = 0, refit: bool = True,
                        threads: int = 1) -> SelectionResult:
    """Select C on the source domains with ``criterion``, then score the target's test split.

    With ``refit`` the final model is retrained on all source train splits at
    the chosen C; otherwise the CV fold models at that C are scored and their
    accuracies averaged.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}")
    sources = train.without(target)
    if criterion == "domain_wise":
        folds = domain_wise_folds(sources)
    else:
        folds = instance_wise_folds(sources, k_folds, seed)
    result, fold_models = _cross_validate(criterion, folds, grid, config, threads)
    tgt = test[target]
    if refit:
        model = _fit(sources, config.with_C(result.chosen_C))
        result.final_heldout_accuracy = evaluate(model, tgt.X, tgt.y).accuracy
    else:
        accs = [evaluate(mdl, tgt.X, tgt.y).accuracy for mdl in fold_models]
        result.final_heldout_accuracy = math.fsum(accs) / len(accs)
    return result


def compare_criteria(env: Environment, grid: CGrid, seeds: Iterable[int], config: SvmConfig | None = None,
                     k_folds: int = 5, train_frac: float = 0.5, refit: bool = True,
                     targets: Sequence[str] | None = None, threads: int = 1) -> list[ComparisonRow]:
    """For every seed and target domain, select C by both criteria and record held-out accuracy."""
    config = config or SvmConfig()
    if env.n < 3:
        raise SelectionError("comparing criteria needs >= 3 domains (a target plus 2 sources)")
    rows = []
    for s in seeds:
        train, test = split_environment(env, train_frac, s)
        for target in targets or env.ids:
            for criterion in CRITERIA:
                res = select_and_evaluate(train, test, target, criterion, grid, config, k_folds, s, refit, threads)
                rows.append(ComparisonRow(s, target, criterion, res.chosen_C, res.ln_C_selected, res.final_heldout_accuracy))
    return rows


def summarise_comparison(rows: Sequence[ComparisonRow]) -> dict[str, dict[str, float]]:
    """Mean accuracy and mean ln C per criterion."""
    out = {}
    for criterion in CRITERIA:
        sel = [r for r in rows if r.criterion == criterion]
        if not sel:
            continue
        out[criterion] = {
            "accuracy": math.fsum(r.accuracy for r in sel) / len(sel),
            "ln_C": math.fsum(r.ln_C for r in sel) / len(sel),
        }
    return out
