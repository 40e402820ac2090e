"""Numeric evaluators for the domain-generalisation risk bounds.

All losses are assumed 1-Lipschitz with values in [0, 1]. Vacuous values
(above 1) are returned unclipped so that comparisons across candidates stay
monotone.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

BOUND_KINDS = ("average_case", "excess_risk", "worst_case", "cantelli")


@dataclass(frozen=True)
class BoundInputs:
    empirical_risk: float
    rad_mn: float
    rad_n: float
    m: int
    n: int
    delta: float

    def __post_init__(self):
        if not 0.0 <= self.empirical_risk <= 1.0:
            raise ValueError("empirical_risk must lie in [0, 1]")
        _check_common(self.rad_mn, self.rad_n, self.m, self.n, self.delta)


@dataclass(frozen=True)
class BoundReport:
    kind: str
    value: float
    confidence: float
    inputs: dict

    @property
    def vacuous(self) -> bool:
        return self.value > 1.0


def _check_common(rad_mn, rad_n, m, n, delta) -> None:
    if rad_mn < 0 or rad_n < 0:
        raise ValueError("Rademacher terms must be nonnegative")
    if m < 1 or n < 1:
        raise ValueError("m and n must be >= 1")
    if not 0.0 < delta < 0.5:
        raise ValueError("delta must lie in (0, 0.5)")


def _check_kappa(kappa: float) -> None:
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")


def _deviation(delta: float, count: int) -> float:
    return math.sqrt(math.log(2.0 / delta) / (2.0 * count))


def theorem1_bound(inputs: BoundInputs) -> BoundReport:
    """Average-case risk on unseen domains, holding with probability 1 - 2 delta."""
    b = inputs
    value = (
        b.empirical_risk
        + 2.0 * b.rad_mn
        + 2.0 * b.rad_n
        + 3.0 * _deviation(b.delta, b.m * b.n)
        + 3.0 * _deviation(b.delta, b.n)
    )
    return BoundReport("average_case", value, 1.0 - 2.0 * b.delta, asdict(b))


def excess_risk_bound(rad_mn: float, rad_n: float, m: int, n: int, delta: float) -> BoundReport:
    _check_common(rad_mn, rad_n, m, n, delta)
    value = 2.0 * rad_mn + 2.0 * rad_n + 2.0 * _deviation(delta, m * n) + 2.0 * _deviation(delta, n)
    inputs = dict(rad_mn=rad_mn, rad_n=rad_n, m=m, n=n, delta=delta)
    return BoundReport("excess_risk", value, 1.0 - 2.0 * delta, inputs)


def cantelli_bound(env_risk: float, variance: float, kappa: float) -> BoundReport:
    """One-sided Chebyshev: a domain drawn from the environment has risk below the value w.p. >= 1 - kappa."""
    _check_kappa(kappa)
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    value = env_risk + math.sqrt((1.0 - kappa) / kappa * variance)
    return BoundReport("cantelli", value, 1.0 - kappa, dict(env_risk=env_risk, variance=variance, kappa=kappa))


def worst_case_transform(A: float, kappa: float, delta: float | None = None) -> BoundReport:
    """Turn an average-case bound A into a per-domain bound, using Var <= mean risk for [0, 1] losses.

    The confidence is 1 - (2 delta + kappa) when the delta behind A is given,
    otherwise 1 - kappa conditional on A holding.
    """
    _check_kappa(kappa)
    if A < 0:
        raise ValueError("A must be nonnegative")
    value = A + math.sqrt((1.0 - kappa) / kappa * A)
    fail = kappa if delta is None else 2.0 * delta + kappa
    return BoundReport("worst_case", value, 1.0 - fail, dict(A=A, kappa=kappa, delta=delta))


def argmin_index(values) -> int:
    """First index of the minimum (ties to the lowest index)."""
    values = list(values)
    best = 0
    for i, v in enumerate(values):
        if v < values[best]:
            best = i
    return best
