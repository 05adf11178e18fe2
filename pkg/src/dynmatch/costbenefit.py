"""Present values, benefit-cost ratios, internal rates of return.

Conventions: impacts arrive at the end of each year (year 1 is discounted
once); an upfront cost sits at year 0 of a cash-flow vector.  A horizon
extension holds the last observed annual impact constant through the
working-life horizon.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


class CostBenefitError(Exception):
    pass


@dataclass(frozen=True)
class LoanTerms:
    principal: float
    nominal_rate: float = 0.068
    inflation: float = 0.02
    term_years: int = 10

    @property
    def real_rate(self) -> float:
        return (1.0 + self.nominal_rate) / (1.0 + self.inflation) - 1.0


@dataclass(frozen=True)
class CbScenario:
    """Inputs for one private/social return calculation.

    impact_stream holds annual earnings impacts for years 1..H; the last
    value is held constant through `horizon_years`.  Taxes only affect the
    private side.
    """

    impact_stream: tuple[float, ...]
    private_cost: float
    social_cost: float
    discount_rate: float = 0.02
    tax_rate: float = 0.25
    horizon_years: int = 30
    loan: LoanTerms | None = None

    def __post_init__(self):
        if self.discount_rate <= -1:
            raise CostBenefitError("discount rate must exceed -1")
        if not 0 <= self.tax_rate < 1:
            raise CostBenefitError("tax rate must lie in [0, 1)")
        if self.private_cost < 0 or self.social_cost < 0:
            raise CostBenefitError("costs must be non-negative")
        if len(self.impact_stream) == 0:
            raise CostBenefitError("empty impact stream")
        if self.horizon_years < len(self.impact_stream):
            raise CostBenefitError("horizon shorter than the observed stream")

    def extended_stream(self) -> list[float]:
        stream = list(self.impact_stream)
        stream += [stream[-1]] * (self.horizon_years - len(stream))
        return stream


def npv(stream: Sequence[float], rate: float) -> float:
    """Present value of end-of-year flows starting at year 1."""
    if rate <= -1:
        raise CostBenefitError("rate must exceed -1")
    arr = np.asarray(stream, dtype=float)
    t = np.arange(1, len(arr) + 1)
    return float(np.sum(arr / (1.0 + rate) ** t))


def benefit_cost_ratio(present_value: float, cost: float) -> float:
    if cost <= 0:
        raise CostBenefitError("cost must be positive")
    return present_value / cost


def _npv_cashflow(cashflow: np.ndarray, rate: float) -> float:
    t = np.arange(len(cashflow))
    return float(np.sum(cashflow / (1.0 + rate) ** t))


def irr(cashflow, *, lo: float = -0.99, hi: float = 10.0, tol: float = 1e-8) -> float:
    """Smallest rate in (lo, hi) where the cash flow's NPV crosses zero.

    `cashflow` starts at year 0 (e.g. a negative upfront cost followed by
    gains).  Bracketing scan plus bisection; more than one sign change in
    the flow itself means further roots may exist beyond the one returned.
    """
    if isinstance(cashflow, Mapping):
        horizon = max(cashflow)
        arr = np.zeros(horizon + 1)
        for year, amount in cashflow.items():
            arr[year] = amount
    else:
        arr = np.asarray(cashflow, dtype=float)
    nz = arr[arr != 0]
    if len(nz) == 0 or np.all(nz > 0) or np.all(nz < 0):
        raise CostBenefitError("cash flow must change sign for an internal rate to exist")

    grid = np.concatenate([np.linspace(lo, 1.0, 400), np.linspace(1.0, hi, 200)[1:]])
    values = np.array([_npv_cashflow(arr, r) for r in grid])
    bracket = None
    for a, b, va, vb in zip(grid[:-1], grid[1:], values[:-1], values[1:]):
        if va == 0.0:
            return float(a)
        if va * vb < 0:
            bracket = (a, b, va)
            break
    if bracket is None:
        if values[-1] == 0.0:
            return float(grid[-1])
        raise CostBenefitError("no NPV sign change on the search interval")
    a, b, va = bracket
    for _ in range(200):
        mid = 0.5 * (a + b)
        vm = _npv_cashflow(arr, mid)
        if vm == 0.0 or (b - a) < tol:
            return float(mid)
        if va * vm < 0:
            b = mid
        else:
            a, va = mid, vm
    return float(0.5 * (a + b))


def breakeven_year(stream: Sequence[float], cost: float, rate: float) -> int | None:
    """First year T with NPV(stream[1..T]) at least the upfront cost."""
    if rate <= -1:
        raise CostBenefitError("rate must exceed -1")
    cum = 0.0
    for t, amount in enumerate(np.asarray(stream, dtype=float), start=1):
        cum += amount / (1.0 + rate) ** t
        if cum >= cost:
            return t
    return None


def amortized_payments(loan: LoanTerms) -> list[float]:
    """Level real payments repaying the principal at the loan's real rate."""
    r = loan.real_rate
    n = loan.term_years
    if r == 0:
        pay = loan.principal / n
    else:
        pay = loan.principal * r / (1.0 - (1.0 + r) ** -n)
    return [pay] * n


@dataclass
class CbResults:
    npv_private: float
    npv_social: float
    bcr_private: float
    bcr_social: float
    irr_private: float
    irr_social: float
    breakeven_private: int | None
    breakeven_social: int | None
    irr_private_loan: float | None = None

    def to_dict(self) -> dict:
        return {
            "npv_private": self.npv_private,
            "npv_social": self.npv_social,
            "bcr_private": self.bcr_private,
            "bcr_social": self.bcr_social,
            "irr_private": self.irr_private,
            "irr_social": self.irr_social,
            "breakeven_private": self.breakeven_private,
            "breakeven_social": self.breakeven_social,
            "irr_private_loan": self.irr_private_loan,
        }


def evaluate_scenario(sc: CbScenario) -> CbResults:
    """All the headline return measures for one scenario."""
    stream = sc.extended_stream()
    post_tax = [(1.0 - sc.tax_rate) * v for v in stream]
    npv_private = npv(post_tax, sc.discount_rate)
    npv_social = npv(stream, sc.discount_rate)
    irr_private = irr([-sc.private_cost] + post_tax)
    irr_social = irr([-sc.social_cost] + stream)
    result = CbResults(
        npv_private=npv_private,
        npv_social=npv_social,
        bcr_private=benefit_cost_ratio(npv_private, sc.private_cost),
        bcr_social=benefit_cost_ratio(npv_social, sc.social_cost),
        irr_private=irr_private,
        irr_social=irr_social,
        breakeven_private=breakeven_year(post_tax, sc.private_cost, sc.discount_rate),
        breakeven_social=breakeven_year(stream, sc.social_cost, sc.discount_rate),
    )
    if sc.loan is not None:
        payments = amortized_payments(sc.loan)
        horizon = max(len(post_tax), len(payments))
        merged = [0.0] * (horizon + 1)
        for t, v in enumerate(post_tax, start=1):
            merged[t] += v
        for t, pay in enumerate(payments, start=1):
            merged[t] -= pay
        result.irr_private_loan = irr(merged)
    return result
