"""Logistic propensity-score estimation with fallback and trimming.

Scores are fitted by iteratively reweighted least squares (Newton's method on
the binomial log-likelihood), separately within each exact-matching cell and
enrollment cohort.  Three score kinds are supported:

  conditional    p_s  = Pr(start at s | not starting in any other period, X^s)
  unconditional  p~_s = Pr(start at s | not yet started, X^s)
  completer      e_s  = Pr(completer | start at s, X^s)

On non-convergence the fallback drops covariates one at a time, mirroring the
drop-a-covariate remedy used for quasi-separated cells.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .panel import Design


class FitError(Exception):
    pass


class PerfectPredictionError(FitError):
    """The response is single-class: the cell predicts treatment perfectly."""


class SeparationError(FitError):
    """A covariate (combination) separates the classes; the MLE diverges."""


class ConvergenceError(FitError):
    """IRLS did not converge within the iteration budget."""


class UnrecoverableFitError(FitError):
    """Fallback exhausted its drop order without reaching convergence."""


SCORE_KINDS = ("conditional", "unconditional", "completer")


@dataclass
class PropensityFit:
    """Fitted per-cell, per-cohort logit.

    coefficients maps column name -> value and includes "_intercept".
    `index` holds the global worker indices of the fitting pool and `scores`
    the fitted probabilities aligned with it.  `predict` scores arbitrary
    design rows, which is how units outside the fitting pool (for example
    later-enrollees under the conditional score) are evaluated.
    """

    coefficients: dict[str, float]
    columns: tuple[str, ...]
    index: np.ndarray
    scores: np.ndarray
    converged: bool
    iterations: int
    score_kind: str | None = None
    cell_id: tuple | None = None
    cohort: int | None = None
    dropped_covariates: tuple[str, ...] = ()
    absorbed_constant: tuple[str, ...] = ()
    penalized: bool = False

    def score_of(self, global_idx) -> np.ndarray:
        want = np.atleast_1d(np.asarray(global_idx))
        order = np.argsort(self.index, kind="stable")
        pos = np.searchsorted(self.index[order], want)
        if np.any(pos >= len(order)) or np.any(self.index[order][np.minimum(pos, len(order) - 1)] != want):
            missing = want[(pos >= len(order)) | (self.index[order][np.minimum(pos, len(order) - 1)] != want)]
            raise KeyError(f"units not in fitting pool: {missing[:5].tolist()}")
        return self.scores[order[pos]]

    def predict(self, design: Design, rows=None) -> np.ndarray:
        X = design.select(self.columns)
        if rows is not None:
            X = X[np.asarray(rows)]
        eta = self.coefficients["_intercept"] + X @ np.array(
            [self.coefficients[c] for c in self.columns])
        return _expit(eta)

    def diagnostics(self) -> dict:
        return {
            "cell_id": list(self.cell_id) if self.cell_id is not None else None,
            "cohort": self.cohort,
            "n_treated": None,
            "n_control": None,
            "converged": self.converged,
            "dropped_covariates": list(self.dropped_covariates),
            "iterations": self.iterations,
        }


@dataclass
class TrimReport:
    dropped_for_perfect_prediction: tuple[int, ...]
    dropped_for_high_score: tuple[int, ...]
    threshold_used: float

    def __post_init__(self):
        overlap = set(self.dropped_for_perfect_prediction) & set(self.dropped_for_high_score)
        if overlap:
            raise ValueError(f"trim sets overlap: {sorted(overlap)}")

    @property
    def dropped(self) -> set[int]:
        return set(self.dropped_for_perfect_prediction) | set(self.dropped_for_high_score)


def _expit(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta, dtype=float)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ez = np.exp(eta[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_odds(p):
    """ln(p / (1-p)); strictly increasing on (0, 1)."""
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("log_odds requires 0 < p < 1")
    out = np.log(p / (1.0 - p))
    return float(out) if out.ndim == 0 else out


def inv_log_odds(z):
    z = np.asarray(z, dtype=float)
    out = _expit(np.atleast_1d(z))
    return float(out[0]) if z.ndim == 0 else out


def fit_logit(X, y, columns: Sequence[str] | None = None, *, max_iter: int = 100,
              tol: float = 1e-8, ridge: float = 0.0, index=None,
              score_kind: str | None = None, cell_id=None, cohort=None) -> PropensityFit:
    """Maximum-likelihood logit via IRLS.

    Convergence: max |score-vector element|, i.e. the gradient X'(y - p)
    including the intercept, below `tol`, or a coefficient step below `tol`.
    Raises PerfectPredictionError for single-class y, SeparationError when the
    likelihood drives fitted probabilities to 0/1 with diverging coefficients,
    ConvergenceError past `max_iter`.  A positive `ridge` penalizes the
    squared coefficients (intercept included) and marks the fit penalized.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    n = len(y)
    if X.shape[0] != n:
        raise ValueError("X and y lengths differ")
    if columns is None:
        columns = tuple(f"x{j}" for j in range(X.shape[1]))
    columns = tuple(columns)
    if y.min() == y.max():
        raise PerfectPredictionError("response is single-class")

    # constant columns carry no information beyond the intercept
    keep = []
    absorbed = []
    for j in range(X.shape[1]):
        if np.all(X[:, j] == X[0, j]):
            absorbed.append(columns[j])
        else:
            keep.append(j)
    if absorbed:
        warnings.warn(f"constant columns absorbed into intercept: {absorbed}")
    Xw = np.column_stack([np.ones(n), X[:, keep]])
    names = ("_intercept",) + tuple(columns[j] for j in keep)

    def negll(b):
        eta = Xw @ b
        # log(1 + exp(eta)) - y*eta, evaluated stably
        return float(np.sum(np.logaddexp(0.0, eta) - y * eta) + 0.5 * ridge * b @ b)

    beta = np.zeros(Xw.shape[1])
    obj = negll(beta)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        eta = Xw @ beta
        p = _expit(eta)
        grad = Xw.T @ (y - p) - ridge * beta
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        w = p * (1.0 - p)
        H = (Xw * w[:, None]).T @ Xw + ridge * np.eye(Xw.shape[1])
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise SeparationError("singular information matrix (separation or collinearity)")
        if not np.all(np.isfinite(step)):
            raise SeparationError("diverging update")
        # halve overshooting Newton steps so the likelihood never worsens
        scale = 1.0
        for _ in range(30):
            candidate = beta + scale * step
            new_obj = negll(candidate)
            if new_obj <= obj + 1e-12 * (1.0 + abs(obj)):
                break
            scale *= 0.5
        beta = beta + scale * step
        obj = negll(beta)
        if np.max(np.abs(scale * step)) < tol:
            converged = True
            break
        if ridge == 0.0 and np.max(np.abs(Xw @ beta)) > 36.0:
            # fitted probabilities at machine 0/1 while still moving: separation
            p_new = _expit(Xw @ beta)
            if np.max(np.abs(Xw.T @ (y - p_new))) >= tol:
                raise SeparationError("perfect or quasi separation detected")
    if not converged:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations")

    eta = Xw @ beta
    if ridge == 0.0 and len(beta) > 1 and eta[y == 1].min() > eta[y == 0].max():
        # the fitted index classifies the sample perfectly: the gradient can
        # still vanish while the coefficients diverge, so this "converged"
        # solution is not an MLE and the cell needs the fallback.  Extreme
        # but overlapping indices (genuinely tiny scores) are left alone.
        raise SeparationError("fitted index separates the classes")
    scores = _expit(eta)
    coefs = {name: float(b) for name, b in zip(names, beta)}
    for c in absorbed:
        coefs.setdefault(c, 0.0)
    return PropensityFit(
        coefficients=coefs,
        columns=tuple(c for c in columns if c not in absorbed),
        index=np.arange(n) if index is None else np.asarray(index),
        scores=scores,
        converged=True,
        iterations=iterations,
        score_kind=score_kind,
        cell_id=cell_id,
        cohort=cohort,
        penalized=ridge > 0.0,
    )


def fit_with_fallback(X, y, columns: Sequence[str], drop_order: Sequence[str],
                      **opts) -> PropensityFit:
    """fit_logit with the drop-a-covariate fallback.

    On non-convergence or separation, covariates are removed one more at a
    time following `drop_order` and the model refitted.  The fit records the
    covariates dropped; exhausting the order raises UnrecoverableFitError.
    """
    X = np.asarray(X, dtype=float)
    columns = tuple(columns)
    dropped: list[str] = []
    candidates = [c for c in drop_order if c in columns]
    while True:
        keep = [j for j, c in enumerate(columns) if c not in dropped]
        try:
            fit = fit_logit(X[:, keep], y, [columns[j] for j in keep], **opts)
            fit.dropped_covariates = tuple(dropped)
            return fit
        except (ConvergenceError, SeparationError):
            if not candidates:
                raise UnrecoverableFitError(
                    f"no convergence after dropping {dropped or 'nothing'}")
            dropped.append(candidates.pop(0))


def default_drop_order(columns: Sequence[str]) -> list[str]:
    """Demographics first (last listed first), earnings history last.

    Pre-enrollment earnings are the load-bearing conditioning variables, so
    they are only sacrificed after every demographic indicator, and within
    the earnings history the oldest lag goes first: the most recent quarters
    carry the selection signal and are surrendered last.
    """
    demo = [c for c in columns if not (c.startswith("y_m") or c.startswith("y_p"))]
    earn = [c for c in columns if c.startswith("y_m") or c.startswith("y_p")]
    return demo[::-1] + earn


def perfect_prediction_drops(X, y, columns: Sequence[str] | None = None) -> list[int]:
    """Row indices whose binary covariate pattern forces a fitted score of 1.

    For every binary (two-valued) column, a value whose subsample is entirely
    treated perfectly predicts treatment; those treated rows violate the
    overlap requirement p < 1 and are removed before fitting.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y)
    flagged = np.zeros(len(y), dtype=bool)
    for j in range(X.shape[1]):
        vals = np.unique(X[:, j])
        if len(vals) != 2:
            continue
        for v in vals:
            in_group = X[:, j] == v
            if in_group.any() and np.all(y[in_group] == 1):
                flagged |= in_group
    return [int(i) for i in np.where(flagged)[0]]


def trim(fit: PropensityFit, treated, threshold: float = 0.99,
         perfect_drops: Sequence[int] = ()) -> TrimReport:
    """Overlap trimming: treated units with score above `threshold`.

    `treated` and `perfect_drops` are global worker indices; units already
    removed for perfect prediction are excluded from the high-score scan so
    the two drop sets stay disjoint.
    """
    if not 0.5 < threshold < 1.0:
        raise ValueError("trim threshold must lie in (0.5, 1)")
    perfect = set(int(i) for i in perfect_drops)
    high = []
    treated = np.atleast_1d(np.asarray(treated))
    if len(treated):
        scores = fit.score_of(treated)
        for g, p in zip(treated, scores):
            if int(g) not in perfect and p > threshold:
                high.append(int(g))
    return TrimReport(tuple(sorted(perfect)), tuple(sorted(high)), threshold)
