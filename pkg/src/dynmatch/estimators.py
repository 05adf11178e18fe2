"""The estimand family for staggered-enrollment treatment effects.

For a cohort starting treatment at quarter s and an event time tau (absolute
quarter t = s + tau):

  now_vs_later    matched difference against the not-yet-enrolled pool;
                  identifies starting-now-versus-possibly-later.
  tot_lower_bound matched difference against never-enrollees on the
                  conditional score; a lower bound for the effect of
                  enrolling versus not enrolling under negative dynamic
                  selection of later-enrollees.
  tot_upper_bound same matches, control outcomes scaled by the estimated
                  probability of never enrolling at the control's score;
                  an upper bound given non-negative outcomes.
  lechner_point   sequential matching that replaces matched later-enrollees
                  with never-enrollees matched on the accumulated score
                  vector; point-identifies the effect under sequential
                  ignorability alone.
  ipw             sequential inverse-probability weighting of never-enrollee
                  outcomes toward the cohort-1 covariate distribution.
  completer_*     bounds for the effect among credential completers.

Aggregation across cohorts weights by enrollment shares, with the shares
treated as fixed for the variance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .panel import PanelDataset, CohortView, build_cohort_view
from .propensity import PropensityFit, fit_logit, perfect_prediction_drops
from .matching import (MatchSet, nn_match, mahalanobis_match, match_difference,
                       per_treated_differences, matched_control_mean, MatchingError)


class EstimationError(Exception):
    pass


@dataclass
class CohortEstimate:
    cohort: int
    tau: int
    estimand: str
    value: float
    variance: float | None
    n_treated: int
    control_mean: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def se(self) -> float | None:
        return None if self.variance is None else float(np.sqrt(self.variance))

    @property
    def t_absolute(self) -> int:
        return self.cohort + self.tau


@dataclass
class AggregateEstimate:
    tau: int
    estimand: str
    value: float
    variance: float | None
    weights: dict[int, float]
    components: list[CohortEstimate]
    control_mean: float | None = None

    @property
    def se(self) -> float | None:
        return None if self.variance is None else float(np.sqrt(self.variance))


@dataclass
class IPWResult:
    counterfactual_mean: float
    tot: float
    n_treated: int
    capped: int
    variance: float | None = None


def _effective(ids: np.ndarray, exclude) -> np.ndarray:
    if not exclude:
        return ids
    drop = set(int(i) for i in exclude)
    return np.asarray([i for i in ids if int(i) not in drop], dtype=ids.dtype)


def _matched_estimate(view: CohortView, estimand: str, treated_ids, pool_ids,
                      fit: PropensityFit, tau: int, k: int, ties: str,
                      multiplier: np.ndarray | None = None,
                      mset: MatchSet | None = None):
    data = view.data
    t_abs = view.cohort + tau
    outcome = data.earnings_at(t_abs)
    if mset is None:
        mset = nn_match(fit.score_of(treated_ids), fit.score_of(pool_ids), k,
                        treated_ids=treated_ids, control_ids=pool_ids, ties=ties)
    value, var = match_difference(mset, outcome, multiplier)
    est = CohortEstimate(view.cohort, tau, estimand, value, var,
                         mset.n_treated(),
                         control_mean=matched_control_mean(mset, outcome))
    return est, mset


def match_cohort(view: CohortView, fit: PropensityFit, pool_kind: str, *,
                 k: int = 1, ties: str = "lowest", exclude=()) -> MatchSet:
    """Match the cohort's treated units once; pairings do not depend on tau.

    pool_kind "never" matches against never-enrollees (bounds), "at_risk"
    against everyone not starting at s including later-enrollees.
    """
    treated = _effective(view.treated, exclude)
    if pool_kind == "never":
        pool = view.controls
    elif pool_kind == "at_risk":
        pool = np.concatenate([view.later, view.controls])
        pool.sort()
    else:
        raise ValueError(f"unknown pool kind {pool_kind!r}")
    if len(treated) == 0 or len(pool) == 0:
        raise EstimationError(f"cohort {view.cohort}: empty treated or comparison pool")
    return nn_match(fit.score_of(treated), fit.score_of(pool), k,
                    treated_ids=treated, control_ids=pool, ties=ties)


def now_vs_later(view: CohortView, fit: PropensityFit, tau: int, *, k: int = 1,
                 ties: str = "lowest", exclude=(), mset: MatchSet | None = None
                 ) -> CohortEstimate:
    """Start-now-versus-possibly-later effect at event time tau.

    The comparison pool is every at-risk worker not starting at s, including
    those who enroll afterwards; `fit` should carry the not-yet-enrolled
    (unconditional) score.  Pass a precomputed `mset` to reuse pairings
    across event times.
    """
    if mset is None:
        mset = match_cohort(view, fit, "at_risk", k=k, ties=ties, exclude=exclude)
    est, _ = _matched_estimate(view, "now_vs_later", None, None, fit, tau, k, ties,
                               mset=mset)
    return est


def tot_lower_bound(view: CohortView, fit: PropensityFit, tau: int, *, k: int = 1,
                    ties: str = "lowest", exclude=(), mset: MatchSet | None = None
                    ) -> CohortEstimate:
    """Matched difference against never-enrollees on the conditional score."""
    if mset is None:
        mset = match_cohort(view, fit, "never", k=k, ties=ties, exclude=exclude)
    est, _ = _matched_estimate(view, "lower_bound", None, None, fit, tau, k, ties,
                               mset=mset)
    return est


def local_linear_share(x, z, bandwidth: float | None = None) -> Callable:
    """Local linear regression of a binary indicator on a scalar score.

    Gaussian kernel with the rule-of-thumb bandwidth 1.06 * sd * n^(-1/5)
    unless given.  Returns a vectorized predictor clipped to [0, 1].  A
    constant response short-circuits to that constant so downstream products
    are exact in the degenerate no-later-enrollee case.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    n = len(x)
    if n == 0:
        raise EstimationError("empty sample for share regression")
    if np.all(z == z[0]):
        const = float(z[0])
        return lambda pts: np.full(np.atleast_1d(np.asarray(pts, dtype=float)).shape, const)
    sd = float(np.std(x))
    h = bandwidth if bandwidth is not None else 1.06 * sd * n ** (-0.2)
    if h <= 0:
        mean = float(np.mean(z))
        return lambda pts: np.full(np.atleast_1d(np.asarray(pts, dtype=float)).shape, mean)

    z_mean = float(np.mean(z))

    def predict(points):
        pts = np.atleast_1d(np.asarray(points, dtype=float))
        out = np.empty(len(pts))
        chunk = max(1, int(2e6 // max(n, 1)))
        for lo in range(0, len(pts), chunk):
            p = pts[lo:lo + chunk]
            d = x[None, :] - p[:, None]
            w = np.exp(-0.5 * (d / h) ** 2)
            s0 = w.sum(axis=1)
            s1 = (w * d).sum(axis=1)
            s2 = (w * d * d).sum(axis=1)
            t0 = (w * z).sum(axis=1)
            t1 = (w * d * z).sum(axis=1)
            det = s0 * s2 - s1 * s1
            with np.errstate(invalid="ignore", divide="ignore"):
                a = np.where(np.abs(det) > 1e-300, (s2 * t0 - s1 * t1) / det, t0 / s0)
            # no kernel mass at all: fall back to the overall share
            a = np.where(s0 > 0, a, z_mean)
            a = np.where(np.isnan(a), z_mean, a)
            out[lo:lo + chunk] = a
        return np.clip(out, 0.0, 1.0)

    return predict


def never_share_multiplier(view: CohortView, fit: PropensityFit, mset: MatchSet,
                           share_fn: Callable | None = None,
                           bandwidth: float | None = None) -> np.ndarray:
    """Estimated Pr(never enroll | not enrolled through s, score) for each
    matched control; tau-invariant, so compute once per cohort.

    The share of later enrollment is fitted by local linear regression on
    the pool of later- and never-enrollees unless `share_fn` is given.
    """
    if share_fn is None:
        later = view.later
        pool_scores = fit.score_of(view.controls)
        if len(later):
            later_scores = fit.predict(view.design, rows=view.rows(later))
            xs = np.concatenate([later_scores, pool_scores])
            zs = np.concatenate([np.ones(len(later)), np.zeros(len(view.controls))])
        else:
            xs, zs = pool_scores, np.zeros(len(view.controls))
        share_fn = local_linear_share(xs, zs, bandwidth)
    control_scores = fit.score_of(mset.controls)
    uniq, inverse = np.unique(control_scores, return_inverse=True)
    shares = np.asarray(share_fn(uniq), dtype=float)[inverse]
    clipped = int(np.sum((shares < 0) | (shares > 1)))
    if clipped:
        warnings.warn(f"{clipped} share estimates clipped to [0, 1]")
    return 1.0 - np.clip(shares, 0.0, 1.0)


def tot_upper_bound(view: CohortView, fit: PropensityFit, tau: int, *, k: int = 1,
                    ties: str = "lowest", exclude=(), share_fn: Callable | None = None,
                    bandwidth: float | None = None, mset: MatchSet | None = None,
                    multiplier: np.ndarray | None = None) -> CohortEstimate:
    """Upper bound: matched never-enrollee outcomes scaled by the estimated
    probability of never enrolling given not-enrolled-through-s at the score.

    Requires non-negative outcomes.  `share_fn` maps scores to the
    probability of *later* enrollment; by default it is fitted by local
    linear regression on the pool of later- and never-enrollees.  Pass
    `mset` and `multiplier` (from never_share_multiplier) to reuse the
    tau-invariant pieces across event times.
    """
    data = view.data
    if mset is None:
        mset = match_cohort(view, fit, "never", k=k, ties=ties, exclude=exclude)
    outcome = data.earnings_at(view.cohort + tau)
    observed = outcome[np.concatenate([mset.treated_units, np.unique(mset.controls)])]
    if np.nanmin(observed) < 0:
        raise EstimationError("upper bound requires non-negative outcomes")
    if multiplier is None:
        multiplier = never_share_multiplier(view, fit, mset, share_fn, bandwidth)
    est, _ = _matched_estimate(view, "upper_bound", None, None, fit, tau, k, ties,
                               multiplier=multiplier, mset=mset)
    return est


def lechner_chain(data: PanelDataset, fits: Mapping[int, PropensityFit], *,
                  s: int = 1, k: int = 1, ties: str = "lowest", exclude=(),
                  views: Mapping[int, CohortView] | None = None):
    """Sequential matched sets for the cohort starting at s (tau-invariant).

    Step one matches the cohort to the not-yet-enrolled pool on the
    unconditional score.  Each later step j replaces matched units who
    enroll at j with units not enrolled through j, matched by Mahalanobis
    distance on the accumulated score vector (scores for s..j).  After step
    S every matched unit is a never-enrollee.  Returns (weighted matched
    sets per treated unit, max replacement distance).
    """
    S = data.S
    if s not in fits:
        raise EstimationError(f"lechner needs the unconditional fit for cohort {s}")
    view_s = views[s] if views and s in views else build_cohort_view(data, s)
    treated = _effective(view_s.treated, exclude)
    pool1 = np.concatenate([view_s.later, view_s.controls])
    pool1.sort()
    if len(treated) == 0 or len(pool1) == 0:
        raise EstimationError(f"cohort {s}: empty treated or comparison pool")

    fit_s = fits[s]
    m1 = nn_match(fit_s.score_of(treated), fit_s.score_of(pool1), k,
                  treated_ids=treated, control_ids=pool1, ties=ties)

    matched: dict[int, list[tuple[int, float]]] = {}
    for t in m1.treated_units:
        cs = m1.controls_of(t)
        matched[int(t)] = [(int(c), 1.0 / len(cs)) for c in cs]

    enroll = data.enroll_q
    max_dist = 0.0
    for j in range(s + 1, S + 1):
        to_replace = sorted({u for lst in matched.values() for u, _ in lst
                             if enroll[u] == j})
        if not to_replace:
            continue
        if j not in fits:
            raise EstimationError(f"lechner needs the unconditional fit for cohort {j}")
        pool_j = np.where((enroll == 0) | (enroll > j))[0]
        if len(pool_j) == 0:
            raise EstimationError(f"no replacement pool at step {j}")
        score_cols = [r for r in range(s, j + 1) if r in fits]
        rep_rows = np.column_stack([fits[r].score_of(to_replace) for r in score_cols])
        pool_rows = np.column_stack([fits[r].score_of(pool_j) for r in score_cols])
        rm = mahalanobis_match(rep_rows, pool_rows, k,
                               treated_ids=np.asarray(to_replace), control_ids=pool_j,
                               ties=ties)
        if len(rm.distances):
            max_dist = max(max_dist, float(np.max(rm.distances)))
        repl = {int(t): [(int(c), 1.0 / len(rm.controls_of(t)))
                         for c in rm.controls_of(t)] for t in rm.treated_units}
        for t, lst in matched.items():
            new = []
            for u, w in lst:
                if enroll[u] == j:
                    new.extend((v, w * wv) for v, wv in repl[u])
                else:
                    new.append((u, w))
            matched[t] = new
    return matched, max_dist


def lechner_point(data: PanelDataset, fits: Mapping[int, PropensityFit], tau: int,
                  *, s: int = 1, k: int = 1, ties: str = "lowest", exclude=(),
                  views: Mapping[int, CohortView] | None = None,
                  chain=None) -> CohortEstimate:
    """Sequential matching point estimate for the cohort starting at s.

    Pass `chain` (from lechner_chain) to reuse the matched sets across
    event times.
    """
    if chain is None:
        chain = lechner_chain(data, fits, s=s, k=k, ties=ties, exclude=exclude,
                              views=views)
    matched, max_dist = chain
    outcome = data.earnings_at(s + tau)
    diffs = np.empty(len(matched))
    cf_means = np.empty(len(matched))
    for i, (t, lst) in enumerate(matched.items()):
        cf = sum(w * outcome[u] for u, w in lst)
        if np.isnan(cf) or np.isnan(outcome[t]):
            raise EstimationError(f"missing outcome at t={s + tau} for unit {t}")
        cf_means[i] = cf
        diffs[i] = outcome[t] - cf
    value = float(np.mean(diffs))
    return CohortEstimate(s, tau, "lechner_point", value, None, len(matched),
                          control_mean=float(np.mean(cf_means)),
                          meta={"max_replacement_distance": max_dist})


def ipw_counterfactual(data: PanelDataset, fits: Mapping[int, PropensityFit], tau: int,
                       *, hajek: bool = True, cap: float = 1e-6) -> IPWResult:
    """Never-treated counterfactual mean for the first cohort by sequential
    inverse probability weighting.

    Weight for a never-enrollee: first-period score over the product of one
    minus each period's not-yet-enrolled score.  Denominators below `cap`
    are capped and counted.  The Hajek variant normalizes weights to sum to
    one; otherwise the empirical first-cohort share normalizes.
    """
    S = data.S
    for j in range(1, S + 1):
        if j not in fits and np.any(data.enroll_q == j):
            raise EstimationError(f"ipw needs the unconditional fit for cohort {j}")
    if 1 not in fits:
        raise EstimationError("ipw needs the unconditional fit for cohort 1")
    never = np.where(data.never_mask)[0]
    if len(never) == 0:
        raise EstimationError("no never-enrollees")
    # empty cohorts have zero enrollment probability and contribute factor one
    denom = np.ones(len(never))
    for j in range(1, S + 1):
        if j in fits:
            denom = denom * (1.0 - fits[j].score_of(never))
    capped = int(np.sum(denom < cap))
    denom = np.maximum(denom, cap)
    w = fits[1].score_of(never) / denom
    t_abs = 1 + tau
    y = data.earnings_at(t_abs)[never]
    if np.any(np.isnan(y)):
        raise EstimationError(f"missing outcomes at t={t_abs}")
    n1 = int(np.sum(data.enroll_q == 1))
    if n1 == 0:
        raise EstimationError("no first-cohort enrollees")
    if hajek:
        cf = float(np.sum(w * y) / np.sum(w))
    else:
        cf = float(np.sum(w * y) / n1)
    treated_mean = float(np.mean(data.earnings_at(t_abs)[data.enroll_q == 1]))
    return IPWResult(counterfactual_mean=cf, tot=treated_mean - cf,
                     n_treated=n1, capped=capped)


def completer_bounds(view: CohortView, tau: int, *, k: int = 1, ties: str = "lowest",
                     exclude=()) -> tuple[CohortEstimate, CohortEstimate] | None:
    """Bounds for the enrollment effect among completers of cohort s.

    Lower: completers matched to all never-enrollees by Mahalanobis distance
    directly on the covariates.  Upper: the raw completer outcome mean, from
    bounding their never-treated outcome below by zero.  None when the
    cohort has no completers.
    """
    data = view.data
    treated = _effective(view.treated, exclude)
    completers = np.asarray([i for i in treated if data.completer[i] == 1], dtype=int)
    if len(completers) == 0:
        return None
    pool = view.controls
    if len(pool) == 0:
        raise EstimationError("no never-enrollees to match completers against")
    outcome = data.earnings_at(view.cohort + tau)
    observed = outcome[np.concatenate([completers, pool])]
    if np.nanmin(observed) < 0:
        raise EstimationError("completer bounds require non-negative outcomes")
    rows_t = view.design_rows(completers)
    rows_c = view.design_rows(pool)
    mset = mahalanobis_match(rows_t, rows_c, k, treated_ids=completers,
                             control_ids=pool, ties=ties)
    value, var = match_difference(mset, outcome)
    lower = CohortEstimate(view.cohort, tau, "completer_lower", value, var,
                           mset.n_treated(),
                           control_mean=matched_control_mean(mset, outcome))
    y_c = outcome[completers]
    upper = CohortEstimate(view.cohort, tau, "completer_upper", float(np.mean(y_c)),
                           float(np.var(y_c, ddof=1) / len(y_c)) if len(y_c) > 1 else None,
                           len(completers))
    return lower, upper


def did_estimate(mset: MatchSet, data: PanelDataset, cohort: int, tau: int,
                 baseline_tau: int) -> CohortEstimate:
    """Difference-in-differences matching: within-person change from the
    baseline event quarter, then the matched difference of changes."""
    t_post = cohort + tau
    t_pre = cohort + baseline_tau
    post = data.earnings_at(t_post)
    pre = data.earnings_at(t_pre)
    for label, arr, t in (("outcome", post, t_post), ("baseline", pre, t_pre)):
        members = np.concatenate([mset.treated_units, np.unique(mset.controls)])
        if np.any(np.isnan(arr[members])):
            raise EstimationError(f"missing {label} earnings at t={t}")
    change = post - pre
    value, var = match_difference(mset, change)
    return CohortEstimate(cohort, tau, "did", value, var, mset.n_treated(),
                          meta={"baseline_tau": baseline_tau})


def reweighted_effect(mset: MatchSet, outcome, design_m: np.ndarray,
                      design_r: np.ndarray, *, cohort: int = 0, tau: int = 0,
                      tol: float = 1e-10, max_iter: int = 200) -> CohortEstimate:
    """Matched difference reweighted so the treated composition matches a
    reference group.

    A logit of reference-group membership on the pooled treated units gives
    the odds part of the weight; group shares give the scale.  Units whose
    binary covariate pattern perfectly predicts the group are dropped (no
    overlap) and counted in the result metadata.
    """
    design_m = np.atleast_2d(np.asarray(design_m, dtype=float))
    design_r = np.atleast_2d(np.asarray(design_r, dtype=float))
    units = mset.treated_units
    if design_m.shape[0] != len(units):
        raise EstimationError("design_m must align with the matched treated units")
    X = np.vstack([design_r, design_m])
    yref = np.concatenate([np.ones(len(design_r)), np.zeros(len(design_m))])
    bad = set(perfect_prediction_drops(X, yref)) | set(perfect_prediction_drops(X, 1 - yref))
    keep = np.asarray([i for i in range(len(yref)) if i not in bad], dtype=int)
    dropped_m = [i - len(design_r) for i in sorted(bad) if i >= len(design_r)]
    fit = fit_logit(X[keep], yref[keep], tol=tol, max_iter=max_iter)
    n_r = int(np.sum(yref[keep] == 1))
    n_m = int(np.sum(yref[keep] == 0))
    if n_r == 0 or n_m == 0:
        raise EstimationError("a group vanished after overlap drops")

    diffs = per_treated_differences(mset, outcome)
    keep_m = np.asarray([j for j in range(len(units)) if j not in dropped_m], dtype=int)
    # scores of the surviving m-group units, in their keep order
    m_positions = np.asarray([i for i in keep if i >= len(design_r)], dtype=int)
    p = fit.scores[np.isin(keep, m_positions)]
    w = (p / (1.0 - p)) * (n_m / n_r)
    d = diffs[keep_m]
    value = float(np.sum(w * d) / np.sum(w))
    wn = w / np.sum(w)
    n = len(d)
    var = float(np.sum(wn ** 2 * (d - value) ** 2) * n / (n - 1)) if n > 1 else None
    return CohortEstimate(cohort, tau, "reweighted", value, var, n,
                          meta={"dropped_no_overlap": len(dropped_m)})


def aggregate(components: Sequence[CohortEstimate],
              shares: Mapping[int, float] | None = None) -> AggregateEstimate:
    """Share-weighted combination across cohorts at a common event time.

    Shares default to the treated-count proportions.  The variance treats
    the shares as fixed: sum of squared shares times component variances.
    """
    comps = list(components)
    if not comps:
        raise EstimationError("nothing to aggregate")
    kinds = {c.estimand for c in comps}
    taus = {c.tau for c in comps}
    if len(kinds) > 1 or len(taus) > 1:
        raise EstimationError(f"mixed estimands {kinds} or event times {taus}")
    if shares is None:
        total = sum(c.n_treated for c in comps)
        weights = [c.n_treated / total for c in comps]
    else:
        cohorts = [c.cohort for c in comps]
        if len(set(cohorts)) != len(cohorts):
            raise EstimationError("explicit shares need unique cohorts")
        weights = [shares[c.cohort] for c in comps]
    ssum = sum(weights)
    if abs(ssum - 1.0) > 1e-12:
        raise EstimationError(f"shares sum to {ssum}, not 1")
    value = sum(w * c.value for w, c in zip(weights, comps))
    if any(c.variance is None for c in comps):
        var = None
    else:
        var = sum(w ** 2 * c.variance for w, c in zip(weights, comps))
    cms = [c.control_mean for c in comps]
    cm = (sum(w * m for w, m in zip(weights, cms))
          if all(m is not None for m in cms) else None)
    weight_map: dict[int, float] = {}
    for w, c in zip(weights, comps):
        weight_map[c.cohort] = weight_map.get(c.cohort, 0.0) + w
    return AggregateEstimate(comps[0].tau, comps[0].estimand, float(value),
                             var if var is None else float(var),
                             weight_map, comps, control_mean=cm)


def earnings_percent(effect: float, control_mean: float) -> float:
    """Effect as a percent of the comparison-group mean."""
    if control_mean <= 0:
        raise EstimationError("control mean must be positive")
    return 100.0 * effect / control_mean
