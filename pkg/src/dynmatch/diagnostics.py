"""Balance, overlap, falsification tests and descriptive decompositions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .panel import PanelDataset, build_cohort_view, NEVER
from .propensity import fit_with_fallback, default_drop_order, log_odds, FitError
from .matching import MatchSet, nn_match, match_difference


class DiagnosticsError(Exception):
    pass


# ---------------------------------------------------------------------------
# covariate balance
# ---------------------------------------------------------------------------


@dataclass
class CovariateBalance:
    name: str
    mean_treated: float
    mean_control: float
    sd_treated: float
    sd_control: float
    normalized_difference: float
    t_statistic: float


@dataclass
class BalanceReport:
    sample: str                      # "raw" or "matched"
    rows: list[CovariateBalance]

    def normalized_differences(self) -> dict[str, float]:
        return {r.name: r.normalized_difference for r in self.rows}

    def mean_abs_normalized_difference(self) -> float:
        return float(np.mean([abs(r.normalized_difference) for r in self.rows]))


def _weighted_moments(x: np.ndarray, w: np.ndarray | None):
    if w is None:
        return float(np.mean(x)), float(np.var(x, ddof=1)) if len(x) > 1 else 0.0, len(x)
    ws = np.sum(w)
    mean = float(np.sum(w * x) / ws)
    n_eff = ws ** 2 / np.sum(w ** 2)
    var = float(np.sum(w * (x - mean) ** 2) / ws * (n_eff / max(n_eff - 1, 1e-12)))
    return mean, var, n_eff


def balance(columns: Mapping[str, np.ndarray], treated_idx, control_idx,
            *, control_weights: np.ndarray | None = None,
            sample: str = "raw") -> BalanceReport:
    """Per-covariate normalized difference (mean gap over the average sd).

    For the matched sample pass each matched control once per use via
    `control_idx` repetition or `control_weights`.  Zero pooled variance with
    equal means reports 0; with unequal means it is flagged infinite.
    """
    treated_idx = np.asarray(treated_idx, dtype=int)
    control_idx = np.asarray(control_idx, dtype=int)
    rows = []
    for name, col in columns.items():
        xt = np.asarray(col, dtype=float)[treated_idx]
        xc = np.asarray(col, dtype=float)[control_idx]
        mt, vt, nt = _weighted_moments(xt, None)
        mc, vc, nc = _weighted_moments(xc, control_weights)
        pooled = np.sqrt((vt + vc) / 2.0)
        if pooled == 0:
            nd = 0.0 if mt == mc else float(np.inf) * np.sign(mt - mc)
            tstat = 0.0 if mt == mc else float(np.inf) * np.sign(mt - mc)
        else:
            nd = (mt - mc) / pooled
            se = np.sqrt(vt / nt + vc / nc)
            tstat = (mt - mc) / se if se > 0 else 0.0
        rows.append(CovariateBalance(name, mt, mc, float(np.sqrt(vt)), float(np.sqrt(vc)),
                                     float(nd), float(tstat)))
    return BalanceReport(sample, rows)


def matched_balance(columns: Mapping[str, np.ndarray], mset: MatchSet) -> BalanceReport:
    """Balance over treated units and their matched controls with reuse."""
    return balance(columns, mset.treated_units, mset.controls, sample="matched")


# ---------------------------------------------------------------------------
# negative-selection falsification test
# ---------------------------------------------------------------------------


@dataclass
class InterimDifferential:
    """Matched earnings gap of later-enrollees in one pre-enrollment quarter."""

    s: int          # cohort whose conditioning set is used
    l: int          # how many quarters later the tested group enrolls
    j: int          # interim quarter number 1..l (absolute quarter s + j - 1)
    estimate: float
    variance: float | None
    n: int


def assumption2_test(data: PanelDataset, s: int, l: int, *, k: int = 1,
                     fit_opts: dict | None = None) -> list[InterimDifferential]:
    """Earnings of workers enrolling at s+l versus matched never-enrollees.

    Matches on a score built from the cohort-s conditioning set and compares
    earnings in each of the l quarters before the later group enrolls.
    Under negative dynamic selection every differential should be negative.
    Returns [] when the later cohort is empty.
    """
    if not (1 <= s <= data.S - 1 and 1 <= l <= data.S - s):
        raise DiagnosticsError(f"need 1 <= s <= S-1 and 1 <= l <= S-s, got s={s}, l={l}")
    view = build_cohort_view(data, s)
    later = np.where(data.enroll_q == s + l)[0]
    never = view.controls
    if len(later) == 0:
        return []
    if len(never) == 0:
        raise DiagnosticsError("no never-enrollees")
    pool = np.concatenate([later, never])
    y = np.concatenate([np.ones(len(later)), np.zeros(len(never))])
    X = view.design_rows(pool)
    opts = {"max_iter": 200, "tol": 1e-8}
    opts.update(fit_opts or {})
    try:
        fit = fit_with_fallback(X, y, view.design.columns,
                                default_drop_order(view.design.columns), **opts)
    except FitError as err:
        raise DiagnosticsError(f"score fit failed for s={s}, l={l}: {err}")
    scores = fit.scores
    mset = nn_match(scores[:len(later)], scores[len(later):], k,
                    treated_ids=later, control_ids=never)
    out = []
    for j in range(1, l + 1):
        q = s + j - 1
        outcome = data.earnings_at(q)
        value, var = match_difference(mset, outcome)
        out.append(InterimDifferential(s, l, j, value, var, len(later)))
    return out


def assumption2_table(data: PanelDataset, *, k: int = 1,
                      fit_opts: dict | None = None) -> list[InterimDifferential]:
    """All (s, l) differentials aggregated across s with enrollee-count weights.

    Rows keyed by (l, j) mirror the presentation that pools enrollment
    quarters; s is reported as 0 in aggregated rows.
    """
    cells: dict[tuple[int, int], list[InterimDifferential]] = {}
    for s in range(1, data.S):
        for l in range(1, data.S - s + 1):
            for d in assumption2_test(data, s, l, k=k, fit_opts=fit_opts):
                cells.setdefault((d.l, d.j), []).append(d)
    out = []
    for (l, j), ds in sorted(cells.items()):
        n = sum(d.n for d in ds)
        w = np.array([d.n / n for d in ds])
        est = float(np.sum(w * np.array([d.estimate for d in ds])))
        if all(d.variance is not None for d in ds):
            var = float(np.sum(w ** 2 * np.array([d.variance for d in ds])))
        else:
            var = None
        out.append(InterimDifferential(0, l, j, est, var, n))
    return out


# ---------------------------------------------------------------------------
# multiple testing
# ---------------------------------------------------------------------------


def holm_adjust(p_values: Sequence[float]) -> list[float]:
    """Step-down Holm adjustment, returned in the input order."""
    p = np.asarray(p_values, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise DiagnosticsError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    adj = np.empty(m)
    running = 0.0
    for rank, idx in enumerate(order):
        val = min((m - rank) * p[idx], 1.0)
        running = max(running, val)
        adj[idx] = running
    return [float(v) for v in adj]


# ---------------------------------------------------------------------------
# decompositions
# ---------------------------------------------------------------------------


@dataclass
class IndustryComponents:
    """Earnings mass by destination at one event time for one group."""

    tau: int
    group: str
    pr_same: float
    pr_diff: float
    pr_nonemployed: float
    mean_same: float      # E[earnings | employed in pre-layoff industry]
    mean_diff: float
    component_same: float     # pr_same * mean_same
    component_diff: float
    total_mean: float

    def additivity_gap(self) -> float:
        return self.total_mean - (self.component_same + self.component_diff)


def industry_switch_decomposition(data: PanelDataset, members, taus,
                                  *, industry_aux: str = "industry",
                                  pre_industry: str = "pre_industry",
                                  group: str = "enrollees") -> list[IndustryComponents]:
    """Split mean earnings into same-industry and switcher components.

    `members` are (worker, alignment quarter) pairs (matched controls align
    at their enrollee's start).  A worker-quarter is employed when earnings
    are positive; employed quarters must carry an industry code.  The
    non-employment share is reported separately and contributes zero
    earnings, so the two components add up to the overall mean exactly.
    """
    if industry_aux not in data.aux:
        raise DiagnosticsError(f"panel lacks aux outcome {industry_aux!r}")
    if pre_industry not in data.demo:
        raise DiagnosticsError(f"panel lacks covariate {pre_industry!r}")
    entries = [(int(i), int(a)) for i, a in members]
    idx = np.array([e[0] for e in entries], dtype=int)
    base = np.array([e[1] for e in entries], dtype=int)
    pre = np.asarray(data.demo[pre_industry])[idx]
    out = []
    for tau in taus:
        q = base + tau
        ok = (q >= data.q_min) & (q <= data.q_max)
        if not ok.all():
            raise DiagnosticsError(f"event quarter {tau} outside the observed range")
        earn = data.earnings[idx, q - data.q_min]
        ind = data.aux[industry_aux][idx, q - data.q_min]
        employed = earn > 0
        if np.any(employed & np.isnan(ind)):
            bad = idx[employed & np.isnan(ind)][:5]
            raise DiagnosticsError(f"missing industry for employed quarters, workers {bad.tolist()}")
        same = employed & (ind == pre)
        diff = employed & ~same
        n = len(idx)
        pr_same = float(np.mean(same))
        pr_diff = float(np.mean(diff))
        mean_same = float(np.mean(earn[same])) if same.any() else 0.0
        mean_diff = float(np.mean(earn[diff])) if diff.any() else 0.0
        out.append(IndustryComponents(
            tau=tau, group=group, pr_same=pr_same, pr_diff=pr_diff,
            pr_nonemployed=float(np.mean(~employed)),
            mean_same=mean_same, mean_diff=mean_diff,
            component_same=float(np.sum(earn[same]) / n),
            component_diff=float(np.sum(earn[diff]) / n),
            total_mean=float(np.mean(earn)),
        ))
    return out


@dataclass
class ExtensiveMarginDecomposition:
    weeks_term: float        # weeks change valued at the comparison wage
    wage_term: float         # residual wage-rate change valued at treated weeks
    weeks_share: float

    @property
    def total(self) -> float:
        return self.weeks_term + self.wage_term


def extensive_margin_decomposition(earn_treated: float, earn_control: float,
                                   weeks_treated: float, weeks_control: float,
                                   *, weeks_gap_adjustment: float = 0.0
                                   ) -> ExtensiveMarginDecomposition:
    """Earnings gap split into a weeks-worked part and a wage-rate part.

    gap = (weeks gap) * (control weekly wage) + (weekly wage gap) * treated
    weeks; the optional adjustment subtracts a pre-period weeks gap from the
    weeks change, with the residual absorbed by the wage term so the two
    terms always sum to the earnings gap exactly.
    """
    if weeks_control <= 0:
        raise DiagnosticsError("control weeks must be positive")
    d_earn = earn_treated - earn_control
    d_weeks = weeks_treated - weeks_control - weeks_gap_adjustment
    weeks_term = d_weeks * (earn_control / weeks_control)
    wage_term = d_earn - weeks_term
    share = weeks_term / d_earn if d_earn != 0 else np.nan
    return ExtensiveMarginDecomposition(float(weeks_term), float(wage_term), float(share))


@dataclass
class CompleterComponents:
    tau: int
    pr_completer: float
    component_completer: float
    component_noncompleter: float
    total_mean: float

    def additivity_gap(self) -> float:
        return self.total_mean - (self.component_completer + self.component_noncompleter)


def completer_decomposition(data: PanelDataset, members, taus) -> list[CompleterComponents]:
    """Enrollee earnings split by completion status; components add to the mean."""
    entries = [(int(i), int(a)) for i, a in members]
    idx = np.array([e[0] for e in entries], dtype=int)
    base = np.array([e[1] for e in entries], dtype=int)
    flags = data.completer[idx]
    if np.any(flags < 0):
        raise DiagnosticsError("completer flags missing for some members")
    comp = flags == 1
    out = []
    for tau in taus:
        q = base + tau
        ok = (q >= data.q_min) & (q <= data.q_max)
        if not ok.all():
            raise DiagnosticsError(f"event quarter {tau} outside the observed range")
        earn = data.earnings[idx, q - data.q_min]
        n = len(idx)
        out.append(CompleterComponents(
            tau=tau,
            pr_completer=float(np.mean(comp)),
            component_completer=float(np.sum(earn[comp]) / n),
            component_noncompleter=float(np.sum(earn[~comp]) / n),
            total_mean=float(np.mean(earn)),
        ))
    return out


# ---------------------------------------------------------------------------
# overlap and distributions
# ---------------------------------------------------------------------------


@dataclass
class OverlapReport:
    bin_edges: np.ndarray           # on the log-odds scale
    treated_density: np.ndarray     # masses summing to 1
    control_density: np.ndarray
    treated_frequency: np.ndarray
    control_frequency: np.ndarray
    share_treated_above: float
    threshold: float


def overlap_report(treated_scores, control_scores, *, bins: int = 60,
                   threshold: float = 0.99) -> OverlapReport:
    """Histograms of the score log-odds with shared bin edges."""
    zt = np.asarray(log_odds(np.asarray(treated_scores, dtype=float)))
    zc = np.asarray(log_odds(np.asarray(control_scores, dtype=float)))
    lo = min(zt.min(), zc.min())
    hi = max(zt.max(), zc.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    ft, _ = np.histogram(zt, bins=edges)
    fc, _ = np.histogram(zc, bins=edges)
    return OverlapReport(edges, ft / ft.sum(), fc / fc.sum(), ft, fc,
                         float(np.mean(np.asarray(treated_scores) > threshold)),
                         threshold)


def outcome_cdf(values) -> list[tuple[float, float]]:
    """Empirical CDF as (value, cumulative probability) steps."""
    vals = np.asarray(values, dtype=float)
    if len(vals) == 0:
        raise DiagnosticsError("empty group")
    vals = np.sort(vals)
    uniq, counts = np.unique(vals, return_counts=True)
    cum = np.cumsum(counts) / len(vals)
    return [(float(v), float(c)) for v, c in zip(uniq, cum)]
