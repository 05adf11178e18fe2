"""Ground-truth laboratory for the matching estimands.

Two ingredients:

* A continuous panel generator.  Untreated earnings follow a random effect
  plus stationary AR(1) transitory component around a time level; enrollment
  is a threshold rule on lagged earnings plus idiosyncratic noise (the "AC"
  rule, after the classic earnings-dip observation) or on future untreated
  earnings plus a cost shock (the forward-looking "HR" rule).  Both produce
  negative dynamic selection, and the implied linear-projection coefficient
  of future untreated earnings on the selection index has a closed form that
  the generator exposes next to a covariance-algebra oracle.

* Exhaustive discrete two-period populations with recorded potential
  outcomes, on which every estimand has an exact population value: the
  sequential-product counterfactual, the matching bounds, the two-step point
  estimand and the inverse-probability-weighting estimand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .panel import PanelDataset, PanelSchema


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ACSelection:
    """Enroll at s when earnings k quarters back plus noise fall below a cutoff.

    With the default lag k=1 the rule reads quarter s-1 earnings, which sit
    inside the cumulative conditioning set, so sequential ignorability holds
    by construction.  Either give the cutoff directly or a target share of
    the marginal distribution.
    """

    k: int = 1
    ybar: float | None = None
    target_share: float | None = 0.05


@dataclass(frozen=True)
class HRSelection:
    """Enroll at s when future untreated earnings plus a cost shock are low.

    The economic form of the cutoff is alpha/r (gain over interest rate); a
    target share is usually more convenient and is used when ybar is None
    and alpha/r would be degenerate for the configured scale.
    """

    alpha: float | None = None
    r: float = 0.02
    ybar: float | None = None
    target_share: float | None = 0.05

    def cutoff(self) -> float | None:
        if self.ybar is not None:
            return self.ybar
        if self.alpha is not None and self.target_share is None:
            return self.alpha / self.r
        return None


@dataclass(frozen=True)
class EffectSpec:
    """Treatment effect by event time: constant level with optional profile."""

    alpha: float = 0.0
    profile: Mapping[int, float] | None = None

    def at(self, tau: int) -> float:
        if tau < 0:
            return 0.0
        if self.profile is not None and tau in self.profile:
            return float(self.profile[tau])
        return float(self.alpha)


@dataclass(frozen=True)
class SimConfig:
    n_workers: int
    S: int = 2
    K: int = 4
    rho: float = 0.75
    sigma_omega: float = 1.0
    sigma_eps: float = 1.0
    sigma_upsilon: float = 1.0
    level: float = 0.0                       # constant part of the time effect
    lambda_t: Mapping[int, float] | None = None  # per-quarter additive shifts
    selection: ACSelection | HRSelection = ACSelection()
    effect: EffectSpec = EffectSpec()
    d1_target_share: float = 0.05
    d1_cutoff: float | None = None
    d1_sigma_upsilon: float | None = None   # noise scale of the first-period rule
    t_max: int | None = None                 # last simulated post-layoff quarter
    floor_at_zero: bool = True
    demo_cells: int = 0                      # optional neutral categorical covariate
    seed: int = 0
    keep_potentials: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must satisfy 0 <= rho < 1")
        for name in ("sigma_omega", "sigma_eps", "sigma_upsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.S < 1 or self.K < 0 or self.n_workers < 1:
            raise ValueError("bad dimensions")

    def horizon(self) -> int:
        return self.t_max if self.t_max is not None else self.S + 16

    def time_effect(self, q: int) -> float:
        shift = 0.0 if self.lambda_t is None else float(self.lambda_t.get(q, 0.0))
        return self.level + shift


@dataclass
class SimTruth:
    """What the generator knows: effects, shares, selection coefficients."""

    delta: dict[tuple[int, int], float]      # (cohort, tau) -> realized true TOT
    pi: dict[int, float]                     # realized enrollment shares among enrollees
    beta: dict[int, float]                   # closed-form projection coefficient by t
    selection_rule: str
    truncated_count: int
    seed: int
    internals: dict = field(default_factory=dict)

    def overall_delta(self, tau: int) -> float:
        num = sum(self.pi[s] * self.delta[(s, tau)] for s in self.pi
                  if (s, tau) in self.delta)
        return num


# ---------------------------------------------------------------------------
# closed-form projection coefficients
# ---------------------------------------------------------------------------


def beta_ac(rho: float, sigma_omega: float, sigma_eps: float, sigma_upsilon: float,
            K: int, t: int) -> float:
    """Coefficient on (period-1 untreated earnings + noise) in the linear
    projection of period-t untreated earnings given K+1 pre-layoff lags.

    Positive whenever 0 < rho < 1, which is what makes low-interim-earnings
    selection imply lower future untreated earnings.
    """
    se2 = sigma_eps ** 2
    so2 = sigma_omega ** 2
    su2 = sigma_upsilon ** 2
    num = (rho ** (t - 1) * (1 + rho) * (1 - rho ** 2) * se2 ** 2
           + (1 - rho ** 2) * (1 + (K + 1 - K * rho) * rho ** (t - 1)) * se2 * so2)
    den = ((1 + rho) * (1 - rho ** 2) * se2 ** 2
           + (K + 2 - K * rho) * (1 - rho ** 2) * se2 * so2
           + (K + 1 - (K - 1) * rho) * so2 * su2
           + (1 + rho) * se2 * su2)
    return num / den


def beta_hr(rho: float, sigma_omega: float, sigma_eps: float, sigma_upsilon: float,
            K: int, t: int) -> float:
    """Same projection but on (period-2 untreated earnings + cost shock)."""
    se2 = sigma_eps ** 2
    so2 = sigma_omega ** 2
    su2 = sigma_upsilon ** 2
    den = ((1 + rho) * (1 - rho ** 4) * se2 ** 2
           + (K + 2 - (K - 2) * rho + K * rho ** 2 * (1 - rho)) * (1 - rho ** 2) * se2 * so2
           + (K + 1 - (K - 1) * rho) * so2 * su2
           + (1 + rho) * se2 * su2)
    if t == 1:
        num = ((1 - rho ** 2) * (1 + rho) * rho * se2 ** 2
               + (1 - rho ** 2) * (1 + (K + 1 - K * rho) * rho) * se2 * so2)
    else:
        num = (rho ** (t - 2) * (1 + rho) * (1 - rho ** 4) * se2 ** 2
               + (1 - rho ** 2)
               * (1 + rho + (K + 1 - (K - 1) * rho + K * rho ** 2 * (1 - rho)) * rho ** (t - 2))
               * se2 * so2)
    return num / den


def projection_oracle(rho: float, sigma_omega: float, sigma_eps: float,
                      sigma_upsilon: float, K: int, t: int, rule: str = "ac"):
    """Full linear projection of Y_t(0) on (selection index, pre-layoff lags).

    Builds the joint covariance of (Y_t(0), Y_j(0)+noise, Y_{-K..0}(0)) under
    the random-effect + stationary AR(1) process (j = 1 for the lagged-
    earnings rule, j = 2 for the forward-looking rule) and solves the normal
    equations.  Returns (coefficient on the index, lag coefficient vector),
    an independent check of the closed forms.
    """
    j = 1 if rule == "ac" else 2
    so2, se2, su2 = sigma_omega ** 2, sigma_eps ** 2, sigma_upsilon ** 2

    def cov_y(a: int, b: int) -> float:
        return so2 + se2 * rho ** abs(a - b)

    lags = list(range(-K, 1))
    regressors = [("z", j)] + [("lag", q) for q in lags]
    m = len(regressors)
    G = np.empty((m, m))
    for a in range(m):
        for b in range(m):
            ka, qa = regressors[a]
            kb, qb = regressors[b]
            val = cov_y(qa, qb)
            if ka == "z" and kb == "z":
                val += su2
            G[a, b] = val
    c = np.array([cov_y(t, q) for _, q in regressors])
    coef = np.linalg.solve(G, c)
    return float(coef[0]), coef[1:]


# ---------------------------------------------------------------------------
# panel generator
# ---------------------------------------------------------------------------


def _marginal_cutoff(cfg: SimConfig, quarter: int, share: float,
                     noise_sd: float | None = None) -> float:
    """Cutoff so that Pr(Y_q(0) + noise < cutoff) equals `share` marginally."""
    if noise_sd is None:
        noise_sd = cfg.sigma_upsilon
    sd = math.sqrt(cfg.sigma_omega ** 2 + cfg.sigma_eps ** 2 + noise_sd ** 2)
    return cfg.time_effect(quarter) + norm.ppf(share) * sd


def simulate_panel(cfg: SimConfig) -> tuple[PanelDataset, SimTruth]:
    """Draw a staggered-enrollment earnings panel with known ground truth.

    Untreated potential earnings: random effect + time level + stationary
    AR(1).  Enrollment at quarter 1 is a threshold rule on layoff-quarter
    earnings plus independent noise, so ignorability at s=1 holds given the
    stored covariate window; later quarters follow the configured selection
    rule applied sequentially among the not-yet-enrolled.  When earnings are
    floored at zero the rules read the floored values (what a file would
    contain) and the recorded truth is the floored-process effect.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_workers
    t_max = cfg.horizon()
    q_lo_needed = -cfg.K
    if isinstance(cfg.selection, ACSelection):
        q_lo_needed = min(q_lo_needed, min(s - cfg.selection.k for s in range(2, cfg.S + 1))
                          if cfg.S >= 2 else q_lo_needed)
    q_lo = min(q_lo_needed, 0)
    quarters = np.arange(q_lo, t_max + 1)
    nq = len(quarters)

    omega = rng.normal(0.0, cfg.sigma_omega, size=n)
    eps = np.empty((n, nq))
    eps[:, 0] = rng.normal(0.0, cfg.sigma_eps, size=n)
    innov_sd = cfg.sigma_eps * math.sqrt(1.0 - cfg.rho ** 2)
    for jq in range(1, nq):
        eps[:, jq] = cfg.rho * eps[:, jq - 1] + rng.normal(0.0, innov_sd, size=n)
    levels = np.array([cfg.time_effect(int(q)) for q in quarters])
    y0 = omega[:, None] + levels[None, :] + eps

    def col(q: int) -> int:
        return int(q - q_lo)

    y0_obs = np.maximum(y0, 0.0) if cfg.floor_at_zero else y0
    truncated = int(np.sum(y0 < 0)) if cfg.floor_at_zero else 0

    # enrollment decisions
    enroll = np.zeros(n, dtype=np.int64)
    d1_sd = cfg.d1_sigma_upsilon if cfg.d1_sigma_upsilon is not None \
        else cfg.sigma_upsilon
    ups1 = rng.normal(0.0, d1_sd, size=n)
    c1 = cfg.d1_cutoff if cfg.d1_cutoff is not None else \
        _marginal_cutoff(cfg, 0, cfg.d1_target_share, d1_sd)
    enroll[(y0_obs[:, col(0)] + ups1) < c1] = 1

    rule = "ac" if isinstance(cfg.selection, ACSelection) else "hr"
    for s in range(2, cfg.S + 1):
        at_risk = enroll == 0
        ups = rng.normal(0.0, cfg.sigma_upsilon, size=n)
        if rule == "ac":
            sel_q = s - cfg.selection.k
            cutoff = cfg.selection.ybar if cfg.selection.ybar is not None else \
                _marginal_cutoff(cfg, sel_q, cfg.selection.target_share)
        else:
            sel_q = s
            cutoff = cfg.selection.cutoff()
            if cutoff is None:
                cutoff = _marginal_cutoff(cfg, sel_q, cfg.selection.target_share)
        picked = at_risk & ((y0_obs[:, col(sel_q)] + ups) < cutoff)
        enroll[picked] = s

    # observed earnings and realized effects
    earnings = y0_obs.copy()
    delta: dict[tuple[int, int], float] = {}
    for s in range(1, cfg.S + 1):
        members = enroll == s
        if not members.any():
            continue
        for t in range(s, t_max + 1):
            tau = t - s
            treated_val = y0[members, col(t)] + cfg.effect.at(tau)
            if cfg.floor_at_zero:
                treated_val = np.maximum(treated_val, 0.0)
            earnings[members, col(t)] = treated_val
            delta[(s, tau)] = float(np.mean(treated_val - y0_obs[members, col(t)]))

    demo: dict[str, np.ndarray] = {}
    demographics: tuple[str, ...] = ()
    exact_keys: tuple[str, ...] = ()
    if cfg.demo_cells > 1:
        demo["cell"] = rng.integers(0, cfg.demo_cells, size=n)
        demographics = ("cell",)
        exact_keys = ("cell",)

    schema = PanelSchema(window=cfg.S, pre_lags=cfg.K, demographics=demographics,
                         exact_keys=exact_keys)
    keep = quarters >= -cfg.K
    data = PanelDataset(schema, np.array([f"w{i}" for i in range(n)], dtype=object),
                        np.zeros(n, dtype=np.int64), enroll,
                        np.full(n, -1, dtype=np.int8), -cfg.K,
                        earnings[:, keep], demo, validate=False)

    n_enrolled = int(np.sum(enroll > 0))
    pi = {s: float(np.sum(enroll == s)) / n_enrolled if n_enrolled else 0.0
          for s in range(1, cfg.S + 1)}
    beta_fn = beta_ac if rule == "ac" else beta_hr
    beta = {t: beta_fn(cfg.rho, cfg.sigma_omega, cfg.sigma_eps, cfg.sigma_upsilon, cfg.K, t)
            for t in range(1, min(t_max, 8) + 1)}
    internals = {}
    if cfg.keep_potentials:
        internals = {"y0": y0[:, keep], "quarters": quarters[keep],
                     "upsilon1": ups1, "enroll": enroll,
                     "y0_full": y0, "quarters_full": quarters}
    truth = SimTruth(delta=delta, pi=pi, beta=beta, selection_rule=rule,
                     truncated_count=truncated, seed=cfg.seed, internals=internals)
    return data, truth


# ---------------------------------------------------------------------------
# exhaustive discrete populations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Atom:
    """A point of the discrete two-period population.

    count is an integer replicate weight so the population can be sampled
    exhaustively; y1/yt are observed outcomes, y1_0/yt_0 the untreated
    potential outcomes the generator knows.
    """

    count: int
    x1: tuple
    d1: int
    d2: int
    y1: float
    yt: float
    y1_0: float
    yt_0: float


class OverlapError(Exception):
    pass


@dataclass
class DiscretePopulation:
    """Finite-support two-period population with exact probabilities."""

    atoms: list[Atom]
    t_label: int = 2   # the post-treatment horizon the yt outcomes refer to

    @property
    def total(self) -> int:
        return sum(a.count for a in self.atoms)

    def mass(self, pred: Callable[[Atom], bool]) -> float:
        return sum(a.count for a in self.atoms if pred(a)) / self.total

    def mean(self, value: Callable[[Atom], float], pred: Callable[[Atom], bool]) -> float:
        num = den = 0.0
        for a in self.atoms:
            if pred(a):
                num += a.count * value(a)
                den += a.count
        if den == 0:
            raise OverlapError("conditioning event has zero probability")
        return num / den

    # exact score functions ------------------------------------------------

    def p1(self, x1) -> float:
        """Pr(start at 1 | never start at 2, X^1)."""
        return self.mean(lambda a: float(a.d1), lambda a: a.x1 == x1 and a.d2 == 0)

    def p1_tilde(self, x1) -> float:
        """Pr(start at 1 | X^1)."""
        return self.mean(lambda a: float(a.d1), lambda a: a.x1 == x1)

    def p2(self, x1, y1) -> float:
        """Pr(start at 2 | not started at 1, X^2) with X^2 = (X^1, Y_1)."""
        return self.mean(lambda a: float(a.d2),
                         lambda a: a.x1 == x1 and a.d1 == 0 and a.y1 == y1)

    def x1_support(self):
        return sorted({a.x1 for a in self.atoms})

    def true_delta1(self) -> float:
        """E[Y_t(treated at 1) - Y_t(untreated) | started at 1]."""
        return self.mean(lambda a: a.yt - a.yt_0, lambda a: a.d1 == 1)

    def true_delta2(self) -> float:
        return self.mean(lambda a: a.yt - a.yt_0, lambda a: a.d2 == 1)

    def to_panel(self) -> PanelDataset:
        """Exhaustive sample: one worker per replicate of each atom.

        The pattern becomes a numeric covariate, period-1 outcome the first
        interim quarter, and yt the outcome at the stored horizon.
        """
        rows = []
        for a in self.atoms:
            rows.extend([a] * a.count)
        n = len(rows)
        t = self.t_label
        earnings = np.zeros((n, t + 1))  # quarters 0 .. t
        x1val = np.empty(n)
        enroll = np.zeros(n, dtype=np.int64)
        for i, a in enumerate(rows):
            x1val[i] = float(a.x1[0]) if isinstance(a.x1, tuple) else float(a.x1)
            enroll[i] = 1 if a.d1 else (2 if a.d2 else 0)
            earnings[i, 1] = a.y1
            earnings[i, t] = a.yt
        schema = PanelSchema(window=2, pre_lags=0, demographics=("x1",))
        return PanelDataset(schema, np.array([f"a{i}" for i in range(n)], dtype=object),
                            np.zeros(n, dtype=np.int64), enroll,
                            np.full(n, -1, dtype=np.int8), 0, earnings,
                            {"x1": x1val}, validate=False)


def robins_oracle(pop: DiscretePopulation) -> float:
    """E[Y_t under never-treat | started at 1] by the sequential product.

    Nested conditional means along the untreated path: average over the
    period-1 outcome distribution of period-1 non-starters at each pattern,
    of the mean outcome among never-enrollees with that (pattern, Y_1), then
    average patterns over the started-at-1 population.
    """
    total_d1 = pop.mass(lambda a: a.d1 == 1)
    if total_d1 == 0:
        raise OverlapError("no period-1 enrollees")
    result = 0.0
    for x1 in pop.x1_support():
        w_x = pop.mass(lambda a, x1=x1: a.x1 == x1 and a.d1 == 1)
        if w_x == 0:
            continue
        if pop.mass(lambda a, x1=x1: a.x1 == x1 and a.d1 == 0) == 0:
            raise OverlapError(f"pattern {x1} has no period-1 non-enrollees")
        y1_vals = sorted({a.y1 for a in pop.atoms if a.x1 == x1 and a.d1 == 0})
        inner = 0.0
        for y1 in y1_vals:
            w_y1 = pop.mean(lambda a, y1=y1: float(a.y1 == y1),
                            lambda a, x1=x1: a.x1 == x1 and a.d1 == 0)
            if pop.mass(lambda a, x1=x1, y1=y1: a.x1 == x1 and a.d1 == 0
                        and a.d2 == 0 and a.y1 == y1) == 0:
                raise OverlapError(f"no never-enrollees at pattern {x1}, y1={y1}")
            m = pop.mean(lambda a: a.yt,
                         lambda a, x1=x1, y1=y1: a.x1 == x1 and a.d1 == 0
                         and a.d2 == 0 and a.y1 == y1)
            inner += w_y1 * m
        result += (w_x / total_d1) * inner
    return result


@dataclass
class PopulationEstimands:
    """Exact population values of every estimand on a discrete population."""

    true_delta1: float
    true_delta2: float
    now_vs_later: float
    lower_bound: float
    upper_bound: float
    lechner_point: float
    ipw_tot: float
    robins_tot: float
    assumption2_stat: float
    lower_bound_2: float


def enumerate_tot(pop: DiscretePopulation) -> PopulationEstimands:
    """Population analogs of the matching estimands, no sampling anywhere."""
    ey_d1 = pop.mean(lambda a: a.yt, lambda a: a.d1 == 1)

    # score-matched control means group patterns by exact score value
    def outer_mean(score_of_x1: Callable, control_mean_at: Callable) -> float:
        groups: dict[float, list] = {}
        for x1 in pop.x1_support():
            if pop.mass(lambda a, x1=x1: a.x1 == x1 and a.d1 == 1) > 0:
                groups.setdefault(score_of_x1(x1), []).append(x1)
        # include every pattern sharing a score value in the control mean
        out = 0.0
        total = pop.mass(lambda a: a.d1 == 1)
        for score, patterns in groups.items():
            w = sum(pop.mass(lambda a, x1=x1: a.x1 == x1 and a.d1 == 1) for x1 in patterns)
            out += (w / total) * control_mean_at(score)
        return out

    def p1_of(x1):
        return pop.p1(x1)

    def patterns_at_p1(score):
        return [x1 for x1 in pop.x1_support()
                if pop.mass(lambda a, x1=x1: a.x1 == x1 and a.d2 == 0) > 0
                and pop.p1(x1) == score]

    def control_mean_p1(score):
        pats = patterns_at_p1(score)
        return pop.mean(lambda a: a.yt,
                        lambda a: a.x1 in pats and a.d1 == 0 and a.d2 == 0)

    lower = ey_d1 - outer_mean(p1_of, control_mean_p1)

    def control_mean_p1_scaled(score):
        pats = patterns_at_p1(score)
        ey = pop.mean(lambda a: a.yt,
                      lambda a: a.x1 in pats and a.d1 == 0 and a.d2 == 0)
        pr_never = pop.mean(lambda a: float(a.d2 == 0),
                            lambda a: a.x1 in pats and a.d1 == 0)
        return ey * pr_never

    upper = ey_d1 - outer_mean(p1_of, control_mean_p1_scaled)

    # treatment-now-versus-later: compare against all period-1 non-starters
    def control_mean_nvl(score):
        pats = [x1 for x1 in pop.x1_support() if pop.p1_tilde(x1) == score]
        return pop.mean(lambda a: a.yt, lambda a: a.x1 in pats and a.d1 == 0)

    nvl = ey_d1 - outer_mean(lambda x1: pop.p1_tilde(x1), control_mean_nvl)

    # two-step point estimand
    def lechner_inner(x1):
        # E over Y_1 | pattern, D1=0 of E[Y_t | never, score pair]
        y1_vals = sorted({a.y1 for a in pop.atoms if a.x1 == x1 and a.d1 == 0})
        out = 0.0
        for y1 in y1_vals:
            w = pop.mean(lambda a, y1=y1: float(a.y1 == y1),
                         lambda a, x1=x1: a.x1 == x1 and a.d1 == 0)
            pair = (pop.p2(x1, y1), pop.p1_tilde(x1))
            cells = [(xx, yy) for xx in pop.x1_support()
                     for yy in sorted({a.y1 for a in pop.atoms
                                       if a.x1 == xx and a.d1 == 0})
                     if (pop.p2(xx, yy), pop.p1_tilde(xx)) == pair]
            m = pop.mean(lambda a: a.yt,
                         lambda a: a.d1 == 0 and a.d2 == 0 and (a.x1, a.y1) in cells)
            out += w * m
        return out

    total_d1 = pop.mass(lambda a: a.d1 == 1)
    lech_cf = 0.0
    for x1 in pop.x1_support():
        w = pop.mass(lambda a, x1=x1: a.x1 == x1 and a.d1 == 1)
        if w > 0:
            lech_cf += (w / total_d1) * lechner_inner(x1)
    lechner = ey_d1 - lech_cf

    # inverse probability weighting, population form
    pr_d1 = pop.mass(lambda a: a.d1 == 1)
    num = 0.0
    for a in pop.atoms:
        if a.d1 == 0 and a.d2 == 0:
            w = pop.p1_tilde(a.x1) / ((1.0 - pop.p1_tilde(a.x1))
                                      * (1.0 - pop.p2(a.x1, a.y1)))
            num += (a.count / pop.total) * w * a.yt
    ipw_cf = num / pr_d1
    ipw_tot = ey_d1 - ipw_cf

    robins_tot = ey_d1 - robins_oracle(pop)

    # interim-earnings differential of later-enrollees vs never, X^1-matched
    a2 = 0.0
    d2_total = pop.mass(lambda a: a.d2 == 1)
    if d2_total > 0:
        for x1 in pop.x1_support():
            w = pop.mass(lambda a, x1=x1: a.x1 == x1 and a.d2 == 1)
            if w == 0:
                continue
            later = pop.mean(lambda a: a.y1,
                             lambda a, x1=x1: a.x1 == x1 and a.d2 == 1)
            never = pop.mean(lambda a: a.y1,
                             lambda a, x1=x1: a.x1 == x1 and a.d1 == 0 and a.d2 == 0)
            a2 += (w / d2_total) * (later - never)

    # the second-cohort effect is point identified by matching on (X^1, Y_1)
    if d2_total > 0:
        ey_d2 = pop.mean(lambda a: a.yt, lambda a: a.d2 == 1)
        cf2 = 0.0
        for x1 in pop.x1_support():
            y1_vals = sorted({a.y1 for a in pop.atoms
                              if a.x1 == x1 and a.d2 == 1})
            for y1 in y1_vals:
                w = pop.mass(lambda a, x1=x1, y1=y1: a.x1 == x1 and a.d2 == 1
                             and a.y1 == y1)
                if w == 0:
                    continue
                m = pop.mean(lambda a: a.yt,
                             lambda a, x1=x1, y1=y1: a.x1 == x1 and a.d1 == 0
                             and a.d2 == 0 and a.y1 == y1)
                cf2 += (w / d2_total) * m
        lower2 = ey_d2 - cf2
        delta2 = pop.true_delta2()
    else:
        lower2 = float("nan")
        delta2 = float("nan")

    return PopulationEstimands(
        true_delta1=pop.true_delta1(),
        true_delta2=delta2,
        now_vs_later=nvl,
        lower_bound=lower,
        upper_bound=upper,
        lechner_point=lechner,
        ipw_tot=ipw_tot,
        robins_tot=robins_tot,
        assumption2_stat=a2,
        lower_bound_2=lower2,
    )


def random_population(rng: np.random.Generator, *, n_patterns: int | None = None,
                      violate_selection: bool = False) -> DiscretePopulation:
    """Random exhaustive population satisfying the identifying assumptions.

    Construction: per pattern, a lattice of (Y_1(0), Y_t(0)) values with the
    period-t mean increasing in the period-1 value; period-1 entry split
    independent of the lattice; period-2 entry probability decreasing in the
    period-1 value (increasing when `violate_selection`, which breaks the
    negative-selection assumption while keeping sequential ignorability).
    """
    n_patterns = int(n_patterns if n_patterns is not None else rng.integers(2, 5))
    atoms: list[Atom] = []
    # period-2 entry shares out of 4 by period-1 value: decreasing when compliant
    share_pairs = [(3, 1), (2, 2), (1, 3)]
    if violate_selection:
        share_pairs = share_pairs[::-1]
    for px in range(n_patterns):
        x1 = (px,)
        q1 = int(rng.integers(1, 3))     # period-1 split q1 : q0
        q0 = int(rng.integers(2, 5))
        d1_gain = float(rng.integers(0, 7))
        d2_gain = float(rng.integers(0, 7))
        base = float(rng.integers(0, 5))
        slope = float(rng.integers(1, 4))
        # within-row spread kept below the slope so row means stay monotone
        # in the period-1 value, which is what the selection assumption needs
        spread = 0.25 * float(rng.integers(1, 3))
        y1_levels = sorted(rng.choice(np.arange(1, 12), size=3, replace=False).tolist())
        for jy, y1v in enumerate(y1_levels):
            r1, r0 = share_pairs[jy]
            yt_mean = base + slope * jy
            for yt0 in (yt_mean, yt_mean + spread):
                cell = int(rng.integers(1, 4))
                y1v = float(y1v)
                atoms.append(Atom(cell * q1 * 4, x1, 1, 0,
                                  y1v + d1_gain, yt0 + d1_gain, y1v, yt0))
                atoms.append(Atom(cell * q0 * r1, x1, 0, 1,
                                  y1v, yt0 + d2_gain, y1v, yt0))
                atoms.append(Atom(cell * q0 * r0, x1, 0, 0, y1v, yt0, y1v, yt0))
    return DiscretePopulation(atoms)


def assumption2_counterexample() -> DiscretePopulation:
    """Fixed population where later-enrollees have the *higher* untreated
    outcomes, so the would-be lower bound exceeds the true effect and the
    interim-earnings test statistic turns positive."""
    rng = np.random.default_rng(20240)
    return random_population(rng, n_patterns=3, violate_selection=True)
