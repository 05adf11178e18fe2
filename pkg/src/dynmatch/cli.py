"""Command-line orchestration: simulate, estimate, diagnose, costbenefit, validate.

The estimate pipeline runs load -> exact cells -> per-cell per-cohort score
fits -> trimming -> matching -> estimands -> aggregation, and writes CSV and
JSON artifacts plus a manifest with the config hash, the seed and content
hashes of every output.  Identical config and seed give byte-identical
numeric outputs: all stages are deterministic and iteration follows sorted
cell keys.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .panel import (PanelDataset, PanelSchema, build_cohort_view, load_panel,
                    write_panel, EmptyCohortError, PanelError, ValidationError,
                    SchemaError, CohortView)
from .propensity import (fit_with_fallback, default_drop_order, trim,
                         perfect_prediction_drops, PropensityFit, TrimReport,
                         FitError, UnrecoverableFitError, PerfectPredictionError,
                         log_odds)
from .matching import partition_cells, nn_match, MatchingError
from .estimators import (now_vs_later, tot_lower_bound, tot_upper_bound,
                         lechner_point, lechner_chain, match_cohort,
                         never_share_multiplier, ipw_counterfactual,
                         completer_bounds, did_estimate, aggregate,
                         earnings_percent, CohortEstimate, EstimationError)
from .diagnostics import (balance, matched_balance, assumption2_table,
                          overlap_report, holm_adjust)
from .costbenefit import CbScenario, LoanTerms, evaluate_scenario, irr, npv
from .simulation import (SimConfig, ACSelection, HRSelection, EffectSpec,
                         simulate_panel, beta_ac, beta_hr, projection_oracle,
                         random_population, enumerate_tot, robins_oracle)

ESTIMAND_ALIASES = {
    "lb": "lower_bound", "ub": "upper_bound", "nvl": "now_vs_later",
    "lechner": "lechner_point", "ipw": "ipw", "did": "did",
}


class CliError(Exception):
    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    command: str
    input: str | None = None
    out: str = "out"
    window: int | None = None
    pre_lags: int = 4
    demographics: tuple[str, ...] = ()
    exact_keys: tuple[str, ...] = ()
    aux: tuple[str, ...] = ()
    neighbors: int = 1
    trim_threshold: float = 0.99
    estimands: tuple[str, ...] = ("lower_bound",)
    tau_min: int = 0
    tau_max: int = 0
    seed: int = 0
    bootstrap: int = 0
    subgroup: str | None = None
    refit_scores: bool = False
    write_matches: bool = False
    score_convention: str = "conditional"
    match_on_log_odds: bool = True

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = list(v) if isinstance(v, tuple) else v
        return out


# ---------------------------------------------------------------------------
# deterministic output helpers
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        if np.isnan(x):
            return ""
        return repr(x)
    return str(x)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for row in rows:
            out.writerow([_fmt(v) for v in row])


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _write_manifest(out_dir: Path, cfg: dict, seed, outputs) -> None:
    manifest = {
        "version": __version__,
        "seed": seed,
        "config": cfg,
        "config_hash": _config_hash(cfg),
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)


# ---------------------------------------------------------------------------
# subgroup filters
# ---------------------------------------------------------------------------

_OPS = {
    "==": lambda a, b: a == b, "!=": lambda a, b: a != b,
    ">=": lambda a, b: a >= b, "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b, "<": lambda a, b: a < b,
}


def subgroup_mask(data: PanelDataset, expr: str) -> np.ndarray:
    """Evaluate a simple `column op value` filter over the panel."""
    for op in ("==", "!=", ">=", "<=", ">", "<"):
        if op in expr:
            name, raw = expr.split(op, 1)
            name, raw = name.strip(), raw.strip()
            if name == "layoff_q":
                col = data.layoff_q
            elif name in data.demo:
                col = data.demo[name]
            else:
                raise CliError(f"unknown subgroup column {name!r}", 2)
            if np.issubdtype(np.asarray(col).dtype, np.number):
                value = float(raw)
                col = np.asarray(col, dtype=float)
            else:
                value = raw
                col = np.asarray(col).astype(str)
            return _OPS[op](col, value)
    raise CliError(f"cannot parse subgroup filter {expr!r}", 2)


# ---------------------------------------------------------------------------
# score fitting per cell and cohort
# ---------------------------------------------------------------------------


@dataclass
class CellFit:
    fit: PropensityFit
    trim_report: TrimReport
    excluded: set[int]            # treated units excluded by trimming
    n_treated: int
    n_control: int


class _LogOddsFit(PropensityFit):
    """Score view on the log-odds scale (the logit's linear predictor)."""

    def predict(self, design, rows=None):
        p = np.clip(super().predict(design, rows), 1e-12, 1 - 1e-12)
        return np.log(p / (1.0 - p))


def _log_odds_fit(fit: PropensityFit) -> PropensityFit:
    """Same fit with scores mapped to log-odds for order-preserving matching."""
    clipped = np.clip(fit.scores, 1e-12, 1 - 1e-12)
    return _LogOddsFit(fit.coefficients, fit.columns, fit.index,
                       np.log(clipped / (1 - clipped)), fit.converged,
                       fit.iterations, fit.score_kind, fit.cell_id, fit.cohort,
                       fit.dropped_covariates, fit.absorbed_constant, fit.penalized)


def fit_cell_cohort(sub: PanelDataset, view: CohortView, kind: str, *,
                    exact_keys=(), trim_threshold: float = 0.99,
                    cell_id=None, fit_opts: dict | None = None) -> CellFit:
    """Fit one score kind for one cohort inside one exact cell.

    Perfect-prediction units are removed before fitting, the logit is fitted
    with the drop-a-covariate fallback, and treated units with scores above
    the threshold are trimmed from later matching.
    """
    s = view.cohort
    if kind == "conditional":
        pool = np.concatenate([view.treated, view.controls])
    elif kind == "unconditional":
        pool = view.at_risk
    elif kind == "completer":
        pool = view.treated
    else:
        raise ValueError(f"unknown score kind {kind!r}")
    pool = np.sort(pool)
    if kind == "completer":
        y = (sub.completer[pool] == 1).astype(float)
    else:
        y = (sub.enroll_q[pool] == s).astype(float)

    keep_cols = [c for c in view.design.columns
                 if c.split("=")[0] not in exact_keys]
    X = view.design.select(keep_cols)[view.rows(pool)]

    drops_local = perfect_prediction_drops(X, y)
    perfect_global = [int(pool[i]) for i in drops_local]
    keep_rows = np.setdiff1d(np.arange(len(pool)), np.asarray(drops_local, dtype=int))
    pool_kept = pool[keep_rows]
    y_kept = y[keep_rows]
    if len(np.unique(y_kept)) < 2:
        raise PerfectPredictionError(
            f"cell {cell_id}, cohort {s}: single-class response after drops")
    opts = {"max_iter": 100, "tol": 1e-8}
    opts.update(fit_opts or {})
    fit = fit_with_fallback(X[keep_rows], y_kept, keep_cols,
                            default_drop_order(keep_cols), **opts)
    fit.index = pool_kept
    fit.score_kind = kind
    fit.cell_id = cell_id
    fit.cohort = s
    treated_kept = np.asarray(sorted(set(view.treated.tolist()) - set(perfect_global)),
                              dtype=int)
    report = trim(fit, treated_kept, trim_threshold, perfect_drops=perfect_global)
    n_t = int(np.sum(y_kept == 1))
    return CellFit(fit, report, report.dropped, n_t, len(y_kept) - n_t)


# ---------------------------------------------------------------------------
# the estimate pipeline
# ---------------------------------------------------------------------------


def _load_input(cfg: RunConfig, out_dir: Path) -> PanelDataset:
    if cfg.input is None:
        raise CliError("a panel file is required (--input)", 2)
    if not Path(cfg.input).exists():
        raise CliError(f"input file not found: {cfg.input}", 2)
    schema = PanelSchema(window=cfg.window, pre_lags=cfg.pre_lags,
                         demographics=cfg.demographics, exact_keys=cfg.exact_keys,
                         aux=cfg.aux)
    try:
        return load_panel(cfg.input, schema)
    except ValidationError as err:
        report_path = out_dir / "validation_report.json"
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(err.report, fh, indent=2, sort_keys=True, default=_json_default)
        raise CliError(f"panel validation failed; report at {report_path}", 2)


def run_estimate(cfg: RunConfig, data: PanelDataset | None = None) -> dict:
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = _load_input(cfg, out_dir)

    estimands = tuple(ESTIMAND_ALIASES.get(e, e) for e in cfg.estimands)
    restrict = None
    if cfg.subgroup:
        mask = subgroup_mask(data, cfg.subgroup)
        if cfg.refit_scores:
            data = data.take(np.where(mask)[0])
        else:
            restrict = set(np.where(mask)[0].tolist())

    cells = partition_cells(data, cfg.exact_keys or data.schema.exact_keys)
    taus = range(cfg.tau_min, cfg.tau_max + 1)
    per_cell: list[CohortEstimate] = []
    fit_diag: list[dict] = []
    skipped: list[dict] = []
    match_rows: list[tuple] = []

    needs_cond = {"lower_bound", "upper_bound", "did"} & set(estimands)
    needs_uncond = {"now_vs_later", "lechner_point", "ipw"} & set(estimands)

    for key in cells.keys():
        members = cells.members(key)
        sub = data.take(members)
        local_restrict = None
        if restrict is not None:
            local_restrict = {i for i, g in enumerate(members) if int(g) in restrict}

        views: dict[int, CohortView] = {}
        cond: dict[int, CellFit] = {}
        uncond: dict[int, CellFit] = {}
        for s in range(1, data.S + 1):
            try:
                views[s] = build_cohort_view(sub, s)
            except EmptyCohortError:
                skipped.append({"cell": list(map(str, key)), "cohort": s,
                                "reason": "no treated units"})
                continue
            try:
                if needs_cond:
                    cond[s] = fit_cell_cohort(sub, views[s], "conditional",
                                              exact_keys=cells.key_spec,
                                              trim_threshold=cfg.trim_threshold,
                                              cell_id=key)
                if needs_uncond:
                    uncond[s] = fit_cell_cohort(sub, views[s], "unconditional",
                                                exact_keys=cells.key_spec,
                                                trim_threshold=cfg.trim_threshold,
                                                cell_id=key)
            except (FitError, MatchingError) as err:
                skipped.append({"cell": list(map(str, key)), "cohort": s,
                                "reason": str(err)})
                views.pop(s, None)
                cond.pop(s, None)
                uncond.pop(s, None)
                continue
            for kind, fits in (("conditional", cond), ("unconditional", uncond)):
                if s in fits:
                    d = fits[s].fit.diagnostics()
                    d["n_treated"] = fits[s].n_treated
                    d["n_control"] = fits[s].n_control
                    d["score_kind"] = kind
                    d["trimmed_high_score"] = len(fits[s].trim_report.dropped_for_high_score)
                    d["trimmed_perfect"] = len(fits[s].trim_report.dropped_for_perfect_prediction)
                    fit_diag.append(d)

        def matcher_fit(cf: CellFit) -> PropensityFit:
            return _log_odds_fit(cf.fit) if cfg.match_on_log_odds else cf.fit

        def excluded_for(cf: CellFit, view: CohortView) -> set[int]:
            out = set(cf.excluded)
            if local_restrict is not None:
                out |= set(view.treated.tolist()) - local_restrict
            return out

        for s, view in sorted(views.items()):
            rv = _restrict_view(view, local_restrict)
            # matching and the never-enrollment share are tau-invariant:
            # build them once per cohort and reuse across event times
            never_mset = at_risk_mset = ub_mult = chain = None
            fit_cond = fit_unc = None
            try:
                if cond.get(s) is not None and ({"lower_bound", "upper_bound", "did"}
                                                & set(estimands)):
                    cf = cond[s]
                    fit_cond = matcher_fit(cf)
                    never_mset = match_cohort(rv, fit_cond, "never", k=cfg.neighbors,
                                              exclude=excluded_for(cf, view))
                    if "upper_bound" in estimands:
                        ub_mult = never_share_multiplier(rv, fit_cond, never_mset)
                if uncond.get(s) is not None and "now_vs_later" in estimands:
                    cf = uncond[s]
                    fit_unc = matcher_fit(cf)
                    at_risk_mset = match_cohort(rv, fit_unc, "at_risk",
                                                k=cfg.neighbors,
                                                exclude=excluded_for(cf, view))
                if uncond.get(s) is not None and "lechner_point" in estimands:
                    chain = lechner_chain(sub, {j: matcher_fit(uncond[j])
                                                for j in range(s, data.S + 1)
                                                if j in uncond},
                                          s=s, k=cfg.neighbors,
                                          exclude=excluded_for(uncond[s], view),
                                          views=views)
            except (EstimationError, MatchingError) as err:
                skipped.append({"cell": list(map(str, key)), "cohort": s,
                                "reason": str(err)})
                continue
            for tau in taus:
                t_abs = s + tau
                if t_abs > data.q_max:
                    continue
                try:
                    if "lower_bound" in estimands and never_mset is not None:
                        est = tot_lower_bound(rv, fit_cond, tau, k=cfg.neighbors,
                                              mset=never_mset)
                        per_cell.append(_tag(est, key))
                    if "upper_bound" in estimands and never_mset is not None:
                        est = tot_upper_bound(rv, fit_cond, tau, k=cfg.neighbors,
                                              mset=never_mset, multiplier=ub_mult)
                        per_cell.append(_tag(est, key))
                    if "did" in estimands and never_mset is not None:
                        base = -tau if tau >= 1 else -1
                        if s + base >= data.q_min:
                            est = did_estimate(never_mset, sub, s, tau, base)
                            per_cell.append(_tag(est, key))
                    if "now_vs_later" in estimands and at_risk_mset is not None:
                        est = now_vs_later(rv, fit_unc, tau, k=cfg.neighbors,
                                           mset=at_risk_mset)
                        per_cell.append(_tag(est, key))
                    if "lechner_point" in estimands and chain is not None:
                        est = lechner_point(sub, {}, tau, s=s, k=cfg.neighbors,
                                            chain=chain)
                        per_cell.append(_tag(est, key))
                except (EstimationError, MatchingError, KeyError) as err:
                    skipped.append({"cell": list(map(str, key)), "cohort": s,
                                    "tau": tau, "reason": str(err)})
            if cfg.write_matches and s in cond:
                cf = cond[s]
                fitm = matcher_fit(cf)
                treated = np.asarray([i for i in view.treated
                                      if int(i) not in cf.excluded], dtype=int)
                if len(treated) and len(view.controls):
                    mset = nn_match(fitm.score_of(treated), fitm.score_of(view.controls),
                                    cfg.neighbors, treated_ids=treated,
                                    control_ids=view.controls)
                    for t, c, r, dist in zip(mset.treated, mset.controls,
                                             mset.rank, mset.distances):
                        match_rows.append(("|".join(map(str, key)), s,
                                           sub.ids[int(t)], sub.ids[int(c)],
                                           int(r), float(dist)))

        if "ipw" in estimands and 1 in uncond:
            for tau in taus:
                if 1 + tau > data.q_max:
                    continue
                try:
                    res = ipw_counterfactual(sub, {j: uncond[j].fit
                                                   for j in range(1, data.S + 1)
                                                   if j in uncond}, tau)
                    per_cell.append(_tag(CohortEstimate(
                        1, tau, "ipw", res.tot, res.variance, res.n_treated,
                        control_mean=res.counterfactual_mean,
                        meta={"capped": res.capped}), key))
                except (EstimationError, KeyError) as err:
                    skipped.append({"cell": list(map(str, key)), "cohort": 1,
                                    "tau": tau, "reason": str(err)})

        if cfg.bootstrap > 0 and ({"lechner_point", "ipw"} & set(estimands)):
            _bootstrap_variances(sub, cfg, key, estimands, taus, per_cell)

    rows, agg_json = _assemble_estimates(per_cell, estimands, taus)
    est_path = out_dir / "estimates.csv"
    _write_csv(est_path, ["estimand", "cohort", "tau", "value", "se", "n_treated",
                          "pct_of_control_mean"], rows)
    outputs = [est_path]
    if cfg.write_matches:
        m_path = out_dir / "matches.csv"
        _write_csv(m_path, ["cell_id", "cohort", "treated_id", "control_id",
                            "rank", "distance"], match_rows)
        outputs.append(m_path)

    bundle = {
        "config": cfg.to_dict(),
        "config_hash": _config_hash(cfg.to_dict()),
        "seed": cfg.seed,
        "version": __version__,
        "estimates": agg_json,
        "fit_diagnostics": fit_diag,
        "skipped": skipped,
    }
    json_path = out_dir / "estimates.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(bundle, fh, indent=2, sort_keys=True, default=_json_default)
    outputs.append(json_path)
    _write_manifest(out_dir, cfg.to_dict(), cfg.seed, outputs)
    return bundle


def _tag(est: CohortEstimate, key) -> CohortEstimate:
    est.meta["cell"] = key
    return est


def _bootstrap_variances(sub: PanelDataset, cfg: RunConfig, key, estimands, taus,
                         per_cell) -> None:
    """Nonparametric bootstrap over workers for the sequential estimators.

    Replicate seeds derive from the root seed, so results do not depend on
    evaluation order.  Each draw refits every unconditional score and
    recomputes the estimates; failed draws are dropped.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.bootstrap)
    draws: dict[tuple, list[float]] = {}
    for seq in seeds:
        rng = np.random.default_rng(seq)
        idx = rng.integers(0, sub.n, sub.n)
        boot = sub.take(idx, relabel=True)
        try:
            views = {}
            unc = {}
            for s in range(1, boot.S + 1):
                try:
                    views[s] = build_cohort_view(boot, s)
                    unc[s] = fit_cell_cohort(boot, views[s], "unconditional",
                                             trim_threshold=cfg.trim_threshold)
                except (EmptyCohortError, FitError):
                    continue
            for tau in taus:
                if "lechner_point" in estimands:
                    for s in sorted(unc):
                        if s + tau > boot.q_max:
                            continue
                        fits = {j: _log_odds_fit(unc[j].fit) if cfg.match_on_log_odds
                                else unc[j].fit for j in range(s, boot.S + 1)
                                if j in unc}
                        est = lechner_point(boot, fits, tau, s=s, k=cfg.neighbors,
                                            exclude=unc[s].excluded, views=views)
                        draws.setdefault(("lechner_point", s, tau), []).append(est.value)
                if "ipw" in estimands and 1 in unc and 1 + tau <= boot.q_max:
                    res = ipw_counterfactual(boot, {j: unc[j].fit for j in unc}, tau)
                    draws.setdefault(("ipw", 1, tau), []).append(res.tot)
        except (EstimationError, MatchingError):
            continue
    for est in per_cell:
        if est.meta.get("cell") != key or est.variance is not None:
            continue
        vals = draws.get((est.estimand, est.cohort, est.tau))
        if vals and len(vals) > 1:
            est.variance = float(np.var(np.asarray(vals), ddof=1))
            est.meta["bootstrap_draws"] = len(vals)


def _restrict_view(view: CohortView, keep: set[int] | None) -> CohortView:
    """Project the pools of a view onto a subgroup (scores stay full-sample)."""
    if keep is None:
        return view
    def f(arr):
        return np.asarray([i for i in arr if int(i) in keep], dtype=int)
    return CohortView(view.data, view.cohort, view.at_risk, f(view.treated),
                      f(view.later), f(view.controls), view.design)


def _assemble_estimates(per_cell, estimands, taus):
    """Cells aggregate into cohorts, cohorts into the overall effect."""
    rows = []
    agg_json = []
    for estimand in estimands:
        for tau in taus:
            cohort_level: list[CohortEstimate] = []
            cohorts = sorted({e.cohort for e in per_cell
                              if e.estimand == estimand and e.tau == tau})
            for s in cohorts:
                parts = [e for e in per_cell
                         if e.estimand == estimand and e.tau == tau and e.cohort == s]
                if not parts:
                    continue
                if len(parts) == 1:
                    cohort_level.append(parts[0])
                else:
                    a = aggregate(parts)
                    cohort_level.append(CohortEstimate(
                        s, tau, estimand, a.value, a.variance,
                        sum(p.n_treated for p in parts), control_mean=a.control_mean))
            if not cohort_level:
                continue
            for est in cohort_level:
                rows.append(_estimate_row(est, est.cohort))
                agg_json.append(_estimate_json(est, est.cohort))
            if len(cohort_level) > 1:
                overall = aggregate(cohort_level)
                pooled = CohortEstimate(0, tau, estimand, overall.value,
                                        overall.variance,
                                        sum(c.n_treated for c in cohort_level),
                                        control_mean=overall.control_mean)
                rows.append(_estimate_row(pooled, "all"))
                agg_json.append(_estimate_json(pooled, "all"))
    return rows, agg_json


def _estimate_row(est: CohortEstimate, cohort_label):
    pct = None
    if est.control_mean is not None and est.control_mean > 0:
        pct = earnings_percent(est.value, est.control_mean)
    return (est.estimand, cohort_label, est.tau, est.value, est.se,
            est.n_treated, pct)


def _estimate_json(est: CohortEstimate, cohort_label) -> dict:
    return {
        "estimand": est.estimand, "cohort": cohort_label, "tau": est.tau,
        "value": est.value, "se": est.se, "n_treated": est.n_treated,
        "control_mean": est.control_mean,
    }


# ---------------------------------------------------------------------------
# other subcommands
# ---------------------------------------------------------------------------


def run_simulate(args) -> dict:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    selection = (ACSelection(k=args.ac_lag, target_share=args.later_share)
                 if args.selection == "ac"
                 else HRSelection(target_share=args.later_share))
    cfg = SimConfig(
        n_workers=args.n, S=args.window, K=args.pre_lags, rho=args.rho,
        sigma_omega=args.sigma_omega, sigma_eps=args.sigma_eps,
        sigma_upsilon=args.sigma_upsilon, level=args.level,
        selection=selection, effect=EffectSpec(alpha=args.alpha),
        d1_target_share=args.d1_share, t_max=args.t_max,
        floor_at_zero=not args.allow_negative, demo_cells=args.demo_cells,
        seed=args.seed)
    data, truth = simulate_panel(cfg)
    panel_path = out_dir / "panel.csv"
    write_panel(data, panel_path)
    truth_path = out_dir / "truth.json"
    payload = {
        "delta": {f"{s},{tau}": v for (s, tau), v in sorted(truth.delta.items())},
        "pi": truth.pi,
        "beta": truth.beta,
        "selection_rule": truth.selection_rule,
        "truncated_count": truth.truncated_count,
        "seed": truth.seed,
    }
    with open(truth_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
    cfg_dict = {k: v for k, v in vars(args).items() if k != "func"}
    _write_manifest(out_dir, cfg_dict, args.seed, [panel_path, truth_path])
    return payload


def run_diagnose(cfg: RunConfig, data: PanelDataset | None = None) -> dict:
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = _load_input(cfg, out_dir)

    balance_rows = []
    overlap_rows = []
    enrollee_members, control_members = [], []
    summary = {"cohorts": {}}
    for s in range(1, data.S + 1):
        try:
            view = build_cohort_view(data, s)
            cf = fit_cell_cohort(data, view, "conditional",
                                 trim_threshold=cfg.trim_threshold)
        except (PanelError, FitError) as err:
            summary["cohorts"][s] = {"skipped": str(err)}
            continue
        columns = {c: view.design.select([c])[:, 0] for c in view.design.columns}
        treated = np.asarray([i for i in view.treated if int(i) not in cf.excluded],
                             dtype=int)
        raw = balance(columns, view.rows(treated), view.rows(view.controls),
                      sample="raw")
        mset = nn_match(cf.fit.score_of(treated), cf.fit.score_of(view.controls),
                        cfg.neighbors, treated_ids=treated, control_ids=view.controls)
        matched = balance(columns, view.rows(mset.treated_units),
                          view.rows(mset.controls), sample="matched")
        enrollee_members += [(int(t), s) for t in mset.treated_units]
        control_members += [(int(c), s) for c in mset.controls]
        for rep in (raw, matched):
            for r in rep.rows:
                balance_rows.append((s, rep.sample, r.name, r.mean_treated,
                                     r.mean_control, r.sd_treated, r.sd_control,
                                     r.normalized_difference, r.t_statistic))
        ov = overlap_report(cf.fit.score_of(treated),
                            cf.fit.score_of(view.controls), threshold=cfg.trim_threshold)
        for b in range(len(ov.treated_density)):
            overlap_rows.append((s, float(ov.bin_edges[b]), float(ov.bin_edges[b + 1]),
                                 float(ov.treated_density[b]), float(ov.control_density[b]),
                                 int(ov.treated_frequency[b]), int(ov.control_frequency[b])))
        summary["cohorts"][s] = {
            "n_treated": int(len(treated)),
            "n_control": int(len(view.controls)),
            "mean_abs_nd_raw": raw.mean_abs_normalized_difference(),
            "mean_abs_nd_matched": matched.mean_abs_normalized_difference(),
            "share_above_threshold": ov.share_treated_above,
        }

    # event-time earnings trajectories of enrollees and their matched
    # never-enrollees, pooled across cohorts
    traj_rows = []
    if enrollee_members:
        from .panel import event_time_trajectory
        lo = data.q_min - 1
        hi = data.q_max - 1
        taus = range(lo, hi + 1)
        te = event_time_trajectory(data, enrollee_members, taus)
        tc = event_time_trajectory(data, control_members, taus)
        for tau in taus:
            if te[tau][1] or tc[tau][1]:
                traj_rows.append((tau, te[tau][0], te[tau][1], tc[tau][0], tc[tau][1]))

    a2_rows = []
    if data.S >= 2:
        for d in assumption2_table(data, k=cfg.neighbors):
            a2_rows.append((d.l, d.j, d.estimate,
                            None if d.variance is None else float(np.sqrt(d.variance)),
                            d.n))

    decomp_rows = []
    enrolled = np.where(data.enroll_q > 0)[0]
    members = [(int(i), int(data.enroll_q[i])) for i in enrolled]
    taus = [tau for tau in range(0, data.q_max - data.S + 1)]
    if members and "industry" in data.aux and "pre_industry" in data.demo:
        from .diagnostics import industry_switch_decomposition
        try:
            for comp in industry_switch_decomposition(data, members, taus):
                decomp_rows.append(("industry", comp.tau, comp.pr_same, comp.pr_diff,
                                    comp.pr_nonemployed, comp.component_same,
                                    comp.component_diff, comp.total_mean))
        except Exception as err:
            summary["industry_decomposition_skipped"] = str(err)
    if members and np.all(data.completer[enrolled] >= 0):
        from .diagnostics import completer_decomposition
        try:
            for comp in completer_decomposition(data, members, taus):
                decomp_rows.append(("completer", comp.tau, comp.pr_completer,
                                    1.0 - comp.pr_completer, None,
                                    comp.component_completer,
                                    comp.component_noncompleter, comp.total_mean))
        except Exception as err:
            summary["completer_decomposition_skipped"] = str(err)

    paths = []
    b_path = out_dir / "balance.csv"
    _write_csv(b_path, ["cohort", "sample", "covariate", "mean_treated", "mean_control",
                        "sd_treated", "sd_control", "normalized_difference",
                        "t_statistic"], balance_rows)
    paths.append(b_path)
    o_path = out_dir / "overlap.csv"
    _write_csv(o_path, ["cohort", "bin_lo", "bin_hi", "treated_density",
                        "control_density", "treated_count", "control_count"],
               overlap_rows)
    paths.append(o_path)
    if a2_rows:
        a_path = out_dir / "assumption2.csv"
        _write_csv(a_path, ["quarters_later", "interim_quarter", "difference",
                            "se", "n"], a2_rows)
        paths.append(a_path)
    if traj_rows:
        t_path = out_dir / "trajectory.csv"
        _write_csv(t_path, ["tau", "enrollee_mean", "enrollee_n",
                            "matched_control_mean", "matched_control_n"], traj_rows)
        paths.append(t_path)
    if decomp_rows:
        d_path = out_dir / "decompositions.csv"
        _write_csv(d_path, ["kind", "tau", "pr_first", "pr_second", "pr_other",
                            "component_first", "component_second", "total_mean"],
                   decomp_rows)
        paths.append(d_path)
    s_path = out_dir / "diagnose.json"
    with open(s_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)
    paths.append(s_path)
    _write_manifest(out_dir, cfg.to_dict(), cfg.seed, paths)
    return summary


def load_scenario(path: str) -> CbScenario:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise CliError(f"scenario file not found: {path}", 2)
    if "scenario" not in parser:
        raise CliError("scenario file needs a [scenario] section", 2)
    sec = parser["scenario"]
    stream = tuple(float(v) for v in sec["impact_stream"].split(","))
    loan = None
    if "loan" in parser:
        lsec = parser["loan"]
        loan = LoanTerms(principal=float(lsec["principal"]),
                         nominal_rate=float(lsec.get("nominal_rate", "0.068")),
                         inflation=float(lsec.get("inflation", "0.02")),
                         term_years=int(lsec.get("term_years", "10")))
    return CbScenario(
        impact_stream=stream,
        private_cost=float(sec["private_cost"]),
        social_cost=float(sec["social_cost"]),
        discount_rate=float(sec.get("discount_rate", "0.02")),
        tax_rate=float(sec.get("tax_rate", "0.25")),
        horizon_years=int(sec.get("horizon_years", "30")),
        loan=loan,
    )


def run_costbenefit(args) -> dict:
    sc = load_scenario(args.scenario)
    res = evaluate_scenario(sc)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "costbenefit.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(res.to_dict(), fh, indent=2, sort_keys=True)
    print(json.dumps(res.to_dict(), indent=2, sort_keys=True))
    return res.to_dict()


def run_validate(args) -> int:
    """Fast oracle suite: closed forms, population equalities, collapse."""
    checks: list[tuple[str, bool, str]] = []

    grid_ok, worst = True, 0.0
    for rho in (0.1, 0.25, 0.5, 0.75, 0.9):
        for K in (0, 1, 4, 12):
            for t in range(1, 9):
                for rule, f in (("ac", beta_ac), ("hr", beta_hr)):
                    closed = f(rho, 1.0, 1.0, 1.0, K, t)
                    oracle, _ = projection_oracle(rho, 1.0, 1.0, 1.0, K, t, rule)
                    worst = max(worst, abs(closed - oracle))
                    grid_ok &= abs(closed - oracle) <= 1e-10 and closed > 0
    checks.append(("selection-coefficient closed forms vs projection oracle",
                   grid_ok, f"max gap {worst:.2e}"))

    rng = np.random.default_rng(7)
    pop_ok, worst_pop = True, 0.0
    for _ in range(25):
        pop = random_population(rng)
        est = enumerate_tot(pop)
        gap = max(abs(est.lechner_point - est.robins_tot),
                  abs(est.ipw_tot - est.robins_tot),
                  abs(est.lechner_point - est.true_delta1))
        worst_pop = max(worst_pop, gap)
        pop_ok &= gap <= 1e-10
        pop_ok &= est.lower_bound <= est.robins_tot + 1e-12
        pop_ok &= est.upper_bound >= est.robins_tot - 1e-12
    checks.append(("population equalities and bound ordering", pop_ok,
                   f"max gap {worst_pop:.2e}"))

    from .diagnostics import holm_adjust as _holm
    holm_ok = _holm([0.01, 0.04, 0.03]) == [0.03, 0.06, 0.06]
    checks.append(("step-down multiple-testing adjustment", holm_ok, ""))

    irr_ok = abs(irr([-100, 0, 121]) - 0.1) < 1e-7 and abs(irr([-100, 110]) - 0.1) < 1e-7
    checks.append(("internal rate of return textbook cases", irr_ok, ""))

    ok = all(c[1] for c in checks)
    width = max(len(c[0]) for c in checks)
    for name, passed, note in checks:
        print(f"{name:<{width}}  {'PASS' if passed else 'FAIL'}  {note}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_estimate_args(p):
    p.add_argument("--input", required=False)
    p.add_argument("--config")
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--pre-lags", type=int, default=4)
    p.add_argument("--demographics", default="")
    p.add_argument("--exact-keys", default="")
    p.add_argument("--aux", default="")
    p.add_argument("--neighbors", type=int, default=1)
    p.add_argument("--trim", type=float, default=0.99)
    p.add_argument("--estimands", default="lb")
    p.add_argument("--tau-min", type=int, default=0)
    p.add_argument("--tau-max", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bootstrap", type=int, default=0)
    p.add_argument("--subgroup")
    p.add_argument("--refit-scores", action="store_true")
    p.add_argument("--write-matches", action="store_true")
    p.add_argument("--out", default="out")


def _csv_tuple(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _config_from_args(args, command: str) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        parser = configparser.ConfigParser()
        if not parser.read(args.config):
            raise CliError(f"config file not found: {args.config}", 2)
        for section in parser.sections():
            for k, v in parser[section].items():
                values[k.replace("-", "_")] = v
    cfg = RunConfig(
        command=command,
        input=args.input or values.get("input"),
        out=args.out,
        window=args.window or (int(values["window"]) if "window" in values else None),
        pre_lags=args.pre_lags,
        demographics=_csv_tuple(args.demographics or values.get("demographics", "")),
        exact_keys=_csv_tuple(args.exact_keys or values.get("exact_keys", "")),
        aux=_csv_tuple(args.aux or values.get("aux", "")),
        neighbors=args.neighbors,
        trim_threshold=args.trim,
        estimands=_csv_tuple(args.estimands or values.get("estimands", "lb")),
        tau_min=args.tau_min,
        tau_max=args.tau_max,
        seed=args.seed,
        bootstrap=args.bootstrap,
        subgroup=args.subgroup,
        refit_scores=args.refit_scores,
        write_matches=args.write_matches,
    )
    if cfg.window is None:
        raise CliError("estimate requires --window", 2)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynmatch")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="draw a synthetic panel with known truth")
    sim.add_argument("--n", type=int, default=10000)
    sim.add_argument("--window", type=int, default=2)
    sim.add_argument("--pre-lags", type=int, default=4)
    sim.add_argument("--rho", type=float, default=0.75)
    sim.add_argument("--sigma-omega", type=float, default=1500.0)
    sim.add_argument("--sigma-eps", type=float, default=1500.0)
    sim.add_argument("--sigma-upsilon", type=float, default=1500.0)
    sim.add_argument("--level", type=float, default=7000.0)
    sim.add_argument("--selection", choices=("ac", "hr"), default="ac")
    sim.add_argument("--ac-lag", type=int, default=1)
    sim.add_argument("--alpha", type=float, default=500.0)
    sim.add_argument("--d1-share", type=float, default=0.05)
    sim.add_argument("--later-share", type=float, default=0.05)
    sim.add_argument("--t-max", type=int, default=None)
    sim.add_argument("--allow-negative", action="store_true")
    sim.add_argument("--demo-cells", type=int, default=0)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", default="out")
    sim.set_defaults(func=run_simulate)

    est = sub.add_parser("estimate", help="run the matching estimands on a panel")
    _add_estimate_args(est)
    est.set_defaults(func=lambda a: run_estimate(_config_from_args(a, "estimate")))

    dia = sub.add_parser("diagnose", help="balance, overlap and falsification tests")
    _add_estimate_args(dia)
    dia.set_defaults(func=lambda a: run_diagnose(_config_from_args(a, "diagnose")))

    cb = sub.add_parser("costbenefit", help="present values and rates of return")
    cb.add_argument("--scenario", required=True)
    cb.add_argument("--out", default="out")
    cb.set_defaults(func=run_costbenefit)

    val = sub.add_parser("validate", help="run the fast oracle suite")
    val.set_defaults(func=run_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except (ValidationError, SchemaError, PanelError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    if args.command == "validate":
        return int(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
