"""Dynamic treatment-effect matching estimators with identification bounds."""

__version__ = "0.1.0"

from .panel import (PanelDataset, PanelSchema, Worker, CohortView, Design,
                    build_cohort_view, event_time_trajectory, load_panel,
                    write_panel, ValidationError, SchemaError, PanelError,
                    EmptyCohortError)
from .propensity import (PropensityFit, TrimReport, fit_logit, fit_with_fallback,
                         trim, log_odds, inv_log_odds, perfect_prediction_drops,
                         default_drop_order, FitError, SeparationError,
                         ConvergenceError, PerfectPredictionError,
                         UnrecoverableFitError)
from .matching import (MatchSet, ExactCells, partition_cells, nn_match,
                       mahalanobis_match, match_difference,
                       per_treated_differences, MatchingError)
from .estimators import (CohortEstimate, AggregateEstimate, IPWResult,
                         now_vs_later, tot_lower_bound, tot_upper_bound,
                         lechner_point, lechner_chain, match_cohort,
                         never_share_multiplier, ipw_counterfactual,
                         completer_bounds, did_estimate, reweighted_effect,
                         aggregate, earnings_percent, local_linear_share,
                         EstimationError)
from .simulation import (SimConfig, SimTruth, ACSelection, HRSelection,
                         EffectSpec, simulate_panel, beta_ac, beta_hr,
                         projection_oracle, DiscretePopulation, Atom,
                         robins_oracle, enumerate_tot, random_population,
                         assumption2_counterexample, OverlapError)
from .diagnostics import (BalanceReport, OverlapReport, balance, matched_balance,
                          assumption2_test, assumption2_table, holm_adjust,
                          industry_switch_decomposition,
                          extensive_margin_decomposition, completer_decomposition,
                          overlap_report, outcome_cdf, InterimDifferential)
from .costbenefit import (CbScenario, LoanTerms, CbResults, npv,
                          benefit_cost_ratio, irr, breakeven_year,
                          amortized_payments, evaluate_scenario, CostBenefitError)
