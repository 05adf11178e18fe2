import numpy as np
import pytest

from dynmatch import (PanelDataset, PanelSchema, build_cohort_view,
                      nn_match, match_difference,
                      now_vs_later, tot_lower_bound, tot_upper_bound,
                      lechner_point, ipw_counterfactual, completer_bounds,
                      did_estimate, reweighted_effect, aggregate, earnings_percent,
                      local_linear_share, EstimationError,
                      random_population, enumerate_tot,
                      SimConfig, ACSelection, EffectSpec, simulate_panel)
from dynmatch.propensity import PropensityFit
from dynmatch.estimators import per_treated_differences, CohortEstimate
from dynmatch.cli import fit_cell_cohort, _log_odds_fit

from conftest import make_worker


def plain_fit(index, scores, kind=None):
    return PropensityFit({}, (), np.asarray(index), np.asarray(scores, float),
                         True, 1, kind)


def population_fits(pop, data):
    """Exact count-ratio scores for an exhaustively sampled population."""
    x1 = data.demo["x1"]
    y1 = data.earnings_at(1)
    idx_c = np.where((data.enroll_q == 1) | (data.enroll_q == 0))[0]
    fit_c1 = plain_fit(idx_c, [pop.p1((int(x1[i]),)) for i in idx_c], "conditional")
    idx_u1 = np.arange(data.n)
    fit_u1 = plain_fit(idx_u1, [pop.p1_tilde((int(x1[i]),)) for i in idx_u1],
                       "unconditional")
    idx_u2 = np.where(data.enroll_q != 1)[0]
    fit_u2 = plain_fit(idx_u2, [pop.p2((int(x1[i]),), float(y1[i])) for i in idx_u2],
                       "unconditional")
    return fit_c1, fit_u1, fit_u2


class TestPopulationEqualities:
    """Exhaustive sampling with exact scores: the matching estimators must
    hit the population quantities computed by independent enumeration."""

    @pytest.mark.parametrize("seed", [3, 11, 42])
    def test_estimators_equal_population_values(self, seed):
        rng = np.random.default_rng(seed)
        pop = random_population(rng)
        want = enumerate_tot(pop)
        data = pop.to_panel()
        fit_c1, fit_u1, fit_u2 = population_fits(pop, data)
        view = build_cohort_view(data, 1)
        tau = pop.t_label - 1

        lb = tot_lower_bound(view, fit_c1, tau, ties="all")
        assert abs(lb.value - want.lower_bound) < 1e-10

        nvl = now_vs_later(view, fit_u1, tau, ties="all")
        assert abs(nvl.value - want.now_vs_later) < 1e-10

        def share_fn(scores):
            out = []
            for sc in np.atleast_1d(scores):
                pats = [x for x in pop.x1_support() if pop.p1(x) == sc]
                later = pop.mass(lambda a: a.x1 in pats and a.d2 == 1)
                atrisk = pop.mass(lambda a: a.x1 in pats and a.d1 == 0)
                out.append(later / atrisk)
            return np.asarray(out)

        ub = tot_upper_bound(view, fit_c1, tau, ties="all", share_fn=share_fn)
        assert abs(ub.value - want.upper_bound) < 1e-10

        lech = lechner_point(data, {1: fit_u1, 2: fit_u2}, tau, s=1, ties="all")
        assert abs(lech.value - want.robins_tot) < 1e-10
        assert abs(lech.value - want.true_delta1) < 1e-10

        ipw = ipw_counterfactual(data, {1: fit_u1, 2: fit_u2}, tau, hajek=False)
        assert abs(ipw.tot - want.ipw_tot) < 1e-10
        assert want.lower_bound <= lech.value + 1e-12
        assert want.upper_bound >= lech.value - 1e-12


class TestHandPanel:
    def build(self):
        # two covariate patterns of three workers each; one enrollee per
        # pattern at s=1, a later-enrollee in the first, never-enrollees else
        rows = [
            ("w0", 1, 10.0, {0: 10.0, 1: 100.0, 2: 140.0}),
            ("w2", 2, 10.0, {0: 10.0, 1: 60.0, 2: 120.0}),
            ("w4", None, 10.0, {0: 10.0, 1: 70.0, 2: 90.0}),
            ("w1", 1, 20.0, {0: 20.0, 1: 110.0, 2: 150.0}),
            ("w3", None, 20.0, {0: 20.0, 1: 80.0, 2: 100.0}),
            ("w5", None, 20.0, {0: 20.0, 1: 85.0, 2: 110.0}),
        ]
        workers = [make_worker(i, enroll=s, earnings=dict(earn))
                   for i, (_, s, x, earn) in enumerate(rows)]
        for w, (_, _, x, _) in zip(workers, rows):
            w.earnings[0] = x
        data = PanelDataset.from_workers(workers, PanelSchema(window=2, pre_lags=0))
        return data

    def test_now_vs_later_equals_enumeration(self):
        data = self.build()
        # at-risk shares at s=1 are 1/3 in both patterns: scores pool everyone
        fit = plain_fit(np.arange(6), [1/3] * 6, "unconditional")
        view = build_cohort_view(data, 1)
        est = now_vs_later(view, fit, tau=1, ties="all")
        treated_mean = np.mean([140.0, 150.0])
        pool_mean = np.mean([120.0, 90.0, 100.0, 110.0])
        assert abs(est.value - (treated_mean - pool_mean)) < 1e-12

    def test_constant_outcomes_give_zero(self):
        data = self.build()
        fit = plain_fit(np.arange(6), [1/3] * 6)
        view = build_cohort_view(data, 1)
        est = now_vs_later(view, fit, tau=-1, ties="all")   # quarter 0 values
        # patterns pool: treated mean 15, pool mean 15
        assert abs(est.value - 0.0) < 1e-12


class TestCollapseProperty:
    def test_zero_later_enrollees_collapse_bitwise(self):
        cfg = SimConfig(n_workers=3000, S=2, K=2, rho=0.7, sigma_omega=1400.0,
                        sigma_eps=1400.0, sigma_upsilon=1400.0, level=8000.0,
                        selection=ACSelection(k=1, target_share=0.0),
                        effect=EffectSpec(alpha=400.0), d1_target_share=0.1,
                        t_max=3, seed=21)
        data, truth = simulate_panel(cfg)
        assert truth.pi[2] == 0.0
        view = build_cohort_view(data, 1)
        cond = fit_cell_cohort(data, view, "conditional")
        unc = fit_cell_cohort(data, view, "unconditional")
        tau = 1
        lb = tot_lower_bound(view, _log_odds_fit(cond.fit), tau, exclude=cond.excluded)
        ub = tot_upper_bound(view, _log_odds_fit(cond.fit), tau, exclude=cond.excluded)
        nv = now_vs_later(view, _log_odds_fit(unc.fit), tau, exclude=unc.excluded)
        le = lechner_point(data, {1: _log_odds_fit(unc.fit)}, tau, s=1,
                           exclude=unc.excluded)
        assert lb.value == ub.value == nv.value == le.value


class TestUpperBound:
    def make_fixture(self):
        rng = np.random.default_rng(0)
        workers = []
        for i in range(60):
            enroll = 1 if i % 5 == 0 else (2 if i % 7 == 3 else None)
            earn = {q: float(200 + 10 * (i % 11) + 5 * q + rng.integers(0, 20))
                    for q in range(0, 4)}
            workers.append(make_worker(i, enroll=enroll, earnings=earn))
        return PanelDataset.from_workers(workers, PanelSchema(window=2, pre_lags=0))

    def test_share_zero_equals_lower_bound(self):
        data = self.make_fixture()
        view = build_cohort_view(data, 1)
        pool = np.concatenate([view.treated, view.controls])
        scores = plain_fit(np.sort(pool),
                           np.linspace(0.1, 0.4, len(pool)), "conditional")
        lb = tot_lower_bound(view, scores, 1)
        ub = tot_upper_bound(view, scores, 1, share_fn=lambda p: np.zeros(np.atleast_1d(p).shape))
        assert lb.value == ub.value

    def test_share_one_gives_treated_mean(self):
        data = self.make_fixture()
        view = build_cohort_view(data, 1)
        pool = np.concatenate([view.treated, view.controls])
        scores = plain_fit(np.sort(pool), np.linspace(0.1, 0.4, len(pool)),
                           "conditional")
        ub = tot_upper_bound(view, scores, 1,
                             share_fn=lambda p: np.ones(np.atleast_1d(p).shape))
        treated_mean = float(np.mean(data.earnings_at(2)[view.treated]))
        assert abs(ub.value - treated_mean) < 1e-12

    def test_negative_outcomes_rejected(self):
        workers = [make_worker(0, enroll=1, earnings={0: 1.0, 1: 5.0}),
                   make_worker(1, enroll=None, earnings={0: 1.0, 1: -2.0})]
        data = PanelDataset(PanelSchema(window=2, pre_lags=0),
                            np.array(["a", "b"], dtype=object),
                            np.zeros(2, dtype=np.int64), np.array([1, 0]),
                            np.full(2, -1, dtype=np.int8), 0,
                            np.array([[1.0, 5.0], [1.0, -2.0]]), {}, validate=False)
        view = build_cohort_view(data, 1)
        scores = plain_fit(np.array([0, 1]), [0.5, 0.4], "conditional")
        with pytest.raises(EstimationError):
            tot_upper_bound(view, scores, 0)


class TestIPW:
    def test_one_period_hand_fixture(self):
        # pattern a: 2 treated, 1 never (p=2/3); pattern b: 1 treated, 2 never
        workers = [
            make_worker(0, enroll=1, earnings={0: 0.0, 1: 50.0}),
            make_worker(1, enroll=1, earnings={0: 0.0, 1: 60.0}),
            make_worker(2, enroll=None, earnings={0: 0.0, 1: 30.0}),
            make_worker(3, enroll=1, earnings={0: 1.0, 1: 70.0}),
            make_worker(4, enroll=None, earnings={0: 1.0, 1: 40.0}),
            make_worker(5, enroll=None, earnings={0: 1.0, 1: 44.0}),
        ]
        data = PanelDataset.from_workers(workers, PanelSchema(window=1, pre_lags=0))
        scores = {0: 2/3, 1: 2/3, 2: 2/3, 3: 1/3, 4: 1/3, 5: 1/3}
        fit = plain_fit(np.arange(6), [scores[i] for i in range(6)], "unconditional")
        res = ipw_counterfactual(data, {1: fit}, tau=0, hajek=False)
        want_cf = (2.0 * 30.0 + 0.5 * (40.0 + 44.0)) / 3.0
        assert abs(res.counterfactual_mean - want_cf) < 1e-12
        assert abs(res.tot - (60.0 - want_cf)) < 1e-12

    def test_homogeneous_scores_reduce_to_control_mean(self, rng):
        workers = []
        for i in range(30):
            enroll = 1 if i % 3 == 0 else (2 if i % 5 == 1 else None)
            earn = {q: float(rng.uniform(10, 20)) for q in range(0, 4)}
            workers.append(make_worker(i, enroll=enroll, earnings=earn))
        data = PanelDataset.from_workers(workers, PanelSchema(window=2, pre_lags=0))
        f1 = plain_fit(np.arange(30), np.full(30, 0.3))
        idx2 = np.where(data.enroll_q != 1)[0]
        f2 = plain_fit(idx2, np.full(len(idx2), 0.2))
        res = ipw_counterfactual(data, {1: f1, 2: f2}, tau=1, hajek=True)
        never = data.never_mask
        assert abs(res.counterfactual_mean -
                   float(np.mean(data.earnings_at(2)[never]))) < 1e-12

    def test_weight_capping_counted(self):
        workers = [make_worker(0, enroll=1, earnings={0: 0.0, 1: 5.0}),
                   make_worker(1, enroll=None, earnings={0: 0.0, 1: 3.0})]
        data = PanelDataset.from_workers(workers, PanelSchema(window=1, pre_lags=0))
        fit = plain_fit(np.arange(2), [0.5, 1.0 - 1e-9])
        res = ipw_counterfactual(data, {1: fit}, tau=0)
        assert res.capped == 1


class TestCompleterBounds:
    def build(self, all_completers=True):
        rng = np.random.default_rng(4)
        workers = []
        xs = [10.0, 20.0, 30.0]
        for i, x in enumerate(xs):
            workers.append(make_worker(i, enroll=1,
                                       earnings={0: x, 1: 100.0 + i, 2: 120.0 + i},
                                       completer=True if all_completers else (i == 0)))
        for j, x in enumerate(xs * 2):
            workers.append(make_worker(3 + j, enroll=None,
                                       earnings={0: x, 1: 90.0 + j, 2: 95.0 + j}))
        return PanelDataset.from_workers(workers, PanelSchema(window=2, pre_lags=0))

    def test_all_completers_lower_equals_tot_lower_bound(self):
        data = self.build(all_completers=True)
        view = build_cohort_view(data, 1)
        # duplicate covariate values make both metrics match at distance zero
        lower, upper = completer_bounds(view, tau=1)
        pool = np.concatenate([view.treated, view.controls])
        x0 = data.earnings_at(0)
        score_map = {10.0: 0.2, 20.0: 0.3, 30.0: 0.4}   # monotone in x
        fit = plain_fit(np.sort(pool), [score_map[x0[i]] for i in np.sort(pool)],
                        "conditional")
        lb = tot_lower_bound(view, fit, tau=1)
        assert lower.value == lb.value
        assert upper.value == float(np.mean(data.earnings_at(2)[view.treated]))

    def test_no_completers_returns_none(self):
        data = self.build(all_completers=False)
        take = data.take(np.where((data.enroll_q == 0) | (data.completer != 1))[0])
        flags = take.completer.copy()
        view = build_cohort_view(take, 1)
        assert (take.completer[view.treated] != 1).all()
        assert completer_bounds(view, tau=1) is None

    def test_coverage_against_labeled_truth(self):
        # completers selected on low untreated outcomes: bounds must cover
        rng = np.random.default_rng(9)
        workers = []
        true_effects = []
        for i in range(300):
            base = float(rng.uniform(50, 150))
            if i % 3 == 0:
                y0_post = base + rng.normal(0, 5)
                completer = y0_post < 100     # selection on potential outcome
                effect = 20.0
                true_effects.append((effect, completer, max(y0_post, 0.0)))
                earn = {0: base, 1: max(y0_post + effect, 0.0),
                        2: max(y0_post + effect, 0.0)}
                workers.append(make_worker(i, enroll=1, earnings=earn,
                                           completer=bool(completer)))
            else:
                y0_post = base + rng.normal(0, 5)
                earn = {0: base, 1: max(y0_post, 0.0), 2: max(y0_post, 0.0)}
                workers.append(make_worker(i, enroll=None, earnings=earn))
        data = PanelDataset.from_workers(workers, PanelSchema(window=2, pre_lags=0))
        view = build_cohort_view(data, 1)
        lower, upper = completer_bounds(view, tau=0)
        truth = np.mean([e for e, c, _ in true_effects if c])
        assert lower.value <= truth + 3 * np.sqrt(lower.variance)
        assert upper.value >= truth


class TestDid:
    def make_pairs(self):
        workers = [
            make_worker(0, enroll=1, earnings={-1: 10.0, 0: 12.0, 1: 30.0, 2: 40.0}),
            make_worker(1, enroll=None, earnings={-1: 8.0, 0: 11.0, 1: 25.0, 2: 35.0}),
            make_worker(2, enroll=1, earnings={-1: 9.0, 0: 12.0, 1: 28.0, 2: 39.0}),
            make_worker(3, enroll=None, earnings={-1: 9.5, 0: 11.0, 1: 26.0, 2: 33.0}),
        ]
        data = PanelDataset.from_workers(workers, PanelSchema(window=2, pre_lags=1))
        m = nn_match([0.3, 0.5], [0.3, 0.5], treated_ids=[0, 2], control_ids=[1, 3])
        return data, m

    def test_identical_baseline_equals_match_difference(self):
        workers = [
            make_worker(0, enroll=1, earnings={-1: 7.0, 0: 5.0, 1: 30.0}),
            make_worker(1, enroll=None, earnings={-1: 7.0, 0: 5.0, 1: 25.0}),
        ]
        data = PanelDataset.from_workers(workers, PanelSchema(window=1, pre_lags=1))
        m = nn_match([0.3], [0.3], treated_ids=[0], control_ids=[1])
        did = did_estimate(m, data, cohort=1, tau=0, baseline_tau=-1)
        plain, _ = match_difference(m, data.earnings_at(1))
        assert abs(did.value - plain) < 1e-12

    def test_hand_fixture_did_is_three(self):
        # pre-period gap 2 and post-period gap 5 difference out to 3
        workers = [
            make_worker(0, enroll=1, earnings={0: 10.0, 1: 18.0}),
            make_worker(1, enroll=None, earnings={0: 8.0, 1: 13.0}),
        ]
        data = PanelDataset.from_workers(workers, PanelSchema(window=1, pre_lags=0))
        m = nn_match([0.3], [0.3], treated_ids=[0], control_ids=[1])
        did = did_estimate(m, data, cohort=1, tau=0, baseline_tau=-1)
        assert abs(did.value - 3.0) < 1e-12

    def test_compositional_identity(self):
        data, m = self.make_pairs()
        did = did_estimate(m, data, cohort=1, tau=1, baseline_tau=-1)
        post, _ = match_difference(m, data.earnings_at(2))
        pre, _ = match_difference(m, data.earnings_at(0))
        assert abs(did.value - (post - pre)) < 1e-10

    def test_missing_baseline_is_error(self):
        data, m = self.make_pairs()
        with pytest.raises(EstimationError):
            did_estimate(m, data, cohort=1, tau=1, baseline_tau=-5)


class TestReweighting:
    def test_same_group_identity_bitwise(self, rng):
        n = 17
        X = rng.normal(size=(n, 2))
        m = nn_match(np.linspace(0, 1, n), np.linspace(0, 1, n),
                     treated_ids=np.arange(n), control_ids=np.arange(n, 2 * n))
        outcome = np.concatenate([rng.normal(10, 3, n), rng.normal(9, 3, n)])
        unweighted, _ = match_difference(m, outcome)
        est = reweighted_effect(m, outcome, X, X)
        assert est.value == unweighted

    def test_covariate_free_weights_are_one(self, rng):
        n = 10
        X = np.zeros((n, 0))
        m = nn_match(np.linspace(0, 1, n), np.linspace(0, 1, n),
                     treated_ids=np.arange(n), control_ids=np.arange(n, 2 * n))
        outcome = np.concatenate([rng.normal(5, 1, n), rng.normal(4, 1, 2 * n - n)])
        unweighted, _ = match_difference(m, outcome)
        est = reweighted_effect(m, outcome, X, np.zeros((n + 3, 0)))
        assert abs(est.value - unweighted) < 1e-12

    def test_matches_importance_sampling_oracle(self, rng):
        # binary covariate with different composition in the two groups
        n_m, n_r = 400, 300
        x_m = (rng.random(n_m) < 0.3).astype(float)
        x_r = (rng.random(n_r) < 0.7).astype(float)
        diffs = np.where(x_m == 1, 10.0, 2.0) + rng.normal(0, 0.5, n_m)
        m = nn_match(np.arange(n_m, dtype=float), np.arange(n_m, dtype=float),
                     treated_ids=np.arange(n_m), control_ids=np.arange(n_m, 2 * n_m))
        outcome = np.concatenate([diffs, np.zeros(n_m)])
        est = reweighted_effect(m, outcome, x_m[:, None], x_r[:, None], tol=1e-12)
        # exact empirical weights from the saturated logit
        p1 = (np.sum(x_r == 1) / (np.sum(x_r == 1) + np.sum(x_m == 1)))
        p0 = (np.sum(x_r == 0) / (np.sum(x_r == 0) + np.sum(x_m == 0)))
        w = np.where(x_m == 1, p1 / (1 - p1), p0 / (1 - p0)) * (n_m / n_r)
        want = np.sum(w * diffs) / np.sum(w)
        assert abs(est.value - want) < 1e-10


class TestAggregate:
    def test_single_component_passthrough(self):
        c = CohortEstimate(1, 2, "lower_bound", 5.0, 1.0, 10)
        agg = aggregate([c])
        assert agg.value == 5.0 and agg.variance == 1.0

    def test_hand_arithmetic(self):
        c1 = CohortEstimate(1, 0, "lower_bound", 1.0, 4.0, 25)
        c2 = CohortEstimate(2, 0, "lower_bound", 3.0, 4.0, 75)
        agg = aggregate([c1, c2], shares={1: 0.25, 2: 0.75})
        assert abs(agg.value - 2.5) < 1e-15
        assert abs(agg.variance - (0.25 ** 2 * 4 + 0.75 ** 2 * 4)) < 1e-15

    def test_share_mismatch_rejected(self):
        c1 = CohortEstimate(1, 0, "lower_bound", 1.0, 4.0, 25)
        with pytest.raises(EstimationError):
            aggregate([c1], shares={1: 0.5})

    def test_mixed_estimands_rejected(self):
        c1 = CohortEstimate(1, 0, "lower_bound", 1.0, 4.0, 25)
        c2 = CohortEstimate(2, 0, "upper_bound", 1.0, 4.0, 25)
        with pytest.raises(EstimationError):
            aggregate([c1, c2])

    def test_equals_pooled_pair_oracle(self, rng):
        # count-share weighting equals flat recomputation over pooled pairs
        all_diffs = []
        comps = []
        for s in range(1, 9):
            n_s = int(rng.integers(3, 12))
            d = rng.normal(size=n_s)
            all_diffs.append(d)
            comps.append(CohortEstimate(s, 0, "lower_bound", float(np.mean(d)),
                                        float(np.var(d, ddof=1) / n_s), n_s))
        agg = aggregate(comps)
        pooled = np.concatenate(all_diffs)
        assert abs(agg.value - pooled.mean()) < 1e-12


class TestEarningsPercent:
    def test_paper_magnitudes(self):
        assert abs(earnings_percent(348.0, 5364.0) - 6.488441) < 1e-3
        assert abs(earnings_percent(488.0, 5364.0) - 9.0977) < 1e-3

    def test_zero_effect(self):
        assert earnings_percent(0.0, 123.0) == 0.0

    def test_nonpositive_control_mean_rejected(self):
        with pytest.raises(EstimationError):
            earnings_percent(1.0, 0.0)


class TestLocalLinearShare:
    def test_constant_response_short_circuit(self):
        f = local_linear_share(np.linspace(0, 1, 20), np.zeros(20))
        assert np.all(f([0.2, 0.9]) == 0.0)
        g = local_linear_share(np.linspace(0, 1, 20), np.ones(20))
        assert np.all(g([0.2, 0.9]) == 1.0)

    def test_recovers_linear_trend(self, rng):
        x = rng.uniform(0, 1, 4000)
        z = (rng.random(4000) < (0.2 + 0.5 * x)).astype(float)
        f = local_linear_share(x, z)
        grid = np.array([0.3, 0.5, 0.7])
        assert np.max(np.abs(f(grid) - (0.2 + 0.5 * grid))) < 0.06

    def test_predictions_clipped(self, rng):
        x = np.array([0.0, 0.01, 0.99, 1.0])
        z = np.array([0.0, 0.0, 1.0, 1.0])
        f = local_linear_share(x, z, bandwidth=0.005)
        out = f(np.linspace(-0.5, 1.5, 21))
        assert np.all((out >= 0.0) & (out <= 1.0))
