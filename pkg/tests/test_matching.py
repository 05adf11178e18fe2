import numpy as np
import pytest

from dynmatch import (nn_match, mahalanobis_match, match_difference,
                      partition_cells, MatchingError, log_odds)
from dynmatch.matching import per_treated_differences, matched_control_mean

from conftest import small_panel


def sort_oracle_pairs(t_scores, c_scores, k):
    """Exhaustive per-treated sort by (|score gap|, control index)."""
    out = []
    for ti, tv in enumerate(t_scores):
        d = np.abs(np.asarray(c_scores) - tv)
        order = np.lexsort((np.arange(len(c_scores)), d))[:k]
        out.append([(int(c), float(d[c])) for c in order])
    return out


class TestNNMatch:
    def test_basic_nearest(self):
        m = nn_match([0.5], [0.4, 0.55])
        assert m.pairs == [(0, 1, 0.05000000000000004)] or \
            (m.pairs[0][1] == 1 and abs(m.pairs[0][2] - 0.05) < 1e-12)

    def test_equidistant_tie_takes_lowest_index(self):
        m = nn_match([0.5], [0.4, 0.6])
        assert m.pairs[0][1] == 0

    def test_duplicate_scores_take_lowest_index(self):
        m = nn_match([0.5], [0.5, 0.5, 0.5], treated_ids=[9], control_ids=[7, 3, 5])
        assert m.pairs[0][1] == 3
        assert m.pairs[0][2] == 0.0

    def test_matches_full_sort_oracle(self, rng):
        t = rng.random(200)
        c = rng.random(200)
        for k in (1, 5):
            m = nn_match(t, c, k)
            oracle = sort_oracle_pairs(t, c, k)
            for ti in range(len(t)):
                got = [(int(ci), float(d)) for tt, ci, d in m.pairs if tt == ti]
                want = oracle[ti]
                assert [g[0] for g in got] == [w[0] for w in want]
                assert np.allclose([g[1] for g in got], [w[1] for w in want])

    def test_k_exceeding_pool_raises(self):
        with pytest.raises(MatchingError):
            nn_match([0.5], [0.4], k=2)

    def test_empty_pool_raises(self):
        with pytest.raises(MatchingError):
            nn_match([0.5], [])

    def test_ties_all_collects_equal_distance_group(self):
        m = nn_match([0.5], [0.5, 0.5, 0.7], ties="all")
        assert sorted(c for _, c, _ in m.pairs) == [0, 1]

    def test_with_replacement_unmatched_control_removal_invariance(self, rng):
        t = rng.random(40)
        c = rng.random(120)
        m = nn_match(t, c, 2)
        used = sorted(set(int(x) for x in m.controls))
        keep = np.asarray(used)
        remap = {int(old): i for i, old in enumerate(keep)}
        m2 = nn_match(t, c[keep], 2)
        pairs1 = [(int(a), remap[int(b)]) for a, b, _ in m.pairs]
        pairs2 = [(int(a), int(b)) for a, b, _ in m2.pairs]
        assert pairs1 == pairs2

    def test_k1_pairs_subset_of_k2(self, rng):
        t = rng.random(50)
        c = rng.random(80)
        p1 = {(int(a), int(b)) for a, b, _ in nn_match(t, c, 1).pairs}
        p2 = {(int(a), int(b)) for a, b, _ in nn_match(t, c, 2).pairs}
        assert p1 <= p2

    def test_monotone_log_odds_invariance_dense(self, rng):
        # dense control pool: the log-odds transform preserves pairings
        t = rng.uniform(0.05, 0.6, size=100)
        c = rng.uniform(0.01, 0.7, size=4000)
        base = [(a, b) for a, b, _ in nn_match(t, c, 1).pairs]
        trans = [(a, b) for a, b, _ in nn_match(log_odds(t), log_odds(c), 1).pairs]
        assert base == trans

    def test_reuse_counts(self):
        m = nn_match([0.1, 0.11], [0.1, 0.9])
        assert m.reuse_counts == {0: 2}


class TestMahalanobis:
    def test_identity_covariance_1d_equals_nn(self, rng):
        t = rng.random(30)
        c = rng.random(50)
        nn = nn_match(t, c, 1)
        mh = mahalanobis_match(t[:, None], c[:, None], 1, covariance=np.eye(1))
        assert [(a, b) for a, b, _ in nn.pairs] == [(a, b) for a, b, _ in mh.pairs]

    def test_identical_rows_distance_zero(self):
        rows = np.array([[1.0, 2.0], [3.0, 4.0]])
        m = mahalanobis_match(rows, rows, 1, covariance=np.eye(2))
        assert np.all(m.distances == 0.0)
        assert [(a, b) for a, b, _ in m.pairs] == [(0, 0), (1, 1)]

    def test_matches_brute_force_oracle(self, rng):
        T = rng.normal(size=(50, 3))
        C = rng.normal(size=(70, 3))
        pooled = np.vstack([T, C])
        cov = np.cov(pooled, rowvar=False, ddof=1)
        inv = np.linalg.inv(cov)
        m = mahalanobis_match(T, C, 2)
        for i in range(50):
            d2 = np.einsum("ij,jk,ik->i", C - T[i], inv, C - T[i])
            order = np.lexsort((np.arange(len(C)), d2))[:2]
            got = [int(b) for a, b, _ in m.pairs if a == i]
            assert got == [int(o) for o in order]
            dists = [d for a, _, d in m.pairs if a == i]
            assert np.allclose(dists, np.sqrt(d2[order]), atol=1e-10)

    def test_singular_covariance_inflated_with_warning(self):
        T = np.array([[0.0, 0.0]])
        C = np.array([[1.0, 1.0], [2.0, 2.0]])
        cov = np.array([[1.0, 1.0], [1.0, 1.0]])   # rank 1
        with pytest.warns(UserWarning, match="inflation"):
            m = mahalanobis_match(T, C, 1, covariance=cov)
        assert m.pairs[0][1] == 0

    def test_kdtree_path_agrees_with_brute_force(self, rng):
        import dynmatch.matching as mm
        T = rng.normal(size=(40, 2))
        C = rng.normal(size=(200, 2))
        exact = mahalanobis_match(T, C, 3)
        old = mm._BRUTE_FORCE_LIMIT
        mm._BRUTE_FORCE_LIMIT = 0
        try:
            tree = mahalanobis_match(T, C, 3)
        finally:
            mm._BRUTE_FORCE_LIMIT = old
        assert [(a, b) for a, b, _ in exact.pairs] == [(a, b) for a, b, _ in tree.pairs]


class TestMatchDifference:
    def test_single_pair(self):
        m = nn_match([0.5], [0.5], treated_ids=[0], control_ids=[1])
        value, var = match_difference(m, {0: 10.0, 1: 7.0})
        assert value == 3.0
        assert var is None

    def test_two_pairs_hand_arithmetic(self):
        m = nn_match([0.2, 0.8], [0.2, 0.8], treated_ids=[0, 1], control_ids=[2, 3])
        value, var = match_difference(m, {0: 10.0, 2: 7.0, 1: 4.0, 3: 5.0})
        assert value == 1.0
        assert var == 4.0   # ((3-1)^2 + (-1-1)^2) / (2-1) / 2

    def test_matches_paired_t_oracle(self, rng):
        n = 100
        yt = rng.normal(10, 2, n)
        yc = rng.normal(9, 2, n)
        m = nn_match(np.arange(n, dtype=float), np.arange(n, dtype=float),
                     treated_ids=np.arange(n), control_ids=np.arange(n, 2 * n))
        outcome = np.concatenate([yt, yc])
        value, var = match_difference(m, outcome)
        d = yt - yc
        assert abs(value - d.mean()) < 1e-12
        assert abs(var - d.var(ddof=1) / n) < 1e-14

    def test_missing_outcome_named(self):
        m = nn_match([0.5], [0.5], treated_ids=[0], control_ids=[1])
        outcome = np.array([1.0, np.nan])
        with pytest.raises(MatchingError, match="1"):
            match_difference(m, outcome)

    def test_multiplier_scales_controls(self):
        m = nn_match([0.5], [0.5], treated_ids=[0], control_ids=[1])
        value, _ = match_difference(m, {0: 10.0, 1: 8.0},
                                    np.array([0.5]))
        assert value == 6.0


class TestPartitionCells:
    def test_no_keys_single_cell(self):
        data = small_panel()
        cells = partition_cells(data, [])
        assert list(cells.cells) == [()]
        assert len(cells.members(())) == data.n

    def test_two_genders_sum_to_n(self):
        data = small_panel(demographics=("g",), exact_keys=("g",))
        cells = partition_cells(data, ["g"])
        sizes = [len(cells.members(k)) for k in cells.keys()]
        assert sum(sizes) == data.n and len(sizes) == 2

    def test_partition_matches_grouping_oracle(self, rng):
        from dynmatch import PanelDataset, PanelSchema
        from conftest import make_worker
        workers = []
        for i in range(100):
            cov = {"a": str(rng.integers(0, 3)), "b": str(rng.integers(0, 2)),
                   "c": str(rng.integers(0, 2))}
            enroll = 1 if rng.random() < 0.3 else None
            workers.append(make_worker(i, enroll=enroll, earnings={0: 1.0, 1: 1.0},
                                       covariates=cov, layoff=int(rng.integers(6, 9))))
        data = PanelDataset.from_workers(
            workers, PanelSchema(window=2, pre_lags=0, demographics=("a", "b", "c")))
        cells = partition_cells(data, ["a", "b", "layoff_q"])
        oracle = {}
        for i, w in enumerate(workers):
            oracle.setdefault((w.covariates["a"], w.covariates["b"], w.layoff_quarter),
                              []).append(i)
        assert {k: list(v) for k, v in cells.cells.items()} == \
            {k: v for k, v in oracle.items()}

    def test_continuous_key_rejected(self):
        from dynmatch import PanelDataset, PanelSchema
        from conftest import make_worker
        workers = [make_worker(i, earnings={0: 1.0, 1: 1.0}, covariates={"x": 0.5 + i})
                   for i in range(4)]
        data = PanelDataset.from_workers(
            workers, PanelSchema(window=2, pre_lags=0, demographics=("x",)))
        with pytest.raises(TypeError):
            partition_cells(data, ["x"])

    def test_no_cross_cell_pairs(self, rng):
        data = small_panel(S=2, K=0, enrollees=((1,), (1,), (2,)), n_never=6,
                           demographics=("g",), exact_keys=("g",))
        cells = partition_cells(data, ["g"])
        for key in cells.keys():
            members = set(cells.members(key).tolist())
            treated = [i for i in members if data.enroll_q[i] == 1]
            controls = [i for i in members if data.enroll_q[i] == 0]
            if not treated or not controls:
                continue
            m = nn_match(data.earnings_at(0)[treated], data.earnings_at(0)[controls],
                         treated_ids=treated, control_ids=controls)
            assert set(m.treated.tolist()) <= members
            assert set(m.controls.tolist()) <= members
