"""Exact-cell stratification and nearest-neighbor matching with replacement.

Matching is always with replacement.  Ties are broken deterministically by
the lowest control identifier; the alternative tie mode "all" matches every
control at the minimal distance with equal weight, which turns the matched
mean into an exact conditional expectation on exhaustively enumerated
populations (used by the oracle tests).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial import cKDTree

from .panel import PanelDataset, NEVER


class MatchingError(Exception):
    pass


@dataclass
class MatchSet:
    """Treated-to-control pairings within one cell.

    Stored as parallel arrays; `treated`/`controls` hold unit identifiers
    (global worker indices unless the caller supplies its own labels) and
    `rank` the neighbor order per treated unit (0 = nearest).  k is None when
    tie mode "all" produced a variable number of neighbors.
    """

    treated: np.ndarray
    controls: np.ndarray
    distances: np.ndarray
    rank: np.ndarray
    k: int | None
    cell_id: tuple | None = None
    with_replacement: bool = True

    @property
    def pairs(self) -> list[tuple[int, int, float]]:
        return [(int(t), int(c), float(d))
                for t, c, d in zip(self.treated, self.controls, self.distances)]

    @property
    def treated_units(self) -> np.ndarray:
        seen, out = set(), []
        for t in self.treated:
            if int(t) not in seen:
                seen.add(int(t))
                out.append(int(t))
        return np.array(out, dtype=self.treated.dtype)

    @property
    def reuse_counts(self) -> dict[int, int]:
        vals, counts = np.unique(self.controls, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}

    def controls_of(self, t) -> np.ndarray:
        return self.controls[self.treated == t]

    def n_treated(self) -> int:
        return len(self.treated_units)


@dataclass
class ExactCells:
    """Partition of the sample by categorical keys."""

    key_spec: tuple[str, ...]
    cells: dict[tuple, np.ndarray]
    flagged: dict[tuple, str]

    def members(self, key) -> np.ndarray:
        return self.cells[key]

    def keys(self):
        return sorted(self.cells.keys(), key=lambda k: tuple(map(str, k)))


def partition_cells(data: PanelDataset, keys: Sequence[str]) -> ExactCells:
    """Exhaustive partition by exact keys ("layoff_q" or categorical covariates).

    Cells lacking enrollees or never-enrollees are flagged (they cannot
    support matching on their own).  Continuous keys are rejected.
    """
    keys = tuple(keys)
    columns = []
    for key in keys:
        if key == "layoff_q":
            columns.append(data.layoff_q)
            continue
        if key not in data.demo:
            raise MatchingError(f"unknown exact key {key!r}")
        arr = data.demo[key]
        if np.issubdtype(arr.dtype, np.floating):
            raise TypeError(f"key {key!r} is continuous; exact keys must be categorical")
        columns.append(arr)
    if not keys:
        cells = {(): np.arange(data.n)}
    else:
        cells: dict[tuple, list[int]] = {}
        for i in range(data.n):
            key = tuple(col[i] for col in columns)
            cells.setdefault(key, []).append(i)
        cells = {k: np.asarray(v, dtype=int) for k, v in cells.items()}
    flagged = {}
    for key, members in cells.items():
        enr = data.enroll_q[members]
        if not np.any(enr != NEVER):
            flagged[key] = "no enrollees"
        elif not np.any(enr == NEVER):
            flagged[key] = "no never-enrollees"
    return ExactCells(keys, cells, flagged)


# ---------------------------------------------------------------------------
# scalar nearest-neighbor matching
# ---------------------------------------------------------------------------


def nn_match(treated_scores, control_scores, k: int = 1, *, treated_ids=None,
             control_ids=None, ties: str = "lowest", cell_id=None) -> MatchSet:
    """k nearest controls per treated unit by absolute score difference.

    ties="lowest" resolves equidistant candidates toward the lowest control
    identifier.  ties="all" matches every control at the minimal distance
    (k is ignored), so the matched mean equals the conditional mean among
    score-ties on exhaustive data.
    """
    t_scores = np.asarray(treated_scores, dtype=float)
    c_scores = np.asarray(control_scores, dtype=float)
    if len(t_scores) == 0 or len(c_scores) == 0:
        raise MatchingError("empty treated or control pool")
    if not (np.all(np.isfinite(t_scores)) and np.all(np.isfinite(c_scores))):
        raise MatchingError("scores must be finite")
    t_ids = np.arange(len(t_scores)) if treated_ids is None else np.asarray(treated_ids)
    c_ids = np.arange(len(c_scores)) if control_ids is None else np.asarray(control_ids)
    if ties == "lowest" and k > len(c_scores):
        raise MatchingError(f"k={k} exceeds control pool size {len(c_scores)}")

    # controls sorted by (score, id): within a score the lowest id comes first
    order = np.lexsort((c_ids, c_scores))
    s = c_scores[order]
    ids_sorted = c_ids[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    group_vals = s[starts]
    n_groups = len(group_vals)

    out_t, out_c, out_d, out_r = [], [], [], []
    for ti, tv in zip(t_ids, t_scores):
        pos = np.searchsorted(group_vals, tv)
        li, ri = pos - 1, pos
        cand_pos: list[int] = []  # positions into the sorted control arrays
        cand_d: list[float] = []

        def next_dist():
            dl = tv - group_vals[li] if li >= 0 else np.inf
            dr = group_vals[ri] - tv if ri < n_groups else np.inf
            return dl, dr

        def take(side):
            nonlocal li, ri
            g = li if side == "l" else ri
            dist = tv - group_vals[g] if side == "l" else group_vals[g] - tv
            stop = ends[g]
            if ties != "all":
                # members share one distance and are id-sorted: only the
                # first k can survive the lowest-id tie rule
                stop = min(stop, starts[g] + k)
            for p in range(starts[g], stop):
                cand_pos.append(p)
                cand_d.append(dist)
            if side == "l":
                li -= 1
            else:
                ri += 1

        while True:
            dl, dr = next_dist()
            if not np.isfinite(dl) and not np.isfinite(dr):
                break
            if ties == "all":
                if cand_pos and min(dl, dr) > cand_d[0]:
                    break
            elif len(cand_pos) >= k:
                dk = np.partition(np.asarray(cand_d), k - 1)[k - 1]
                if min(dl, dr) > dk:
                    break
            if dl < dr:
                take("l")
            elif dr < dl:
                take("r")
            else:
                take("l")
                take("r")

        cand_pos_arr = np.asarray(cand_pos)
        cand_d_arr = np.asarray(cand_d)
        if ties == "all":
            sel = cand_pos_arr[cand_d_arr == cand_d_arr.min()]
            dist_sel = cand_d_arr[cand_d_arr == cand_d_arr.min()]
        else:
            choose = np.lexsort((ids_sorted[cand_pos_arr], cand_d_arr))[:k]
            sel = cand_pos_arr[choose]
            dist_sel = cand_d_arr[choose]
        for r, (p, d) in enumerate(zip(sel, dist_sel)):
            out_t.append(ti)
            out_c.append(ids_sorted[p])
            out_d.append(d)
            out_r.append(r)

    return MatchSet(np.asarray(out_t), np.asarray(out_c), np.asarray(out_d, dtype=float),
                    np.asarray(out_r), None if ties == "all" else k, cell_id)


# ---------------------------------------------------------------------------
# Mahalanobis matching
# ---------------------------------------------------------------------------


def _whitener(rows: np.ndarray, covariance: np.ndarray | None):
    """Cholesky factor of the covariance used to whiten coordinates."""
    d = rows.shape[1]
    if covariance is None:
        if rows.shape[0] < 2:
            covariance = np.eye(d)
        else:
            covariance = np.atleast_2d(np.cov(rows, rowvar=False, ddof=1))
    covariance = np.asarray(covariance, dtype=float)
    if covariance.shape != (d, d):
        raise MatchingError(f"covariance must be {d}x{d}")
    try:
        L = np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError:
        warnings.warn("singular covariance; applying diagonal inflation 1e-8")
        try:
            L = np.linalg.cholesky(covariance + 1e-8 * np.eye(d))
        except np.linalg.LinAlgError:
            raise MatchingError("covariance not positive definite even after inflation")
    return L


_BRUTE_FORCE_LIMIT = 4_000_000


def mahalanobis_match(treated_rows, control_rows, k: int = 1, *, covariance=None,
                      treated_ids=None, control_ids=None, ties: str = "lowest",
                      cell_id=None) -> MatchSet:
    """k nearest controls under the Mahalanobis metric.

    The metric covariance defaults to the pooled treated+control sample
    covariance.  Small problems use an exact O(n*m) scan (exact tie
    handling); large ones a KD-tree on whitened coordinates with a padded
    query to keep the lowest-id tie rule on near-exact ties.
    """
    T = np.atleast_2d(np.asarray(treated_rows, dtype=float))
    C = np.atleast_2d(np.asarray(control_rows, dtype=float))
    if T.ndim == 2 and T.shape[1] != C.shape[1]:
        raise MatchingError("treated and control rows have different widths")
    if len(T) == 0 or len(C) == 0:
        raise MatchingError("empty treated or control pool")
    t_ids = np.arange(len(T)) if treated_ids is None else np.asarray(treated_ids)
    c_ids = np.arange(len(C)) if control_ids is None else np.asarray(control_ids)
    if ties == "lowest" and k > len(C):
        raise MatchingError(f"k={k} exceeds control pool size {len(C)}")

    L = _whitener(np.vstack([T, C]), covariance)
    wT = solve_triangular(L, T.T, lower=True).T
    wC = solve_triangular(L, C.T, lower=True).T

    out_t, out_c, out_d, out_r = [], [], [], []

    def emit(ti, cand_idx, cand_d):
        if ties == "all":
            keep = cand_d == cand_d.min()
            sel, dist_sel = cand_idx[keep], cand_d[keep]
            order = np.argsort(c_ids[sel], kind="stable")
            sel, dist_sel = sel[order], dist_sel[order]
        else:
            choose = np.lexsort((c_ids[cand_idx], cand_d))[:k]
            sel, dist_sel = cand_idx[choose], cand_d[choose]
        for r, (j, d) in enumerate(zip(sel, dist_sel)):
            out_t.append(ti)
            out_c.append(c_ids[j])
            out_d.append(np.sqrt(max(d, 0.0)))
            out_r.append(r)

    if len(T) * len(C) <= _BRUTE_FORCE_LIMIT:
        for i, ti in enumerate(t_ids):
            diff = wC - wT[i]
            d2 = np.einsum("ij,ij->i", diff, diff)
            emit(ti, np.arange(len(C)), d2)
    else:
        tree = cKDTree(wC)
        pad = min(len(C), (k if ties == "lowest" else 1) + 16)
        dist, idx = tree.query(wT, k=pad)
        dist = np.atleast_2d(dist)
        idx = np.atleast_2d(idx)
        for i, ti in enumerate(t_ids):
            emit(ti, idx[i], dist[i] ** 2)

    return MatchSet(np.asarray(out_t), np.asarray(out_c), np.asarray(out_d, dtype=float),
                    np.asarray(out_r), None if ties == "all" else k, cell_id)


# ---------------------------------------------------------------------------
# matched differences
# ---------------------------------------------------------------------------


def _lookup(outcome, ids: np.ndarray) -> np.ndarray:
    if isinstance(outcome, Mapping):
        missing = [i for i in ids if int(i) not in outcome]
        if missing:
            raise MatchingError(f"outcome missing for units {missing[:5]}")
        return np.array([outcome[int(i)] for i in ids], dtype=float)
    outcome = np.asarray(outcome, dtype=float)
    vals = outcome[np.asarray(ids, dtype=int)]
    bad = np.asarray(ids)[np.isnan(vals)]
    if len(bad):
        raise MatchingError(f"outcome missing (NaN) for units {bad[:5].tolist()}")
    return vals


def _group_starts(mset: MatchSet) -> np.ndarray:
    """Start offsets of each treated unit's block of pairs.

    Both matchers emit all pairs of a treated unit consecutively, so blocks
    are delimited by changes in the treated column.
    """
    t = mset.treated
    if len(t) == 0:
        raise MatchingError("empty match set")
    return np.flatnonzero(np.r_[True, t[1:] != t[:-1]])


def per_treated_differences(mset: MatchSet, outcome,
                            control_multiplier: np.ndarray | None = None) -> np.ndarray:
    """Per-treated (own outcome - mean matched-control outcome).

    `control_multiplier`, aligned with mset.controls, scales each matched
    control outcome before averaging (used by the upper-bound estimand).
    """
    starts = _group_starts(mset)
    units = mset.treated[starts]
    y_t = _lookup(outcome, units)
    y_c = _lookup(outcome, mset.controls)
    if control_multiplier is not None:
        y_c = y_c * np.asarray(control_multiplier, dtype=float)
    sizes = np.diff(np.r_[starts, len(mset.controls)])
    control_means = np.add.reduceat(y_c, starts) / sizes
    return y_t - control_means


def match_difference(mset: MatchSet, outcome,
                     control_multiplier: np.ndarray | None = None):
    """Mean paired difference and its variance.

    The variance is the sample variance of the per-treated differences over
    n_treated (pairing treated as fixed), the paired-difference convention;
    it is None for a single treated unit.
    """
    diffs = per_treated_differences(mset, outcome, control_multiplier)
    value = float(np.mean(diffs))
    if len(diffs) < 2:
        return value, None
    return value, float(np.var(diffs, ddof=1) / len(diffs))


def matched_control_mean(mset: MatchSet, outcome) -> float:
    """Mean outcome of matched controls, each treated's matches averaged first."""
    y_c = _lookup(outcome, mset.controls)
    starts = _group_starts(mset)
    sizes = np.diff(np.r_[starts, len(y_c)])
    return float(np.mean(np.add.reduceat(y_c, starts) / sizes))
