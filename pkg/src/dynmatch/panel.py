"""Worker-level earnings panels with staggered treatment start.

The data model is a quarterly earnings panel indexed in *relative* time:
quarter 0 is the layoff quarter, negative quarters are pre-layoff history,
and enrollment (treatment start) happens at some quarter s in 1..S or never.
Event time tau is measured from the enrollment quarter.

Datasets are immutable after construction.  Workers are stored columnar
(numpy arrays) for speed; the `Worker` dataclass is a per-row view used for
construction and inspection.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

NEVER = 0  # sentinel in the enroll_q array: worker never enrolls in-window


class PanelError(Exception):
    pass


class SchemaError(PanelError):
    pass


class ValidationError(PanelError):
    """Raised when rows violate panel invariants.

    `report` is a list of {"row", "field", "violation"} dicts, one entry per
    offending value, with 1-based file line numbers where applicable.
    """

    def __init__(self, report):
        self.report = list(report)
        lines = "; ".join(
            f"row {r['row']}: {r['field']}: {r['violation']}" for r in self.report[:8]
        )
        more = "" if len(self.report) <= 8 else f" (+{len(self.report) - 8} more)"
        super().__init__(f"panel validation failed: {lines}{more}")


@dataclass(frozen=True)
class PanelSchema:
    """Shape of a panel: enrollment window, earnings lags, covariate roles.

    window      S, the number of quarters in which enrollment can start.
    pre_lags    K, pre-layoff earnings lags; quarters -K..0 are required.
    demographics  covariate column names (numeric or categorical).
    exact_keys  names used for exact-cell stratification; each must be a
                demographic name or the special key "layoff_q".
    aux         names of per-quarter auxiliary outcomes (weeks, industry, ...).
    """

    window: int
    pre_lags: int
    demographics: tuple[str, ...] = ()
    exact_keys: tuple[str, ...] = ()
    aux: tuple[str, ...] = ()

    def __post_init__(self):
        if self.window < 1:
            raise SchemaError("window must be >= 1")
        if self.pre_lags < 0:
            raise SchemaError("pre_lags must be >= 0")
        for key in self.exact_keys:
            if key != "layoff_q" and key not in self.demographics:
                raise SchemaError(f"exact key {key!r} is not a demographic covariate")

    @property
    def covariate_spec(self) -> list[tuple[str, str]]:
        """Ordered (name, role) pairs; interim earnings are appended per cohort."""
        spec = [(d, "exact_key" if d in self.exact_keys else "demographic")
                for d in self.demographics]
        spec += [(f"y_m{k}", "pre_earnings") for k in range(self.pre_lags, -1, -1)]
        return spec


@dataclass
class Worker:
    """One row of the panel; earnings keyed by relative quarter."""

    id: str
    layoff_quarter: int
    enroll_quarter: int | None
    earnings: dict[int, float]
    covariates: dict[str, object] = field(default_factory=dict)
    completer: bool | None = None
    aux_outcomes: dict[str, dict[int, float]] = field(default_factory=dict)

    def cell_keys(self, exact_keys: Sequence[str]) -> tuple:
        return tuple(self.layoff_quarter if k == "layoff_q" else self.covariates[k]
                     for k in exact_keys)


@dataclass(frozen=True)
class Design:
    """A named numeric design matrix (no intercept column)."""

    matrix: np.ndarray
    columns: tuple[str, ...]

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[1] != len(self.columns):
            raise PanelError("design matrix / column name mismatch")

    def take(self, rows) -> "Design":
        return Design(self.matrix[np.asarray(rows)], self.columns)

    def select(self, columns: Sequence[str]) -> np.ndarray:
        pos = {c: i for i, c in enumerate(self.columns)}
        missing = [c for c in columns if c not in pos]
        if missing:
            raise PanelError(f"design lacks columns {missing}")
        return self.matrix[:, [pos[c] for c in columns]]


class PanelDataset:
    """Immutable columnar earnings panel.

    Attributes
    ----------
    ids : object array of worker ids
    layoff_q : int array, calendar quarter of layoff
    enroll_q : int array, 1..S or 0 for never-enrollees
    completer : int8 array, 1/0 or -1 when unknown
    earnings : (n, n_quarters) float array, NaN = unobserved quarter;
        column j holds relative quarter q_min + j
    demo : dict name -> 1-d array
    aux : dict name -> (n, n_quarters) float array aligned with earnings
    """

    def __init__(self, schema: PanelSchema, ids, layoff_q, enroll_q, completer,
                 q_min: int, earnings: np.ndarray, demo: Mapping[str, np.ndarray],
                 aux: Mapping[str, np.ndarray] | None = None, *, validate: bool = True):
        self.schema = schema
        self.ids = np.asarray(ids, dtype=object)
        self.layoff_q = np.asarray(layoff_q, dtype=np.int64)
        self.enroll_q = np.asarray(enroll_q, dtype=np.int64)
        self.completer = np.asarray(completer, dtype=np.int8)
        self.q_min = int(q_min)
        self.earnings = np.asarray(earnings, dtype=float)
        self.demo = {k: np.asarray(v) for k, v in demo.items()}
        self.aux = {k: np.asarray(v, dtype=float) for k, v in (aux or {}).items()}
        if validate:
            report = self.validation_report()
            if report:
                raise ValidationError(report)
        for arr in [self.ids, self.layoff_q, self.enroll_q, self.completer,
                    self.earnings, *self.demo.values(), *self.aux.values()]:
            arr.flags.writeable = False

    # -- basic shape ---------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return self.n

    @property
    def S(self) -> int:
        return self.schema.window

    @property
    def K(self) -> int:
        return self.schema.pre_lags

    @property
    def q_max(self) -> int:
        return self.q_min + self.earnings.shape[1] - 1

    def earnings_at(self, q: int) -> np.ndarray:
        """Earnings column for relative quarter q; NaN outside observed range."""
        if q < self.q_min or q > self.q_max:
            return np.full(self.n, np.nan)
        return self.earnings[:, q - self.q_min]

    def aux_at(self, name: str, q: int) -> np.ndarray:
        if name not in self.aux:
            raise PanelError(f"no aux outcome {name!r}")
        if q < self.q_min or q > self.q_max:
            return np.full(self.n, np.nan)
        return self.aux[name][:, q - self.q_min]

    @property
    def never_mask(self) -> np.ndarray:
        return self.enroll_q == NEVER

    def cohort_mask(self, s: int) -> np.ndarray:
        return self.enroll_q == s

    # -- validation ----------------------------------------------------

    def validation_report(self) -> list[dict]:
        """Invariant check; returns one entry per violation (0-based row)."""
        report = []
        _, first = np.unique(self.ids, return_index=True)
        if len(first) != self.n:
            for i in np.setdiff1d(np.arange(self.n), first):
                report.append({"row": int(i), "field": "id",
                               "violation": f"duplicate id {self.ids[i]!r}"})
        bad_enroll = (self.enroll_q != NEVER) & ((self.enroll_q < 1) | (self.enroll_q > self.S))
        for i in np.where(bad_enroll)[0]:
            report.append({"row": int(i), "field": "enroll_q",
                           "violation": f"enroll quarter {self.enroll_q[i]} outside 1..{self.S}"})
        with np.errstate(invalid="ignore"):
            neg_r, neg_c = np.where(self.earnings < 0)
        for r, c in zip(neg_r, neg_c):
            report.append({"row": int(r), "field": f"earnings[{self.q_min + c}]",
                           "violation": f"negative earnings {self.earnings[r, c]}"})
        # required quarters: -K..0 for everyone, then interim quarters
        # through enrollment (never-enrollees: through S-1)
        hi = np.where(self.enroll_q == NEVER, self.S - 1, self.enroll_q - 1)
        hi[bad_enroll] = -self.K - 1  # skip rows whose enroll value is invalid
        for q in range(-self.K, int(hi.max()) + 1):
            needed = hi >= q
            if q < self.q_min or q > self.q_max:
                missing = needed
            else:
                missing = needed & np.isnan(self.earnings[:, q - self.q_min])
            for i in np.where(missing)[0]:
                report.append({"row": int(i), "field": f"earnings[{q}]",
                               "violation": "required quarter missing"})
        report.sort(key=lambda e: e["row"])
        return report

    # -- construction --------------------------------------------------

    @classmethod
    def from_workers(cls, workers: Iterable[Worker], schema: PanelSchema,
                     *, validate: bool = True) -> "PanelDataset":
        workers = list(workers)
        n = len(workers)
        quarters = sorted({q for w in workers for q in w.earnings})
        q_min = min(quarters + [-schema.pre_lags])
        q_max = max(quarters + [0])
        width = q_max - q_min + 1
        earnings = np.full((n, width), np.nan)
        aux = {a: np.full((n, width), np.nan) for a in schema.aux}
        ids, layoff, enroll, compl = [], [], [], []
        demo = {d: [] for d in schema.demographics}
        for i, w in enumerate(workers):
            ids.append(w.id)
            layoff.append(w.layoff_quarter)
            enroll.append(NEVER if w.enroll_quarter is None else w.enroll_quarter)
            compl.append(-1 if w.completer is None else int(w.completer))
            for q, v in w.earnings.items():
                earnings[i, q - q_min] = v
            for d in schema.demographics:
                if d not in w.covariates:
                    raise SchemaError(f"worker {w.id!r} lacks covariate {d!r}")
                demo[d].append(w.covariates[d])
            for a in schema.aux:
                for q, v in w.aux_outcomes.get(a, {}).items():
                    aux[a][i, q - q_min] = v
        demo_arrays = {d: np.asarray(vals) for d, vals in demo.items()}
        return cls(schema, ids, layoff, enroll, compl, q_min, earnings,
                   demo_arrays, aux, validate=validate)

    def take(self, indices, *, relabel: bool = False) -> "PanelDataset":
        """Row subset (or resample when indices repeat; set relabel=True)."""
        idx = np.asarray(indices, dtype=int)
        ids = (np.array([f"b{j}" for j in range(len(idx))], dtype=object)
               if relabel else self.ids[idx])
        return PanelDataset(self.schema, ids, self.layoff_q[idx], self.enroll_q[idx],
                            self.completer[idx], self.q_min, self.earnings[idx],
                            {d: v[idx] for d, v in self.demo.items()},
                            {a: v[idx] for a, v in self.aux.items()}, validate=False)

    def worker(self, i: int) -> Worker:
        earn = {self.q_min + j: float(v)
                for j, v in enumerate(self.earnings[i]) if not np.isnan(v)}
        aux = {a: {self.q_min + j: float(v) for j, v in enumerate(mat[i]) if not np.isnan(v)}
               for a, mat in self.aux.items()}
        return Worker(
            id=str(self.ids[i]),
            layoff_quarter=int(self.layoff_q[i]),
            enroll_quarter=None if self.enroll_q[i] == NEVER else int(self.enroll_q[i]),
            earnings=earn,
            covariates={d: self.demo[d][i] for d in self.demo},
            completer=None if self.completer[i] < 0 else bool(self.completer[i]),
            aux_outcomes=aux,
        )

    # -- categorical encoding (shared across cohorts and cells) ---------

    def encoded_demographics(self) -> Design:
        """Numeric demographic block; categoricals one-hot expanded.

        Category order is fixed from the full dataset so that encodings are
        identical across cohorts and cells (first category dropped).
        """
        cols, names = [], []
        for d in self.schema.demographics:
            arr = self.demo[d]
            if np.issubdtype(arr.dtype, np.number):
                cols.append(arr.astype(float))
                names.append(d)
            else:
                cats = sorted(map(str, set(arr.tolist())))
                str_arr = arr.astype(str)
                for c in cats[1:]:
                    cols.append((str_arr == c).astype(float))
                    names.append(f"{d}={c}")
        if not cols:
            return Design(np.empty((self.n, 0)), ())
        return Design(np.column_stack(cols), tuple(names))


# ---------------------------------------------------------------------------
# Cohort views
# ---------------------------------------------------------------------------


class EmptyCohortError(PanelError):
    """Cohort has no treated units; skipped with weight zero in aggregation."""


@dataclass(frozen=True)
class CohortView:
    """Pools and design matrix for one enrollment cohort s.

    at_risk holds the workers still able to start at s (enroll not in 1..s-1),
    split into treated (enroll == s), later (enroll > s) and controls (never).
    The design matrix rows align with `at_risk` and realize the cumulative
    conditioning set: baseline covariates followed by interim earnings for
    quarters 1..s-1.
    """

    data: PanelDataset
    cohort: int
    at_risk: np.ndarray
    treated: np.ndarray
    later: np.ndarray
    controls: np.ndarray
    design: Design

    def rows(self, global_idx) -> np.ndarray:
        """Positions in the design matrix of the given worker indices."""
        pos = np.searchsorted(self.at_risk, global_idx)
        if np.any(self.at_risk[pos] != global_idx):
            raise PanelError("index not in at-risk set")
        return pos

    def design_rows(self, global_idx) -> np.ndarray:
        return self.design.matrix[self.rows(global_idx)]


def build_cohort_view(data: PanelDataset, s: int) -> CohortView:
    if not 1 <= s <= data.S:
        raise PanelError(f"cohort {s} outside 1..{data.S}")
    enroll = data.enroll_q
    at_risk = np.where((enroll == NEVER) | (enroll >= s))[0]
    treated = np.where(enroll == s)[0]
    later = np.where(enroll > s)[0]
    controls = np.where(enroll == NEVER)[0]
    if len(treated) == 0:
        raise EmptyCohortError(f"cohort {s} has no treated units")
    demo = data.encoded_demographics().take(at_risk)
    lag_cols = [data.earnings_at(q)[at_risk] for q in range(-data.K, 1)]
    lag_names = [f"y_m{-q}" for q in range(-data.K, 1)]
    interim_cols = [data.earnings_at(q)[at_risk] for q in range(1, s)]
    interim_names = [f"y_p{q}" for q in range(1, s)]
    matrix = np.column_stack([demo.matrix] + [c[:, None] for c in lag_cols + interim_cols]) \
        if (lag_cols or interim_cols or demo.matrix.shape[1]) else np.empty((len(at_risk), 0))
    design = Design(matrix, demo.columns + tuple(lag_names) + tuple(interim_names))
    return CohortView(data, s, at_risk, treated, later, controls, design)


# ---------------------------------------------------------------------------
# Event-time trajectories
# ---------------------------------------------------------------------------


def event_time_trajectory(data: PanelDataset, members, tau_range,
                          align: Mapping[int, int] | None = None):
    """Mean earnings by event time for a group of workers.

    `members` is either a sequence of worker indices (alignment from `align`
    or the worker's own enrollment quarter) or (index, alignment) pairs, so a
    control matched to several enrollees can enter once per pairing.  Returns
    {tau: (mean, count)} where count is the number of observed values.
    """
    entries = []
    for m in members:
        if isinstance(m, tuple):
            entries.append((int(m[0]), int(m[1])))
        else:
            i = int(m)
            if align is not None and i in align:
                entries.append((i, int(align[i])))
            elif data.enroll_q[i] != NEVER:
                entries.append((i, int(data.enroll_q[i])))
            else:
                raise PanelError(f"worker {i} has no alignment quarter")
    taus = list(tau_range)
    out = {}
    idx = np.array([e[0] for e in entries], dtype=int)
    base = np.array([e[1] for e in entries], dtype=int)
    for tau in taus:
        q = base + tau
        vals = np.full(len(entries), np.nan)
        in_range = (q >= data.q_min) & (q <= data.q_max)
        rows = idx[in_range]
        vals[in_range] = data.earnings[rows, q[in_range] - data.q_min]
        ok = ~np.isnan(vals)
        out[tau] = (float(np.mean(vals[ok])) if ok.any() else np.nan, int(ok.sum()))
    return out


# ---------------------------------------------------------------------------
# CSV input / output
# ---------------------------------------------------------------------------

_PRE_RE = re.compile(r"^y_m(\d+)$")
_POST_RE = re.compile(r"^y_p(\d+)$")


def _aux_patterns(schema):
    return {a: (re.compile(rf"^{re.escape(a)}_m(\d+)$"),
                re.compile(rf"^{re.escape(a)}_p(\d+)$")) for a in schema.aux}


def load_panel(path, schema: PanelSchema, *, layout: str = "wide",
               static: str | None = None) -> PanelDataset:
    """Load and validate a panel CSV.

    Wide layout: one row per worker with columns
    ``id, layoff_q, enroll_q, completer, <demographics>, y_m<k>, y_p<t>``
    (empty enroll_q means never-enrollee).  Long layout: ``id, rel_quarter,
    earnings`` joined to a static table carrying everything else.
    """
    if layout == "wide":
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        return _parse_wide(frame, schema)
    if layout == "long":
        if static is None:
            raise SchemaError("long layout requires a static table path")
        long = pd.read_csv(path, dtype=str, keep_default_na=False)
        for col in ("id", "rel_quarter", "earnings"):
            if col not in long.columns:
                raise SchemaError(f"long file missing required column {col!r}")
        stat = pd.read_csv(static, dtype=str, keep_default_na=False)
        wide = stat.copy()
        piv = long.pivot(index="id", columns="rel_quarter", values="earnings")
        for q_str in piv.columns:
            q = int(q_str)
            name = f"y_m{-q}" if q <= 0 else f"y_p{q}"
            wide[name] = wide["id"].map(piv[q_str]).fillna("")
        return _parse_wide(wide, schema)
    raise SchemaError(f"unknown layout {layout!r}")


def _parse_wide(frame: pd.DataFrame, schema: PanelSchema) -> PanelDataset:
    required = ["id", "layoff_q", "enroll_q"] + list(schema.demographics)
    required += [f"y_m{k}" for k in range(schema.pre_lags + 1)]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaError(f"missing required columns: {missing}")

    n = len(frame)
    report = []
    # file line numbers: header is line 1
    line = np.arange(n) + 2

    quarters = sorted(
        [-int(m.group(1)) for c in frame.columns if (m := _PRE_RE.match(c))]
        + [int(m.group(1)) for c in frame.columns if (m := _POST_RE.match(c))]
    )
    q_min, q_max = min(quarters), max(quarters)
    earnings = np.full((n, q_max - q_min + 1), np.nan)
    for q in quarters:
        name = f"y_m{-q}" if q <= 0 else f"y_p{q}"
        col = frame[name].to_numpy()
        for i in range(n):
            text = col[i].strip()
            if text == "":
                continue
            try:
                earnings[i, q - q_min] = float(text)
            except ValueError:
                report.append({"row": int(line[i]), "field": name,
                               "violation": f"not a number: {text!r}"})

    enroll = np.zeros(n, dtype=np.int64)
    raw_enroll = frame["enroll_q"].to_numpy()
    for i in range(n):
        text = raw_enroll[i].strip()
        if text == "":
            continue
        try:
            enroll[i] = int(float(text))
        except ValueError:
            report.append({"row": int(line[i]), "field": "enroll_q",
                           "violation": f"not an integer: {text!r}"})

    compl = np.full(n, -1, dtype=np.int8)
    if "completer" in frame.columns:
        raw = frame["completer"].to_numpy()
        for i in range(n):
            text = raw[i].strip()
            if text != "":
                compl[i] = int(float(text))

    try:
        layoff = frame["layoff_q"].astype(float).astype(np.int64).to_numpy()
    except ValueError:
        raise SchemaError("layoff_q must be integer-valued")

    demo = {}
    for d in schema.demographics:
        col = frame[d]
        try:
            demo[d] = col.astype(float).to_numpy()
        except ValueError:
            demo[d] = col.to_numpy().astype(object)

    aux = {a: np.full((n, q_max - q_min + 1), np.nan) for a in schema.aux}
    for a, (pre, post) in _aux_patterns(schema).items():
        for c in frame.columns:
            m = pre.match(c) or post.match(c)
            if not m:
                continue
            q = -int(m.group(1)) if pre.match(c) else int(m.group(1))
            vals = pd.to_numeric(frame[c].replace("", np.nan)).to_numpy()
            aux[a][:, q - q_min] = vals

    if report:
        raise ValidationError(report)
    try:
        return PanelDataset(schema, frame["id"].to_numpy(object), layoff, enroll,
                            compl, q_min, earnings, demo, aux)
    except ValidationError as err:
        # convert 0-based rows from the dataset check into file line numbers
        for entry in err.report:
            entry["row"] = int(line[entry["row"]])
        raise


def write_panel(data: PanelDataset, path) -> None:
    """Emit the wide CSV format accepted by `load_panel`."""
    schema = data.schema
    quarters = list(range(data.q_min, data.q_max + 1))
    q_names = [f"y_m{-q}" if q <= 0 else f"y_p{q}" for q in quarters]
    header = ["id", "layoff_q", "enroll_q", "completer"] + list(schema.demographics) + q_names
    for a in schema.aux:
        header += [f"{a}_m{-q}" if q <= 0 else f"{a}_p{q}" for q in quarters]

    def fmt(x):
        if isinstance(x, float):
            return "" if np.isnan(x) else repr(x)
        return str(x)

    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for i in range(data.n):
            row = [data.ids[i], data.layoff_q[i],
                   "" if data.enroll_q[i] == NEVER else data.enroll_q[i],
                   "" if data.completer[i] < 0 else int(data.completer[i])]
            row += [data.demo[d][i] for d in schema.demographics]
            row += [fmt(float(v)) for v in data.earnings[i]]
            for a in schema.aux:
                row += [fmt(float(v)) for v in data.aux[a][i]]
            out.writerow([fmt(x) if isinstance(x, float) else x for x in row])
