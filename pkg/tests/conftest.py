import numpy as np
import pytest

from dynmatch import PanelDataset, PanelSchema, Worker


def make_worker(i, enroll=None, earnings=None, covariates=None, completer=None,
                layoff=8, aux=None):
    return Worker(id=f"w{i}", layoff_quarter=layoff, enroll_quarter=enroll,
                  earnings=earnings or {}, covariates=covariates or {},
                  completer=completer, aux_outcomes=aux or {})


def small_panel(S=2, K=1, n_never=4, enrollees=((1,), (2,)), seed=0,
                demographics=(), exact_keys=()):
    """Deterministic hand panel: earnings = base + quarter wiggle."""
    rng = np.random.default_rng(seed)
    schema = PanelSchema(window=S, pre_lags=K, demographics=demographics,
                         exact_keys=exact_keys)
    workers = []
    quarters = range(-K, S + 3)
    idx = 0

    def wiggle(i, q):
        return float((i * 7 + q * 3) % 5) + float(rng.integers(0, 3))

    for (s,) in enrollees:
        base = 50 + 10 * idx
        earnings = {q: base + q + wiggle(idx, q) + (5 if q >= s else 0)
                    for q in quarters}
        cov = {d: ["a", "b"][idx % 2] for d in demographics}
        workers.append(make_worker(idx, enroll=s, earnings=earnings, covariates=cov))
        idx += 1
    for _ in range(n_never):
        base = 40 + 7 * idx + rng.integers(0, 5)
        earnings = {q: float(base + q + wiggle(idx, q)) for q in quarters}
        cov = {d: ["a", "b"][idx % 2] for d in demographics}
        workers.append(make_worker(idx, enroll=None, earnings=earnings, covariates=cov))
        idx += 1
    return PanelDataset.from_workers(workers, schema)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
