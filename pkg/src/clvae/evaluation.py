"""Error metrics, synthetic customer bases and the holdout benchmark runner."""
import datetime as dt
import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from ._io import atomic_write_frame, atomic_write_json
from .baseline import CohortPNBDGG, GGParams, PNBDGG, ParetoNBDParams
from .exceptions import AlignmentError, LeakageError, ValidationError
from .ingest import (
    DAYS_PER_WEEK,
    CohortSpec,
    TransactionLog,
    attach_covariate_frame,
    build_cohort_covariates,
    holdout_revenue,
    summarize_rfm,
)
from .numerics import sample_gamma

logger = logging.getLogger(__name__)

DEFAULT_PNBD = ParetoNBDParams(0.55, 10.6, 0.61, 11.7)
DEFAULT_GG = GGParams(6.25, 3.74, 15.44)
MODELS = ("pnbd_gg", "pnbd_gg_per_cohort", "clvae", "clvae_covariates")
SYNTHETIC_START = dt.date(2000, 1, 1)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def _align(pred, actual):
    if isinstance(pred, pd.Series) and isinstance(actual, pd.Series):
        extra = pred.index.difference(actual.index)
        missing = actual.index.difference(pred.index)
        if len(extra) or len(missing):
            offenders = list(extra[:5]) + list(missing[:5])
            raise AlignmentError(f"prediction/actual customer ids differ, e.g. {offenders}")
        actual = actual.reindex(pred.index)
        return pred.to_numpy(float), actual.to_numpy(float)
    p, a = np.asarray(pred, dtype=float), np.asarray(actual, dtype=float)
    if p.shape != a.shape:
        raise AlignmentError(f"prediction shape {p.shape} != actual shape {a.shape}")
    return p, a


def rmse(pred, actual):
    p, a = _align(pred, actual)
    return float(np.sqrt(np.mean((p - a) ** 2)))


def mae(pred, actual):
    p, a = _align(pred, actual)
    return float(np.mean(np.abs(p - a)))


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


def _acquisition_days(pattern, n, rng):
    if callable(pattern):
        return np.asarray(pattern(n, rng), dtype=float)
    if pattern == "uniform24":
        months = (SYNTHETIC_START.replace(year=SYNTHETIC_START.year + 2) - SYNTHETIC_START).days
        return rng.uniform(0.0, months, size=n)
    if pattern == "day0":
        return np.zeros(n)
    raise ValidationError(f"unknown acquisition pattern {pattern!r}")


def generate_synthetic(true_pnbd=DEFAULT_PNBD, true_gg=DEFAULT_GG, n=1000, window=208.0,
                       acquisition="uniform24", rng=None, lambda_mixture=None):
    """Simulate a customer base from the Pareto/NBD + Gamma-Gamma process.

    Parameters
    ----------
    window : float
        Observation window in weeks, starting at day 0.
    acquisition : {"uniform24", "day0"} or callable
        First-purchase day per customer; ``"uniform24"`` spreads them over the
        first 24 calendar months. A callable receives ``(n, rng)``.
    lambda_mixture : list of (weight, shape, rate), optional
        Replace the Gamma(r, alpha) purchase-rate mixing distribution with a
        finite mixture of Gammas.

    Returns
    -------
    log : TransactionLog
    truth : DataFrame
        Per-customer ``lam, mu, nu`` (weekly rates), acquisition day and
        lifetime end day.
    """
    rng = np.random.default_rng(rng)
    if lambda_mixture:
        w = np.array([c[0] for c in lambda_mixture], dtype=float)
        comp = rng.choice(len(w), size=n, p=w / w.sum())
        shapes = np.array([c[1] for c in lambda_mixture], dtype=float)[comp]
        rates = np.array([c[2] for c in lambda_mixture], dtype=float)[comp]
        lam = sample_gamma(shapes, rates, rng)
    else:
        lam = sample_gamma(true_pnbd.r, true_pnbd.alpha, rng, size=n)
    mu = sample_gamma(true_pnbd.s, true_pnbd.beta, rng, size=n)
    nu = sample_gamma(true_gg.q, true_gg.gamma, rng, size=n)
    start = _acquisition_days(acquisition, n, rng)
    end_day = window * DAYS_PER_WEEK
    if np.any(start >= end_day):
        raise ValidationError("acquisition falls outside the observation window")
    death = start + rng.exponential(1.0, size=n) / mu * DAYS_PER_WEEK

    ids, times = [], []
    width = len(str(n))
    for i in range(n):
        stop = min(death[i], end_day)
        t = [start[i]]
        clock = start[i]
        scale = DAYS_PER_WEEK / lam[i]
        while True:
            clock += rng.exponential(scale)
            if clock > stop:
                break
            t.append(clock)
        ids.extend([f"c{i:0{width}d}"] * len(t))
        times.extend(t)
    ids = np.array(ids)
    times = np.array(times)
    cust = np.searchsorted(np.unique(ids), ids)
    amounts = sample_gamma(true_gg.p, nu[cust], rng)
    frame = pd.DataFrame({"customer_id": ids, "time": times, "amount": amounts})
    truth = pd.DataFrame(
        {"lam": lam, "mu": mu, "nu": nu, "acquired": start, "death": death},
        index=pd.Index([f"c{i:0{width}d}" for i in range(n)], name="customer_id"),
    )
    return TransactionLog(frame, start_date=SYNTHETIC_START, end=end_day), truth


# --------------------------------------------------------------------------
# benchmark
# --------------------------------------------------------------------------


@dataclass
class BenchmarkReport:
    """RMSE/MAE per (model, horizon) plus the run's full configuration."""

    horizons: list
    rmse: dict = field(default_factory=dict)
    mae: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def table(self, metric="rmse"):
        values = getattr(self, metric)
        frame = pd.DataFrame({m: values[m] for m in values}).T
        frame.columns = [int(h) if float(h).is_integer() else h for h in self.horizons]
        frame.index.name = "model"
        return frame

    def to_dict(self):
        return {
            "horizons": list(self.horizons),
            "rmse": {m: list(v) for m, v in self.rmse.items()},
            "mae": {m: list(v) for m, v in self.mae.items()},
            "metadata": self.metadata,
        }

    def write(self, stem):
        """Write ``<stem>.csv`` (long format) and ``<stem>.json``."""
        rows = []
        for m in self.rmse:
            for h, r, a in zip(self.horizons, self.rmse[m], self.mae[m]):
                rows.append({"model": m, "horizon": h, "rmse": r, "mae": a})
        atomic_write_frame(pd.DataFrame(rows), f"{stem}.csv", index=False, float_format="%.17g")
        atomic_write_json(self.to_dict(), f"{stem}.json")


def log_fingerprint(log, calibration_end):
    cal = log.frame[log.frame["time"] <= calibration_end]
    digest = hashlib.sha256(pd.util.hash_pandas_object(cal, index=False).to_numpy().tobytes()).hexdigest()
    return {
        "customers": int(cal["customer_id"].nunique()),
        "calibration_transactions": int(len(cal)),
        "calibration_end": float(calibration_end),
        "calibration_sha256": digest,
    }


def _calibration_inputs(log, calibration_end, cohort_spec, with_covariates):
    """Summaries (and cohort covariates) from calibration data only."""
    cal_log = log.truncate(calibration_end)
    summaries = summarize_rfm(cal_log, calibration_end)
    if with_covariates:
        cov = build_cohort_covariates(cal_log, cohort_spec, customers=summaries["customer_id"])
        summaries = attach_covariate_frame(summaries, cov)
    return summaries


def run_benchmark(log, calibration_end, horizons=(52, 104, 156, 208), models=("pnbd_gg", "clvae"),
                  clvae_params=None, sim_params=None, cohort_spec=None, seed=50, oracle=False):
    """Fit each model on calibration data and score holdout revenue.

    ``clvae_params`` are keyword arguments for :class:`clvae.model.CLVAE`;
    ``sim_params`` for its ``predict``. ``oracle=True`` adds a row that
    predicts the realised revenue itself (test mode only).
    """
    from .model import CLVAE

    unknown = set(models) - set(MODELS)
    if unknown:
        raise ValidationError(f"unknown models {sorted(unknown)}; choose from {MODELS}")
    horizons = [float(h) for h in horizons]
    cohort_spec = cohort_spec or CohortSpec()
    clvae_params = dict(clvae_params or {})
    clvae_params.setdefault("random_state", seed)
    sim_params = dict(sim_params or {})

    needs_cov = any(m in ("pnbd_gg_per_cohort", "clvae_covariates") for m in models)
    plain = _calibration_inputs(log, calibration_end, cohort_spec, False)
    with_cov = _calibration_inputs(log, calibration_end, cohort_spec, True) if needs_cov else None
    actual = holdout_revenue(log, calibration_end, horizons, customers=plain["customer_id"])

    report = BenchmarkReport(horizons=horizons)
    report.metadata = {
        "fingerprint": log_fingerprint(log, calibration_end),
        "models": list(models),
        "seed": seed,
        "clvae_params": clvae_params,
        "sim_params": sim_params,
        "cohort_spec": asdict(cohort_spec),
    }
    fitted = {}
    for name in models:
        if name == "pnbd_gg":
            est = PNBDGG().fit(plain)
            pred = est.predict(plain, horizons)
        elif name == "pnbd_gg_per_cohort":
            est = CohortPNBDGG().fit(with_cov)
            pred = est.predict(with_cov, horizons)
        else:
            data = with_cov if name == "clvae_covariates" else plain
            est = CLVAE(**clvae_params).fit(data)
            pred = est.predict(data, horizons, **sim_params)
        fitted[name] = est
        _score(report, name, pred, actual, horizons)
    if oracle:
        _score(report, "oracle", actual.copy(), actual, horizons)
    report.fitted = fitted
    return report


def _score(report, name, pred, actual, horizons):
    pred = pred.copy()
    pred.index = pred.index.astype(str)
    report.rmse[name] = [rmse(pred[h], actual[h]) for h in horizons]
    report.mae[name] = [mae(pred[h], actual[h]) for h in horizons]


def assert_no_leakage(log, calibration_end, fit):
    """Refit on a log truncated at ``calibration_end`` and require identical output.

    ``fit`` maps a TransactionLog to a dict of arrays/floats.
    """
    full = fit(log)
    cut = fit(log.truncate(calibration_end))
    for key in full:
        if not np.array_equal(np.asarray(full[key]), np.asarray(cut[key])):
            raise LeakageError(f"{key!r} changes when post-calibration data are removed")
    return full
