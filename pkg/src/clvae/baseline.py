"""Classical Pareto/NBD and Gamma-Gamma maximum-likelihood models.

These supply the CLVAE prior (the fitted mixing distributions) and the
PNBD + GG revenue benchmark, optionally fitted separately per acquisition
cohort.
"""
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from scipy import optimize
from scipy.special import expit, gammaln
from sklearn.base import BaseEstimator

from ._io import atomic_write_json
from ._validation import check_horizons, check_is_fitted, check_summaries
from .exceptions import ConvergenceError, DegenerateDataError, NumericalError, ValidationError
from .numerics import log_2f1_unit_shift

logger = logging.getLogger(__name__)

_MAX_EVALS = 10_000
_SIMPLEX_TOL = 1e-8
# Gamma heterogeneity with shape above this is homogeneity for practical purposes
# (CV about 3%); beyond it the likelihood only creeps up along the shape/rate ridge.
_MAX_SHAPE = 1e3
_LOG_MAX_SHAPE = np.log(_MAX_SHAPE)


@dataclass(frozen=True)
class ParetoNBDParams:
    r: float
    alpha: float
    s: float
    beta: float

    def __post_init__(self):
        if not all(v > 0 for v in asdict(self).values()):
            raise ValidationError(f"Pareto/NBD parameters must be positive: {self}")


@dataclass(frozen=True)
class GGParams:
    p: float
    q: float
    gamma: float

    def __post_init__(self):
        if not all(v > 0 for v in asdict(self).values()):
            raise ValidationError(f"Gamma-Gamma parameters must be positive: {self}")


@dataclass(frozen=True)
class FitResult:
    params: object
    log_likelihood: float
    converged: bool
    n_evals: int


# --------------------------------------------------------------------------
# Pareto/NBD
# --------------------------------------------------------------------------


def _log_a0(r, alpha, s, beta, x, t_x, T):
    """log of the A0 integral term of the Pareto/NBD likelihood (t_x < T)."""
    a = r + s + x
    if alpha >= beta:
        b, m = s + 1.0, alpha
    else:
        b, m = r + x, beta
    d = abs(alpha - beta)
    log_f1 = log_2f1_unit_shift(a, b, d / (m + t_x)) - a * np.log(m + t_x)
    log_f2 = log_2f1_unit_shift(a, b, d / (m + T)) - a * np.log(m + T)
    with np.errstate(divide="ignore"):
        return log_f1 + np.log(-np.expm1(log_f2 - log_f1))


def _pnbd_terms(params, rfm):
    r, alpha, s, beta = params.r, params.alpha, params.s, params.beta
    x, t_x, T = rfm.x, rfm.t_x, rfm.T
    a1 = gammaln(r + x) - gammaln(r) + r * np.log(alpha) + s * np.log(beta)
    log_alive_term = -(r + x) * np.log(alpha + T) - s * np.log(beta + T)
    log_a0 = np.full_like(x, -np.inf)
    open_ = t_x < T
    if np.any(open_):
        log_a0[open_] = _log_a0(r, alpha, s, beta, x[open_], t_x[open_], T[open_])
    log_dead_term = np.log(s) - np.log(r + s + x) + log_a0
    return a1, log_alive_term, log_dead_term


def pnbd_individual_log_likelihood(params, summaries):
    """Per-customer marginal Pareto/NBD log-likelihood."""
    rfm = check_summaries(summaries, require_spend=False)
    a1, alive, dead = _pnbd_terms(params, rfm)
    ll = a1 + np.logaddexp(alive, dead)
    bad = np.flatnonzero(~np.isfinite(ll))
    if bad.size:
        raise NumericalError(f"non-finite Pareto/NBD log-likelihood for customer index {bad[0]}")
    return ll


def pnbd_log_likelihood(params, summaries):
    """Sum over customers of the heterogeneity-integrated Pareto/NBD log-likelihood."""
    return float(np.sort(pnbd_individual_log_likelihood(params, summaries)).sum())


def pnbd_p_alive(params, summaries):
    """P(customer still alive at T | x, t_x, T) under the classical model."""
    rfm = check_summaries(summaries, require_spend=False)
    _, alive, dead = _pnbd_terms(params, rfm)
    return expit(alive - dead)


def pnbd_expected_transactions(params, summaries, t):
    """Expected number of transactions in (T, T + t] given the history."""
    rfm = check_summaries(summaries, require_spend=False)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValidationError("horizon t must be non-negative")
    r, alpha, s, beta = params.r, params.alpha, params.s, params.beta
    palive = pnbd_p_alive(params, rfm)
    bT = beta + rfm.T
    log_ratio = np.log(bT) - np.log(bT + t)
    if abs(s - 1.0) < 1e-10:
        growth = -log_ratio
    else:
        growth = -np.expm1((s - 1.0) * log_ratio) / (s - 1.0)
    return palive * (r + rfm.x) * bT / (alpha + rfm.T) * growth


# --------------------------------------------------------------------------
# Gamma-Gamma
# --------------------------------------------------------------------------


def gg_individual_log_likelihood(params, summaries):
    """Per-customer marginal log density of z_bar given x >= 1."""
    rfm = check_summaries(summaries)
    if np.any(rfm.x < 1):
        raise ValidationError("the Gamma-Gamma likelihood is defined for repeaters (x >= 1) only")
    p, q, g = params.p, params.q, params.gamma
    px = p * rfm.x
    return (
        gammaln(px + q) - gammaln(px) - gammaln(q)
        + q * np.log(g) + (px - 1.0) * np.log(rfm.z_bar) + px * np.log(rfm.x)
        - (px + q) * np.log(g + rfm.x * rfm.z_bar)
    )


def gg_log_likelihood(params, summaries):
    return float(np.sort(gg_individual_log_likelihood(params, summaries)).sum())


def gg_expected_spend(params, summaries):
    """Posterior mean spend per transaction, p (gamma + x z_bar) / (p x + q - 1)."""
    rfm = check_summaries(summaries, require_spend=False)
    p, q, g = params.p, params.q, params.gamma
    if q <= 1:
        raise NumericalError(f"expected spend is infinite for q={q:.4g} <= 1")
    z = np.where(rfm.x > 0, rfm.z_bar, 0.0)
    return p * (g + rfm.x * z) / (p * rfm.x + q - 1.0)


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------


def _nelder_mead(objective, x0):
    evals = 0
    best = (np.inf, np.asarray(x0, float))

    def wrapped(theta):
        nonlocal evals, best
        evals += 1
        try:
            val = objective(theta)
        except (NumericalError, ConvergenceError, FloatingPointError, ValidationError):
            return np.inf
        if not np.isfinite(val):
            return np.inf
        if val < best[0]:
            best = (val, theta.copy())
        return val

    res = optimize.minimize(
        wrapped,
        x0,
        method="Nelder-Mead",
        options={"xatol": _SIMPLEX_TOL, "fatol": 1e-12, "maxfev": _MAX_EVALS, "maxiter": _MAX_EVALS},
    )
    converged = bool(res.success)
    theta = res.x if np.isfinite(res.fun) and res.fun <= best[0] else best[1]
    return theta, converged, evals


def _pnbd_init(rfm):
    rep = rfm.x > 0
    ipt = float(np.mean(rfm.t_x[rep] / rfm.x[rep])) if np.any(rep) else 1.0
    return ParetoNBDParams(1.0, max(ipt, 1e-3), 1.0, float(np.mean(rfm.T)))


def fit_pnbd(summaries, init=None):
    """Maximum-likelihood Pareto/NBD fit by Nelder-Mead on log-parameters."""
    rfm = check_summaries(summaries, require_spend=False)
    if len(rfm) < 2:
        raise DegenerateDataError("need at least 2 customers to fit the Pareto/NBD model")
    if not np.any(rfm.x > 0):
        raise DegenerateDataError("all customers are zero-repeaters; Pareto/NBD is not identified")
    init = init or _pnbd_init(rfm)
    n = len(rfm)

    def nll(theta):
        if theta[0] > _LOG_MAX_SHAPE or theta[2] > _LOG_MAX_SHAPE:
            return np.inf
        params = ParetoNBDParams(*np.exp(theta))
        ll = pnbd_individual_log_likelihood(params, rfm)
        return -np.sort(ll).sum() / n

    theta, converged, evals = _nelder_mead(nll, np.log([init.r, init.alpha, init.s, init.beta]))
    params = ParetoNBDParams(*map(float, np.exp(theta)))
    if max(params.r, params.s) > 0.99 * _MAX_SHAPE:
        logger.warning("Pareto/NBD shape reached the cap %.0f (r=%.4g, s=%.4g): heterogeneity is not identified",
                       _MAX_SHAPE, params.r, params.s)
    return FitResult(params, pnbd_log_likelihood(params, rfm), converged, evals)


def _repeaters(rfm):
    rep = rfm.x >= 1
    if not np.any(rep):
        raise DegenerateDataError("no repeat customers; the Gamma-Gamma model needs x >= 1")
    return rfm.subset(rep)


def fit_gg(summaries, init=None):
    """Maximum-likelihood Gamma-Gamma fit on repeat customers."""
    rfm = _repeaters(check_summaries(summaries))
    init = init or GGParams(1.0, 1.0, float(np.mean(rfm.z_bar)))
    n = len(rfm)

    def nll(theta):
        ll = gg_individual_log_likelihood(GGParams(*np.exp(theta)), rfm)
        return -np.sort(ll).sum() / n

    theta, converged, evals = _nelder_mead(nll, np.log([init.p, init.q, init.gamma]))
    params = GGParams(*map(float, np.exp(theta)))
    if params.p <= 1:
        logger.warning("fitted Gamma-Gamma shape p=%.4g <= 1", params.p)
    return FitResult(params, gg_log_likelihood(params, rfm), converged, evals)


@dataclass(frozen=True)
class CohortFit:
    pnbd: FitResult
    gg: FitResult
    fallback: bool


def fit_per_cohort(summaries, labels, pooled=None):
    """Independent PNBD + GG fits per cohort label.

    Cohorts with fewer than two customers or no repeater use the pooled fit
    and are flagged ``fallback=True``.
    """
    rfm = check_summaries(summaries)
    labels = np.asarray(labels)
    if labels.shape != (len(rfm),):
        raise ValidationError("one cohort label per customer is required")
    if pooled is None:
        pooled = (fit_pnbd(rfm), fit_gg(rfm))
    fits = {}
    for label in sorted(set(labels.tolist())):
        sub = rfm.subset(labels == label)
        if len(sub) < 2 or not np.any(sub.x > 0):
            fits[label] = CohortFit(pooled[0], pooled[1], True)
            continue
        fits[label] = CohortFit(fit_pnbd(sub), fit_gg(sub), False)
    return fits


# --------------------------------------------------------------------------
# serialisation
# --------------------------------------------------------------------------


def params_document(pnbd, gg):
    """Flat key-value record of a joint PNBD + GG fit."""
    return {
        **asdict(pnbd.params),
        **asdict(gg.params),
        "log_likelihood": pnbd.log_likelihood + gg.log_likelihood,
        "converged": bool(pnbd.converged and gg.converged),
    }


def write_params(path, pnbd, gg, extra=None):
    doc = params_document(pnbd, gg)
    if extra:
        doc["config"] = extra
    atomic_write_json(doc, path)


def read_params(path):
    with open(path) as fh:
        doc = json.load(fh)
    pnbd = ParetoNBDParams(doc["r"], doc["alpha"], doc["s"], doc["beta"])
    gg = GGParams(doc["p"], doc["q"], doc["gamma"])
    return pnbd, gg, doc


# --------------------------------------------------------------------------
# estimators
# --------------------------------------------------------------------------


class ParetoNBDFitter(BaseEstimator):
    """Pareto/NBD transaction/attrition model.

    Attributes set by :meth:`fit`: ``params_``, ``log_likelihood_``,
    ``converged_``.
    """

    def __init__(self, init=None):
        self.init = init

    def fit(self, X, y=None):
        res = fit_pnbd(X, init=self.init)
        self.result_ = res
        self.params_ = res.params
        self.log_likelihood_ = res.log_likelihood
        self.converged_ = res.converged
        return self

    def score(self, X, y=None):
        check_is_fitted(self, "params_")
        return float(np.mean(pnbd_individual_log_likelihood(self.params_, X)))

    def p_alive(self, X):
        check_is_fitted(self, "params_")
        return pnbd_p_alive(self.params_, X)

    def expected_transactions(self, X, t):
        check_is_fitted(self, "params_")
        return pnbd_expected_transactions(self.params_, X, t)


class GammaGammaFitter(BaseEstimator):
    """Gamma-Gamma spend model, fitted on repeat customers."""

    def __init__(self, init=None):
        self.init = init

    def fit(self, X, y=None):
        res = fit_gg(X, init=self.init)
        self.result_ = res
        self.params_ = res.params
        self.log_likelihood_ = res.log_likelihood
        self.converged_ = res.converged
        return self

    def score(self, X, y=None):
        check_is_fitted(self, "params_")
        rfm = _repeaters(check_summaries(X))
        return float(np.mean(gg_individual_log_likelihood(self.params_, rfm)))

    def expected_spend(self, X):
        check_is_fitted(self, "params_")
        return gg_expected_spend(self.params_, X)


def _revenue_frame(rfm, horizons, fn):
    data = {h: fn(h) for h in horizons}
    return pd.DataFrame(data, index=pd.Index(rfm.ids, name="customer_id"))


class PNBDGG(BaseEstimator):
    """PNBD + GG revenue forecaster: expected transactions times expected spend."""

    def fit(self, X, y=None):
        rfm = check_summaries(X)
        self.pnbd_ = ParetoNBDFitter().fit(rfm)
        self.gg_ = GammaGammaFitter().fit(rfm)
        return self

    def predict(self, X, horizons=(52, 104, 156, 208)):
        """Expected cumulative revenue per customer (rows) and horizon (columns)."""
        check_is_fitted(self, "pnbd_")
        rfm = check_summaries(X)
        h = check_horizons(horizons)
        spend = self.gg_.expected_spend(rfm)
        return _revenue_frame(rfm, h, lambda t: self.pnbd_.expected_transactions(rfm, t) * spend)


class CohortPNBDGG(BaseEstimator):
    """Separate PNBD + GG fits per acquisition cohort.

    Cohort membership is read from the one-hot ``cov_*`` columns.
    """

    def fit(self, X, y=None):
        rfm = check_summaries(X)
        if rfm.n_covariates == 0:
            raise ValidationError("cohort fitting needs one-hot cohort covariates")
        labels = np.argmax(rfm.covariates, axis=1)
        self.pooled_ = PNBDGG().fit(rfm)
        pooled = (self.pooled_.pnbd_.result_, self.pooled_.gg_.result_)
        self.cohort_fits_ = fit_per_cohort(rfm, labels, pooled=pooled)
        return self

    def predict(self, X, horizons=(52, 104, 156, 208)):
        check_is_fitted(self, "cohort_fits_")
        rfm = check_summaries(X)
        h = check_horizons(horizons)
        labels = np.argmax(rfm.covariates, axis=1)
        out = np.zeros((len(rfm), h.size))
        for i, label in enumerate(np.unique(labels)):
            idx = np.flatnonzero(labels == label)
            sub = rfm.subset(idx)
            fit = self.cohort_fits_.get(int(label))
            pnbd, gg = (fit.pnbd.params, fit.gg.params) if fit else (self.pooled_.pnbd_.params_, self.pooled_.gg_.params_)
            spend = gg_expected_spend(gg, sub)
            for k, t in enumerate(h):
                out[idx, k] = pnbd_expected_transactions(pnbd, sub, t) * spend
        return pd.DataFrame(out, index=pd.Index(rfm.ids, name="customer_id"), columns=list(h))
