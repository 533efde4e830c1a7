"""Monte Carlo forecasts of future purchases and spend.

A *rate source* supplies per-draw ``(Lambda, M, N)`` triples for each
customer; :func:`simulate_futures` turns them into purchase counts and spend
over nested horizons after the calibration end. Three sources exist: fixed
rates (:class:`FixedRates`), the classical Pareto/NBD + GG posterior
(:class:`ClassicalPosterior`) and a fitted :class:`clvae.model.CLVAE`.

Every customer owns a random stream keyed by the master seed and a hash of
its id, so results do not depend on row order or chunking.
"""
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from ._io import atomic_write_frame
from ._validation import check_horizons, check_summaries
from .exceptions import ConfigError, ValidationError
from .numerics import sample_gamma

logger = logging.getLogger(__name__)

DEFAULT_HORIZONS = (52.0, 104.0, 156.0, 208.0)
_BLOCK = 64


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings. ``n_draws`` is L, the number of futures per customer."""

    horizons: tuple = DEFAULT_HORIZONS
    n_draws: int = 500
    seed: int = 50
    keep_draws: bool = False
    chunk_size: int = 256

    def __post_init__(self):
        if int(self.n_draws) < 1:
            raise ConfigError(f"n_draws must be >= 1, got {self.n_draws}")
        if int(self.chunk_size) < 1:
            raise ConfigError("chunk_size must be >= 1")
        object.__setattr__(self, "horizons", tuple(float(h) for h in check_horizons(self.horizons)))


@dataclass
class PredictionResult:
    customer_ids: np.ndarray
    horizons: np.ndarray
    expected_transactions: np.ndarray
    expected_revenue: np.ndarray
    p_alive: np.ndarray
    overflow: np.ndarray
    config: SimConfig
    draws_transactions: np.ndarray = field(default=None, repr=False)
    draws_revenue: np.ndarray = field(default=None, repr=False)

    def revenue_frame(self):
        """Expected cumulative revenue, customers by horizons."""
        return pd.DataFrame(self.expected_revenue, index=pd.Index(self.customer_ids, name="customer_id"),
                            columns=list(self.horizons))

    def transactions_frame(self):
        return pd.DataFrame(self.expected_transactions, index=pd.Index(self.customer_ids, name="customer_id"),
                            columns=list(self.horizons))


# --------------------------------------------------------------------------
# core simulation
# --------------------------------------------------------------------------


def p_alive_individual(Lambda, M, t_x, T):
    """P(still active at T | rates, last purchase at t_x).

    ``1 / (1 + M/(Lambda+M) * (exp((Lambda+M)(T-t_x)) - 1))``, evaluated in
    log space so large exponents do not overflow.
    """
    Lambda, M, t_x, T = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (Lambda, M, t_x, T)))
    if np.any(t_x > T):
        raise ValidationError("t_x must not exceed T")
    d = (Lambda + M) * (T - t_x)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        log_em1 = np.where(d > 30.0, d + np.log1p(-np.exp(-d)), np.log(np.expm1(d)))
        log_term = np.log(M) - np.log(Lambda + M) + log_em1
    out = expit(-log_term)
    return out[()] if out.ndim == 0 else out


def customer_rng(seed, customer_id):
    """Generator private to one customer under a master seed."""
    digest = hashlib.sha256(str(customer_id).encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))


def simulate_customer(Lambda, M, N, p_spend, t_x, T, horizons, rng):
    """Simulate L futures of one customer.

    ``Lambda, M, N`` are length-L arrays of decoded rates (one per draw).
    Returns ``(counts, spend, p_alive, overflow)`` with counts and spend of
    shape (L, K): cumulative purchases and revenue in ``(T, T + t_k]``.
    """
    Lambda, M, N = (np.asarray(a, dtype=float) for a in (Lambda, M, N))
    horizons = np.asarray(horizons, dtype=float)
    L, K = Lambda.size, horizons.size
    pa = p_alive_individual(Lambda, M, t_x, T)
    alive = rng.random(L) < pa
    # memorylessness: remaining lifetime past T is Exp(M) for a live customer
    remaining = np.where(alive, rng.exponential(1.0, L) / M, 0.0)
    t_max = horizons[-1]
    stop = np.minimum(remaining, t_max)
    counts = np.zeros((L, K), dtype=np.int64)
    overflow = False

    act = np.flatnonzero(stop > 0)
    if act.size:
        lam = Lambda[act]
        limit = np.minimum(horizons[None, :], stop[act, None])
        lt = lam * t_max
        cap = np.floor(lt + 10.0 * np.sqrt(lt) + 50.0)
        clock = np.zeros(act.size)
        done = np.zeros(act.size)
        sub = np.zeros((act.size, K), dtype=np.int64)
        pending = np.arange(act.size)
        while pending.size:
            gaps = rng.exponential(1.0, (pending.size, _BLOCK)) / lam[pending, None]
            times = clock[pending, None] + np.cumsum(gaps, axis=1)
            index = done[pending, None] + np.arange(1, _BLOCK + 1)
            valid = index <= cap[pending, None]
            for k in range(K):
                sub[pending, k] += np.count_nonzero(valid & (times <= limit[pending, k, None]), axis=1)
            clock[pending] = times[:, -1]
            done[pending] += _BLOCK
            running = clock[pending] <= limit[pending, -1]
            capped = running & (done[pending] >= cap[pending])
            overflow = overflow or bool(capped.any())
            pending = pending[running & ~capped]
        counts[act] = sub

    increments = np.diff(counts, axis=1, prepend=0)
    bought = increments > 0
    shape = np.where(bought, p_spend * increments, 1.0)
    rate = np.broadcast_to(N[:, None], shape.shape)
    spend = np.cumsum(np.where(bought, sample_gamma(shape, rate, rng), 0.0), axis=1)
    return counts, spend, pa, overflow


def simulate_futures(source, summaries, config=None):
    """Run the simulation for every customer in ``summaries``.

    ``source`` is any object with a ``p_spend`` attribute and a
    ``draw_rates(rfm, rows, n, rngs)`` method returning three arrays of
    shape ``(len(rows), n)``.
    """
    config = config or SimConfig()
    rfm = check_summaries(summaries, require_spend=False)
    horizons = np.asarray(config.horizons, dtype=float)
    n, L, K = len(rfm), int(config.n_draws), horizons.size
    e_n = np.zeros((n, K))
    e_s = np.zeros((n, K))
    palive = np.zeros(n)
    overflow = np.zeros(n, dtype=bool)
    keep = config.keep_draws
    d_n = np.zeros((n, L, K), dtype=np.int64) if keep else None
    d_s = np.zeros((n, L, K)) if keep else None

    for start in range(0, n, config.chunk_size):
        rows = np.arange(start, min(n, start + config.chunk_size))
        rngs = [customer_rng(config.seed, rfm.ids[i]) for i in rows]
        Lam, M, N = source.draw_rates(rfm, rows, L, rngs)
        for j, i in enumerate(rows):
            counts, spend, pa, flag = simulate_customer(
                Lam[j], M[j], N[j], source.p_spend, rfm.t_x[i], rfm.T[i], horizons, rngs[j]
            )
            e_n[i] = counts.mean(axis=0)
            e_s[i] = spend.mean(axis=0)
            palive[i] = pa.mean()
            overflow[i] = flag
            if keep:
                d_n[i] = counts
                d_s[i] = spend
    if overflow.any():
        logger.warning("event cap reached for %d customers; their counts are truncated", int(overflow.sum()))
    return PredictionResult(rfm.ids.copy(), horizons, e_n, e_s, palive, overflow, config, d_n, d_s)


# --------------------------------------------------------------------------
# rate sources
# --------------------------------------------------------------------------


class FixedRates:
    """Known rates, identical for every draw (scalars or one value per customer)."""

    def __init__(self, Lambda, M, N, p_spend):
        self.Lambda, self.M, self.N = (np.asarray(a, dtype=float) for a in (Lambda, M, N))
        self.p_spend = float(p_spend)

    def draw_rates(self, rfm, rows, n, rngs):
        out = []
        for a in (self.Lambda, self.M, self.N):
            per_row = a[rows] if a.ndim else np.full(len(rows), float(a))
            out.append(np.repeat(per_row[:, None], n, axis=1))
        return tuple(out)


def pnbd_posterior_draws(params, x, t_x, T, n, rng):
    """Exact draws of (lambda, mu) from the individual Pareto/NBD posterior.

    Rejection sampler: propose lambda ~ Gamma(r + x, alpha + t_x) and
    mu ~ Gamma(s, beta + t_x), accept with probability
    ``(mu + lambda * exp(-(lambda + mu)(T - t_x))) / (lambda + mu)``.
    """
    lam_out, mu_out = [], []
    need = n
    while need > 0:
        m = max(2 * need, 64)
        lam = sample_gamma(params.r + x, params.alpha + t_x, rng, size=m)
        mu = sample_gamma(params.s, params.beta + t_x, rng, size=m)
        accept = (mu + lam * np.exp(-(lam + mu) * (T - t_x))) / (lam + mu)
        keep = rng.random(m) < accept
        lam_out.append(lam[keep][:need])
        mu_out.append(mu[keep][:need])
        need -= lam_out[-1].size
    return np.concatenate(lam_out), np.concatenate(mu_out)


class ClassicalPosterior:
    """Latent draws from the classical posterior, passed through unchanged."""

    def __init__(self, pnbd, gg):
        self.pnbd, self.gg = pnbd, gg
        self.p_spend = gg.p

    def draw_rates(self, rfm, rows, n, rngs):
        out = np.empty((3, len(rows), n))
        for j, i in enumerate(rows):
            x, t_x, T = rfm.x[i], rfm.t_x[i], rfm.T[i]
            lam, mu = pnbd_posterior_draws(self.pnbd, x, t_x, T, n, rngs[j])
            z = rfm.z_bar[i] if x > 0 else 0.0
            nu = sample_gamma(self.gg.q + self.gg.p * x, self.gg.gamma + x * z, rngs[j], size=n)
            out[:, j] = lam, mu, nu
        return out[0], out[1], out[2]


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def _tag(h):
    return f"{h:g}"


def expected_revenue_report(result, quantiles=None):
    """Per-customer table: ``p_alive`` then ``E_N_<h>, E_S_<h>`` per horizon.

    With ``quantiles`` (and draws retained) adds ``S_q<q>_<h>`` columns.
    """
    cols = {"p_alive": result.p_alive}
    for k, h in enumerate(result.horizons):
        cols[f"E_N_{_tag(h)}"] = result.expected_transactions[:, k]
        cols[f"E_S_{_tag(h)}"] = result.expected_revenue[:, k]
    if quantiles:
        if result.draws_revenue is None:
            raise ValidationError("quantile columns need a result simulated with keep_draws=True")
        for q in quantiles:
            qs = np.quantile(result.draws_revenue, q, axis=1)
            for k, h in enumerate(result.horizons):
                cols[f"S_q{q:g}_{_tag(h)}"] = qs[:, k]
    return pd.DataFrame(cols, index=pd.Index(result.customer_ids, name="customer_id"))


def write_report(result, path, quantiles=None):
    atomic_write_frame(expected_revenue_report(result, quantiles), path, float_format="%.17g")


def read_report(path):
    return pd.read_csv(path, dtype={"customer_id": str}).set_index("customer_id")


def write_draws(result, path):
    """Long table ``customer_id, draw, horizon, N, S`` of every retained draw."""
    if result.draws_transactions is None:
        raise ValidationError("no draws retained; simulate with keep_draws=True")
    n, L, K = result.draws_transactions.shape
    frame = pd.DataFrame(
        {
            "customer_id": np.repeat(result.customer_ids, L * K),
            "draw": np.tile(np.repeat(np.arange(L), K), n),
            "horizon": np.tile(result.horizons, n * L),
            "N": result.draws_transactions.ravel(),
            "S": result.draws_revenue.ravel(),
        }
    )
    atomic_write_frame(frame, path, index=False, float_format="%.17g")
