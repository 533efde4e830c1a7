"""Special functions, log-space helpers and Gamma sampling.

All functions accept scalars or numpy arrays and broadcast in the usual way.
Scalar inputs give numpy scalar (float) outputs.
"""
from dataclasses import dataclass

import numpy as np
from scipy import special

from .exceptions import ConvergenceError, DomainError, GradientInstabilityError

__all__ = [
    "GammaParams",
    "ln_gamma",
    "digamma",
    "trigamma",
    "log_sum_exp",
    "gauss_2f1",
    "log_2f1_unit_shift",
    "sample_gamma",
    "gamma_quantile",
    "gamma_cdf",
    "gamma_reparam_gradient",
    "clamp_standard_gamma",
]

_SERIES_TOL = 1e-16
_SERIES_MAX_TERMS = 10_000
_CF_TOL = 1e-15
_CF_MAX_ITER = 100_000
_TINY = 1e-300
_POLYGAMMA_TERMS = 24
_DOWNSTEP_MAX_B = 8.0
_DOWNSTEP_MAX_AE = 0.25


@dataclass(frozen=True)
class GammaParams:
    """Shape/rate parametrisation of a Gamma distribution."""

    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise DomainError(f"Gamma parameters must be positive, got shape={self.shape}, rate={self.rate}")

    @property
    def mean(self):
        return self.shape / self.rate

    @property
    def variance(self):
        return self.shape / self.rate**2


def _positive(x, name):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise DomainError(f"{name} requires x > 0")
    return x


def ln_gamma(x):
    """Natural log of the Gamma function on x > 0."""
    return special.gammaln(_positive(x, "ln_gamma"))


def digamma(x):
    return special.digamma(_positive(x, "digamma"))


def trigamma(x):
    return special.polygamma(1, _positive(x, "trigamma"))


def log_sum_exp(a, b):
    """ln(e^a + e^b), with -inf acting as the identity element."""
    return np.logaddexp(a, b)


def gauss_2f1(a, b, c, z):
    """Gauss hypergeometric function 2F1(a, b; c; z) for real z < 1.

    Negative arguments are mapped into (0, 1) with the Pfaff transformation
    ``2F1(a,b;c;z) = (1-z)^(-b) 2F1(c-a, b; c; z/(z-1))`` before the power
    series is summed.

    Raises
    ------
    DomainError
        If ``c <= 0`` or ``z >= 1``.
    ConvergenceError
        If the series has not converged after 10,000 terms.
    """
    a, b, c, z = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, c, z)))
    out_shape = a.shape
    a, b, c, z = (np.atleast_1d(v).ravel().copy() for v in (a, b, c, z))
    if np.any(~(c > 0)):
        raise DomainError("gauss_2f1 requires c > 0")
    if np.any(~(z < 1)):
        raise DomainError("gauss_2f1 requires z < 1")

    prefactor = np.ones_like(z)
    neg = z < 0
    if np.any(neg):
        zn = z[neg]
        prefactor[neg] = (1.0 - zn) ** (-b[neg])
        a[neg] = c[neg] - a[neg]
        z[neg] = zn / (zn - 1.0)

    out = (_hyp2f1_series(a, b, c, z) * prefactor).reshape(out_shape)
    return out[()] if out.ndim == 0 else out


def _hyp2f1_series(a, b, c, z):
    total = np.ones_like(z)
    term = np.ones_like(z)
    active = np.flatnonzero(z != 0)
    n = 0
    while active.size:
        if n >= _SERIES_MAX_TERMS:
            raise ConvergenceError(
                f"2F1 series did not converge within {_SERIES_MAX_TERMS} terms "
                f"(worst z={z[active].max():.6g})"
            )
        ta = term[active] * (a[active] + n) * (b[active] + n) / ((c[active] + n) * (n + 1.0)) * z[active]
        term[active] = ta
        total[active] += ta
        n += 1
        done = np.abs(ta) < _SERIES_TOL * np.abs(total[active])
        active = active[~done]
    return total


def _nonzero(v):
    return np.where(np.abs(v) < _TINY, _TINY, v)


def log_2f1_unit_shift(a, b, z):
    """log 2F1(a, b; a + 1; z) for a > 0 and 0 <= z < 1.

    Uses ``2F1(a, b; a+1; z) = a z^-a B_z(a, 1-b)``. Away from z = 1, or
    for b >= 2, the incomplete beta comes from its continued fraction (modified
    Lentz), which needs tens of steps where the power series would need about
    1/(1-z) terms. For b < 2 close to z = 1 the fraction stalls, so B_z is
    expanded about t = 1 instead. Both paths stay in log space and cannot
    overflow.
    """
    a, b, z = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, z)))
    out_shape = a.shape
    a, b, z = (np.atleast_1d(v).ravel().copy() for v in (a, b, z))
    if np.any(~(a > 0)):
        raise DomainError("log_2f1_unit_shift requires a > 0")
    if np.any(~((z >= 0) & (z < 1))):
        raise DomainError("log_2f1_unit_shift requires 0 <= z < 1")

    out = np.empty_like(z)
    with np.errstate(divide="ignore"):
        near = (a + 1.0 - b > 0) & (
            ((b < 2.0) & (z > (a + 1.0) / (a + 3.0 - b)))
            | ((b < _DOWNSTEP_MAX_B) & ((a + 1.0) * (1.0 - z) < _DOWNSTEP_MAX_AE))
        )
    if np.any(near):
        out[near] = _log_2f1_near_one(a[near], b[near], z[near])
    if not np.all(near):
        far = ~near
        out[far] = _log_2f1_cf(a[far], b[far], z[far])
    out = out.reshape(out_shape)
    return out[()] if out.ndim == 0 else out


def _log_2f1_cf(a, b, z):
    q = 1.0 - b
    qab, qap, qam = a + q, a + 1.0, a - 1.0
    c = np.ones_like(z)
    d = 1.0 / _nonzero(1.0 - qab * z / qap)
    log_h = np.log(np.abs(d))
    sign = np.sign(d)
    active = np.arange(z.size)
    m = 0
    while active.size:
        m += 1
        if m > _CF_MAX_ITER:
            raise ConvergenceError(
                f"2F1 continued fraction did not converge within {_CF_MAX_ITER} steps (worst z={z[active].max():.6g})"
            )
        A, Z, m2 = a[active], z[active], 2.0 * m
        # even step
        num = m * (q[active] - m) * Z / ((qam[active] + m2) * (A + m2))
        dd = 1.0 / _nonzero(1.0 + num * d[active])
        cc = _nonzero(1.0 + num / c[active])
        step = dd * cc
        # odd step
        num = -(A + m) * (qab[active] + m) * Z / ((A + m2) * (qap[active] + m2))
        dd = 1.0 / _nonzero(1.0 + num * dd)
        cc = _nonzero(1.0 + num / cc)
        delta = dd * cc
        step = step * delta
        log_h[active] += np.log(np.abs(step))
        sign[active] *= np.sign(step)
        d[active], c[active] = dd, cc
        active = active[np.abs(delta - 1.0) >= _CF_TOL]
    if np.any(sign <= 0):
        raise ConvergenceError("2F1 continued fraction produced a non-positive value")
    return q * np.log1p(-z) + log_h


def _log_2f1_near_one(a, b, z):
    q = 1.0 - b
    eps = 1.0 - z
    log_eps = np.log(eps)
    steps = np.where(b >= 2.0, np.floor(b) - 1.0, 0.0)
    log_bz = _log_inc_beta_near_one(a, q + steps, eps, log_eps)
    # walk q back down with B_z(a, q) = z^a e^q / -q - (a + q) / -q B_z(a, q + 1)
    for j in range(int(steps.max()) - 1, -1, -1):
        idx = steps > j
        qq, A = q[idx] + j, a[idx]
        log_t1 = A * np.log1p(-eps[idx]) + qq * log_eps[idx] - np.log(-qq)
        apq = A + qq
        with np.errstate(divide="ignore"):
            log_ratio = np.log(np.abs(apq)) - np.log(-qq) + log_bz[idx] - log_t1
        if np.any((apq > 0) & (log_ratio >= 0)):
            raise ConvergenceError("2F1 expansion about z = 1 lost all precision")
        ratio = np.exp(log_ratio)
        log_bz[idx] = log_t1 + np.log1p(np.where(apq > 0, -ratio, ratio))
    return np.log(a) - a * np.log1p(-eps) + log_bz


def _beta_less_pole(a, q):
    # B(a, q) - 1/q = expm1(g)/q with g = log[Gamma(1+q) Gamma(a) / Gamma(a+q)];
    # it tends to digamma(1) - digamma(a) as q -> 0
    small = np.abs(q) < 0.1 * np.minimum(1.0, a)  # the series converges for |q| < a
    big = ~small
    g = np.zeros_like(q)
    g[big] = special.gammaln(1.0 + q[big]) - np.log(special.poch(a[big], q[big]))
    if np.any(small):
        qs, As = q[small], a[small]
        term, acc = np.ones_like(qs), np.zeros_like(qs)
        for n in range(1, _POLYGAMMA_TERMS + 1):
            term = term * qs / n
            acc += term * (special.polygamma(n - 1, 1.0) - special.polygamma(n - 1, As))
        g[small] = acc
    zero = q == 0
    return np.where(zero, special.digamma(1.0) - special.digamma(a), np.expm1(g) / np.where(zero, 1.0, q))


def _log_inc_beta_near_one(a, q, eps, log_eps):
    # log B_z(a, q) for q > -1 and z = 1 - e close to 1:
    # B_z(a, q) = [B(a, q) - 1/q] + (1 - e^q)/q - sum_{k>=1} (1-a)_k/k! e^(k+q)/(k+q).
    # Each piece stays finite as q -> 0. Near q = -1 the k = 1 term is paired with the pole of B(a, q).
    paired = q < -0.5
    zero = q == 0
    q_safe = np.where(zero, 1.0, q)
    head = np.where(zero, -log_eps, -np.expm1(q * log_eps) / q_safe)
    regular = _beta_less_pole(a, q)
    p = q + 1.0
    if np.any(paired):
        A, P, Q = a[paired], p[paired], q[paired]
        # B(a, q) - 1/q - (1-a)/p, regular at p = 0
        regular[paired] = ((A - 1.0) + (A - 1.0 + P) * _beta_less_pole(A, P)) / Q
        head[paired] += (1.0 - A) * -np.expm1(P * log_eps[paired]) / P
    tail = np.zeros_like(eps)
    coef = np.ones_like(eps)
    active = np.arange(eps.size)
    k = 0
    while active.size:
        k += 1
        if k > _CF_MAX_ITER:
            raise ConvergenceError("2F1 expansion about z = 1 did not converge")
        coef[active] *= (k - a[active]) / k * eps[active]
        step = np.where((k == 1) & paired[active], 0.0, coef[active] / (k + q[active]))
        tail[active] += step
        keep = (np.abs(step) > _CF_TOL * 1e-2 * np.abs(tail[active])) | ((k == 1) & paired[active])
        active = active[keep]
    bz = regular + head - np.exp(q * log_eps) * tail
    if np.any(~(bz > 0)):
        raise ConvergenceError("2F1 expansion about z = 1 lost all precision")
    return np.log(bz)


def gamma_cdf(x, shape, rate):
    """Regularised lower incomplete gamma P(shape, rate * x)."""
    return special.gammainc(shape, rate * np.asarray(x, dtype=float))


def gamma_quantile(u, shape, rate):
    """Inverse CDF of Gamma(shape, rate) at probabilities ``u``."""
    return special.gammaincinv(shape, u) / rate


def _standard_gamma_mt(shape, rng):
    """Marsaglia-Tsang squeeze sampler for Gamma(shape, 1), shape > 0."""
    shape = np.asarray(shape, dtype=float)
    flat = shape.ravel()
    boost = flat < 1.0
    a = np.where(boost, flat + 1.0, flat)
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(flat)
    pending = np.arange(flat.size)
    while pending.size:
        x = rng.standard_normal(pending.size)
        u = rng.random(pending.size)
        dp, cp = d[pending], c[pending]
        v = (1.0 + cp * x) ** 3
        ok = v > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            lv = np.log(np.where(ok, v, 1.0))
            squeeze = u < 1.0 - 0.0331 * x**4
            full = np.log(u) < 0.5 * x**2 + dp - dp * v + dp * lv
        accept = ok & (squeeze | full)
        out[pending[accept]] = dp[accept] * v[accept]
        pending = pending[~accept]
    if np.any(boost):
        idx = np.flatnonzero(boost)
        u = rng.random(idx.size)
        out[idx] = np.exp(np.log(out[idx]) + np.log(u) / flat[idx])
    return out.reshape(shape.shape)


def sample_gamma(shape, rate, rng, size=None):
    """Draw Gamma(shape, rate) variates.

    ``shape`` and ``rate`` broadcast against each other (and ``size`` when
    given). Shapes below one use the boosting identity
    Gamma(a) = Gamma(a + 1) * U**(1/a). The draw sequence is a deterministic
    function of the generator state.
    """
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if size is not None:
        shape = np.broadcast_to(shape, size)
    shape, rate = np.broadcast_arrays(shape, rate)
    _positive(shape, "sample_gamma shape")
    _positive(rate, "sample_gamma rate")
    draws = _standard_gamma_mt(shape, rng) / rate
    return draws[()] if draws.ndim == 0 else draws


def clamp_standard_gamma(u, shape):
    """Keep standardised draws where the Gamma CDF and density stay representable."""
    floor = np.maximum(1e-300, np.exp(-600.0 / np.asarray(shape, dtype=float)))
    return np.maximum(u, floor)


def gamma_reparam_gradient(shape, rate, sample):
    """Implicit reparameterisation gradients of a Gamma(shape, rate) draw.

    Returns ``(dz/dshape, dz/drate)``. The shape derivative is
    ``-(dF/dshape) / f(z)`` with F the CDF and f the density; dF/dshape is a
    central difference of the regularised incomplete gamma with step
    ``1e-4 * max(1, shape)`` (capped at shape/2), taken on the upper tail
    when P > 0.99. The rate derivative is the
    exact scaling result ``-z / rate``.
    """
    shape, rate, z = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (shape, rate, sample)))
    u = z * rate
    h = np.minimum(1e-4 * np.maximum(1.0, shape), 0.5 * shape)
    # deep in the upper tail, difference Q = 1 - P instead to avoid cancellation
    upper = special.gammainc(shape, u) > 0.99
    dF = np.empty_like(u)
    for tail, sign, mask in ((special.gammainc, 1.0, ~upper), (special.gammaincc, -1.0, upper)):
        a, x, hh = shape[mask], u[mask], h[mask]
        dF[mask] = sign * (tail(a + hh, x) - tail(a - hh, x)) / (2.0 * hh)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        log_pdf = (shape - 1.0) * np.log(u) - u - special.gammaln(shape)
        du = -dF * np.exp(-log_pdf)
    if np.any(~np.isfinite(du)):
        raise GradientInstabilityError("Gamma density underflow at sample; clamp draws away from 0")
    d_shape = du / rate
    d_rate = -z / rate
    if d_shape.ndim == 0:
        return d_shape[()], d_rate[()]
    return d_shape, d_rate
