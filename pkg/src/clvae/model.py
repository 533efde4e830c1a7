"""CLVAE: a variational autoencoder with a Pareto/NBD + Gamma-Gamma decoder likelihood.

The encoder maps a customer's RFM summary (and optional covariates) to the
six parameters of a product of Gamma posteriors over the latent rates
``(lambda, mu, nu)``. Latent draws pass through the decoder network to the
rates ``(Lambda, M, N)`` that enter the conditional likelihood of the
observed summary. Training maximises the evidence lower bound with Adam.

Network layout
--------------
Encoder: inputs -> 64 ReLU -> 32 ReLU -> 6, then ``scale * softplus``. The
per-output scales are the prior parameters times ``e**5`` and the output
biases start at ``softplus_inverse(e**-5)``, so the initial posterior equals
the prior.

Decoder: standardised log-latents (3) -> 32 ReLU -> 64 ReLU -> 3 outputs
``g``. With ``decoder_skip`` (default) the rates are
``softplus(softplus_inverse(z) + g)``: a residual around the identity map,
with output weights starting at zero so the untrained model is the classical
one. Without it the rates are ``softplus(g)`` with biases initialised at the
prior means.
"""
import copy
import logging
import time
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from scipy import special
from sklearn.base import BaseEstimator

from . import grad
from ._validation import check_horizons, check_is_fitted, check_summaries
from .baseline import fit_gg, fit_pnbd
from .exceptions import ConfigError, NumericalError, ShapeError, ValidationError
from .grad import Value
from .numerics import GammaParams, sample_gamma
from .predict import SimConfig, simulate_futures

logger = logging.getLogger(__name__)

POSTERIOR_FIELDS = ("r", "alpha", "s", "beta", "q", "gamma")
N_BASE_FEATURES = 4
_HEAD_LOG_SCALE = 5.0
# keeps softplus outputs strictly positive when the pre-activation underflows
_FLOOR = 1e-12


# --------------------------------------------------------------------------
# configuration and parameter containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PriorParams:
    """Fixed Gamma priors on (lambda, mu, nu) and the spend shape p."""

    lambda_prior: GammaParams
    mu_prior: GammaParams
    nu_prior: GammaParams
    p_spend: float

    def __post_init__(self):
        if not self.p_spend > 0:
            raise ValidationError("p_spend must be positive")

    @classmethod
    def from_baseline(cls, pnbd, gg):
        """Prior from fitted classical models: (r, alpha), (s, beta), (q, gamma) and p."""
        return cls(GammaParams(pnbd.r, pnbd.alpha), GammaParams(pnbd.s, pnbd.beta),
                   GammaParams(gg.q, gg.gamma), float(gg.p))

    @property
    def components(self):
        return (self.lambda_prior, self.mu_prior, self.nu_prior)

    def vector(self):
        """Prior parameters in encoder-output order (r, alpha, s, beta, q, gamma)."""
        return np.array([v for g in self.components for v in (g.shape, g.rate)], dtype=float)

    def to_dict(self):
        return {
            "lambda": [self.lambda_prior.shape, self.lambda_prior.rate],
            "mu": [self.mu_prior.shape, self.mu_prior.rate],
            "nu": [self.nu_prior.shape, self.nu_prior.rate],
            "p_spend": self.p_spend,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(GammaParams(*doc["lambda"]), GammaParams(*doc["mu"]), GammaParams(*doc["nu"]),
                   float(doc["p_spend"]))


@dataclass(frozen=True)
class TrainConfig:
    encoder_widths: tuple = (64, 32)
    decoder_widths: tuple = (32, 64)
    latent_dim: int = 3
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 1000
    mc_samples: int = 10
    patience: int = 100
    seed: int = 50
    validation_fraction: float = 0.1
    normalize: bool = True
    decoder_skip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        if self.latent_dim != 3:
            raise ConfigError("the latent space is (lambda, mu, nu); latent_dim must be 3")
        if not self.encoder_widths or not self.decoder_widths or min(self.encoder_widths + self.decoder_widths) < 1:
            raise ConfigError("layer widths must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        for name in ("batch_size", "max_epochs", "mc_samples", "patience"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 < self.validation_fraction < 0.5:
            raise ConfigError("validation_fraction must lie in (0, 0.5)")

    def to_dict(self):
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["decoder_widths"] = list(self.decoder_widths)
        return d


@dataclass
class GammaTriplePosterior:
    """Per-customer Gamma posterior parameters (Values while training, arrays otherwise)."""

    r: object
    alpha: object
    s: object
    beta: object
    q: object
    gamma: object

    def pairs(self):
        return ((self.r, self.alpha), (self.s, self.beta), (self.q, self.gamma))

    def numpy(self):
        return GammaTriplePosterior(*(_data(getattr(self, f)) for f in POSTERIOR_FIELDS))


@dataclass
class LatentTriple:
    lam: object
    mu: object
    nu: object


@dataclass
class DecodedRates:
    Lambda: object
    M: object
    N: object


def _data(v):
    return v.data if isinstance(v, Value) else np.asarray(v, dtype=float)


# --------------------------------------------------------------------------
# input features
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Normalization:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rfm, enabled=True):
        raw = base_features(rfm)
        if not enabled:
            return cls(np.zeros(N_BASE_FEATURES), np.ones(N_BASE_FEATURES))
        std = raw.std(axis=0)
        return cls(raw.mean(axis=0), np.where(std > 0, std, 1.0))

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.asarray(doc["mean"], float), np.asarray(doc["std"], float))


def base_features(rfm):
    """(ln(1+x), ln(1+t_x), ln(1+T), ln z_bar) per customer."""
    return np.column_stack([np.log1p(rfm.x), np.log1p(rfm.t_x), np.log1p(rfm.T), np.log(rfm.z_bar)])


def encoder_inputs(rfm, norm):
    return np.hstack([(base_features(rfm) - norm.mean) / norm.std, rfm.covariates])


def attach_covariates(summaries, covariates):
    """Add ``cov_1..cov_p`` columns to a summaries frame (row-aligned).

    ``covariates`` is a 2-D array or DataFrame with one row per customer.
    Existing ``cov_*`` columns are replaced.
    """
    cov = np.asarray(covariates, dtype=float)
    if cov.ndim == 1 and cov.size == 0:
        cov = cov.reshape(len(summaries), 0)
    if cov.ndim != 2 or cov.shape[0] != len(summaries):
        raise ShapeError(f"need one covariate row per customer: {len(summaries)} summaries, covariates {cov.shape}")
    out = summaries.drop(columns=[c for c in summaries.columns if str(c).startswith("cov_")]).copy()
    for j in range(cov.shape[1]):
        out[f"cov_{j + 1}"] = cov[:, j]
    return out


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------


def _softplus_shift(z, g):
    """softplus(softplus_inverse(z) + g), differentiable in z and g."""
    z, g = grad._lift(z), grad._lift(g)
    a = grad.softplus_inverse(z.data)
    pre = a + g.data
    out = np.logaddexp(0.0, pre)

    def bw(up):
        g._accumulate(up * special.expit(pre))
        z._accumulate(up * np.exp(special.log_expit(pre) - special.log_expit(a)))

    return Value(out, (z, g), bw)


class CLVAENetwork:
    """Encoder and decoder weights plus the fixed prior-derived constants."""

    def __init__(self, n_inputs, prior, config, rng=None):
        self.n_inputs = int(n_inputs)
        self.prior = prior
        self.config = config
        self.head_scale = prior.vector() * np.exp(_HEAD_LOG_SCALE)
        shapes = np.array([g.shape for g in prior.components])
        rates = np.array([g.rate for g in prior.components])
        self.latent_loc = special.digamma(shapes) - np.log(rates)
        self.latent_scale = np.sqrt(special.polygamma(1, shapes))
        self.params = {}
        if rng is not None:
            self._initialise(rng)

    # layout ------------------------------------------------------------

    def layer_shapes(self):
        enc = (self.n_inputs,) + self.config.encoder_widths + (6,)
        dec = (3,) + self.config.decoder_widths + (3,)
        out = []
        for prefix, widths in (("enc", enc), ("dec", dec)):
            for k in range(len(widths) - 1):
                out.append((f"{prefix}{k}", widths[k], widths[k + 1]))
        return out

    def _initialise(self, rng):
        n_enc = len(self.config.encoder_widths)
        n_dec = len(self.config.decoder_widths)
        for name, fan_in, fan_out in self.layer_shapes():
            last = name in (f"enc{n_enc}", f"dec{n_dec}")
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, (fan_in, fan_out))
            b = np.zeros(fan_out)
            if name.startswith("enc") and last:
                w[:] = 0.0
                b[:] = grad.softplus_inverse(np.exp(-_HEAD_LOG_SCALE))
            elif last and self.config.decoder_skip:
                w[:] = 0.0
            elif last:
                b[:] = grad.softplus_inverse(np.array([g.mean for g in self.prior.components]))
            self.params[f"{name}.W"] = grad.parameter(w, f"{name}.W")
            self.params[f"{name}.b"] = grad.parameter(b, f"{name}.b")

    def parameters(self):
        return list(self.params.values())

    def state(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, arrays):
        expected = {f"{n}.{t}" for n, _, _ in self.layer_shapes() for t in "Wb"}
        if set(arrays) != expected:
            raise ShapeError(f"checkpoint arrays {sorted(arrays)} do not match the network layout")
        for name, fan_in, fan_out in self.layer_shapes():
            w, b = np.asarray(arrays[f"{name}.W"], float), np.asarray(arrays[f"{name}.b"], float)
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ShapeError(f"layer {name}: stored shapes {w.shape}, {b.shape}")
            self.params[f"{name}.W"] = grad.parameter(w.copy(), f"{name}.W")
            self.params[f"{name}.b"] = grad.parameter(b.copy(), f"{name}.b")

    def _mlp(self, prefix, h, n_layers):
        for k in range(n_layers):
            h = grad.affine(h, self.params[f"{prefix}{k}.W"], self.params[f"{prefix}{k}.b"])
            if k < n_layers - 1:
                h = grad.relu(h)
        return h

    # forward maps --------------------------------------------------------

    def encode(self, inputs):
        inputs = grad._lift(inputs)
        if inputs.data.ndim != 2 or inputs.shape[1] != self.n_inputs:
            raise ShapeError(f"encoder expects {self.n_inputs} input columns, got shape {inputs.shape}")
        pre = self._mlp("enc", inputs, len(self.config.encoder_widths) + 1)
        out = (grad.softplus(pre) + _FLOOR) * self.head_scale
        return GammaTriplePosterior(*(out[:, j] for j in range(6)))

    def decode(self, latents):
        zs = (grad._lift(latents.lam), grad._lift(latents.mu), grad._lift(latents.nu))
        shape = zs[0].shape
        cols = [((grad.log(z) - self.latent_loc[k]) * (1.0 / self.latent_scale[k])).reshape(-1, 1)
                for k, z in enumerate(zs)]
        g = self._mlp("dec", grad.concatenate(cols, axis=1), len(self.config.decoder_widths) + 1)
        rates = []
        for k, z in enumerate(zs):
            gk = g[:, k].reshape(*shape)
            rate = _softplus_shift(z, gk) if self.config.decoder_skip else grad.softplus(gk)
            rates.append(rate + _FLOOR)
        return DecodedRates(*rates)


def encode(network, inputs):
    return network.encode(inputs)


def decode(network, latents):
    return network.decode(latents)


def sample_posterior(posterior, n, rng=None, uniforms=None):
    """``n`` reparameterised latent draws per customer, shape (n, batch).

    ``uniforms`` (a triple of (n, batch) arrays in (0, 1)) replaces the
    random stream with fixed inverse-CDF draws.
    """
    if n < 1:
        raise ConfigError("need at least one posterior sample")
    draws = []
    for k, (shape, rate) in enumerate(posterior.pairs()):
        shape, rate = grad._lift(shape), grad._lift(rate)
        ones = np.ones((n, 1))
        u = None if uniforms is None else uniforms[k]
        draws.append(grad.gamma_sample(shape.reshape(1, -1) * ones, rate.reshape(1, -1) * ones, rng=rng, uniforms=u))
    return LatentTriple(*draws)


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------


def _log_likelihood(rates, rfm, p_spend):
    L, M, N = (grad._lift(v) for v in (rates.Lambda, rates.M, rates.N))
    x, t_x, T, z = rfm.x, rfm.t_x, rfm.T, rfm.z_bar
    ln_l = grad.log(L)
    total = L + M
    ll = ln_l * x - grad.log(total) + grad.logaddexp(grad.log(M) - total * t_x, ln_l - total * T)
    rep = x >= 1
    if np.any(rep):
        px = p_spend * x
        safe_x = np.where(rep, x, 1.0)
        safe_z = np.where(rep, z, 1.0)
        const = np.where(rep, px * np.log(safe_x) - special.gammaln(np.where(rep, px, 1.0))
                         + (px - 1.0) * np.log(safe_z), 0.0)
        ll = ll + grad.log(N) * px - N * np.where(rep, x * safe_z, 0.0) + const
    return ll


def conditional_log_likelihood(rates, p_spend, summaries):
    """Log-likelihood of each summary given decoded rates.

    Pareto/NBD part ``x ln L - ln(L+M) + logaddexp(ln M - (L+M) t_x, ln L - (L+M) T)``
    plus, for ``x >= 1``, the log density of ``z_bar ~ Gamma(p x, N x)``.
    Rates broadcast against the customers (last axis).
    """
    rfm = check_summaries(summaries)
    with np.errstate(invalid="ignore", over="ignore"):
        ll = _log_likelihood(DecodedRates(*(_data(v) for v in (rates.Lambda, rates.M, rates.N))), rfm, p_spend).data
    bad = ~np.isfinite(ll)
    if np.any(bad):
        col = np.flatnonzero(np.any(np.atleast_2d(bad), axis=0))[0]
        raise NumericalError(f"non-finite conditional log-likelihood for customer {rfm.ids[col]}")
    return ll


def _kl_value(shape_q, rate_q, shape_p, rate_p):
    shape_q, rate_q = grad._lift(shape_q), grad._lift(rate_q)
    return (
        (shape_q - shape_p) * grad.digamma(shape_q)
        - grad.lgamma(shape_q)
        + special.gammaln(shape_p)
        + shape_p * (grad.log(rate_q) - np.log(rate_p))
        + shape_q * (rate_p / rate_q)
        - shape_q
    )


def kl_gamma(q, p):
    """KL(Gamma(q.shape, q.rate) || Gamma(p.shape, p.rate))."""
    return _kl_value(np.asarray(q.shape, float), np.asarray(q.rate, float), p.shape, p.rate).data[()]


def elbo_terms(network, inputs, rfm, mc_samples, rng=None, uniforms=None):
    """Differentiable batch means of the expected log-likelihood and of the KL sum."""
    posterior = network.encode(inputs)
    latents = sample_posterior(posterior, mc_samples, rng=rng, uniforms=uniforms)
    rates = network.decode(latents)
    expected_ll = _log_likelihood(rates, rfm, network.prior.p_spend).mean(axis=0).mean()
    kl = None
    for (shape_q, rate_q), prior in zip(posterior.pairs(), network.prior.components):
        term = _kl_value(shape_q, rate_q, prior.shape, prior.rate)
        kl = term if kl is None else kl + term
    return expected_ll, kl.mean()


def elbo(network, inputs, rfm, mc_samples, rng=None, uniforms=None):
    """Mean over customers of E_q[log p(X | Z)] minus KL(q || prior)."""
    ll, kl = elbo_terms(network, inputs, rfm, mc_samples, rng=rng, uniforms=uniforms)
    return ll - kl


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainingResult:
    network: CLVAENetwork
    normalization: Normalization
    log: pd.DataFrame
    best_epoch: int
    best_validation_elbo: float
    train_index: np.ndarray
    validation_index: np.ndarray
    stopped_early: bool


def _streams(seed):
    names = ("init", "split", "shuffle", "mc", "validation")
    return dict(zip(names, np.random.SeedSequence(int(seed)).spawn(len(names))))


def train(summaries, config=None, prior=None, verbose=False):
    """Fit encoder and decoder weights by maximising the ELBO.

    The data are split into training and validation customers with the
    config seed. Every epoch shuffles the training customers into
    mini-batches, takes one Adam step per batch and then scores the
    validation ELBO with a fixed random stream (common random numbers, so
    epochs are comparable). Training stops after ``patience`` epochs without
    improvement and the best-validation weights are restored.

    The log has one row per epoch; row 0 holds the validation ELBO at
    initialisation (its ``train_elbo`` is NaN).
    """
    config = config or TrainConfig()
    rfm = check_summaries(summaries)
    if prior is None:
        prior = PriorParams.from_baseline(fit_pnbd(rfm).params, fit_gg(rfm).params)
    n = len(rfm)
    n_val = int(round(config.validation_fraction * n))
    if n_val < 1 or n_val >= n:
        raise ConfigError(f"validation split of {config.validation_fraction} leaves an empty set for {n} customers")
    streams = _streams(config.seed)
    perm = np.random.default_rng(streams["split"]).permutation(n)
    val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])

    norm = Normalization.fit(rfm.subset(tr_idx), config.normalize)
    inputs = encoder_inputs(rfm, norm)
    network = CLVAENetwork(inputs.shape[1], prior, config, np.random.default_rng(streams["init"]))
    opt = grad.Adam(network.parameters(), lr=config.learning_rate)
    shuffle_rng = np.random.default_rng(streams["shuffle"])
    mc_rng = np.random.default_rng(streams["mc"])
    val_rfm, val_inputs = rfm.subset(val_idx), inputs[val_idx]

    def validation_elbo():
        rng = np.random.default_rng(streams["validation"])
        return float(elbo(network, val_inputs, val_rfm, config.mc_samples, rng=rng).data)

    best_val = validation_elbo()
    best_epoch, best_state, wait = 0, network.state(), 0
    rows = [(0, np.nan, best_val)]
    stopped_early = False
    started = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(tr_idx)
        total = 0.0
        for b, start in enumerate(range(0, order.size, config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                objective = elbo(network, inputs[idx], rfm.subset(idx), config.mc_samples, rng=mc_rng)
            except NumericalError as exc:
                raise type(exc)(f"epoch {epoch}, batch {b}: {exc}") from exc
            value = float(objective.data)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite ELBO at epoch {epoch}, batch {b}")
            opt.zero_grad()
            grad.backward(-objective)
            opt.step()
            total += value * idx.size
        val = validation_elbo()
        rows.append((epoch, total / order.size, val))
        if val > best_val:
            best_val, best_epoch, best_state, wait = val, epoch, network.state(), 0
        else:
            wait += 1
        if verbose and (epoch % 10 == 0 or epoch == 1):
            logger.info("epoch %d train %.5f val %.5f (%.1fs)", epoch, rows[-1][1], val, time.perf_counter() - started)
        if wait >= config.patience:
            stopped_early = True
            break
    network.load_state(best_state)
    log = pd.DataFrame(rows, columns=["epoch", "train_elbo", "validation_elbo"])
    return TrainingResult(network, norm, log, best_epoch, best_val, tr_idx, val_idx, stopped_early)


# --------------------------------------------------------------------------
# estimator
# --------------------------------------------------------------------------


class CLVAE(BaseEstimator):
    """Customer-lifetime-value VAE with a scikit-learn style interface.

    ``fit`` takes a summaries frame (``customer_id, x, t_x, T, z_bar`` and
    optional ``cov_*`` columns). ``transform`` returns the six posterior
    parameters per customer and ``predict`` the simulated expected
    cumulative revenue per horizon.

    ``prior`` may be a :class:`PriorParams`; by default it is fitted with the
    classical Pareto/NBD and Gamma-Gamma models on the training data.
    """

    def __init__(self, encoder_widths=(64, 32), decoder_widths=(32, 64), learning_rate=1e-3, batch_size=64,
                 max_epochs=1000, mc_samples=10, patience=100, random_state=50, validation_fraction=0.1,
                 normalize=True, decoder_skip=True, prior=None, n_draws=500, verbose=False):
        self.encoder_widths = encoder_widths
        self.decoder_widths = decoder_widths
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.mc_samples = mc_samples
        self.patience = patience
        self.random_state = random_state
        self.validation_fraction = validation_fraction
        self.normalize = normalize
        self.decoder_skip = decoder_skip
        self.prior = prior
        self.n_draws = n_draws
        self.verbose = verbose

    def train_config(self):
        return TrainConfig(
            encoder_widths=tuple(self.encoder_widths), decoder_widths=tuple(self.decoder_widths),
            learning_rate=self.learning_rate, batch_size=self.batch_size, max_epochs=self.max_epochs,
            mc_samples=self.mc_samples, patience=self.patience, seed=self.random_state,
            validation_fraction=self.validation_fraction, normalize=self.normalize,
            decoder_skip=self.decoder_skip,
        )

    def fit(self, X, y=None):
        rfm = check_summaries(X)
        config = self.train_config()
        prior = self.prior
        if prior is None:
            self.pnbd_fit_ = fit_pnbd(rfm)
            self.gg_fit_ = fit_gg(rfm)
            prior = PriorParams.from_baseline(self.pnbd_fit_.params, self.gg_fit_.params)
        result = train(rfm, config, prior, verbose=self.verbose)
        self.config_ = config
        self.prior_ = prior
        self.network_ = result.network
        self.normalization_ = result.normalization
        self.training_log_ = result.log
        self.best_epoch_ = result.best_epoch
        self.best_validation_elbo_ = result.best_validation_elbo
        self.stopped_early_ = result.stopped_early
        self.n_covariates_ = rfm.n_covariates
        self.fingerprint_ = {"customers": len(rfm), "max_T": float(rfm.T.max())}
        return self

    # inference ------------------------------------------------------------

    def _rfm(self, X):
        check_is_fitted(self, "network_")
        return check_summaries(X, n_covariates=self.n_covariates_)

    def _inputs(self, rfm):
        return encoder_inputs(rfm, self.normalization_)

    def posterior(self, X):
        """Posterior parameters as a :class:`GammaTriplePosterior` of arrays."""
        rfm = self._rfm(X)
        return self.network_.encode(self._inputs(rfm)).numpy()

    def transform(self, X):
        rfm = self._rfm(X)
        post = self.network_.encode(self._inputs(rfm)).numpy()
        return pd.DataFrame({f: getattr(post, f) for f in POSTERIOR_FIELDS},
                            index=pd.Index(rfm.ids, name="customer_id"))

    def decode(self, lam, mu, nu):
        check_is_fitted(self, "network_")
        rates = self.network_.decode(LatentTriple(np.asarray(lam, float), np.asarray(mu, float), np.asarray(nu, float)))
        return DecodedRates(*(_data(v) for v in (rates.Lambda, rates.M, rates.N)))

    def score(self, X, y=None, mc_samples=None, seed=None):
        """ELBO per customer on ``X`` with a fixed random stream."""
        rfm = self._rfm(X)
        rng = np.random.default_rng(self.random_state if seed is None else seed)
        value = elbo(self.network_, self._inputs(rfm), rfm, mc_samples or self.mc_samples, rng=rng)
        return float(value.data)

    @property
    def p_spend(self):
        check_is_fitted(self, "prior_")
        return self.prior_.p_spend

    def draw_rates(self, rfm, rows, n, rngs):
        """Decoded rates for ``n`` posterior draws per customer in ``rows``."""
        sub = rfm.subset(rows)
        post = self.network_.encode(self._inputs(sub)).numpy()
        lat = np.empty((3, len(rows), n))
        for j, rng in enumerate(rngs):
            for k, (shape, rate) in enumerate(post.pairs()):
                lat[k, j] = sample_gamma(shape[j], rate[j], rng, size=n)
        rates = self.decode(lat[0], lat[1], lat[2])
        return rates.Lambda, rates.M, rates.N

    def simulate(self, X, config=None):
        """Full Monte Carlo forecast as a :class:`clvae.predict.PredictionResult`."""
        rfm = self._rfm(X)
        config = config or SimConfig(n_draws=self.n_draws, seed=self.random_state)
        return simulate_futures(self, rfm, config)

    def predict(self, X, horizons=(52, 104, 156, 208), n_draws=None, seed=None):
        """Expected cumulative revenue per customer (rows) and horizon (columns)."""
        h = check_horizons(horizons)
        config = SimConfig(horizons=tuple(h), n_draws=n_draws or self.n_draws,
                           seed=self.random_state if seed is None else seed)
        return self.simulate(X, config).revenue_frame()

    # persistence ------------------------------------------------------------

    def metadata(self):
        check_is_fitted(self, "network_")
        return {
            "model": "CLVAE",
            "train_config": self.config_.to_dict(),
            "prior": self.prior_.to_dict(),
            "normalization": self.normalization_.to_dict(),
            "n_inputs": self.network_.n_inputs,
            "covariates": [f"cov_{j + 1}" for j in range(self.n_covariates_)],
            "fingerprint": self.fingerprint_,
            "best_epoch": self.best_epoch_,
            "best_validation_elbo": self.best_validation_elbo_,
            "n_draws": self.n_draws,
        }

    def save(self, path, extra_metadata=None):
        meta = self.metadata()
        if extra_metadata:
            meta.update(extra_metadata)
        grad.save_arrays(path, self.network_.state(), meta)

    @classmethod
    def load(cls, path):
        arrays, meta = grad.load_arrays(path)
        if meta.get("model") != "CLVAE":
            raise ConfigError(f"{path} is not a CLVAE checkpoint")
        cfg = meta["train_config"]
        est = cls(encoder_widths=tuple(cfg["encoder_widths"]), decoder_widths=tuple(cfg["decoder_widths"]),
                  learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"],
                  mc_samples=cfg["mc_samples"], patience=cfg["patience"], random_state=cfg["seed"],
                  validation_fraction=cfg["validation_fraction"], normalize=cfg["normalize"],
                  decoder_skip=cfg["decoder_skip"], n_draws=meta.get("n_draws", 500))
        est.config_ = TrainConfig(**{**cfg, "encoder_widths": tuple(cfg["encoder_widths"]),
                                     "decoder_widths": tuple(cfg["decoder_widths"])})
        est.prior_ = PriorParams.from_dict(meta["prior"])
        est.prior = None
        est.normalization_ = Normalization.from_dict(meta["normalization"])
        est.n_covariates_ = len(meta["covariates"])
        est.network_ = CLVAENetwork(meta["n_inputs"], est.prior_, est.config_)
        est.network_.load_state(arrays)
        est.fingerprint_ = meta["fingerprint"]
        est.best_epoch_ = meta["best_epoch"]
        est.best_validation_elbo_ = meta["best_validation_elbo"]
        est.metadata_ = meta
        return est

    def copy(self):
        return copy.deepcopy(self)
