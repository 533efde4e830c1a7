import json
import logging

import numpy as np
import pandas as pd
import pytest
from scipy import integrate, special, stats

from clvae import baseline as bl
from clvae import ingest
from clvae.evaluation import DEFAULT_GG, DEFAULT_PNBD, generate_synthetic
from clvae.exceptions import DegenerateDataError, ValidationError

PN = bl.ParetoNBDParams(0.55, 10.6, 0.61, 11.7)
GG = bl.GGParams(6.25, 3.74, 15.44)


def summaries(rows):
    return pd.DataFrame(rows, columns=["x", "t_x", "T", "z_bar"])


def conditional_pnbd(lam, mu, x, t_x, T):
    return lam**x * (mu * np.exp(-(lam + mu) * t_x) + lam * np.exp(-(lam + mu) * T)) / (lam + mu)


def gamma_pdf(v, shape, rate):
    return stats.gamma.pdf(v, shape, scale=1 / rate)


@pytest.fixture(scope="module")
def synthetic_10k():
    log, _ = generate_synthetic(n=10_000, window=78, acquisition="day0", rng=1)
    return ingest.summarize_rfm(log, 78 * 7)


@pytest.fixture(scope="module")
def small_base():
    log, _ = generate_synthetic(n=600, window=78, acquisition="day0", rng=3)
    return ingest.summarize_rfm(log, 78 * 7)


class TestParams:
    def test_positive(self):
        with pytest.raises(ValidationError):
            bl.ParetoNBDParams(1, 1, 0, 1)
        with pytest.raises(ValidationError):
            bl.GGParams(1, -1, 1)

    def test_small_p_allowed(self):
        assert bl.GGParams(0.5, 2.0, 1.0).p == 0.5


class TestPNBDLikelihood:
    @pytest.mark.parametrize("T", [0.5, 10.0, 78.0])
    def test_zero_repeater_matches_quadrature(self, T):
        def f(mu, lam):
            return conditional_pnbd(lam, mu, 0, 0.0, T) * gamma_pdf(lam, PN.r, PN.alpha) * gamma_pdf(mu, PN.s, PN.beta)

        want, _ = integrate.dblquad(f, 0, np.inf, 0, np.inf, epsabs=0, epsrel=1e-10)
        got = bl.pnbd_log_likelihood(PN, summaries([(0, 0.0, T, 1.0)]))
        assert np.exp(got) == pytest.approx(want, rel=1e-6)

    @pytest.mark.parametrize("row", [(3, 20.0, 52.0), (1, 0.5, 0.6), (12, 70.0, 70.5)])
    def test_repeater_matches_quadrature(self, row):
        x, t_x, T = row
        params = bl.ParetoNBDParams(1.3, 6.0, 0.8, 9.0)

        def f(u, v):
            lam, mu = u / (1 - u), v / (1 - v)
            jac = 1 / (1 - u) ** 2 / (1 - v) ** 2
            return (conditional_pnbd(lam, mu, x, t_x, T) * gamma_pdf(lam, 1.3, 6.0)
                    * gamma_pdf(mu, 0.8, 9.0) * jac)

        want, _ = integrate.dblquad(f, 0, 1, 0, 1, epsabs=0, epsrel=1e-10)
        got = bl.pnbd_log_likelihood(params, summaries([(x, t_x, T, 1.0)]))
        assert got == pytest.approx(np.log(want), rel=1e-6)

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(11)
        log, _ = generate_synthetic(n=100, window=60, acquisition="day0", rng=12)
        s = ingest.summarize_rfm(log, 60 * 7)
        lam = rng.gamma(PN.r, 1 / PN.alpha, 100_000)
        mu = rng.gamma(PN.s, 1 / PN.beta, 100_000)
        got = bl.pnbd_individual_log_likelihood(PN, s)
        for (x, t_x, T), ll in zip(s[["x", "t_x", "T"]].to_numpy(), got):
            vals = conditional_pnbd(lam, mu, x, t_x, T)
            mean, se = vals.mean(), vals.std() / np.sqrt(vals.size)
            assert abs(np.exp(ll) - mean) < 3 * se

    def test_s_equal_one(self):
        s = summaries([(2, 5.0, 30.0, 1.0), (0, 0.0, 30.0, 1.0)])
        near = [bl.pnbd_log_likelihood(bl.ParetoNBDParams(0.5, 8.0, v, 12.0), s) for v in (1 - 1e-7, 1.0, 1 + 1e-7)]
        assert np.all(np.isfinite(near))
        assert near[0] == pytest.approx(near[1], abs=1e-5) and near[2] == pytest.approx(near[1], abs=1e-5)

    def test_alpha_equals_beta(self):
        s = summaries([(4, 10.0, 40.0, 1.0)])
        a = bl.pnbd_log_likelihood(bl.ParetoNBDParams(0.7, 9.0, 0.5, 9.0), s)
        b = bl.pnbd_log_likelihood(bl.ParetoNBDParams(0.7, 9.0, 0.5, 9.0 + 1e-7), s)
        assert a == pytest.approx(b, abs=1e-6)

    def test_time_unit_invariance(self, small_base):
        c = 7.0
        days = small_base.assign(t_x=small_base.t_x * c, T=small_base["T"] * c)
        a = bl.fit_pnbd(small_base).params
        b = bl.fit_pnbd(days).params
        assert b.r == pytest.approx(a.r, rel=1e-4) and b.s == pytest.approx(a.s, rel=1e-4)
        assert b.alpha == pytest.approx(c * a.alpha, rel=1e-4)


class TestPNBDFit:
    def test_recovery(self, synthetic_10k):
        fit = bl.fit_pnbd(synthetic_10k)
        assert fit.converged
        for got, want in zip(
            [fit.params.r, fit.params.alpha, fit.params.s, fit.params.beta],
            [DEFAULT_PNBD.r, DEFAULT_PNBD.alpha, DEFAULT_PNBD.s, DEFAULT_PNBD.beta],
        ):
            assert got == pytest.approx(want, rel=0.15)

    def test_refit_is_fixed_point(self, small_base):
        first = bl.fit_pnbd(small_base)
        again = bl.fit_pnbd(small_base, init=first.params)
        assert abs(again.log_likelihood - first.log_likelihood) < 1e-6

    def test_duplication_and_order(self, small_base):
        base = bl.fit_pnbd(small_base).params
        doubled = bl.fit_pnbd(pd.concat([small_base, small_base])).params
        shuffled = bl.fit_pnbd(small_base.sample(frac=1.0, random_state=0)).params
        for other in (doubled, shuffled):
            assert np.allclose(
                [other.r, other.alpha, other.s, other.beta], [base.r, base.alpha, base.s, base.beta], rtol=1e-5
            )

    def test_homogeneous_dropout_ridge(self, caplog):
        # this sample prefers s, beta -> infinity with s/beta fixed; the fit stops at the shape cap
        log, _ = generate_synthetic(n=300, window=182, rng=1)
        data = ingest.summarize_rfm(log.truncate(546), 546)
        with caplog.at_level(logging.WARNING):
            fit = bl.fit_pnbd(data)
        assert fit.params.s == pytest.approx(1000, rel=1e-3) and "cap" in caplog.text
        far = bl.ParetoNBDParams(fit.params.r, fit.params.alpha, 1e5, 1e5 * fit.params.beta / fit.params.s)
        assert bl.pnbd_log_likelihood(far, data) - fit.log_likelihood < 1e-3

    def test_degenerate(self):
        with pytest.raises(DegenerateDataError):
            bl.fit_pnbd(summaries([(0, 0.0, 5.0, 1.0), (0, 0.0, 7.0, 2.0)]))
        with pytest.raises(DegenerateDataError):
            bl.fit_pnbd(summaries([(1, 1.0, 5.0, 1.0)]))


class TestGG:
    @pytest.mark.parametrize("x,z", [(1, 3.0), (5, 25.0), (40, 0.7)])
    def test_density_matches_quadrature(self, x, z):
        p, q, g = GG.p, GG.q, GG.gamma

        def f(nu):
            log_spend = p * x * np.log(nu * x) - special.gammaln(p * x) + (p * x - 1) * np.log(z) - nu * x * z
            return np.exp(log_spend) * gamma_pdf(nu, q, g)

        want, _ = integrate.quad(f, 0, np.inf, epsabs=0, epsrel=1e-12, limit=200)
        got = bl.gg_log_likelihood(GG, summaries([(x, 1.0, 2.0, z)]))
        assert np.exp(got) == pytest.approx(want, rel=1e-6)

    def test_recovery(self, synthetic_10k):
        rep = synthetic_10k[synthetic_10k.x > 0]
        assert len(rep) > 2000
        fit = bl.fit_gg(synthetic_10k)
        for got, want in zip([fit.params.p, fit.params.q, fit.params.gamma], [DEFAULT_GG.p, DEFAULT_GG.q, DEFAULT_GG.gamma]):
            assert got == pytest.approx(want, rel=0.15)

    def test_scale_equivariance(self, small_base):
        a = bl.fit_gg(small_base).params
        b = bl.fit_gg(small_base.assign(z_bar=small_base.z_bar * 100)).params
        assert b.gamma == pytest.approx(100 * a.gamma, rel=1e-4)
        assert b.p == pytest.approx(a.p, rel=1e-4) and b.q == pytest.approx(a.q, rel=1e-4)

    def test_uses_repeaters_only(self, small_base):
        a = bl.fit_gg(small_base).params
        b = bl.fit_gg(small_base[small_base.x > 0]).params
        assert a == b

    def test_no_repeaters(self):
        with pytest.raises(DegenerateDataError):
            bl.fit_gg(summaries([(0, 0.0, 5.0, 1.0)]))

    def test_small_p_warns(self, caplog):
        rng = np.random.default_rng(0)
        rows = [(1, 1.0, 2.0, z) for z in rng.exponential(5.0, 400)]
        with caplog.at_level(logging.WARNING):
            fit = bl.fit_gg(summaries(rows))
        assert fit.params.p <= 1 and "p=" in caplog.text

    def test_expected_spend_shrinks_toward_z_bar(self):
        x = np.array([1, 5, 50, 5000])
        spend = bl.gg_expected_spend(GG, summaries([(k, 1.0, 2.0, 100.0) for k in x]))
        assert np.all(np.diff(np.abs(spend - 100.0)) < 0)
        assert spend[-1] == pytest.approx(100.0, rel=1e-3)

    def test_expected_spend_zero_repeater_is_prior_mean(self):
        got = bl.gg_expected_spend(GG, summaries([(0, 0.0, 2.0, 999.0)]))
        assert got[0] == pytest.approx(GG.p * GG.gamma / (GG.q - 1))


class TestPosteriorQuantities:
    def test_p_alive_bounds(self, small_base):
        pa = bl.pnbd_p_alive(PN, small_base)
        assert np.all((pa >= 0) & (pa <= 1))

    def test_p_alive_one_at_last_purchase(self):
        assert bl.pnbd_p_alive(PN, summaries([(3, 20.0, 20.0, 1.0)]))[0] == 1.0

    def test_expected_transactions_limits(self, small_base):
        assert np.all(bl.pnbd_expected_transactions(PN, small_base, 0.0) == 0.0)
        e = np.stack([bl.pnbd_expected_transactions(PN, small_base, t) for t in (1, 10, 52, 208)])
        assert np.all(e >= 0) and np.all(np.diff(e, axis=0) >= 0)

    def test_expected_transactions_s_one_limit(self, small_base):
        at = bl.pnbd_expected_transactions(bl.ParetoNBDParams(0.5, 8, 1.0, 12), small_base, 52)
        near = bl.pnbd_expected_transactions(bl.ParetoNBDParams(0.5, 8, 1.0 + 1e-7, 12), small_base, 52)
        assert np.allclose(at, near, rtol=1e-5)

    def test_negative_horizon(self, small_base):
        with pytest.raises(ValidationError):
            bl.pnbd_expected_transactions(PN, small_base, -1.0)


class TestCohorts:
    def test_single_cohort_equals_pooled(self, small_base):
        fits = bl.fit_per_cohort(small_base, np.zeros(len(small_base), int))
        assert fits[0].pnbd.params == bl.fit_pnbd(small_base).params
        assert not fits[0].fallback

    def test_zero_repeater_cohort_falls_back(self, small_base):
        labels = np.zeros(len(small_base), int)
        extra = summaries([(0, 0.0, 40.0, 3.0), (0, 0.0, 50.0, 4.0)])
        data = pd.concat([small_base, extra], ignore_index=True)
        fits = bl.fit_per_cohort(data, np.r_[labels, [1, 1]])
        assert fits[1].fallback and fits[1].pnbd.params == bl.fit_pnbd(data).params

    def test_two_regimes(self):
        a_log, _ = generate_synthetic(bl.ParetoNBDParams(0.5, 10, 0.5, 10), n=1500, window=78, acquisition="day0", rng=5)
        b_log, _ = generate_synthetic(bl.ParetoNBDParams(3.0, 5, 2.0, 30), n=1500, window=78, acquisition="day0", rng=6)
        a = ingest.summarize_rfm(a_log, 78 * 7)
        b = ingest.summarize_rfm(b_log, 78 * 7)
        data = pd.concat([a, b], ignore_index=True)
        labels = np.r_[np.zeros(len(a), int), np.ones(len(b), int)]
        fits = bl.fit_per_cohort(data, labels)
        pooled = bl.fit_pnbd(data).params
        for label, part in ((0, a), (1, b)):
            assert bl.pnbd_log_likelihood(fits[label].pnbd.params, part) > bl.pnbd_log_likelihood(pooled, part)


class TestEstimators:
    def test_get_params(self):
        assert bl.ParetoNBDFitter().get_params() == {"init": None}

    def test_predict_frame(self, small_base):
        model = bl.PNBDGG().fit(small_base)
        pred = model.predict(small_base, horizons=(52, 104))
        assert list(pred.columns) == [52.0, 104.0]
        assert pred.index.tolist() == small_base.customer_id.tolist()
        want = bl.pnbd_expected_transactions(model.pnbd_.params_, small_base, 104) * bl.gg_expected_spend(
            model.gg_.params_, small_base)
        assert np.allclose(pred[104.0], want)

    def test_cohort_model(self, small_base):
        cov = np.zeros((len(small_base), 2))
        cov[:, 0] = np.arange(len(small_base)) % 2
        cov[:, 1] = 1 - cov[:, 0]
        data = small_base.assign(cov_1=cov[:, 0], cov_2=cov[:, 1])
        pred = bl.CohortPNBDGG().fit(data).predict(data, horizons=(52,))
        assert pred.shape == (len(data), 1) and np.all(pred.to_numpy() >= 0)

    def test_cohort_model_needs_covariates(self, small_base):
        with pytest.raises(ValidationError):
            bl.CohortPNBDGG().fit(small_base)

    def test_params_document(self, tmp_path, small_base):
        pnbd, gg = bl.fit_pnbd(small_base), bl.fit_gg(small_base)
        bl.write_params(tmp_path / "p.json", pnbd, gg)
        doc = json.loads((tmp_path / "p.json").read_text())
        assert set(doc) == {"r", "alpha", "s", "beta", "p", "q", "gamma", "log_likelihood", "converged"}
        back_pnbd, back_gg, _ = bl.read_params(tmp_path / "p.json")
        assert back_pnbd == pnbd.params and back_gg == gg.params
