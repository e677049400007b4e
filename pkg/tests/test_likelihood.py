import json
import math

import numpy as np
import pytest

import iacd
from iacd import _kernels
from iacd.errors import ConfigError
from iacd.likelihood import GAMMA_RESTRICTION, FitResult

from conftest import make_rng

EXP = iacd.InnovationSpec.exponential()
THETA = iacd.ParamTheta(1.0, 0.5, 0.5)


def small_series(seed=4, t_span=2e3):
    return iacd.simulate_span(iacd.SimConfig(THETA, EXP, t_span=t_span, seed=seed))


class TestLoglik:
    def test_hand_value(self):
        series = iacd.DurationSeries(x0=2.0, x=np.array([4.0, 1.0]), t_span=10.0)
        expected = -(math.log(3.0) + 4.0 / 3.0) - (math.log(4.5) + 1.0 / 4.5)
        assert iacd.loglik(THETA, series) == pytest.approx(expected, abs=1e-12)

    def test_unit_psi_gives_minus_one(self):
        theta = iacd.ParamTheta(1.0, 1e-12, 0.0)
        series = iacd.DurationSeries(x0=5.0, x=np.array([1.0]), t_span=10.0)
        # psi0 = omega and alpha ~ 0 force psi_1 ~ 1, so the term is -(0 + 1)
        assert iacd.loglik(theta, series, psi0_rule="omega") == pytest.approx(-1.0, abs=1e-9)

    def test_pointwise_upper_bound(self):
        series = small_series()
        bound = float(np.sum(-(np.log(series.x) + 1.0)))
        for seed in range(5):
            rng = np.random.default_rng(seed)
            theta = iacd.ParamTheta(rng.uniform(0.1, 3), rng.uniform(0.05, 0.9), rng.uniform(0.0, 0.9))
            assert iacd.loglik(theta, series) <= bound


class TestDerivatives:
    @pytest.mark.parametrize("rule", ["x0", "omega"])
    def test_score_and_info_match_finite_differences(self, rule):
        series = small_series(seed=7, t_span=500.0)
        rng = np.random.default_rng(12)
        for _ in range(6):
            theta = iacd.ParamTheta(
                math.exp(rng.uniform(-1, 1)), rng.uniform(0.05, 0.9), rng.uniform(0.05, 0.9)
            )
            score, info, opg = iacd.score_and_info(theta, series, rule)
            base = theta.as_array()
            for j in range(3):
                h = 1e-6 * max(abs(base[j]), 1e-3)
                plus, minus = base.copy(), base.copy()
                plus[j] += h
                minus[j] -= h
                g_fd = (
                    iacd.loglik(iacd.ParamTheta(*plus), series, rule)
                    - iacd.loglik(iacd.ParamTheta(*minus), series, rule)
                ) / (2 * h)
                assert abs(g_fd - score[j]) <= 1e-6 * (1.0 + abs(score[j]))
                s_plus, _, _ = iacd.score_and_info(iacd.ParamTheta(*plus), series, rule)
                s_minus, _, _ = iacd.score_and_info(iacd.ParamTheta(*minus), series, rule)
                h_fd = (s_plus - s_minus) / (2 * h)
                assert np.all(np.abs(h_fd - (-info[:, j])) <= 1e-5 * (1.0 + np.abs(info[:, j])))

    def test_opg_is_sum_of_outer_products(self):
        series = iacd.DurationSeries(x0=2.0, x=np.array([4.0, 1.0, 2.0]), t_span=10.0)
        score, info, opg = iacd.score_and_info(THETA, series)
        assert np.allclose(opg, opg.T, atol=0)
        assert np.allclose(info, info.T, atol=0)
        # trace of opg dominated by squared score scale
        assert np.trace(opg) > 0


class TestFitting:
    def test_recovers_truth_within_three_se(self, boundary_series, boundary_fit_pair):
        fit, _ = boundary_fit_pair
        assert fit.converged
        se = iacd.parameter_standard_errors(fit, iacd.sigma_hat(fit, "info"))
        assert np.all(np.abs(fit.theta_hat.as_array() - THETA.as_array()) < 3 * se)

    def test_score_small_at_optimum(self, boundary_fit_pair):
        fit, fit_r = boundary_fit_pair
        assert np.max(np.abs(fit.score)) < 1e-6 * fit.n
        assert np.max(np.abs(GAMMA_RESTRICTION.T @ fit_r.score)) < 1e-6 * fit_r.n

    def test_argmax_dominates_truth(self):
        checked = 0
        for seed in range(8):
            series = small_series(seed=seed)
            if series.n < 10:  # heavy tails occasionally produce tiny spans
                continue
            fit = iacd.fit_unrestricted(series, iacd.FitOptions(n_starts=1))
            assert fit.loglik >= iacd.loglik(THETA, series) - 1e-9
            checked += 1
        assert checked >= 5

    def test_restricted_boundary_exact_and_nested(self, boundary_fit_pair):
        fit_u, fit_r = boundary_fit_pair
        assert fit_r.theta_hat.alpha + fit_r.theta_hat.beta == 1.0
        assert fit_r.restricted
        assert fit_r.loglik <= fit_u.loglik + 1e-9

    def test_qlr_nonnegative_across_seeds(self):
        for seed in range(8):
            series = small_series(seed=seed)
            if series.n < 10:
                continue
            fit_u = iacd.fit_unrestricted(series, iacd.FitOptions(n_starts=1))
            fit_r = iacd.fit_restricted(series, iacd.FitOptions(n_starts=1))
            assert iacd.qlr_stat(fit_u, fit_r, normalize=False) >= 0.0

    def test_scale_equivariance(self):
        series = small_series(seed=21, t_span=1.5e3)
        fit = iacd.fit_unrestricted(series)
        for lam in (0.01, 100.0):
            scaled = iacd.fit_unrestricted(series.scaled(lam))
            assert scaled.theta_hat.omega == pytest.approx(lam * fit.theta_hat.omega, rel=1e-6)
            assert scaled.theta_hat.alpha == pytest.approx(fit.theta_hat.alpha, abs=1e-6)
            assert scaled.theta_hat.beta == pytest.approx(fit.theta_hat.beta, abs=1e-6)
            assert scaled.loglik == pytest.approx(fit.loglik - fit.n * math.log(lam), rel=1e-10)

    def test_min_n_floor(self):
        series = iacd.DurationSeries(x0=1.0, x=np.ones(5), t_span=10.0)
        with pytest.raises(ConfigError):
            iacd.fit_unrestricted(series)

    def test_filter_matches_simulator_bit_for_bit(self):
        # generating with psi_0 = x_0 and filtering back must agree exactly
        x0 = 1.7
        eps = iacd.sample_innovation(EXP, make_rng(8), 5000)
        out = np.empty(5000)
        _kernels.simulate_chunk(THETA.omega, THETA.alpha, THETA.beta, eps, x0, x0, out)
        series = iacd.DurationSeries(x0=x0, x=out, t_span=out.sum() + 1.0)
        psi = iacd.psi_filter(THETA, series, psi0_rule="x0")
        assert np.array_equal(series.x, psi * eps)
        residuals = series.x / psi
        ulp = np.abs(residuals - eps) / np.spacing(np.maximum(np.abs(eps), 1e-300))
        assert ulp.max() <= 4

    def test_residual_variance_estimates_innovation_variance(self):
        series = iacd.simulate_span(iacd.SimConfig(THETA, EXP, t_span=1.2e6, seed=31))
        assert series.n > 20_000
        psi = iacd.psi_filter(THETA, series)
        resid = series.x / psi
        s2 = float(np.mean((resid - resid.mean()) ** 2))
        m4 = float(np.mean((resid - resid.mean()) ** 4))
        se = math.sqrt(max(m4 - s2**2, 0.0) / resid.size)
        assert abs(s2 - EXP.variance()) < 5 * se


class TestDailyReset:
    def test_segmented_loglik_sums_per_day_blocks(self):
        series = small_series(seed=33, t_span=6e3)
        assert series.n > 40
        resets = (series.n // 3, 2 * series.n // 3)
        whole = iacd.loglik(THETA, series, resets=resets)
        total = 0.0
        bounds = [0, *resets, series.n]
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            x_prev = series.x0 if lo == 0 else float(series.x[lo - 1])
            seg = iacd.DurationSeries(x0=x_prev, x=series.x[lo:hi], t_span=series.t_span)
            total += iacd.loglik(THETA, seg)
        assert whole == pytest.approx(total, rel=1e-14)

    @pytest.mark.parametrize("rule", ["x0", "omega"])
    def test_segmented_score_matches_finite_differences(self, rule):
        series = small_series(seed=34, t_span=800.0)
        resets = (series.n // 2,)
        theta = iacd.ParamTheta(0.8, 0.3, 0.4)
        score, info, _ = iacd.score_and_info(theta, series, rule, resets)
        base = theta.as_array()
        for j in range(3):
            h = 1e-6 * max(abs(base[j]), 1e-3)
            plus, minus = base.copy(), base.copy()
            plus[j] += h
            minus[j] -= h
            g_fd = (
                iacd.loglik(iacd.ParamTheta(*plus), series, rule, resets)
                - iacd.loglik(iacd.ParamTheta(*minus), series, rule, resets)
            ) / (2 * h)
            assert abs(g_fd - score[j]) <= 1e-6 * (1.0 + abs(score[j]))

    def test_fit_with_resets_close_to_plain_fit(self):
        series = small_series(seed=35, t_span=3e4)
        resets = tuple(int(v) for v in np.linspace(0, series.n, 6)[1:-1])
        plain = iacd.fit_unrestricted(series, iacd.FitOptions(n_starts=1))
        reset = iacd.fit_unrestricted(series, iacd.FitOptions(n_starts=1, reset_indices=resets))
        assert reset.converged
        assert reset.reset_indices == resets
        assert np.all(np.abs(plain.theta_hat.as_array() - reset.theta_hat.as_array()) < 0.05)

    def test_reset_validation(self):
        series = small_series(seed=33, t_span=6e3)
        with pytest.raises(ConfigError):
            iacd.loglik(THETA, series, resets=(0,))
        with pytest.raises(ConfigError):
            iacd.loglik(THETA, series, resets=(series.n,))

    def test_mixed_reset_fits_rejected_by_qlr(self, boundary_series):
        fit_u = iacd.fit_unrestricted(boundary_series, iacd.FitOptions(n_starts=1))
        fit_r = iacd.fit_restricted(
            boundary_series, iacd.FitOptions(n_starts=1, reset_indices=(boundary_series.n // 2,))
        )
        with pytest.raises(ConfigError):
            iacd.qlr_stat(fit_u, fit_r)

    def test_day_start_indices_mapping(self):
        from iacd.pipeline import AdjustedDurations, day_start_indices

        adj = AdjustedDurations(
            series=iacd.DurationSeries(x0=1.0, x=np.ones(5), t_span=10.0),
            values=np.ones(6),
            time_of_day=np.arange(6.0),
            day_index=np.array([0, 0, 0, 1, 1, 2]),
        )
        # values positions 3 and 5 open new days -> observations 2 and 4
        assert day_start_indices(adj) == (2, 4)


class TestFitResultSerialization:
    def test_json_round_trip(self, boundary_fit_pair):
        fit, _ = boundary_fit_pair
        back = FitResult.from_dict(json.loads(fit.to_json()))
        assert back.theta_hat == fit.theta_hat
        assert back.loglik == fit.loglik
        assert np.array_equal(back.info, fit.info)
        assert np.array_equal(back.opg, fit.opg)
        assert np.array_equal(back.residuals, fit.residuals)
        assert back.converged == fit.converged and back.restricted == fit.restricted

    def test_schema_guard(self):
        with pytest.raises(ConfigError):
            FitResult.from_dict({"schema_version": "bogus"})
