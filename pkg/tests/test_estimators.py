import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from sklearn.base import clone

from marketeffects.equilibrium import true_effects
from marketeffects.estimators import (
    DegenerateArmError,
    EstimateReport,
    EstimationError,
    IllConditionedError,
    MarketEffectEstimator,
    aie_from_elasticities,
    confidence_intervals,
    estimate,
    ht_estimate,
    indirect_effect,
    mpe_estimate,
    regress_on_perturbations,
    variance_direct,
    variance_indirect,
)
from marketeffects.experiment import Design, ExperimentDataset, run_experiment
from marketeffects.model import make_scenario, sample_population


@pytest.fixture(scope="module")
def tech():
    return make_scenario("tech")


@pytest.fixture(scope="module")
def tech_data(tech):
    return run_experiment(tech, 2500, Design(), seed=0)


@pytest.fixture(scope="module")
def tech_report(tech_data):
    return estimate(tech_data)


def _dataset(W, U, Y, Z, pi=0.5, h_n=None, xi_n=None):
    W = np.asarray(W, dtype=float)
    U = np.atleast_2d(np.asarray(U, dtype=float).T).T
    Z = np.atleast_2d(np.asarray(Z, dtype=float).T).T
    n = W.size
    return ExperimentDataset(
        scenario_id="synthetic", n=n, pi=pi, h_n=float(np.max(np.abs(U))) if h_n is None else h_n,
        xi_n=xi_n, W=W, treated=W, U=U, Y=np.asarray(Y, dtype=float), D=np.zeros_like(Z),
        S=-Z, Z=Z, P_tilde=np.zeros(U.shape[1]), clearing_residual=0.0,
    )


def _permuted(data, perm):
    return dataclasses.replace(data, W=data.W[perm], treated=data.treated[perm], U=data.U[perm],
                               Y=data.Y[perm], D=data.D[perm], S=data.S[perm], Z=data.Z[perm])


class TestHorvitzThompson:
    def test_two_units(self):
        assert ht_estimate([3.0, 1.0], [1, 0], 0.5)[0] == 2.0

    def test_equal_outcomes(self):
        assert ht_estimate([1.0, 1.0], [1, 0], 0.5)[0] == 0.0

    def test_matrix_columns(self):
        v = np.array([[3.0, 2.0], [1.0, 4.0]])
        assert ht_estimate(v, [1, 0], 0.5).tolist() == [2.0, -2.0]

    def test_rejects_pi_at_boundary(self):
        with pytest.raises(ValueError):
            ht_estimate([1.0, 2.0], [1, 0], 1.0)

    @given(
        data=hnp.arrays(np.float64, st.integers(1, 6).map(lambda k: (2 ** k, 2)),
                        elements=st.integers(-1000, 1000).map(lambda k: k / 8)),
        c=st.sampled_from([0.25, 0.5, 2.0, -4.0]),
        seed=st.integers(0, 10_000),
    )
    @settings(max_examples=100, deadline=None)
    def test_linearity_exact_on_dyadic_values(self, data, c, seed):
        # every intermediate is representable, so no rounding can intervene
        W = (np.random.default_rng(seed).random(data.shape[0]) < 0.5).astype(float)
        Y, Z = data[:, 0], data[:, 1]
        assert ht_estimate(Y + c * Z, W, 0.5)[0] == ht_estimate(Y, W, 0.5)[0] + c * ht_estimate(Z, W, 0.5)[0]

    def test_linearity_on_market_data(self, tech_data):
        Y, Z, W = tech_data.Y, tech_data.Z[:, 0], tech_data.treated
        lhs = ht_estimate(Y + 0.7 * Z, W, 0.5)[0]
        assert lhs == pytest.approx(ht_estimate(Y, W, 0.5)[0] + 0.7 * ht_estimate(Z, W, 0.5)[0], abs=1e-14)

    def test_frozen_price_unbiased(self, tech):
        # no perturbation and the price pinned at the mean-field value
        mf = true_effects(tech, 0.5)
        rng = np.random.default_rng(12)
        draws = []
        for k in range(10_000):
            pop = sample_population(tech, 50, seed=(12, k))
            W = (rng.random(50) < 0.5).astype(float)
            if W.sum() in (0, 50):
                continue
            draws.append(ht_estimate(pop.outcome(W, mf.p_star), W, 0.5)[0])
        draws = np.asarray(draws)
        mcse = draws.std() / np.sqrt(draws.size)
        assert abs(draws.mean() - mf.tau_ade_star) <= 3 * mcse


class TestRegression:
    def test_two_point(self):
        assert regress_on_perturbations([1.2, 1.0], [0.1, -0.1])[0, 0] == pytest.approx(1.0, abs=1e-12)

    @given(n=st.integers(4, 500), J=st.integers(1, 3), h=st.floats(1e-3, 5.0), seed=st.integers(0, 2**31))
    @settings(max_examples=100, deadline=None)
    def test_regressor_on_itself_is_identity(self, n, J, h, seed):
        U = h * np.random.default_rng(seed).choice([-1.0, 1.0], size=(n, J))
        if np.linalg.matrix_rank(U) < J:
            return
        assert np.array_equal(regress_on_perturbations(U, U), np.eye(J))

    def test_singular_design(self):
        U = np.column_stack([np.r_[0.1, -0.1, 0.1], np.r_[0.1, -0.1, 0.1]])
        with pytest.raises(EstimationError, match="singular"):
            regress_on_perturbations(np.ones(3), U)

    def test_subset(self):
        U = np.array([0.1, -0.1, 0.1, -0.1])
        Y = np.array([1.2, 1.0, 5.0, 1.0])
        assert regress_on_perturbations(Y, U, np.array([True, True, False, False]))[0, 0] == pytest.approx(1.0)

    def test_jacobian_slope_near_analytic(self, tech):
        slopes = [estimate(run_experiment(tech, 2500, Design(), seed=s)).delta_z_hat[0, 0] for s in range(100)]
        assert abs(np.median(slopes) - (-0.42)) <= 0.15


class TestIndirectEffect:
    @staticmethod
    def _plug_in_dataset(tau_z):
        # four units with h = 1 reproduce chosen slopes and contrast exactly
        slope_z, slope_y = -0.42, 0.73333
        Z = np.array([tau_z + 2 * slope_z, tau_z - 2 * slope_z, 0.0, 0.0])
        Y = np.array([4 * slope_y, 0.0, 0.0, 0.0])
        return _dataset([1, 1, 0, 0], [1.0, -1.0, 1.0, -1.0], Y, Z)

    def test_plug_in_arithmetic(self):
        tau, parts = indirect_effect(self._plug_in_dataset(-0.13333))
        assert parts["delta_z_hat"][0, 0] == pytest.approx(-0.42, abs=1e-12)
        assert parts["delta_y_hat"][0] == pytest.approx(0.73333, abs=1e-12)
        assert parts["tau_z_ht"][0] == pytest.approx(-0.13333, abs=1e-12)
        assert tau == pytest.approx(-0.23280, abs=1e-5)

    def test_no_excess_demand_contrast(self):
        tau, _ = indirect_effect(self._plug_in_dataset(0.0))
        assert tau == 0.0

    def test_identity_recomputation(self, tech_report):
        r = tech_report
        again = -(r.delta_y_hat @ np.linalg.solve(r.delta_z_hat, r.tau_z_ht))
        assert again == r.tau_aie_hat
        assert -(r.gamma_hat @ r.tau_z_ht) == pytest.approx(r.tau_aie_hat, abs=1e-15)

    def test_ill_conditioned_jacobian(self):
        U = np.array([0.1, -0.1, 0.1, -0.1])
        Z = np.array([1.0, 1.0, -1.0, -1.0])
        with pytest.raises(IllConditionedError, match="h_n"):
            indirect_effect(_dataset([1, 1, 0, 0], U, np.arange(4.0), Z))

    def test_goat_hay_orientation(self):
        sc = make_scenario("goat-hay")
        from marketeffects.equilibrium import mean_field_jacobian, solve_mean_field_price

        data = run_experiment(sc, 20_000, Design(), seed=3)
        p = solve_mean_field_price(sc, 0.5, xi=data.xi_n).p_star
        H = mean_field_jacobian(sc, 0.5, p, data.xi_n)
        est = estimate(data).delta_z_hat
        # the off-diagonal pattern of the estimate follows rows = goods
        assert np.abs(est - H).max() < np.abs(est - H.T).max() or np.allclose(H, H.T, atol=0.05)
        assert np.abs(est - H).max() < 0.2


class TestVariances:
    def test_no_excess_demand_is_plain_ht_variance(self):
        rng = np.random.default_rng(0)
        W = np.tile([1.0, 0.0], 20)
        Y = rng.normal(size=40)
        data = _dataset(W, 0.1 * rng.choice([-1.0, 1.0], size=40), Y, np.zeros(40))
        assert variance_direct(data) == pytest.approx(np.var(np.where(W == 1, 2.0, -2.0) * Y), rel=1e-14)

    def test_zero_outcomes_zero_variance(self):
        data = _dataset(np.tile([1.0, 0.0], 5), 0.1 * np.tile([1.0, 1.0, -1.0, -1.0, 1.0], 2), np.zeros(10), np.zeros(10))
        assert variance_direct(data) == 0.0

    def test_constant_outcome_with_signed_weights(self):
        # a constant outcome still moves the signed HT transform by +/- 2c
        data = _dataset(np.tile([1.0, 0.0], 5), 0.1 * np.tile([1.0, 1.0, -1.0, -1.0, 1.0], 2),
                        np.full(10, 3.0), np.zeros(10))
        assert variance_direct(data) == pytest.approx(36.0)

    def test_needs_two_units_per_arm(self):
        data = _dataset([1, 0, 0, 0], [0.1, -0.1, 0.1, -0.1], np.arange(4.0), np.arange(4.0))
        with pytest.raises(DegenerateArmError):
            variance_direct(data)

    def test_exact_linear_outcome_has_no_residual(self, tech_data):
        g = np.array([-1.3])
        data = dataclasses.replace(tech_data, Y=tech_data.Z @ g)
        assert variance_indirect(data) <= 1e-20
        r = estimate(data)
        assert r.gamma_hat[0] == pytest.approx(-1.3, rel=1e-12)

    def test_corrected_at_least_uncorrected(self, tech):
        for s in range(30):
            r = estimate(run_experiment(tech, 2500, Design(), seed=s))
            assert r.sigma2_I_corrected >= r.sigma2_I_hat >= 0.0

    def test_variance_indirect_flag(self, tech_data, tech_report):
        assert variance_indirect(tech_data) == tech_report.sigma2_I_hat
        assert variance_indirect(tech_data, corrected=True) == tech_report.sigma2_I_corrected
        assert variance_direct(tech_data) == tech_report.sigma2_D_hat

    def test_gamma_converges(self, tech):
        gammas = [estimate(run_experiment(tech, 10_000, Design(), seed=s)).gamma_hat[0] for s in range(100)]
        assert np.median(gammas) == pytest.approx(-0.73333333 / 0.42, rel=0.10)


class TestIntervals:
    def test_arithmetic(self, tech_report):
        r = dataclasses.replace(tech_report, tau_ade_hat=2.0, sigma2_D_hat=1.0)
        lo, hi = confidence_intervals(r, n=100)["ade"]
        assert lo == pytest.approx(1.804, abs=1e-4)
        assert hi == pytest.approx(2.196, abs=1e-4)

    def test_zero_variance_is_a_point(self, tech_report):
        r = dataclasses.replace(tech_report, sigma2_D_hat=0.0)
        lo, hi = confidence_intervals(r)["ade"]
        assert lo == hi == r.tau_ade_hat

    def test_widths(self, tech_report):
        r = tech_report
        z = 1.959963984540054
        assert r.ci_ade[1] - r.ci_ade[0] == pytest.approx(2 * z * np.sqrt(r.sigma2_D_hat / r.n), rel=1e-12)
        width = 2 * z * np.sqrt(r.sigma2_I_corrected) / (np.sqrt(r.n) * r.h_n)
        assert r.ci_aie[1] - r.ci_aie[0] == pytest.approx(width, rel=1e-12)
        plain = 2 * z * np.sqrt(r.sigma2_I_hat) / (np.sqrt(r.n) * r.h_n)
        assert r.ci_aie_uncorrected[1] - r.ci_aie_uncorrected[0] == pytest.approx(plain, rel=1e-12)

    def test_uncorrected_choice(self, tech_data):
        r = estimate(tech_data, corrected=False)
        assert r.ci_aie == r.ci_aie_uncorrected

    @pytest.mark.parametrize("level", [0.0, 1.0, 1.5])
    def test_level_bounds(self, tech_report, level):
        with pytest.raises(ValueError):
            confidence_intervals(tech_report, level=level)


class TestPolicyEffects:
    def test_arithmetic(self, tech_report):
        r = dataclasses.replace(tech_report, tau_ade_hat=0.02, tau_aie_hat=-0.01)
        mpe, dpe, ipe = mpe_estimate(r, 0.05)
        assert mpe == pytest.approx(0.1, abs=1e-15)
        assert (dpe, ipe) == pytest.approx((0.2, -0.1))

    def test_binary_design_rejected(self, tech_report):
        with pytest.raises(ValueError, match="continuous"):
            mpe_estimate(tech_report)

    def test_components_sum_per_replication(self):
        sc = make_scenario("goat-hay")
        for s in range(10):
            r = estimate(run_experiment(sc, 1000, Design(), seed=s))
            assert r.tau_mpe_hat == r.tau_dpe_hat + r.tau_ipe_hat
            assert r.tau_dpe_hat == r.tau_ade_hat / (2 * r.xi_n)


class TestElasticities:
    def test_tuition_example(self):
        assert aie_from_elasticities(1.8, -1.5, 4.00) == pytest.approx(-2.1818, abs=1e-4)
        assert aie_from_elasticities(1.8, -1.5, 4.00) == pytest.approx(7.2 / -3.3, abs=1e-15)

    def test_zero_supply_elasticity(self):
        assert aie_from_elasticities(0.0, -1.2, 3.0) == 0.0

    def test_simple(self):
        assert aie_from_elasticities(1.0, -1.0, 2.0) == -1.0

    def test_equal_elasticities(self):
        with pytest.raises(ValueError, match="differ"):
            aie_from_elasticities(0.5, 0.5, 1.0)


class TestInvariance:
    @pytest.mark.parametrize("sid", ["tech", "goat-hay"])
    def test_permutation_invariance(self, sid):
        data = run_experiment(make_scenario(sid), 1500, Design(), seed=8)
        a = estimate(data).to_dict()
        for k in range(3):
            perm = np.random.default_rng(k).permutation(data.n)
            assert estimate(_permuted(data, perm)).to_dict() == a


class TestReport:
    def test_json_round_trip(self, tech_report, tmp_path):
        path = tmp_path / "report.json"
        tech_report.to_json(path)
        import json

        back = EstimateReport.from_dict(json.loads(path.read_text()))
        assert back.to_dict() == tech_report.to_dict()

    def test_consistency_in_n(self, tech):
        mf = true_effects(tech, 0.5)

        def rmse(n, reps):
            r = [estimate(run_experiment(tech, n, Design(), seed=(n, s))) for s in range(reps)]
            ade = np.array([x.tau_ade_hat for x in r])
            aie = np.array([x.tau_aie_hat for x in r])
            return (np.sqrt(np.mean((ade - mf.tau_ade_star) ** 2)),
                    np.sqrt(np.mean((aie - mf.tau_aie_star) ** 2)))

        small, large = rmse(500, 500), rmse(8000, 500)
        assert large[0] < small[0]
        assert large[1] < small[1]


class TestSklearnEstimator:
    def test_params_and_clone(self):
        est = MarketEffectEstimator(pi=0.4, level=0.9)
        assert est.get_params() == {"pi": 0.4, "h_n": None, "xi_n": None, "level": 0.9, "corrected": True}
        twin = clone(est)
        assert twin.get_params() == est.get_params() and twin is not est

    def test_fit_matches_estimate(self, tech_data, tech_report):
        est = MarketEffectEstimator().fit(tech_data.U, tech_data.Y, treatment=tech_data.treated,
                                          excess_demand=tech_data.Z)
        assert est.tau_ade_ == tech_report.tau_ade_hat
        assert est.tau_aie_ == tech_report.tau_aie_hat
        assert est.ci_aie_ == tech_report.ci_aie

    def test_fit_dataset(self):
        data = run_experiment(make_scenario("goat-hay"), 800, Design(), seed=2)
        est = MarketEffectEstimator().fit_dataset(data)
        assert est.xi_n == data.xi_n
        assert est.tau_mpe_ == estimate(data).tau_mpe_hat

    def test_rejects_bad_input(self, tech_data):
        est = MarketEffectEstimator()
        with pytest.raises(ValueError):
            est.fit(tech_data.U, tech_data.Y[:-1], treatment=tech_data.treated, excess_demand=tech_data.Z)
        with pytest.raises(ValueError, match="0/1"):
            est.fit(tech_data.U, tech_data.Y, treatment=tech_data.treated * 2, excess_demand=tech_data.Z)

    def test_summary_requires_fit(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            MarketEffectEstimator().summary()
