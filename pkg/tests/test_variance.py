import numpy as np
import pandas as pd
import pytest

from discrete_world import longitudinal_world, point_world
from tmlevar.data import LongitudinalDataset, Regime
from tmlevar.estimators import (
    EifDecomposition,
    contrast,
    modified_tmle_mean,
    tmle_mean,
)
from tmlevar.nuisance import (
    EstimationError,
    TreatmentMechanism,
    fit_g,
    fit_sequential_q,
)
from tmlevar.simgen import DgpConfig, gen_long, gen_point
from tmlevar.variance import (
    UnsupportedContrastError,
    bootstrap_targeting_variance,
    convex_combo_variance,
    empirical_eif_variance,
    point_treatment_robust_variance,
    red_flag_report,
    robust_sigma2_t_ipw,
    robust_sigma2_t_tmle,
    robust_variance_total,
    variance_z_outcome,
    wald_inference,
)


def _fit_all(data, truncation=None):
    K = data.K
    d1, d0 = Regime.always(K), Regime.never(K)
    mech = fit_g(data, truncation=truncation)
    q1 = fit_sequential_q(data, d1, mech)
    q0 = fit_sequential_q(data, d0, mech)
    m1 = modified_tmle_mean(data, d1, mech, q1)
    m0 = modified_tmle_mean(data, d0, mech, q0)
    return d1, d0, mech, q1, q0, m1, m0


@pytest.fixture(scope="module")
def census_k2():
    world = longitudinal_world()
    data = world.census()
    mech = world.true_mechanism(data)
    qf = world.saturated_q_formulas()
    regs, results = [], []
    for vec in ((1, 1, 1), (0, 0, 0)):
        reg = Regime(f"d{vec[0]}", static=vec)
        q = fit_sequential_q(data, reg, mech, formulas=qf)
        regs.append(reg)
        results.append(modified_tmle_mean(data, reg, mech, q))
    return world, data, mech, qf, regs, results


class TestEmpiricalEif:
    def test_constant_values_give_zero(self):
        eif = EifDecomposition(components=np.full((10, 2), 0.7),
                               regime_label="d")
        eif.components[:, 1] = 0.0
        assert empirical_eif_variance(eif).variance == 0.0

    def test_two_point_hand_computation(self):
        comps = np.array([[-1.0, 0.0], [1.0, 0.0]])
        eif = EifDecomposition(components=comps, regime_label="d")
        # sample variance of {-1, +1} is 2; divided by n=2 gives 1
        assert empirical_eif_variance(eif).variance == pytest.approx(1.0)

    def test_requires_two_subjects(self):
        eif = EifDecomposition(components=np.zeros((1, 2)),
                               regime_label="d")
        with pytest.raises(ValueError):
            empirical_eif_variance(eif)


class TestVarianceZOutcome:
    def test_t0_is_centered_square_with_unit_denominator(self):
        data = gen_point(DgpConfig(0.0, 0.0, 300, 1))
        d1, d0, mech, q1, q0, m1, m0 = _fit_all(data)
        z = variance_z_outcome(data, d1, mech, m1.q, 0,
                               psi_hat=m1.psi_hat)
        q1_pred = m1.q.predictions(1, targeted=True)
        assert np.allclose(z.values, (q1_pred - m1.psi_hat) ** 2)

    def test_equal_regressions_give_zero(self, census_k2):
        world, data, mech, qf, regs, results = census_k2
        q = results[0].q
        # forcing both levels to the same predictions zeroes the increment
        clone = q.copy_untargeted()
        clone.targeted_scaled = dict(q.targeted_scaled)
        clone.targeted_scaled[3] = q.targeted_scaled[2]
        z = variance_z_outcome(data, regs[0], mech, clone, 2)
        assert np.allclose(z.values, 0.0)

    def test_census_values_match_hand_formula(self, census_k2):
        world, data, mech, qf, regs, results = census_k2
        reg, res = regs[0], results[0]
        z = variance_z_outcome(data, reg, mech, res.q, 3)
        manual = ((data.outcome - res.q.predictions(3, targeted=True)) ** 2
                  / mech.cumulative_regime(reg, 3, truncated=False))
        assert np.allclose(z.values, manual)

    def test_negative_values_rejected(self):
        with pytest.raises(ValueError):
            from tmlevar.variance import VarianceZOutcome
            VarianceZOutcome(values=np.array([-0.5]), t=1, regime_label="d")


class TestRobustSigma2:
    def test_constant_outcome_returns_constant(self):
        data = gen_point(DgpConfig(0.0, 0.0, 200, 2))
        d1, d0, mech, q1, q0, m1, m0 = _fit_all(data)
        from tmlevar.variance import VarianceZOutcome
        z = VarianceZOutcome(values=np.full(200, 3.25), t=1,
                             regime_label="always")
        s = robust_sigma2_t_tmle(data, d1, mech, z, 1)
        assert s == pytest.approx(3.25, abs=1e-6)

    def test_zero_outcome_returns_zero(self):
        data = gen_point(DgpConfig(0.0, 0.0, 200, 2))
        d1, d0, mech, q1, q0, m1, m0 = _fit_all(data)
        from tmlevar.variance import VarianceZOutcome
        z = VarianceZOutcome(values=np.zeros(200), t=1, regime_label="a")
        assert robust_sigma2_t_tmle(data, d1, mech, z, 1) == 0.0

    def test_census_components_match_enumeration(self, census_k2):
        world, data, mech, qf, regs, results = census_k2
        for reg, res, vec in zip(regs, results,
                                 ((1, 1, 1), (0, 0, 0))):
            for t in (1, 2, 3):
                z = variance_z_outcome(data, reg, mech, res.q, t)
                s = robust_sigma2_t_tmle(data, reg, mech, z, t,
                                         q=res.q, formulas=qf)
                assert s == pytest.approx(world.sigma2_t(vec, t), abs=1e-6)

    def test_ipw_component_examples(self, census_k2):
        world, data, mech, qf, regs, results = census_k2
        reg, res = regs[0], results[0]
        z = variance_z_outcome(data, reg, mech, res.q, 2)
        s = robust_sigma2_t_ipw(data, reg, mech, z, 2)
        assert s == pytest.approx(world.sigma2_t((1, 1, 1), 2), abs=1e-6)

    def test_ipw_all_followers_unit_g_is_mean(self):
        frame = pd.DataFrame({"W1": np.zeros(50), "A0": np.ones(50, int),
                              "Y": np.tile([0, 1], 25)})
        data = LongitudinalDataset.from_frame(frame)
        mech = TreatmentMechanism.from_probabilities(
            data, np.full((50, 1), 1.0 - 1e-12))
        from tmlevar.variance import VarianceZOutcome
        z = VarianceZOutcome(values=np.arange(50.0), t=1, regime_label="a")
        s = robust_sigma2_t_ipw(data, Regime.always(0), mech, z, 1)
        assert s == pytest.approx(np.mean(np.arange(50.0)), rel=1e-9)

    def test_ipw_no_followers_zero_with_warning(self):
        frame = pd.DataFrame({"W1": [0.0, 1.0], "A0": [0, 0], "Y": [1, 0]})
        data = LongitudinalDataset.from_frame(frame)
        mech = TreatmentMechanism.from_probabilities(data, [[0.5], [0.5]])
        from tmlevar.variance import VarianceZOutcome
        z = VarianceZOutcome(values=np.ones(2), t=1, regime_label="a")
        with pytest.warns(UserWarning, match="no followers"):
            s = robust_sigma2_t_ipw(data, Regime.always(0), mech, z, 1)
        assert s == 0.0


class TestRobustTotal:
    def test_census_contrast_matches_enumerated_variance(self, census_k2):
        world, data, mech, qf, regs, results = census_k2
        rob = robust_variance_total(data, regs, mech,
                                    [r.q for r in results], formulas=qf)
        exact = world.var_dstar([(1, 1, 1), (0, 0, 0)],
                                weights=(1.0, -1.0))
        assert rob.sigma2_total == pytest.approx(exact, abs=1e-6)
        assert all(v >= 0 for v in rob.sigma2_components.values())

    def test_single_regime_census(self, census_k2):
        world, data, mech, qf, regs, results = census_k2
        rob = robust_variance_total(data, [regs[0]], mech,
                                    [results[0].q], weights=(1.0,),
                                    formulas=qf)
        assert rob.sigma2_total == pytest.approx(
            world.var_dstar([(1, 1, 1)]), abs=1e-6)

    def test_point_treatment_paths_agree(self):
        # two code paths, one number
        for seed in range(50):
            data = gen_point(DgpConfig(0.0, 0.5, 300, 100 + seed))
            d1, d0, mech, q1, q0, m1, m0 = _fit_all(data)
            gen = robust_variance_total(data, [d1, d0], mech,
                                        [m1.q, m0.q])
            ded = point_treatment_robust_variance(data, [d1, d0], mech,
                                                  [m1.q, m0.q])
            assert abs(gen.sigma2_total - ded.sigma2_total) < 1e-10

    def test_shared_follower_contrast_rejected(self):
        data = gen_long(DgpConfig(0.0, 0.0, 300, 3, horizon="longitudinal"))
        mech = fit_g(data, truncation=0.001)
        d1 = Regime("a", static=(1, 1, 1))
        d2 = Regime("b", static=(1, 1, 0))
        with pytest.raises(UnsupportedContrastError):
            robust_variance_total(data, [d1, d2], mech, [None, None])

    def test_dedicated_path_requires_point_treatment(self):
        data = gen_long(DgpConfig(0.0, 0.0, 200, 3, horizon="longitudinal"))
        d1, d0, mech, q1, q0, m1, m0 = _fit_all(data, truncation=0.001)
        with pytest.raises(ValueError):
            point_treatment_robust_variance(data, [d1, d0], mech,
                                            [m1.q, m0.q])

    def test_components_nonnegative_on_simulated_data(self):
        data = gen_long(DgpConfig(-1.0, 0.5, 400, 4,
                                  horizon="longitudinal"))
        d1, d0, mech, q1, q0, m1, m0 = _fit_all(data, truncation=0.001)
        rob = robust_variance_total(data, [d1, d0], mech, [m1.q, m0.q])
        assert rob.variance >= 0
        assert all(v >= 0 for v in rob.sigma2_components.values())
        total = sum(rob.sigma2_components.values())
        assert total == pytest.approx(rob.sigma2_total, rel=1e-12)


class TestBootstrap:
    def test_identical_subjects_give_zero_variance(self):
        n = 40
        frame = pd.DataFrame({"W1": np.zeros(n), "A0": np.ones(n, int),
                              "Y": np.ones(n, int)})
        data = LongitudinalDataset.from_frame(frame)
        mech = TreatmentMechanism.from_probabilities(data,
                                                     np.full((n, 1), 0.8))
        q = fit_sequential_q(data, Regime.always(0), mech,
                             formulas={1: "1"})
        rep = bootstrap_targeting_variance(
            data, [Regime.always(0)], mech, [q], B=50, seed=1,
            weights=(1.0,))
        assert rep.variance == pytest.approx(0.0, abs=1e-20)

    def test_same_seed_bit_identical(self):
        data = gen_point(DgpConfig(0.0, 0.0, 300, 5))
        d1, d0, mech, q1, q0, m1, m0 = _fit_all(data)
        a = bootstrap_targeting_variance(data, [d1, d0], mech, [q1, q0],
                                         B=200, seed=42)
        b = bootstrap_targeting_variance(data, [d1, d0], mech, [q1, q0],
                                         B=200, seed=42)
        assert a.variance == b.variance
        assert np.array_equal(a.bootstrap_draws, b.bootstrap_draws)

    def test_different_seed_differs(self):
        data = gen_point(DgpConfig(0.0, 0.0, 300, 5))
        d1, d0, mech, q1, q0, m1, m0 = _fit_all(data)
        a = bootstrap_targeting_variance(data, [d1, d0], mech, [q1, q0],
                                         B=200, seed=42)
        b = bootstrap_targeting_variance(data, [d1, d0], mech, [q1, q0],
                                         B=200, seed=43)
        assert a.variance != b.variance

    def test_rare_follower_replicates_dropped_and_flagged(self):
        # a single follower: ~37% of resamples miss it and are dropped
        n = 30
        rng = np.random.default_rng(6)
        frame = pd.DataFrame({"W1": rng.normal(size=n),
                              "A0": np.r_[1, np.zeros(n - 1, int)],
                              "Y": rng.binomial(1, 0.5, n)})
        data = LongitudinalDataset.from_frame(frame)
        mech = TreatmentMechanism.from_probabilities(
            data, np.full((n, 1), 0.5))
        q = fit_sequential_q(data, Regime.always(0), mech,
                             formulas={1: "1"})
        with pytest.warns(UserWarning, match="dropped"):
            rep = bootstrap_targeting_variance(
                data, [Regime.always(0)], mech, [q], B=200, seed=2,
                weights=(1.0,))
        assert rep.diagnostics["dropped_replicates"] > 0
        assert rep.diagnostics["flagged"]

    def test_requires_untargeted_staging(self):
        data = gen_point(DgpConfig(0.0, 0.0, 200, 7))
        d1, d0, mech, q1, q0, m1, m0 = _fit_all(data)
        with pytest.raises(ValueError):
            bootstrap_targeting_variance(data, [d1, d0], mech,
                                         [m1.q, m0.q], B=10, seed=0)

    def test_submodel_recorded_and_draws_retained(self):
        data = gen_point(DgpConfig(0.0, 0.0, 200, 8))
        d1, d0, mech, q1, q0, m1, m0 = _fit_all(data)
        rep = bootstrap_targeting_variance(data, [d1, d0], mech, [q1, q0],
                                           B=64, seed=3)
        assert rep.diagnostics["submodel"] == "clever-covariate"
        assert len(rep.bootstrap_draws) == 64


class TestConvexCombo:
    def _rep(self, v):
        return empirical_eif_variance(
            EifDecomposition(np.column_stack([
                np.sqrt(v * 2) * np.tile([-1.0, 1.0], 1),
                np.zeros(2)]), "d"))

    def test_equal_inputs_pass_through(self):
        a = self._rep(1.0)
        out = convex_combo_variance(a, a)
        assert out.variance == pytest.approx(a.variance)
        assert out.diagnostics["alpha"] == 0.0

    def test_arithmetic_example(self):
        from tmlevar.variance import VarianceReport
        e = VarianceReport(method="empirical-eif", variance=1.0, n=1)
        r = VarianceReport(method="robust-eif-tmle", variance=3.0, n=1)
        out = convex_combo_variance(e, r)
        assert out.diagnostics["alpha"] == pytest.approx(0.5)
        assert out.variance == pytest.approx(2.0)

    def test_zero_empirical_degenerate(self):
        from tmlevar.variance import VarianceReport
        e = VarianceReport(method="empirical-eif", variance=0.0, n=1)
        r = VarianceReport(method="robust-eif-tmle", variance=2.0, n=1)
        out = convex_combo_variance(e, r)
        assert out.variance == 0.0
        assert out.diagnostics["degenerate"]

    def test_both_zero_returns_robust(self):
        from tmlevar.variance import VarianceReport
        e = VarianceReport(method="empirical-eif", variance=0.0, n=1)
        r = VarianceReport(method="robust-eif-tmle", variance=0.0, n=1)
        assert convex_combo_variance(e, r).variance == 0.0


class TestWald:
    def test_degenerate_interval(self):
        from tmlevar.variance import VarianceReport
        rep = VarianceReport(method="empirical-eif", variance=0.0, n=10)
        w = wald_inference(0.3, rep)
        assert (w.lower, w.upper) == (0.3, 0.3)
        assert w.p_value == 0.0

    def test_standard_normal_quantile(self):
        from tmlevar.variance import VarianceReport
        rep = VarianceReport(method="empirical-eif", variance=1.0, n=10)
        w = wald_inference(0.0, rep, level=0.95)
        assert w.lower == pytest.approx(-1.959964, abs=1e-6)
        assert w.upper == pytest.approx(1.959964, abs=1e-6)
        assert w.p_value == pytest.approx(1.0)

    def test_pvalue_matches_z(self):
        from scipy.stats import norm
        from tmlevar.variance import VarianceReport
        rep = VarianceReport(method="empirical-eif", variance=0.04, n=10)
        w = wald_inference(0.5, rep)
        assert w.p_value == pytest.approx(2 * norm.sf(0.5 / 0.2), rel=1e-9)


class TestRedFlag:
    def test_clean_cell_unflagged(self):
        data = gen_point(DgpConfig(-2.0, 0.0, 500, 9))
        d1, d0, mech, q1, q0, m1, m0 = _fit_all(data)
        c = contrast([m1, m0])
        emp = empirical_eif_variance(c.eif)
        rob = robust_variance_total(data, [d1, d0], mech, [m1.q, m0.q])
        flag = red_flag_report(emp, rob)
        assert flag.variance_ratio < 2.0
        assert not flag.flagged

    def test_sparse_cell_flagged(self):
        flagged = 0
        for seed in range(5):
            data = gen_point(DgpConfig(1.0, 0.0, 500, 200 + seed))
            d1, d0, mech, q1, q0, m1, m0 = _fit_all(data)
            c = contrast([m1, m0])
            emp = empirical_eif_variance(c.eif)
            rob = robust_variance_total(data, [d1, d0], mech, [m1.q, m0.q])
            flagged += red_flag_report(emp, rob).flagged
        assert flagged >= 3

    def test_theoretical_violation_explodes(self):
        # a stratum with probability ~0 of treatment: robust explodes
        rng = np.random.default_rng(10)
        n = 800
        W = rng.binomial(1, 0.5, n).astype(float)
        pA = np.where(W == 1, 0.5, 0.002)
        A = rng.binomial(1, pA)
        Y = rng.binomial(1, 0.3 + 0.4 * W)
        frame = pd.DataFrame({"W1": W, "A0": A, "Y": Y})
        data = LongitudinalDataset.from_frame(frame)
        mech = TreatmentMechanism.from_probabilities(data, pA[:, None])
        d1, d0 = Regime.always(0), Regime.never(0)
        q1 = fit_sequential_q(data, d1, mech, formulas={1: "W1"})
        q0 = fit_sequential_q(data, d0, mech, formulas={1: "W1"})
        m1 = modified_tmle_mean(data, d1, mech, q1)
        m0 = modified_tmle_mean(data, d0, mech, q0)
        c = contrast([m1, m0])
        emp = empirical_eif_variance(c.eif)
        rob = robust_variance_total(data, [d1, d0], mech, [m1.q, m0.q],
                                    formulas={1: "W1"})
        flag = red_flag_report(emp, rob)
        assert flag.variance_ratio > 2.0
        assert flag.flagged


class TestReportSerialization:
    def test_to_dict_round_trips_through_json(self):
        import json
        data = gen_point(DgpConfig(0.0, 0.0, 200, 11))
        d1, d0, mech, q1, q0, m1, m0 = _fit_all(data)
        rob = robust_variance_total(data, [d1, d0], mech, [m1.q, m0.q])
        boot = bootstrap_targeting_variance(data, [d1, d0], mech,
                                            [q1, q0], B=16, seed=0)
        for rep in (rob, boot):
            text = json.dumps(rep.to_dict(), sort_keys=True, default=float)
            assert json.loads(text)["method"] == rep.method
