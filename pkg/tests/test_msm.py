import numpy as np
import pandas as pd
import pytest
from scipy.special import expit, logit

from discrete_world import longitudinal_world, point_world
from tmlevar.data import LongitudinalDataset, Regime
from tmlevar.estimators import modified_tmle_mean
from tmlevar.msm import (
    CallableModel,
    InterceptOnlyModel,
    MsmSpec,
    SingularWeightError,
    h1_weights,
    msm_intercept_identity_check,
    msm_variance_total,
    sigma2_last_static,
    sigma_t_cross_covariance,
)
from tmlevar.nuisance import TreatmentMechanism, fit_sequential_q
from tmlevar.variance import (
    robust_sigma2_t_tmle,
    robust_variance_total,
    variance_z_outcome,
)


@pytest.fixture(scope="module")
def census_k2():
    world = longitudinal_world()
    data = world.census()
    mech = world.true_mechanism(data)
    qf = world.saturated_q_formulas()
    regs, qs, results = [], {}, {}
    for vec in ((1, 1, 1), (0, 0, 0)):
        reg = Regime(f"d{vec[0]}", static=vec)
        regs.append(reg)
        q = fit_sequential_q(data, reg, mech, formulas=qf)
        res = modified_tmle_mean(data, reg, mech, q)
        qs[reg.label] = res.q
        results[reg.label] = res
    return world, data, mech, qf, regs, qs, results


class TestH1Weights:
    def test_intercept_only_cancels_to_h(self):
        regs = [Regime.always(0), Regime.never(0)]
        spec = MsmSpec(regimes=regs, model=InterceptOnlyModel(0.4),
                       weight_fn=lambda r, t: 2.5)
        h1 = h1_weights(spec, 1)
        assert h1["always"] == pytest.approx(2.5)
        assert h1["never"] == pytest.approx(2.5)

    def test_gradient_ratio_matches_finite_differences(self):
        regs = [Regime.always(0), Regime.never(0)]
        beta = 0.3

        def m_at(b, regime):
            shift = 0.5 if regime.label == "always" else -0.25
            return expit(b + shift)

        eps = 1e-6
        model = CallableModel(
            lambda r, t: m_at(beta, r),
            lambda r, t: (m_at(beta + eps, r) - m_at(beta - eps, r))
            / (2 * eps))
        spec = MsmSpec(regimes=regs, model=model)
        h1 = h1_weights(spec, 1)
        for r in regs:
            m = m_at(beta, r)
            # logistic gradient is m(1-m), so the ratio collapses to 1
            assert h1[r.label] == pytest.approx(1.0, abs=1e-6)

    def test_boundary_model_value_errors(self):
        spec = MsmSpec(regimes=[Regime.always(0)],
                       model=CallableModel(lambda r, t: 1.0,
                                           lambda r, t: 0.0))
        with pytest.raises(SingularWeightError):
            h1_weights(spec, 1)


class TestSigma2LastStatic:
    def test_single_regime_reduces_to_scalar_component(self, census_k2):
        world, data, mech, qf, regs, qs, results = census_k2
        reg = regs[0]
        psi = results[reg.label].psi_hat
        spec = MsmSpec(regimes=[reg], model=InterceptOnlyModel(logit(psi)))
        last = sigma2_last_static(data, spec, mech,
                                  {reg.label: qs[reg.label]}, formulas=qf)
        z = variance_z_outcome(data, reg, mech, qs[reg.label], data.K + 1)
        scalar = robust_sigma2_t_tmle(data, reg, mech, z, data.K + 1,
                                      q=qs[reg.label], formulas=qf)
        assert last["sigma2_last"] == pytest.approx(scalar, abs=1e-6)

    def test_census_matches_enumeration(self, census_k2):
        world, data, mech, qf, regs, qs, results = census_k2
        spec = MsmSpec(regimes=regs, model=InterceptOnlyModel(0.0))
        last = sigma2_last_static(data, spec, mech, qs, formulas=qf)
        exact = sum(world.sigma2_t(v, 3) for v in ((1, 1, 1), (0, 0, 0)))
        assert last["sigma2_last"] == pytest.approx(exact, abs=1e-6)

    def test_constant_half_qbar_unit_g(self):
        # g = 1 and Qbar = 1/2 give sigma2 = 0.25 * sum h1^2
        n = 64
        frame = pd.DataFrame({"W1": np.zeros(n), "A0": np.ones(n, int),
                              "Y": np.tile([0, 1], n // 2)})
        data = LongitudinalDataset.from_frame(frame)
        mech = TreatmentMechanism.from_probabilities(
            data, np.full((n, 1), 1.0 - 1e-12))
        reg = Regime.always(0)
        q = fit_sequential_q(data, reg, mech, formulas={1: "1"})
        spec = MsmSpec(regimes=[reg], model=InterceptOnlyModel(0.0),
                       weight_fn=lambda r, t: 2.0)
        last = sigma2_last_static(data, spec, mech, {reg.label: q},
                                  formulas={1: "1"})
        assert last["sigma2_last"] == pytest.approx(4 * 0.25, rel=1e-6)

    def test_nonbinary_outcome_unsupported(self):
        frame = pd.DataFrame({"W1": [0.0, 1.0], "A0": [1, 1],
                              "Y": [0.3, 0.7]})
        data = LongitudinalDataset.from_frame(frame)
        mech = TreatmentMechanism.from_probabilities(data, [[0.9], [0.9]])
        reg = Regime.always(0)
        q = fit_sequential_q(data, reg, mech, formulas={1: "1"})
        spec = MsmSpec(regimes=[reg], model=InterceptOnlyModel(0.0))
        with pytest.raises(ValueError, match="binary"):
            sigma2_last_static(data, spec, mech, {reg.label: q})


class TestCrossCovariance:
    def test_diagonal_case_nonnegative(self, census_k2):
        world, data, mech, qf, regs, qs, results = census_k2
        reg = regs[0]
        fit = sigma_t_cross_covariance(data, reg, reg, qs[reg.label],
                                       qs[reg.label], 2)
        vals = fit.values_at(reg)
        assert np.all(vals >= 0)

    def test_independent_residuals_near_zero(self):
        # fabricate inner-level fits whose increments are independent coins
        from tmlevar.nuisance import SequentialQ
        rng = np.random.default_rng(4)
        n = 5000
        frame = pd.DataFrame({"W1": rng.binomial(1, 0.5, n).astype(float),
                              "A0": rng.binomial(1, 0.5, n),
                              "L1_1": rng.binomial(1, 0.5, n).astype(float),
                              "A1": rng.binomial(1, 0.5, n),
                              "Y": rng.binomial(1, 0.5, n)})
        data = LongitudinalDataset.from_frame(frame)
        scale = data.bounds
        d1 = Regime("a", static=(1, 1))
        d2 = Regime("b", static=(0, 0))

        def fake_q(spread):
            eps = rng.choice([-1.0, 1.0], size=n)
            preds = {2: scale.to_unit(0.5 + spread * eps),
                     1: scale.to_unit(np.full(n, 0.5))}
            return SequentialQ(regime=d1, scale=scale, mode="none",
                               initial_scaled=preds)

        q1, q2 = fake_q(0.2), fake_q(0.2)
        fit = sigma_t_cross_covariance(data, d1, d2, q1, q2, 1)
        # increments are independent mean-zero coins: covariance ~ 0
        assert np.max(np.abs(fit.values_at(d1))) < 0.02

    def test_census_diagonal_matches_conditional_variance(self, census_k2):
        world, data, mech, qf, regs, qs, results = census_k2
        reg = regs[1]
        sat = ("A0,A1,W1,L1_1,A0*A1,A0*W1,A0*L1_1,A1*W1,A1*L1_1,W1*L1_1,"
               "A0*A1*W1,A0*A1*L1_1,A0*W1*L1_1,A1*W1*L1_1,A0*A1*W1*L1_1")
        fit = sigma_t_cross_covariance(data, reg, reg, qs[reg.label],
                                       qs[reg.label], 2, formula=sat)
        vals = fit.values_at(reg)
        # exact conditional variance of Qbar_3 given history at the regime
        z = variance_z_outcome(data, reg, mech, qs[reg.label], 2)
        den = mech.cumulative_regime(reg, 2, truncated=False)
        manual = z.values * den   # the raw squared increment
        # compare stratum means within (W1, L1_1) among regime followers
        follows = (data.treatments[:, 0] == 0) & (data.treatments[:, 1] == 0)
        for w in (0, 1):
            for l1 in (0, 1):
                stratum = ((data.column("W1") == w)
                           & (data.column("L1_1") == l1))
                exp = manual[stratum & follows].mean()
                assert vals[stratum][0] == pytest.approx(exp, abs=1e-8)


class TestMsmTotal:
    def test_single_regime_agrees_with_robust_total(self, census_k2):
        world, data, mech, qf, regs, qs, results = census_k2
        reg = regs[0]
        psi = results[reg.label].psi_hat
        spec = MsmSpec(regimes=[reg], model=InterceptOnlyModel(logit(psi)))
        formulas = {**qf, **world.saturated_cross_formulas()}
        tot = msm_variance_total(data, spec, mech,
                                 {reg.label: qs[reg.label]},
                                 formulas=formulas)
        rob = robust_variance_total(data, [reg], mech, [qs[reg.label]],
                                    weights=(1.0,), formulas=qf)
        assert tot.sigma2 == pytest.approx(rob.sigma2_total, abs=1e-6)

    def test_all_zero_outcomes_give_zero(self):
        n = 64
        frame = pd.DataFrame({"W1": np.zeros(n), "A0": np.ones(n, int),
                              "Y": np.zeros(n, int)})
        data = LongitudinalDataset.from_frame(frame)
        mech = TreatmentMechanism.from_probabilities(
            data, np.full((n, 1), 1.0 - 1e-12))
        reg = Regime.always(0)
        q = fit_sequential_q(data, reg, mech, formulas={1: "1"})
        center = float(np.mean(q.predictions(1)))
        spec = MsmSpec(regimes=[reg],
                       model=InterceptOnlyModel(logit(np.clip(
                           center, 1e-6, 1 - 1e-6))))
        tot = msm_variance_total(data, spec, mech, {reg.label: q},
                                 formulas={1: "1"})
        # the widened bounds keep Qbar ~ 1e-3 strictly inside (0, 1), so
        # the total collapses to ~Qbar(1-Qbar) rather than exactly zero
        assert tot.sigma2 == pytest.approx(0.0, abs=2e-3)

    def test_census_two_regimes_match_enumeration(self, census_k2):
        world, data, mech, qf, regs, qs, results = census_k2
        spec = MsmSpec(regimes=regs, model=InterceptOnlyModel(0.0))
        formulas = {**qf, **world.saturated_cross_formulas()}
        tot = msm_variance_total(data, spec, mech, qs, formulas=formulas)
        # disjoint regimes with h1 = 1 and centering m: per-regime totals are
        # sum_t sigma2_t plus the empirical second moment of (Qbar_1 - m)
        m = expit(0.0)
        exact = 0.0
        for vec, reg in zip(((1, 1, 1), (0, 0, 0)), regs):
            exact += sum(world.sigma2_t(vec, t) for t in (1, 2, 3))
            q1 = qs[reg.label].predictions(1, targeted=True)
            exact += np.mean((q1 - m) ** 2)
        # cross term at t=0
        q1a = qs[regs[0].label].predictions(1, targeted=True)
        q1b = qs[regs[1].label].predictions(1, targeted=True)
        exact += 2 * np.mean((q1a - m) * (q1b - m))
        assert tot.sigma2 == pytest.approx(exact, abs=1e-6)

    def test_dynamic_regimes_gated(self, census_k2):
        world, data, mech, qf, regs, qs, results = census_k2
        dyn = Regime("dyn", rule=lambda d, t: np.ones(d.n, dtype=int))
        spec = MsmSpec(regimes=[dyn], model=InterceptOnlyModel(0.0))
        with pytest.raises(NotImplementedError):
            msm_variance_total(data, spec, mech, {"dyn": qs["d1"]})

    def test_overlapping_static_regimes_cross_terms(self, census_k2):
        # regimes sharing a prefix exercise the indicator algebra
        world, data, mech, qf, regs, qs, results = census_k2
        late = Regime("late", static=(1, 1, 0))
        q_late = modified_tmle_mean(
            data, late, mech,
            fit_sequential_q(data, late, mech, formulas=qf)).q
        spec = MsmSpec(regimes=[regs[0], late],
                       model=InterceptOnlyModel(0.1))
        tot = msm_variance_total(
            data, spec, mech,
            {regs[0].label: qs[regs[0].label], "late": q_late},
            formulas=qf)
        assert np.isfinite(tot.sigma2) and tot.sigma2 > 0


class TestInterceptIdentity:
    def test_one_regime_trivial(self, census_k2):
        world, data, mech, qf, regs, qs, results = census_k2
        reg = regs[0]
        spec = MsmSpec(regimes=[reg], model=InterceptOnlyModel(0.0))
        chk = msm_intercept_identity_check(data, spec, mech,
                                           {reg.label: qs[reg.label]},
                                           formulas=qf)
        assert chk["abs_difference"] < 1e-8

    def test_two_regimes_equal_weights(self, census_k2):
        world, data, mech, qf, regs, qs, results = census_k2
        spec = MsmSpec(regimes=regs, model=InterceptOnlyModel(0.0))
        chk = msm_intercept_identity_check(data, spec, mech, qs,
                                           formulas=qf)
        assert chk["abs_difference"] < 1e-8
        # beta0 is the h1-weighted average of the per-regime means
        last = sigma2_last_static(data, spec, mech, qs, formulas=qf)
        mus = list(last["per_regime_mean"].values())
        assert chk["beta0"] == pytest.approx(np.mean(mus), rel=1e-9)

    def test_zero_weights_rejected(self, census_k2):
        world, data, mech, qf, regs, qs, results = census_k2
        spec = MsmSpec(regimes=regs, model=InterceptOnlyModel(0.0),
                       weight_fn=lambda r, t: 0.0)
        with pytest.raises(ZeroDivisionError):
            msm_intercept_identity_check(data, spec, mech, qs, formulas=qf)
