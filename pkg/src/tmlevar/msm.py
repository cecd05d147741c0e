"""EIF-variance components for working marginal structural models.

The machinery generalizes the scalar-parameter variance decomposition to a
set of regimes weighted through a working model: per-time outcomes are
built from smoothed conditional (co)variances of the sequential
regressions, combined with model-gradient weights h1, and estimated by one
sequential targeted regression per regime using a known-part/remainder
decomposition.

The tested path is static regimes with a binary outcome; dynamic-regime
variance is structurally supported but gated behind ``experimental`` since
the history-compatibility bookkeeping for dynamic rules is only sketched
abstractly in the derivation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit, logit

from .data import LongitudinalDataset, OutcomeScale, Regime, regime_indicator
from .glm import fit_linear, fit_logistic, predict_linear, predict_logistic
from .nuisance import (
    SequentialQ,
    TreatmentMechanism,
    build_design,
    clever_weight,
    default_q_formula,
    fit_targeting_epsilon,
    parse_formula,
)
from .variance import _raw_cumulative, sequential_counterfactual_mean


class SingularWeightError(ValueError):
    """Working-model value at 0 or 1 makes the h1 weight singular."""


class InterceptOnlyModel:
    """Logistic working model with a single intercept: m = expit(beta0)."""

    def __init__(self, beta0: float):
        self.beta0 = float(beta0)

    def value(self, regime: Regime, t: int) -> float:
        return float(expit(self.beta0))

    def gradient(self, regime: Regime, t: int) -> float:
        m = self.value(regime, t)
        return m * (1.0 - m)


class CallableModel:
    """Working model from explicit value/gradient callables of (d, t)."""

    def __init__(self, value_fn: Callable, gradient_fn: Callable):
        self._value = value_fn
        self._grad = gradient_fn

    def value(self, regime: Regime, t: int) -> float:
        return float(self._value(regime, t))

    def gradient(self, regime: Regime, t: int) -> float:
        return float(self._grad(regime, t))


@dataclass
class MsmSpec:
    """Regimes, user weight function h(d, t), and the working model."""

    regimes: Sequence[Regime]
    model: object
    weight_fn: Callable = lambda regime, t: 1.0

    def h(self, regime: Regime, t: int) -> float:
        v = float(self.weight_fn(regime, t))
        if v < 0:
            raise ValueError("weight function must be non-negative")
        return v


@dataclass
class H1Weights:
    """h1(d, t) = h * (dm/dbeta) / (m(1-m)) per regime."""

    t: int
    values: dict

    def __getitem__(self, label: str) -> float:
        return self.values[label]


def h1_weights(spec: MsmSpec, t: int) -> H1Weights:
    """Model-gradient weights; errors if the working model hits 0 or 1."""
    values = {}
    for regime in spec.regimes:
        m = spec.model.value(regime, t)
        if not 0.0 < m < 1.0:
            raise SingularWeightError(
                f"working model value {m} at regime {regime.label!r}")
        grad = spec.model.gradient(regime, t)
        values[regime.label] = spec.h(regime, t) * grad / (m * (1.0 - m))
    return H1Weights(t=t, values=values)


# ---------------------------------------------------------------------------
# cross-covariance regressions


@dataclass
class CrossCovarianceFit:
    """Regression of a residual cross-product on (treatment, covariate) history.

    Predictions evaluated along a regime's treatment path are clamped to
    the valid covariance range (non-negative on the diagonal, bounded by
    the Cauchy-Schwarz product of the diagonals off it).
    """

    data: LongitudinalDataset
    t: int
    fit: object
    terms: list
    diagonal: bool

    def _design_at(self, regime: Optional[Regime]) -> np.ndarray:
        overrides = {}
        if regime is not None:
            for s in range(min(self.t, self.data.K + 1)):
                overrides[self.data.treatment_cols[s]] = (
                    regime.assign(self.data, s).astype(float))
        cols = [np.ones(self.data.n)]
        for term in self.terms:
            col = np.ones(self.data.n)
            for name in term:
                values = overrides.get(name)
                if values is None:
                    values = self.data.column(name)
                col = col * values
            cols.append(col)
        return np.column_stack(cols)

    def values_at(self, regime: Optional[Regime] = None,
                  bound: Optional[np.ndarray] = None) -> np.ndarray:
        pred = predict_linear(self.fit, self._design_at(regime))
        if self.diagonal:
            return np.maximum(pred, 0.0)
        if bound is not None:
            return np.clip(pred, -bound, bound)
        return pred


def default_cross_formula(data: LongitudinalDataset, t: int) -> str:
    cols = list(data.treatment_cols[: min(t, data.K + 1)])
    cols += list(data.history_columns(t - 1))
    return ",".join(cols) if cols else "1"


def _residual_product(data, q1: SequentialQ, q2: SequentialQ,
                      t: int) -> np.ndarray:
    def resid(q):
        upper = (data.outcome if t == data.K + 1
                 else q.predictions(t + 1, targeted=q.is_targeted))
        return upper - q.predictions(t, targeted=q.is_targeted)
    return resid(q1) * resid(q2)


def sigma_t_cross_covariance(data: LongitudinalDataset, d1: Regime,
                             d2: Regime, q1: SequentialQ, q2: SequentialQ,
                             t: int, formula: Optional[str] = None
                             ) -> CrossCovarianceFit:
    """Fit the conditional covariance of two regimes' regression increments.

    Regresses the per-subject cross-product of increments at time t onto
    the observed (treatment, covariate) history through t-1.
    """
    if not 1 <= t <= data.K + 1:
        raise IndexError(f"time {t} outside 1..{data.K + 1}")
    product = _residual_product(data, q1, q2, t)
    rows = data.alive_at(t - 1)
    if not rows.any():
        raise ValueError("no rows with evaluable histories")
    formula = formula or default_cross_formula(data, t)
    terms = parse_formula(formula)
    shell = CrossCovarianceFit(data=data, t=t, fit=None, terms=terms,
                               diagonal=d1.label == d2.label)
    design = shell._design_at(None)
    shell.fit = fit_linear(design[rows], product[rows])
    return shell


# ---------------------------------------------------------------------------
# sigma^2 components


def _static_prefix_equal(d1: Regime, d2: Regime, t: int) -> bool:
    return d1.static[:t] == d2.static[:t]


def _check_static(spec: MsmSpec, experimental: bool):
    if not all(r.is_static for r in spec.regimes) and not experimental:
        raise NotImplementedError(
            "dynamic-regime MSM variance is experimental; pass "
            "experimental=True to proceed")


def sigma2_last_static(data: LongitudinalDataset, spec: MsmSpec,
                       mech: TreatmentMechanism, qs: dict,
                       formulas: Optional[dict] = None) -> dict:
    """Final-time EIF-variance component for static regimes, binary outcome.

    Uses the binomial identity E[(Y - Qbar)^2 | .] = Qbar(1-Qbar) to form
    the outcome Z1 = Qbar(1-Qbar)/g and estimates each regime's
    counterfactual mean by the sequential targeted ladder.  Returns the
    total sum h1^2 E*[Z1_d] together with the per-regime means.
    """
    if not np.isin(data.outcome, (0.0, 1.0)).all():
        raise ValueError("the Qbar(1-Qbar) identity requires a binary outcome")
    _check_static(spec, experimental=False)
    h1 = h1_weights(spec, data.K + 1)
    means, total = {}, 0.0
    for regime in spec.regimes:
        q = qs[regime.label]
        qk = np.clip(q.predictions(data.K + 1, targeted=q.is_targeted), 0, 1)
        z1 = qk * (1 - qk) / _raw_cumulative(mech, regime, data.K + 1)
        mu = sequential_counterfactual_mean(
            data, regime, mech, z1, last_node=data.K + 1,
            formulas=formulas, top_fit_values=z1)
        means[regime.label] = mu
        total += h1[regime.label] ** 2 * mu
    return {"sigma2_last": total, "per_regime_mean": means, "h1": h1.values}


def _z_outcomes(data, spec, mech, qs, h1_by_t, formulas, experimental):
    """Z(d, t) arrays for t = 0..K+1 per regime (static tested path)."""
    regimes = list(spec.regimes)
    binary = bool(np.isin(data.outcome, (0.0, 1.0)).all())
    cross_fits = {}

    def cross_values(d1, d2, t, q1, q2):
        key = (d1.label, d2.label, t)
        if key not in cross_fits:
            fit = sigma_t_cross_covariance(
                data, d1, d2, q1, q2, t,
                formula=(formulas or {}).get(("cross", t)))
            cross_fits[key] = fit
        return cross_fits[key]

    out = {r.label: {} for r in regimes}
    for d1 in regimes:
        q1 = qs[d1.label]
        m1 = spec.model.value(d1, data.K + 1)
        # t = 0: raw residual products of the baseline regressions
        z0 = np.zeros(data.n)
        for d2 in regimes:
            q2 = qs[d2.label]
            m2 = spec.model.value(d2, data.K + 1)
            z0 += h1_by_t[0][d2.label] * (
                (q1.predictions(1, targeted=q1.is_targeted) - m1)
                * (q2.predictions(1, targeted=q2.is_targeted) - m2))
        out[d1.label][0] = z0

        for t in range(1, data.K + 2):
            den = _raw_cumulative(mech, d1, t)
            acc = np.zeros(data.n)
            diag1 = None
            for d2 in regimes:
                if not _static_prefix_equal(d1, d2, t):
                    continue
                q2 = qs[d2.label]
                if t == data.K + 1 and binary:
                    # E[(Y-q1)(Y-q2) | history] = q1(1-q1) at the d1 path
                    qk = np.clip(q1.predictions(t, targeted=q1.is_targeted),
                                 0, 1)
                    sig = qk * (1 - qk)
                else:
                    if diag1 is None:
                        diag1 = cross_values(d1, d1, t, q1, q1).values_at(d1)
                    if d2.label == d1.label:
                        sig = diag1
                    else:
                        diag2 = cross_values(d2, d2, t, q2, q2).values_at(d1)
                        bound = np.sqrt(np.maximum(diag1 * diag2, 0.0))
                        sig = cross_values(d1, d2, t, q1, q2).values_at(
                            d1, bound=bound)
                acc += h1_by_t[t][d2.label] * sig
            out[d1.label][t] = acc / den
    return out


@dataclass
class MsmVarianceResult:
    sigma2: float
    per_regime: dict
    n: int

    @property
    def variance(self) -> float:
        return self.sigma2 / self.n


def msm_variance_total(data: LongitudinalDataset, spec: MsmSpec,
                       mech: TreatmentMechanism, qs: dict,
                       formulas: Optional[dict] = None,
                       experimental: bool = False) -> MsmVarianceResult:
    """Total EIF variance for the working MSM via combined outcomes.

    Runs one sequential targeted estimation per regime of the combined
    outcome sum_t h1(d,t) Z(d,t), carrying the known part explicitly and
    targeting only the remainder with the submodel
    logit Q(eps) = logit Q + eps * I(followers)/g.
    """
    _check_static(spec, experimental)
    regimes = list(spec.regimes)
    h1_by_t = {t: h1_weights(spec, t).values for t in range(data.K + 2)}
    z = _z_outcomes(data, spec, mech, qs, h1_by_t, formulas, experimental)

    per_regime = {}
    for regime in regimes:
        zd = z[regime.label]
        remainder = np.zeros(data.n)
        for m in range(data.K + 1, 0, -1):
            y = h1_by_t[m][regime.label] * zd[m] + remainder
            alive = data.alive_at(m - 1)
            rows = (regime_indicator(data, regime, m) > 0) & alive
            lo = min(0.0, float(np.min(y)))
            hi = max(0.0, float(np.max(y)))
            if hi - lo <= 0:
                remainder = y
                continue
            delta = 1e-3 * (hi - lo)
            scale = OutcomeScale(lo - delta, hi + delta)
            ys = scale.to_unit(y)
            if m == data.K + 1:
                # the top-level conditional expectation is y itself
                fitted = ys
            else:
                formula = ((formulas or {}).get(m)
                           or default_q_formula(data, m))
                design = build_design(data, formula)
                fit = fit_logistic(design[rows], ys[rows])
                fitted = predict_logistic(fit, design)
            fitted = np.where(alive, fitted, ys)
            H = clever_weight(mech, regime, m)
            off = logit(np.clip(fitted[rows], 1e-12, 1 - 1e-12))
            eps = fit_targeting_epsilon(ys[rows], off, H[rows],
                                        "clever-covariate")
            hreg = 1.0 / mech.cumulative_regime(regime, m)
            upd = expit(logit(np.clip(fitted, 1e-12, 1 - 1e-12)) + eps * hreg)
            remainder = scale.from_unit(np.where(alive, upd, ys))
        final = h1_by_t[0][regime.label] * zd[0] + remainder
        per_regime[regime.label] = float(np.mean(final))

    return MsmVarianceResult(sigma2=float(sum(per_regime.values())),
                             per_regime=per_regime, n=data.n)


def msm_intercept_identity_check(data: LongitudinalDataset, spec: MsmSpec,
                                 mech: TreatmentMechanism, qs: dict,
                                 formulas: Optional[dict] = None) -> dict:
    """Verify sigma2_{K+1} = beta0 * sum_d h1 (the weighted-intercept route).

    beta0 is the intercept of the weighted working model for the outcome
    Z(K+1) (the h1-weighted average of the per-regime targeted means);
    multiplying it back by sum h1 must reproduce the direct component sum.
    """
    last = sigma2_last_static(data, spec, mech, qs, formulas=formulas)
    h1 = last["h1"]
    denom = sum(h1.values())
    if denom == 0:
        raise ZeroDivisionError("sum of h1 weights is zero")
    # per-regime means of the combined outcome Z(d, K+1) = h1 * Z1_d
    beta0 = sum(h1[label] * (h1[label] * mu)
                for label, mu in last["per_regime_mean"].items()) / denom
    via_intercept = beta0 * denom
    return {"beta0": beta0, "direct": last["sigma2_last"],
            "via_intercept": via_intercept,
            "abs_difference": abs(via_intercept - last["sigma2_last"])}
