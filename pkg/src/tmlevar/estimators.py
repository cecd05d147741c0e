"""Point estimators of the intervention-specific mean and their contrasts.

Four estimators share the nuisance machinery: IPW, AIPW, the standard
(interleaved) TMLE, and the modified TMLE that freezes all initial
sequential regressions before a separate targeting pass.  Both TMLE
flavours solve the estimating equation of the efficient influence function:
after targeting, the per-subject influence values average to ~0 (below
1e-7 in absolute value).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logit
from sklearn.base import BaseEstimator

from .data import LongitudinalDataset, OutcomeScale, Regime, regime_indicator
from .nuisance import (
    CLEVER_COVARIATE,
    WEIGHTED_INTERCEPT,
    EstimationError,
    SequentialQ,
    TreatmentMechanism,
    apply_targeting_update,
    clever_weight,
    fit_g,
    fit_sequential_q,
    fit_targeting_epsilon,
)

IPW = "ipw"
AIPW = "aipw"
TMLE = "tmle"
MODIFIED_TMLE = "modified-tmle"


@dataclass
class EifDecomposition:
    """Per-subject, per-time components of the efficient influence function.

    ``components[:, t]`` holds D*_t for t = 0..K+1; components sum to
    ``total`` exactly, and D*_t is 0 for non-followers at t >= 1.
    """

    components: np.ndarray
    regime_label: str

    @property
    def total(self) -> np.ndarray:
        return self.components.sum(axis=1)

    @property
    def n(self) -> int:
        return self.components.shape[0]


@dataclass
class EstimateResult:
    """A point estimate together with the objects needed for inference."""

    psi_hat: float
    method: str
    regime_label: str
    eif: Optional[EifDecomposition] = None
    q: Optional[SequentialQ] = None
    mech: Optional[TreatmentMechanism] = None
    per_arm: Optional[dict] = None
    epsilon_trace: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)


def _q_predictions(data, q: SequentialQ, targeted: bool) -> dict:
    """Unscaled Q-bar_t for t = 1..K+1 plus the outcome at K+2."""
    preds = {t: q.predictions(t, targeted=targeted)
             for t in range(1, data.K + 2)}
    preds[data.K + 2] = data.outcome
    return preds


def eif_values(data: LongitudinalDataset, regime: Regime,
               mech: TreatmentMechanism, q: SequentialQ,
               psi_hat: Optional[float] = None,
               targeted: Optional[bool] = None) -> EifDecomposition:
    """Per-subject decomposition D* = sum_t H_t (Qbar_{t+1} - Qbar_t).

    The t=0 component is Qbar_1 - psi_hat; when ``psi_hat`` is omitted the
    plug-in mean of Qbar_1 is used.
    """
    targeted = q.is_targeted if targeted is None else targeted
    preds = _q_predictions(data, q, targeted)
    if psi_hat is None:
        psi_hat = float(np.mean(preds[1]))
    comps = np.zeros((data.n, data.K + 2))
    comps[:, 0] = preds[1] - psi_hat
    for t in range(1, data.K + 2):
        H = clever_weight(mech, regime, t)
        comps[:, t] = H * (preds[t + 1] - preds[t])
    return EifDecomposition(components=comps, regime_label=regime.label)


def ipw_mean(data: LongitudinalDataset, regime: Regime,
             mech: TreatmentMechanism) -> EstimateResult:
    """Inverse-probability-weighted mean: average of H_{K+1} * Y."""
    H = clever_weight(mech, regime, data.K + 1)
    if not np.any(H > 0):
        warnings.warn(f"no followers of regime {regime.label!r}; "
                      "IPW estimate is 0", stacklevel=2)
    psi = float(np.mean(H * data.outcome))
    return EstimateResult(psi_hat=psi, method=IPW, regime_label=regime.label,
                          mech=mech,
                          diagnostics={"max_weight": float(np.max(H))})


def aipw_mean(data: LongitudinalDataset, regime: Regime,
              mech: TreatmentMechanism, q: SequentialQ) -> EstimateResult:
    """Augmented IPW: the estimating-equation solution of P_n D* = 0.

    Uses the untargeted sequential fits; the estimate is not guaranteed to
    respect the outcome bounds.
    """
    if q.mode != "none":
        raise ValueError("aipw_mean requires untargeted sequential fits")
    preds = _q_predictions(data, q, targeted=False)
    acc = preds[1].copy()
    for t in range(1, data.K + 2):
        H = clever_weight(mech, regime, t)
        acc += H * (preds[t + 1] - preds[t])
    psi = float(np.mean(acc))
    eif = eif_values(data, regime, mech, q, psi_hat=psi, targeted=False)
    return EstimateResult(psi_hat=psi, method=AIPW, regime_label=regime.label,
                          eif=eif, q=q, mech=mech)


def tmle_mean(data: LongitudinalDataset, regime: Regime,
              mech: TreatmentMechanism, formulas: Optional[dict] = None,
              submodel: str = WEIGHTED_INTERCEPT,
              scale: Optional[OutcomeScale] = None) -> EstimateResult:
    """Standard TMLE: targeting interleaved with the sequential regressions.

    Each backward step regresses the previous *targeted* fit, then fits a
    scalar fluctuation by offset logistic regression.  The estimate is the
    average targeted Qbar_1 and lies inside the outcome bounds.
    """
    q = fit_sequential_q(data, regime, mech, formulas=formulas,
                         targeted="interleaved", submodel=submodel,
                         scale=scale)
    psi = float(np.mean(q.predictions(1, targeted=True)))
    eif = eif_values(data, regime, mech, q, psi_hat=psi, targeted=True)
    return EstimateResult(psi_hat=psi, method=TMLE, regime_label=regime.label,
                          eif=eif, q=q, mech=mech,
                          epsilon_trace=dict(q.epsilons))


def modified_tmle_mean(data: LongitudinalDataset, regime: Regime,
                       mech: TreatmentMechanism, q: SequentialQ,
                       submodel: str = WEIGHTED_INTERCEPT) -> EstimateResult:
    """Modified TMLE: one targeting pass over frozen initial fits.

    ``q`` must hold untargeted sequential fits; the targeting pass runs
    t = K+1..1 with the frozen initial fit as offset and the previous
    *targeted* fit as dependent variable, so the initial fits can be reused
    across bootstrap replicates.
    """
    if q.mode != "none":
        raise ValueError("modified_tmle_mean requires untargeted fits")
    tq = q.copy_untargeted()
    tq.mode = "modified"
    tq.submodel = submodel
    scale = q.scale
    y_scaled = scale.to_unit(data.outcome)

    pseudo = y_scaled
    for t in range(data.K + 1, 0, -1):
        alive = data.alive_at(t - 1)
        rows = (regime_indicator(data, regime, t) > 0) & alive
        if not rows.any():
            raise EstimationError(
                f"regime {regime.label!r} unsupported at node {t - 1}: "
                "no followers")
        initial = tq.initial_scaled[t]
        H = clever_weight(mech, regime, t)
        off = logit(np.clip(initial[rows], 1e-12, 1 - 1e-12))
        eps = fit_targeting_epsilon(pseudo[rows], off, H[rows], submodel)
        hreg = 1.0 / mech.cumulative_regime(regime, t)
        upd = apply_targeting_update(initial, eps, submodel, hreg)
        upd = np.where(alive, upd, y_scaled)
        tq.targeted_scaled[t] = upd
        tq.epsilons[t] = eps
        pseudo = upd

    psi = float(np.mean(tq.predictions(1, targeted=True)))
    eif = eif_values(data, regime, mech, tq, psi_hat=psi, targeted=True)
    return EstimateResult(psi_hat=psi, method=MODIFIED_TMLE,
                          regime_label=regime.label, eif=eif, q=tq, mech=mech,
                          epsilon_trace=dict(tq.epsilons))


def contrast(results: Sequence[EstimateResult],
             weights: Sequence[float] = (1.0, -1.0)) -> EstimateResult:
    """Weighted combination of per-regime estimates (default: difference).

    The contrast EIF is the same weighted combination of the per-regime
    influence values, subject by subject.
    """
    if len(results) != len(weights):
        raise ValueError("one weight per result required")
    ns = {r.eif.n for r in results if r.eif is not None}
    if len(ns) > 1:
        raise ValueError("results come from datasets of different size")
    psi = float(sum(w * r.psi_hat for w, r in zip(weights, results)))
    label = "+".join(f"{w:+g}*{r.regime_label}"
                     for w, r in zip(weights, results))
    eif = None
    if all(r.eif is not None for r in results):
        comps = sum(w * r.eif.components for w, r in zip(weights, results))
        eif = EifDecomposition(components=comps, regime_label=label)
    per_arm = {r.regime_label: r for r in results}
    return EstimateResult(psi_hat=psi, method=results[0].method,
                          regime_label=label, eif=eif, per_arm=per_arm,
                          mech=results[0].mech)


# ---------------------------------------------------------------------------
# sklearn-style estimator façade


def _resolve_regimes(regimes, K: int):
    if regimes == "contrast" or regimes is None:
        return [Regime.always(K), Regime.never(K)], (1.0, -1.0)
    if isinstance(regimes, Regime):
        return [regimes], (1.0,)
    return list(regimes), ((1.0, -1.0) if len(regimes) == 2
                           else (1.0,) * len(regimes))


class InterventionMeanEstimator(BaseEstimator):
    """Base class for the intervention-mean estimators.

    Parameters
    ----------
    regimes : 'contrast', Regime or sequence of Regime
        'contrast' (default) compares the static always-treat and
        never-treat regimes with weights (+1, -1).
    event_process : str, optional
        Name of the terminal-event covariate process (e.g. 'L3').
    g_formulas, q_formulas : dict, optional
        Per-node design formulas for the treatment and outcome regressions.
    truncation : float, optional
        Lower bound for cumulative treatment probabilities.
    counting_process : bool, optional
        Monotone-treatment convention; auto-detected when None.
    """

    _method = None

    def __init__(self, regimes="contrast", event_process=None,
                 g_formulas=None, q_formulas=None, truncation=None,
                 counting_process=None, outcome_bounds=None):
        self.regimes = regimes
        self.event_process = event_process
        self.g_formulas = g_formulas
        self.q_formulas = q_formulas
        self.truncation = truncation
        self.counting_process = counting_process
        self.outcome_bounds = outcome_bounds

    def _coerce(self, X) -> LongitudinalDataset:
        if isinstance(X, LongitudinalDataset):
            return X
        bounds = None
        if self.outcome_bounds is not None:
            bounds = OutcomeScale(*self.outcome_bounds)
        return LongitudinalDataset.from_frame(
            X, event_process=self.event_process, bounds=bounds)

    def _estimate_arm(self, data, regime, mech) -> EstimateResult:
        raise NotImplementedError

    def fit(self, X, y=None):
        """Fit nuisances and estimate psi on a dataset or data frame."""
        data = self._coerce(X)
        regime_list, weights = _resolve_regimes(self.regimes, data.K)
        mech = fit_g(data, formulas=self.g_formulas,
                     truncation=self.truncation,
                     counting_process=self.counting_process)
        arms = [self._estimate_arm(data, d, mech) for d in regime_list]
        result = arms[0] if len(arms) == 1 else contrast(arms, weights)
        self.data_ = data
        self.mechanism_ = mech
        self.result_ = result
        self.arms_ = {r.regime_label: r for r in arms}
        self.psi_ = result.psi_hat
        self.per_arm_ = {r.regime_label: r.psi_hat for r in arms}
        self.eif_ = result.eif
        self.n_ = data.n
        return self

    def __sklearn_is_fitted__(self):
        return hasattr(self, "result_")


class IPWEstimator(InterventionMeanEstimator):
    """Inverse probability weighting for E[Y_d] and contrasts."""

    _method = IPW

    def _estimate_arm(self, data, regime, mech):
        res = ipw_mean(data, regime, mech)
        res.eif = EifDecomposition(
            components=np.zeros((data.n, data.K + 2)),
            regime_label=regime.label)
        H = clever_weight(mech, regime, data.K + 1)
        res.eif.components[:, 0] = H * data.outcome - res.psi_hat
        return res


class AIPWEstimator(InterventionMeanEstimator):
    """Augmented IPW (double robust estimating-equation estimator)."""

    _method = AIPW

    def _estimate_arm(self, data, regime, mech):
        q = fit_sequential_q(data, regime, mech, formulas=self.q_formulas,
                             targeted="none")
        return aipw_mean(data, regime, mech, q)


class TMLEEstimator(InterventionMeanEstimator):
    """Targeted minimum-loss estimator of E[Y_d] and contrasts.

    ``staging='interleaved'`` runs the standard TMLE; ``'modified'`` fits
    all initial regressions first and targets them in a separate pass
    (the staging required for the targeting-step bootstrap).
    """

    _method = TMLE

    def __init__(self, regimes="contrast", event_process=None,
                 g_formulas=None, q_formulas=None, truncation=None,
                 counting_process=None, outcome_bounds=None,
                 submodel=WEIGHTED_INTERCEPT, staging="modified"):
        super().__init__(regimes=regimes, event_process=event_process,
                         g_formulas=g_formulas, q_formulas=q_formulas,
                         truncation=truncation,
                         counting_process=counting_process,
                         outcome_bounds=outcome_bounds)
        self.submodel = submodel
        self.staging = staging

    def _estimate_arm(self, data, regime, mech):
        if self.staging == "interleaved":
            return tmle_mean(data, regime, mech, formulas=self.q_formulas,
                             submodel=self.submodel)
        q = fit_sequential_q(data, regime, mech, formulas=self.q_formulas,
                             targeted="none")
        return modified_tmle_mean(data, regime, mech, q,
                                  submodel=self.submodel)
