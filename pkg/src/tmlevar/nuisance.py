"""Treatment-mechanism fits, clever weights, and sequential outcome regressions.

Design matrices come from a small formula language: comma-separated terms
over column names, with ``*`` for interactions, e.g.
``W1,W2,L1_0,L2_0,L1_0*L2_0``.  An intercept is always included; the term
``1`` denotes an intercept-only design.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, logit

from .data import LongitudinalDataset, OutcomeScale, Regime, regime_indicator
from .glm import GlmFit, fit_logistic, predict_logistic

WEIGHTED_INTERCEPT = "weighted-intercept"
CLEVER_COVARIATE = "clever-covariate"
SUBMODELS = (WEIGHTED_INTERCEPT, CLEVER_COVARIATE)


class EstimationError(RuntimeError):
    """Estimation cannot proceed (e.g. a regime without followers)."""


# ---------------------------------------------------------------------------
# design formulas


def parse_formula(formula: str) -> list:
    """Split a formula into terms; each term is a tuple of column names."""
    terms = []
    for raw in formula.split(","):
        term = raw.strip()
        if not term or term == "1":
            continue
        terms.append(tuple(part.strip() for part in term.split("*")))
    return terms


def build_design(data: LongitudinalDataset, formula: str) -> np.ndarray:
    """Design matrix with leading intercept column."""
    terms = parse_formula(formula)
    cols = [np.ones(data.n)]
    for term in terms:
        col = np.ones(data.n)
        for name in term:
            col = col * data.column(name)
        cols.append(col)
    return np.column_stack(cols)


def _recent_interaction(cols, t: int) -> Optional[str]:
    if f"L1_{t}" in cols and f"L2_{t}" in cols:
        return f"L1_{t}*L2_{t}"
    return None


def default_g_formula(data: LongitudinalDataset, t: int) -> str:
    """Main terms in the covariate history through t, plus L1_t*L2_t."""
    cols = list(data.history_columns(t))
    inter = _recent_interaction(cols, t)
    if inter:
        cols.append(inter)
    return ",".join(cols) if cols else "1"


def default_q_formula(data: LongitudinalDataset, t: int) -> str:
    """Design for the regression at time t: history through t-1."""
    cols = list(data.history_columns(t - 1))
    inter = _recent_interaction(cols, t - 1)
    if inter:
        cols.append(inter)
    return ",".join(cols) if cols else "1"


def _resolve_formulas(data, formulas, default, times) -> dict:
    out = {}
    for t in times:
        if formulas is not None and t in formulas:
            out[t] = formulas[t]
        else:
            out[t] = default(data, t)
    return out


# ---------------------------------------------------------------------------
# treatment mechanism


@dataclass
class TreatmentMechanism:
    """Per-node treatment fits plus cumulative-probability machinery.

    ``node_probs[i, t]`` is the fitted P(A(t)=1 | history) at subject i's
    observed covariates.  Cumulative products are evaluated either along the
    observed treatment path or along a regime-consistent path, with the
    counting-process and terminal-event conventions applied (no probability
    contribution after treatment initiation under monotone treatments, or
    after the terminal event).  Cumulative values are floored at
    ``truncation`` when set.
    """

    data: LongitudinalDataset
    node_fits: list
    node_probs: np.ndarray
    formulas: dict
    truncation: Optional[float] = None
    counting_process: bool = False
    at_risk: Optional[np.ndarray] = None

    @property
    def K(self) -> int:
        return self.data.K

    @classmethod
    def from_probabilities(cls, data: LongitudinalDataset, node_probs,
                           truncation: Optional[float] = None,
                           counting_process: bool = False
                           ) -> "TreatmentMechanism":
        """Wrap externally supplied per-node treatment probabilities."""
        probs = np.asarray(node_probs, dtype=float)
        if probs.shape != (data.n, data.K + 1):
            raise ValueError(f"expected shape {(data.n, data.K + 1)}")
        return cls(data=data, node_fits=[None] * (data.K + 1),
                   node_probs=probs, formulas={},
                   truncation=truncation, counting_process=counting_process)

    def _observed_factor(self, t: int) -> np.ndarray:
        data = self.data
        A = data.treatments
        p = self.node_probs[:, t]
        factor = np.where(A[:, t] == 1, p, 1.0 - p)
        if self.counting_process and t >= 1:
            factor = np.where(A[:, t - 1] == 1, 1.0, factor)
        factor = np.where(data.alive_at(t), factor, 1.0)
        return factor

    def _regime_factor(self, regime: Regime, t: int) -> np.ndarray:
        data = self.data
        d_t = regime.assign(data, t)
        p = self.node_probs[:, t]
        factor = np.where(d_t == 1, p, 1.0 - p)
        if self.counting_process and t >= 1:
            d_prev = regime.assign(data, t - 1)
            # once treated the regime path continues treatment with certainty
            factor = np.where(d_prev == 1, np.where(d_t == 1, 1.0, 0.0), factor)
        factor = np.where(data.alive_at(t), factor, 1.0)
        return factor

    def _cumulative(self, factor_fn, t: int) -> np.ndarray:
        cum = np.ones(self.data.n)
        for s in range(min(t, self.K + 1)):
            cum = cum * factor_fn(s)
        return cum

    def cumulative_observed(self, t: int, truncated: bool = True) -> np.ndarray:
        """g_{0:t-1} at the observed treatments (empty product at t=0)."""
        cum = self._cumulative(self._observed_factor, t)
        if truncated and self.truncation is not None:
            cum = np.maximum(cum, self.truncation)
        return cum

    def cumulative_regime(self, regime: Regime, t: int,
                          truncated: bool = True) -> np.ndarray:
        """g_{0:t-1} with treatments set regime-consistently."""
        cum = self._cumulative(lambda s: self._regime_factor(regime, s), t)
        if truncated and self.truncation is not None:
            cum = np.maximum(cum, self.truncation)
        return cum

    def truncated_fraction(self, t: Optional[int] = None,
                           regime: Optional[Regime] = None) -> float:
        """Share of subjects whose cumulative probability was floored."""
        if self.truncation is None:
            return 0.0
        t = self.K + 1 if t is None else t
        if regime is None:
            raw = self.cumulative_observed(t, truncated=False)
        else:
            raw = self.cumulative_regime(regime, t, truncated=False)
        return float(np.mean(raw < self.truncation))


def fit_g(data: LongitudinalDataset, formulas: Optional[dict] = None,
          truncation: Optional[float] = None,
          counting_process: Optional[bool] = None) -> TreatmentMechanism:
    """Fit the treatment mechanism g_t(A(t) | history) at every node.

    With monotone (counting-process) treatments, each node's model is fit
    only among not-yet-treated subjects and P(A(t)=1 | A(t-1)=1) is 1.
    Nodes where the terminal event has occurred contribute probability 1.

    Parameters
    ----------
    formulas : dict, optional
        Per-node design formulas; defaults to main terms in the covariate
        history plus the current-time L1*L2 interaction.
    truncation : float, optional
        Lower bound applied to cumulative probabilities.
    counting_process : bool, optional
        Monotone-treatment convention; auto-detected when None.
    """
    A = data.treatments
    alive = data.alive_history()
    if counting_process is None:
        diffs = np.diff(A, axis=1)
        counting_process = data.K >= 1 and bool(np.all(diffs[alive[:, 1:]] >= 0))

    resolved = _resolve_formulas(data, formulas, default_g_formula,
                                 range(data.K + 1))
    fits, probs = [], np.zeros((data.n, data.K + 1))
    for t in range(data.K + 1):
        at_risk = alive[:, t].copy()
        if counting_process and t >= 1:
            at_risk &= A[:, t - 1] == 0
        design = build_design(data, resolved[t])
        resp = A[:, t].astype(float)
        observed = resp[at_risk]
        if at_risk.sum() == 0 or len(np.unique(observed)) < 2:
            value = float(observed.mean()) if at_risk.sum() else 0.5
            warnings.warn(
                f"degenerate treatment node {t}: single observed value; "
                f"using g = {value:g}", stacklevel=2)
            fits.append(None)
            probs[:, t] = np.clip(value, expit(-15.0), expit(15.0))
            continue
        fit = fit_logistic(design[at_risk], observed)
        fits.append(fit)
        probs[:, t] = predict_logistic(fit, design)

    return TreatmentMechanism(data=data, node_fits=fits, node_probs=probs,
                              formulas=resolved, truncation=truncation,
                              counting_process=counting_process)


def clever_weight(mech: TreatmentMechanism, regime: Regime,
                  t: int) -> np.ndarray:
    """H_t: follower indicator over the (truncated) cumulative probability.

    H_0 is identically 1; non-followers get exactly 0.
    """
    data = mech.data
    if not 0 <= t <= data.K + 2:
        raise IndexError(f"time {t} outside 0..{data.K + 2}")
    if t == 0:
        return np.ones(data.n)
    ind = regime_indicator(data, regime, t)
    return ind / mech.cumulative_regime(regime, t)


# ---------------------------------------------------------------------------
# sequential outcome regressions


@dataclass
class SequentialQ:
    """Backward-recursive regression fits for the regime-specific means.

    Predictions are stored on the unit scale defined by ``scale``; the
    regression at time t was fit among regime followers who were event-free
    through t-1, and predictions for post-event subjects are pinned at
    their (deterministic) observed outcome.
    """

    regime: Regime
    scale: OutcomeScale
    mode: str
    fits: dict = field(default_factory=dict)
    formulas: dict = field(default_factory=dict)
    initial_scaled: dict = field(default_factory=dict)
    targeted_scaled: dict = field(default_factory=dict)
    epsilons: dict = field(default_factory=dict)
    submodel: Optional[str] = None

    @property
    def is_targeted(self) -> bool:
        return bool(self.targeted_scaled)

    def predictions(self, t: int, targeted: bool = False) -> np.ndarray:
        """Q-bar at time t on the original outcome scale."""
        store = self.targeted_scaled if targeted else self.initial_scaled
        if t not in store:
            raise KeyError(f"no predictions at time {t}")
        return self.scale.from_unit(store[t])

    def copy_untargeted(self) -> "SequentialQ":
        return SequentialQ(regime=self.regime, scale=self.scale, mode="none",
                           fits=dict(self.fits), formulas=dict(self.formulas),
                           initial_scaled=dict(self.initial_scaled))


def fit_targeting_epsilon(y_scaled, offset_logit, weight_or_covariate,
                          submodel: str) -> float:
    """One-dimensional targeting update on the logistic scale.

    weighted-intercept: logit Q(eps) = logit Q + eps, observation weights H.
    clever-covariate:   logit Q(eps) = logit Q + eps*H, unit weights.
    Degenerate problems (zero total weight, constant saturated response)
    yield eps = 0; non-convergence falls back to 0 with a warning.
    """
    if submodel not in SUBMODELS:
        raise ValueError(f"unknown submodel {submodel!r}")
    h = np.asarray(weight_or_covariate, dtype=float)
    y = np.asarray(y_scaled, dtype=float)
    if y.size == 0 or np.sum(h) <= 0:
        return 0.0
    if submodel == WEIGHTED_INTERCEPT:
        fit = fit_logistic(np.ones((y.size, 1)), y, weights=h,
                           offset=offset_logit)
    else:
        fit = fit_logistic(h[:, None], y, offset=offset_logit)
    eps = float(fit.coefficients[0])
    if not fit.converged:
        if fit.separated:
            return float(np.clip(eps, -15.0, 15.0))
        warnings.warn(
            f"targeting step did not converge ({fit.message}); using eps=0",
            stacklevel=2)
        return 0.0
    return eps


def apply_targeting_update(initial_scaled, eps: float, submodel: str,
                           clever_values=None) -> np.ndarray:
    """Shift fitted values along the submodel at the regime-consistent path."""
    off = logit(np.clip(initial_scaled, 1e-12, 1.0 - 1e-12))
    if submodel == WEIGHTED_INTERCEPT:
        return expit(off + eps)
    return expit(off + eps * np.asarray(clever_values, dtype=float))


def fit_sequential_q(data: LongitudinalDataset, regime: Regime,
                     mech: TreatmentMechanism,
                     formulas: Optional[dict] = None,
                     targeted: str = "none",
                     submodel: str = WEIGHTED_INTERCEPT,
                     scale: Optional[OutcomeScale] = None) -> SequentialQ:
    """Backward sequential regressions for Q-bar_t, t = K+1 .. 1.

    With ``targeted='none'`` each regression's dependent variable is the
    previous *initial* fit (the staging used by the modified TMLE and
    AIPW).  With ``targeted='interleaved'`` each fit is targeted before
    being fed to the next regression, which yields the standard TMLE.
    """
    if targeted not in ("none", "interleaved"):
        raise ValueError("targeted must be 'none' or 'interleaved'")
    scale = data.scale if scale is None else scale
    formulas = _resolve_formulas(data, formulas, default_q_formula,
                                 range(1, data.K + 2))
    q = SequentialQ(regime=regime, scale=scale, mode=targeted,
                    formulas=formulas,
                    submodel=submodel if targeted == "interleaved" else None)

    y_scaled = scale.to_unit(data.outcome)
    pseudo = y_scaled
    for t in range(data.K + 1, 0, -1):
        alive = data.alive_at(t - 1)
        followers = regime_indicator(data, regime, t) > 0
        rows = followers & alive
        if not rows.any():
            raise EstimationError(
                f"regime {regime.label!r} unsupported at node {t - 1}: "
                "no followers")
        design = build_design(data, formulas[t])
        fit = fit_logistic(design[rows], pseudo[rows])
        preds = predict_logistic(fit, design)
        preds = np.where(alive, preds, y_scaled)
        q.fits[t] = fit
        q.initial_scaled[t] = preds

        if targeted == "interleaved":
            H = clever_weight(mech, regime, t)
            off = logit(np.clip(preds[rows], 1e-12, 1 - 1e-12))
            eps = fit_targeting_epsilon(pseudo[rows], off, H[rows], submodel)
            hreg = 1.0 / mech.cumulative_regime(regime, t)
            upd = apply_targeting_update(preds, eps, submodel, hreg)
            upd = np.where(alive, upd, y_scaled)
            q.targeted_scaled[t] = upd
            q.epsilons[t] = eps
            pseudo = upd
        else:
            pseudo = preds
    return q
