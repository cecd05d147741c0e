"""The three variance estimators, Wald inference, and sparsity diagnostics.

Methods
-------
* empirical-eif:   sample variance of the estimated influence values / n.
* robust-eif-tmle: re-expresses Var(D*) as a sum over time of counterfactual
  means sigma2_t = E_{P^d}[S_t] and estimates each by its own sequential
  targeted regression; becomes very large under positivity violations.
* robust-eif-ipw:  the simple IPW estimate of each sigma2_t (for comparison;
  prone to underestimating the variance under sparsity).
* bootstrap:       resamples subjects and reruns only the targeting pass of
  the modified TMLE on frozen nuisance fits.
* convex-combo:    data-driven mix of the empirical and robust estimates
  (experimental).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from .data import LongitudinalDataset, OutcomeScale, Regime, regime_indicator
from .estimators import EifDecomposition
from .glm import fit_logistic, predict_logistic
from .nuisance import (
    CLEVER_COVARIATE,
    WEIGHTED_INTERCEPT,
    EstimationError,
    SequentialQ,
    TreatmentMechanism,
    apply_targeting_update,
    build_design,
    clever_weight,
    default_q_formula,
    fit_targeting_epsilon,
)

EMPIRICAL_EIF = "empirical-eif"
ROBUST_EIF_TMLE = "robust-eif-tmle"
ROBUST_EIF_IPW = "robust-eif-ipw"
BOOTSTRAP = "bootstrap"
CONVEX_COMBO = "convex-combo"


class UnsupportedContrastError(EstimationError):
    """Contrast regimes share followers, so cross terms do not vanish."""


@dataclass
class VarianceReport:
    """A variance estimate for psi-hat, tagged by method.

    ``variance`` is on the estimator scale (sigma^2 / n).  Robust methods
    carry their per-time components; the bootstrap carries its retained
    draws.
    """

    method: str
    variance: float
    n: int
    sigma2_components: Optional[dict] = None
    bootstrap_draws: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be non-negative")

    @property
    def sigma2_total(self) -> float:
        return self.variance * self.n

    def to_dict(self) -> dict:
        out = {"method": self.method, "variance": self.variance, "n": self.n}
        if self.sigma2_components is not None:
            out["sigma2_components"] = {
                f"{label}:t={t}": v
                for (label, t), v in sorted(self.sigma2_components.items())}
        if self.bootstrap_draws is not None:
            out["bootstrap_draws_retained"] = int(len(self.bootstrap_draws))
        out["diagnostics"] = {
            k: (v.item() if isinstance(v, np.generic) else v)
            for k, v in self.diagnostics.items()}
        return out


@dataclass
class VarianceZOutcome:
    """Per-subject plug-in values of the variance outcome Z^d(t)."""

    values: np.ndarray
    t: int
    regime_label: str

    def __post_init__(self):
        if np.any(self.values < -1e-12):
            raise ValueError("variance outcomes must be non-negative")
        self.values = np.maximum(self.values, 0.0)


@dataclass
class WaldInference:
    estimate: float
    se: float
    lower: float
    upper: float
    p_value: float
    level: float

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "se": self.se,
                "lower": self.lower, "upper": self.upper,
                "p_value": self.p_value, "level": self.level}


@dataclass
class RedFlagReport:
    variance_ratio: float
    truncated_fraction: float
    max_clever_weight: float
    threshold: float
    flagged: bool

    def to_dict(self) -> dict:
        return {"variance_ratio": self.variance_ratio,
                "truncated_fraction": self.truncated_fraction,
                "max_clever_weight": self.max_clever_weight,
                "threshold (operational default)": self.threshold,
                "flagged": self.flagged}


# ---------------------------------------------------------------------------
# empirical EIF variance


def empirical_eif_variance(eif: EifDecomposition,
                           n: Optional[int] = None) -> VarianceReport:
    """Sample variance of the per-subject influence values over n."""
    n = eif.n if n is None else n
    if n < 2:
        raise ValueError("need at least two subjects")
    sigma2 = float(np.var(eif.total, ddof=1))
    return VarianceReport(method=EMPIRICAL_EIF, variance=sigma2 / n, n=n)


# ---------------------------------------------------------------------------
# robust EIF variance


def _raw_cumulative(mech: TreatmentMechanism, regime: Regime,
                    t: int) -> np.ndarray:
    """Untruncated cumulative probability, floored only for arithmetic.

    The variance outcomes divide by the plain plug-in g (no truncation):
    exploding values under positivity violations are the red flag this
    estimator is designed to raise.  Clever weights, in contrast, use the
    truncated cumulative.
    """
    return np.maximum(mech.cumulative_regime(regime, t, truncated=False),
                      1e-12)


def variance_z_outcome(data: LongitudinalDataset, regime: Regime,
                       mech: TreatmentMechanism, q: SequentialQ, t: int,
                       psi_hat: Optional[float] = None) -> VarianceZOutcome:
    """Observed outcome Z^d(t): squared regression increment over g.

    At t=0 the denominator is 1 and the squared term is (Qbar_1 - psi)^2;
    at t=K+1 the squared term is (Y - Qbar_{K+1})^2.
    """
    if not 0 <= t <= data.K + 1:
        raise IndexError(f"time {t} outside 0..{data.K + 1}")
    targeted = q.is_targeted
    if t == 0:
        q1 = q.predictions(1, targeted=targeted)
        psi = float(np.mean(q1)) if psi_hat is None else psi_hat
        vals = (q1 - psi) ** 2
    else:
        upper = (data.outcome if t == data.K + 1
                 else q.predictions(t + 1, targeted=targeted))
        lower = q.predictions(t, targeted=targeted)
        vals = (upper - lower) ** 2 / _raw_cumulative(mech, regime, t)
    return VarianceZOutcome(values=vals, t=t, regime_label=regime.label)


def sequential_counterfactual_mean(
        data: LongitudinalDataset, regime: Regime, mech: TreatmentMechanism,
        outcome_values, last_node: int, formulas: Optional[dict] = None,
        top_fit_values=None, submodel: str = WEIGHTED_INTERCEPT) -> float:
    """Targeted sequential-regression estimate of E_{P^d}[Z].

    ``Z = outcome_values`` is treated as the node following treatment
    ``last_node - 1``.  Levels m = last_node..1 each regress the previous
    targeted fit onto the history through m-1 among event-free regime
    followers and then fit a scalar fluctuation weighted by H_m.  When
    ``top_fit_values`` is given, the top-level regression is skipped and
    those values serve as its initial fit (used when the conditional mean
    of Z at the top level is available in closed form).

    The per-level fits respect the analytic range (0, 1.001 * max value).
    """
    z = np.asarray(outcome_values, dtype=float)
    if np.any(z < -1e-12):
        raise ValueError("outcome values must be non-negative")
    z = np.maximum(z, 0.0)
    hi = float(np.max(z))
    if top_fit_values is not None:
        hi = max(hi, float(np.max(top_fit_values)))
    if hi <= 0.0:
        return 0.0
    scale = OutcomeScale(0.0, hi * (1.0 + 1e-3))

    pinned = scale.to_unit(z)  # deterministic value for post-event subjects
    pseudo = pinned.copy()
    for m in range(last_node, 0, -1):
        alive = data.alive_at(m - 1)
        rows = (regime_indicator(data, regime, m) > 0) & alive
        if not rows.any():
            raise EstimationError(
                f"regime {regime.label!r} unsupported at node {m - 1}: "
                "no followers")
        if m == last_node and top_fit_values is not None:
            fitted = scale.to_unit(np.maximum(top_fit_values, 0.0))
        else:
            formula = (formulas or {}).get(m) or default_q_formula(data, m)
            design = build_design(data, formula)
            fit = fit_logistic(design[rows], pseudo[rows])
            fitted = predict_logistic(fit, design)
        fitted = np.where(alive, fitted, pinned)

        H = clever_weight(mech, regime, m)
        off = logit(np.clip(fitted[rows], 1e-12, 1 - 1e-12))
        eps = fit_targeting_epsilon(pseudo[rows], off, H[rows], submodel)
        hreg = 1.0 / mech.cumulative_regime(regime, m)
        upd = apply_targeting_update(fitted, eps, submodel, hreg)
        pseudo = np.where(alive, upd, pinned)

    return float(np.mean(scale.from_unit(pseudo)))


def robust_sigma2_t_tmle(data: LongitudinalDataset, regime: Regime,
                         mech: TreatmentMechanism, z: VarianceZOutcome,
                         t: int, q: Optional[SequentialQ] = None,
                         formulas: Optional[dict] = None) -> float:
    """TMLE of sigma2_t = E_{P^d} Z^d(t) by iterative sequential regression.

    At t = K+1 with a binary outcome the top-level conditional mean is
    available in closed form, Qbar(1-Qbar)/g, so no top regression is run.
    """
    if t < 1:
        raise ValueError("t=0 is the empirical baseline component")
    top_fit = None
    if t == data.K + 1 and q is not None and _outcome_is_binary(data):
        qk = np.clip(q.predictions(data.K + 1, targeted=q.is_targeted), 0, 1)
        top_fit = qk * (1 - qk) / _raw_cumulative(mech, regime, data.K + 1)
    return sequential_counterfactual_mean(
        data, regime, mech, z.values, last_node=t, formulas=formulas,
        top_fit_values=top_fit, submodel=WEIGHTED_INTERCEPT)


def robust_sigma2_t_ipw(data: LongitudinalDataset, regime: Regime,
                        mech: TreatmentMechanism, z: VarianceZOutcome,
                        t: int) -> float:
    """IPW estimate of sigma2_t: average of H_t * Z (comparison only)."""
    if t < 1:
        raise ValueError("t=0 is the empirical baseline component")
    H = clever_weight(mech, regime, t)
    if not np.any(H > 0):
        warnings.warn(f"no followers of {regime.label!r} at t={t}; "
                      "IPW component is 0", stacklevel=2)
    return float(np.mean(H * z.values))


def _outcome_is_binary(data: LongitudinalDataset) -> bool:
    return bool(np.isin(data.outcome, (0.0, 1.0)).all())


def _check_contrast_regimes(regimes: Sequence[Regime]):
    if len(regimes) == 1:
        return
    if len(regimes) != 2:
        raise UnsupportedContrastError("contrasts support two regimes")
    d1, d2 = regimes
    if not (d1.is_static and d2.is_static) or d1.static[0] == d2.static[0]:
        raise UnsupportedContrastError(
            "contrast regimes must be static and differ at node 0 so that "
            "per-time cross terms vanish")


def robust_variance_total(data: LongitudinalDataset,
                          regimes: Sequence[Regime],
                          mech: TreatmentMechanism,
                          qs: Sequence[SequentialQ],
                          weights: Sequence[float] = (1.0, -1.0),
                          formulas: Optional[dict] = None,
                          estimator: str = "tmle") -> VarianceReport:
    """Total robust EIF variance: sum of targeted per-time components.

    For a single regime this is sigma2_0 = sum_t sigma2_t with the t=0 term
    the empirical variance of (Qbar_1 - psi).  For a two-regime contrast
    the regimes must differ at node 0 (disjoint follower sets), in which
    case per-time cross terms vanish and the t=0 term is the empirical
    variance of the baseline contrast.
    """
    regimes = list(regimes)
    qs = list(qs)
    weights = list(weights)[: len(regimes)]
    _check_contrast_regimes(regimes)

    components, total, max_weight = {}, 0.0, 0.0
    sig_fn = robust_sigma2_t_tmle if estimator == "tmle" else None
    for regime, q, w in zip(regimes, qs, weights):
        for t in range(1, data.K + 2):
            z = variance_z_outcome(data, regime, mech, q, t)
            if estimator == "tmle":
                s = sig_fn(data, regime, mech, z, t, q=q, formulas=formulas)
            else:
                s = robust_sigma2_t_ipw(data, regime, mech, z, t)
            components[(regime.label, t)] = s
            total += w * w * s
            max_weight = max(max_weight,
                             float(np.max(clever_weight(mech, regime, t))))

    # baseline component: no treatment precedes L(0), so it is empirical
    q1 = sum(w * q.predictions(1, targeted=q.is_targeted)
             for regime, q, w in zip(regimes, qs, weights))
    t0 = float(np.mean((q1 - np.mean(q1)) ** 2))
    label = "+".join(r.label for r in regimes)
    components[(label, 0)] = t0
    total += t0

    trunc_frac = max((mech.truncated_fraction(regime=r) for r in regimes),
                     default=0.0)
    method = ROBUST_EIF_TMLE if estimator == "tmle" else ROBUST_EIF_IPW
    return VarianceReport(
        method=method, variance=total / data.n, n=data.n,
        sigma2_components=components,
        diagnostics={"sigma2_total": total, "max_clever_weight": max_weight,
                     "truncated_fraction": trunc_frac})


def point_treatment_robust_variance(
        data: LongitudinalDataset, regimes: Sequence[Regime],
        mech: TreatmentMechanism, qs: Sequence[SequentialQ],
        weights: Sequence[float] = (1.0, -1.0)) -> VarianceReport:
    """Dedicated single-time-point path for the robust EIF variance.

    Direct transcription of the point-treatment decomposition: per arm, a
    one-step targeted estimate of E[(Y - Qbar)^2 / g] plus the empirical
    variance of the baseline term.  Must agree with the general per-time
    machinery at K=0 (two code paths, one number).
    """
    if data.K != 0:
        raise ValueError("dedicated path requires a single treatment node")
    regimes, qs = list(regimes), list(qs)
    weights = list(weights)[: len(regimes)]
    _check_contrast_regimes(regimes)

    y = data.outcome
    components, total = {}, 0.0
    for regime, q, w in zip(regimes, qs, weights):
        qbar = q.predictions(1, targeted=q.is_targeted)
        g = _raw_cumulative(mech, regime, 1)
        s_obs = (y - qbar) ** 2 / g
        if _outcome_is_binary(data):
            qb = np.clip(qbar, 0.0, 1.0)
            initial = qb * (1 - qb) / g
        else:
            rows0 = regime_indicator(data, regime, 1) > 0
            design = build_design(data, default_q_formula(data, 1))
            sc = OutcomeScale(0.0, float(np.max(s_obs)) * (1 + 1e-3))
            fit = fit_logistic(design[rows0], sc.to_unit(s_obs)[rows0])
            initial = sc.from_unit(predict_logistic(fit, design))
        hi = max(float(np.max(s_obs)), float(np.max(initial)))
        if hi <= 0:
            term1 = 0.0
        else:
            sc = OutcomeScale(0.0, hi * (1 + 1e-3))
            rows = regime_indicator(data, regime, 1) > 0
            H = rows.astype(float) / mech.cumulative_regime(regime, 1)
            off = logit(np.clip(sc.to_unit(initial)[rows], 1e-12, 1 - 1e-12))
            eps = fit_targeting_epsilon(sc.to_unit(s_obs)[rows], off, H[rows],
                                        WEIGHTED_INTERCEPT)
            upd = expit(logit(np.clip(sc.to_unit(initial),
                                      1e-12, 1 - 1e-12)) + eps)
            term1 = float(np.mean(sc.from_unit(upd)))
        components[(regime.label, 1)] = term1
        total += w * w * term1

    q1 = sum(w * q.predictions(1, targeted=q.is_targeted)
             for regime, q, w in zip(regimes, qs, weights))
    t0 = float(np.mean((q1 - np.mean(q1)) ** 2))
    components[("+".join(r.label for r in regimes), 0)] = t0
    total += t0
    return VarianceReport(method=ROBUST_EIF_TMLE, variance=total / data.n,
                          n=data.n, sigma2_components=components,
                          diagnostics={"sigma2_total": total,
                                       "path": "point-treatment"})


# ---------------------------------------------------------------------------
# targeting-step bootstrap


def _batched_epsilons(counts, pseudo, offset, h, mask, clever: bool,
                      max_iter: int = 80, tol: float = 1e-9):
    """Solve the scalar targeting score for every bootstrap replicate.

    counts: (B, n) resample multiplicities; pseudo: (B, n) dependent
    variable; offset/h/mask: (n,).  Returns (eps (B,), valid (B,)) where a
    replicate is invalid when its resample contains no followers.
    """
    B = counts.shape[0]
    cols = np.flatnonzero(mask)
    eps = np.zeros(B)
    if cols.size == 0:
        return eps, np.zeros(B, dtype=bool)
    c = counts[:, cols]
    y = pseudo[:, cols]
    off = offset[cols]
    hh = h[cols]
    w = c * hh[None, :]
    valid = w.sum(axis=1) > 0

    act = np.flatnonzero(valid)
    for _ in range(max_iter):
        if act.size == 0:
            break
        shift = eps[act, None] * (hh[None, :] if clever else 1.0)
        mu = expit(off[None, :] + shift)
        wa = w[act]
        score = np.einsum("bi,bi->b", wa, y[act] - mu)
        done = np.abs(score) <= tol
        if done.all():
            break
        curv = mu * (1 - mu)
        if clever:
            info = np.einsum("bi,i,bi->b", wa, hh, curv)
        else:
            info = np.einsum("bi,bi->b", wa, curv)
        step = np.clip(score / np.maximum(info, 1e-12), -4.0, 4.0)
        undone = ~done
        rows = act[undone]
        eps[rows] = np.clip(eps[rows] + step[undone], -15.0, 15.0)
        act = rows
    return eps, valid


def bootstrap_targeting_variance(
        data: LongitudinalDataset, regimes: Sequence[Regime],
        mech: TreatmentMechanism, qs_initial: Sequence[SequentialQ],
        B: int = 1000, seed: int = 0,
        weights: Sequence[float] = (1.0, -1.0),
        submodel: str = CLEVER_COVARIATE) -> VarianceReport:
    """Bootstrap only the targeting pass of the modified TMLE.

    Subjects are resampled with replacement; the treatment-mechanism and
    initial sequential fits stay frozen, and steps 3-5 (the per-time scalar
    fluctuations) are rerun on each resample.  For contrasts both arms are
    targeted on the same resample.  Replicates whose resample has no
    followers at some node are dropped and logged; more than 5% dropped is
    flagged.  Deterministic given (data, seed, B).
    """
    if B < 2:
        raise ValueError("need at least two bootstrap replicates")
    regimes, qs = list(regimes), list(qs_initial)
    weights = list(weights)[: len(regimes)]
    for q in qs:
        if q.mode != "none":
            raise ValueError("bootstrap requires untargeted (staged) fits")
    n = data.n
    clever = submodel == CLEVER_COVARIATE

    counts = np.zeros((B, n), dtype=float)
    root = np.random.SeedSequence(seed)
    for b, child in enumerate(root.spawn(B)):
        idx = np.random.default_rng(child).integers(0, n, size=n)
        counts[b] = np.bincount(idx, minlength=n)

    valid = np.ones(B, dtype=bool)
    psi_draws = np.zeros(B)
    for regime, q, w in zip(regimes, qs, weights):
        scale = q.scale
        y_scaled = scale.to_unit(data.outcome)
        pinned = y_scaled
        pseudo = np.tile(y_scaled, (B, 1))
        for t in range(data.K + 1, 0, -1):
            alive = data.alive_at(t - 1)
            mask = (regime_indicator(data, regime, t) > 0) & alive
            initial = np.clip(q.initial_scaled[t], 1e-12, 1 - 1e-12)
            off = logit(initial)
            H = clever_weight(mech, regime, t)
            eps, ok = _batched_epsilons(counts, pseudo, off, H, mask, clever)
            valid &= ok
            hreg = 1.0 / mech.cumulative_regime(regime, t)
            shift = eps[:, None] * (hreg[None, :] if clever else 1.0)
            upd = expit(off[None, :] + shift)
            pseudo = np.where(alive[None, :], upd, pinned[None, :])
        arm_draws = (counts * scale.from_unit(pseudo)).sum(axis=1) / n
        psi_draws = psi_draws + w * arm_draws

    kept = psi_draws[valid]
    dropped = int(B - valid.sum())
    if dropped:
        warnings.warn(f"dropped {dropped} bootstrap replicates with empty "
                      "follower sets", stacklevel=2)
    if len(kept) < 2:
        raise EstimationError("fewer than two valid bootstrap replicates")
    variance = float(np.var(kept, ddof=1))
    return VarianceReport(
        method=BOOTSTRAP, variance=variance, n=n, bootstrap_draws=kept,
        diagnostics={"B": B, "dropped_replicates": dropped,
                     "dropped_fraction": dropped / B,
                     "flagged": dropped / B > 0.05,
                     "submodel": submodel, "seed": seed})


# ---------------------------------------------------------------------------
# combination, intervals, diagnostics


def convex_combo_variance(empirical: VarianceReport,
                          robust: VarianceReport) -> VarianceReport:
    """Convex mix alpha*empirical + (1-alpha)*robust with data-driven alpha.

    alpha = |robust - empirical| / (robust + empirical); experimental
    ("somewhat ad-hoc") and flagged degenerate when either input is 0.
    """
    e, r = empirical.variance, robust.variance
    if e + r == 0:
        return VarianceReport(method=CONVEX_COMBO, variance=r,
                              n=robust.n,
                              diagnostics={"alpha": 0.0, "degenerate": True})
    alpha = abs(r - e) / (r + e)
    return VarianceReport(
        method=CONVEX_COMBO, variance=alpha * e + (1 - alpha) * r,
        n=robust.n,
        diagnostics={"alpha": alpha, "degenerate": e == 0 or r == 0,
                     "experimental": True})


def wald_inference(psi_hat: float, report: VarianceReport,
                   level: float = 0.95) -> WaldInference:
    """Normal-theory interval and two-sided test of psi = 0."""
    if report.variance < 0:
        raise ValueError("variance must be non-negative")
    se = float(np.sqrt(report.variance))
    z = float(norm.ppf(0.5 + level / 2))
    if se == 0.0:
        p = 1.0 if psi_hat == 0 else 0.0
        return WaldInference(psi_hat, 0.0, psi_hat, psi_hat, p, level)
    p = float(2 * norm.sf(abs(psi_hat) / se))
    return WaldInference(psi_hat, se, psi_hat - z * se, psi_hat + z * se,
                         p, level)


def red_flag_report(empirical: VarianceReport, robust: VarianceReport,
                    threshold: float = 2.0) -> RedFlagReport:
    """Sparsity diagnostics: robust/empirical ratio, truncation, max weight.

    The flag threshold is an operational default, not a calibrated
    quantity.
    """
    if empirical.variance > 0:
        ratio = robust.variance / empirical.variance
    else:
        ratio = float("inf") if robust.variance > 0 else 1.0
    trunc = float(robust.diagnostics.get("truncated_fraction", 0.0))
    max_w = float(robust.diagnostics.get("max_clever_weight", 0.0))
    return RedFlagReport(variance_ratio=float(ratio),
                         truncated_fraction=trunc, max_clever_weight=max_w,
                         threshold=threshold, flagged=ratio > threshold)
