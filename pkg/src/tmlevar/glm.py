"""Weighted, offset-capable binomial/quasi-binomial regression via IRLS.

This is the single numerical engine behind the treatment-mechanism fits,
the sequential outcome regressions, and every targeting update.  Responses
may be continuous in [0, 1] (quasi-binomial): the score equations are the
usual binomial ones and only point estimates are consumed downstream, so no
dispersion modelling is needed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr, solve
from scipy.special import expit, xlogy

# Fitted logits are capped at +/-15, bounding predictions away from 0/1 by
# expit(-15) ~ 3.06e-7.  Complete separation therefore yields a flagged fit
# with capped predictions instead of an error.
LOGIT_CAP = 15.0

MAX_ITER = 100
MAX_HALVINGS = 10
SCORE_TOL = 1e-8
DEV_TOL = 1e-10


class RankDeficientDesign(UserWarning):
    """Design matrix was rank deficient; dependent columns were dropped."""


@dataclass
class GlmFit:
    """Result of a weighted GLM fit.

    coefficients includes one entry per design column (dropped columns get
    0.0).  If ``converged`` is set, ``final_score_norm`` < the score
    tolerance used by the solver.
    """

    coefficients: np.ndarray
    converged: bool
    iterations: int
    final_score_norm: float
    dropped: tuple[int, ...] = ()
    separated: bool = False
    kind: str = "logistic"
    message: str = ""

    @property
    def n_params(self) -> int:
        return self.coefficients.shape[0]


def _as_2d(design) -> np.ndarray:
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def _resolve_rank(Xw: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    """Return kept column indices and dropped ones via pivoted QR."""
    if Xw.shape[1] == 0:
        return np.array([], dtype=int), ()
    _, r, piv = qr(Xw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(Xw.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > max(tol, 1e-12)))
    keep = np.sort(piv[:rank])
    dropped = tuple(int(j) for j in np.sort(piv[rank:]))
    return keep, dropped


def _neg_loglik(y, mu, w) -> float:
    return -2.0 * float(np.sum(w * (xlogy(y, mu) + xlogy(1.0 - y, 1.0 - mu))))


def fit_logistic(design, response, weights=None, offset=None,
                 max_iter: int = MAX_ITER, score_tol: float = SCORE_TOL,
                 dev_tol: float = DEV_TOL) -> GlmFit:
    """Fit a weighted quasi-binomial regression by IRLS with step-halving.

    Parameters
    ----------
    design : (n, p) array
        Model matrix. An intercept column must be included explicitly.
    response : (n,) array
        Values in [0, 1]; continuous pseudo-outcomes are allowed.
    weights : (n,) array, optional
        Non-negative observation weights (default all ones). Zero-weight
        rows are dropped before fitting.
    offset : (n,) array, optional
        Fixed additive term on the logit scale.

    Returns
    -------
    GlmFit
        Maximizer of sum_i w_i [y_i log mu_i + (1-y_i) log(1-mu_i)] with
        mu_i = expit(offset_i + x_i beta). On convergence the weighted
        score X'(w*(y-mu)) has max-abs below ``score_tol``.
    """
    X = _as_2d(design)
    y = np.asarray(response, dtype=float)
    n, p = X.shape
    if y.shape[0] != n:
        raise ValueError(f"response length {y.shape[0]} != design rows {n}")
    if np.any((y < -1e-12) | (y > 1 + 1e-12)):
        raise ValueError("responses must lie in [0, 1]")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    o = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)

    active = w > 0
    Xa, ya, wa, oa = X[active], y[active], w[active], o[active]
    if Xa.shape[0] == 0:
        raise ValueError("no rows with positive weight")

    keep, dropped = _resolve_rank(Xa * np.sqrt(wa)[:, None])
    if dropped:
        warnings.warn(
            f"rank-deficient design: dropping columns {dropped}",
            RankDeficientDesign, stacklevel=2)
    Xk = Xa[:, keep]

    beta = np.zeros(len(keep))
    eta = oa + Xk @ beta
    mu = expit(np.clip(eta, -30.0, 30.0))
    dev = _neg_loglik(ya, mu, wa)
    score = Xk.T @ (wa * (ya - mu))
    score_norm = float(np.max(np.abs(score))) if len(keep) else 0.0

    converged = score_norm < score_tol
    iterations = 0
    message = "converged at start" if converged else ""

    while not converged and iterations < max_iter:
        iterations += 1
        irls_w = wa * np.clip(mu * (1.0 - mu), 1e-12, None)
        info = Xk.T @ (Xk * irls_w[:, None])
        try:
            delta = solve(info, score, assume_a="pos")
        except np.linalg.LinAlgError:
            delta, *_ = np.linalg.lstsq(info, score, rcond=None)

        accepted = False
        for half in range(MAX_HALVINGS + 1):
            cand = beta + delta / (2.0 ** half)
            eta_c = oa + Xk @ cand
            mu_c = expit(np.clip(eta_c, -30.0, 30.0))
            dev_c = _neg_loglik(ya, mu_c, wa)
            if dev_c <= dev + 1e-12 * (abs(dev) + 1.0):
                accepted = True
                break
        if not accepted:
            message = "step-halving failed to reduce deviance"
            break

        rel_dev = abs(dev_c - dev) / (abs(dev) + 0.1)
        beta, mu, dev = cand, mu_c, dev_c
        score = Xk.T @ (wa * (ya - mu))
        score_norm = float(np.max(np.abs(score)))
        if score_norm < score_tol and rel_dev < dev_tol:
            converged = True

    eta_final = oa + Xk @ beta
    separated = bool(np.max(np.abs(eta_final)) > LOGIT_CAP) if n else False
    if not converged and not message:
        message = f"no convergence after {iterations} iterations"

    coef = np.zeros(p)
    coef[keep] = beta
    return GlmFit(coefficients=coef, converged=converged,
                  iterations=iterations, final_score_norm=score_norm,
                  dropped=dropped, separated=separated, kind="logistic",
                  message=message)


def predict_logistic(fit: GlmFit, design, offset=None) -> np.ndarray:
    """Fitted probabilities expit(offset + X beta), logits capped at +/-15."""
    X = _as_2d(design)
    if X.shape[1] != fit.n_params:
        raise ValueError(
            f"design width {X.shape[1]} != fitted width {fit.n_params}")
    eta = X @ fit.coefficients
    if offset is not None:
        eta = eta + np.asarray(offset, dtype=float)
    return expit(np.clip(eta, -LOGIT_CAP, LOGIT_CAP))


def fit_linear(design, response, weights=None) -> GlmFit:
    """Weighted least squares; normal-equation residual below 1e-10."""
    X = _as_2d(design)
    y = np.asarray(response, dtype=float)
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    active = w > 0
    Xa, ya, wa = X[active], y[active], w[active]
    if Xa.shape[0] == 0:
        raise ValueError("no rows with positive weight")

    sw = np.sqrt(wa)
    keep, dropped = _resolve_rank(Xa * sw[:, None])
    if dropped:
        warnings.warn(
            f"rank-deficient design: dropping columns {dropped}",
            RankDeficientDesign, stacklevel=2)
    Xk = Xa[:, keep]
    beta, *_ = np.linalg.lstsq(Xk * sw[:, None], ya * sw, rcond=None)
    score = Xk.T @ (wa * (ya - Xk @ beta))
    score_norm = float(np.max(np.abs(score))) if len(keep) else 0.0

    coef = np.zeros(p)
    coef[keep] = beta
    return GlmFit(coefficients=coef, converged=score_norm < 1e-10,
                  iterations=1, final_score_norm=score_norm,
                  dropped=dropped, kind="linear")


def predict_linear(fit: GlmFit, design) -> np.ndarray:
    X = _as_2d(design)
    if X.shape[1] != fit.n_params:
        raise ValueError(
            f"design width {X.shape[1]} != fitted width {fit.n_params}")
    return X @ fit.coefficients
