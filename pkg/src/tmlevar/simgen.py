"""The two simulation data-generating processes and the counterfactual truth.

The point-treatment world draws baseline covariates, a single binary
treatment with positivity controlled by ``beta_p``, and a binary outcome
whose dependence on treatment is controlled by ``beta_psi``.  The
longitudinal world (three time points, K=2) extends it with monotone
(counting-process) treatment and a terminal event process L3: covariates
are generated conditional on survival, the event is absorbing with
carry-forward, and the outcome is Y = L3(3).

Note on the time-varying L1 display: the generating model is read with the
lagged terms in the *mean* (sd fixed at 0.5).  Reading them inside the
variance would produce negative variances; the placement mirrors L2.  W3 is
drawn but enters nothing downstream (a pure noise covariate).

Generation is blocked with fixed-size per-block RNG substreams, so output
depends only on (seed, n) regardless of how blocks are scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from .data import LongitudinalDataset, Regime

POINT = "point"
LONGITUDINAL = "longitudinal"
_BLOCK = 8192
LONG_K = 2


@dataclass(frozen=True)
class DgpConfig:
    """Configuration of one simulated world.

    ``beta_p`` drives positivity violations (paper-comparable ranges:
    [-2, 1] point, [-2, 0] longitudinal); ``beta_psi`` drives the treatment
    effect ([0, 1]).
    """

    beta_p: float
    beta_psi: float
    n: int
    seed: int
    horizon: str = POINT

    def __post_init__(self):
        if self.horizon not in (POINT, LONGITUDINAL):
            raise ValueError(f"unknown horizon {self.horizon!r}")
        if self.n < 1:
            raise ValueError("n must be positive")

    @property
    def K(self) -> int:
        return 0 if self.horizon == POINT else LONG_K


def _treatment_prob(beta_p, W1, W2, L1, L2):
    return expit(beta_p - (beta_p + 2.5) * W1 + 1.75 * W2
                 + (beta_p + 3.2) * L1 - 1.8 * L2 + 0.8 * L1 * L2)


def _outcome_prob(beta_psi, W1, W2, L1, L2, A):
    return expit(-0.5 + 1.2 * W1 - 2.4 * W2 - 1.8 * L1 - 1.6 * L2
                 + L1 * L2 - beta_psi * A)


def _truncated_normal(rng, size, lo=-2.0, hi=2.0):
    out = rng.standard_normal(size)
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = (out < lo) | (out > hi)
    return out


def _block_sizes(n: int):
    sizes = [_BLOCK] * (n // _BLOCK)
    if n % _BLOCK:
        sizes.append(n % _BLOCK)
    return sizes


def _baseline_block(rng, m, beta_p):
    W1 = _truncated_normal(rng, m)
    W3 = _truncated_normal(rng, m)
    W2 = (rng.random(m) < expit(-1.0)).astype(int)
    L1 = 0.1 + 0.4 * W1 + 0.5 * rng.standard_normal(m)
    L2 = -0.55 + 0.5 * W1 + 0.75 * W2 + 0.5 * rng.standard_normal(m)
    A0 = (rng.random(m) < _treatment_prob(beta_p, W1, W2, L1, L2)).astype(int)
    return W1, W2, W3, L1, L2, A0


def gen_point(config: DgpConfig) -> LongitudinalDataset:
    """Draw the point-treatment world; deterministic given the seed."""
    if config.horizon != POINT:
        raise ValueError("config horizon is not 'point'")
    blocks = []
    children = np.random.SeedSequence(config.seed).spawn(
        len(_block_sizes(config.n)))
    for m, child in zip(_block_sizes(config.n), children):
        rng = np.random.default_rng(child)
        W1, W2, W3, L1, L2, A0 = _baseline_block(rng, m, config.beta_p)
        Y = (rng.random(m)
             < _outcome_prob(config.beta_psi, W1, W2, L1, L2, A0)).astype(int)
        blocks.append(pd.DataFrame({
            "W1": W1, "W2": W2, "W3": W3, "L1_0": L1, "L2_0": L2,
            "A0": A0, "Y": Y}))
    frame = pd.concat(blocks, ignore_index=True)
    return LongitudinalDataset.from_frame(frame)


def gen_long(config: DgpConfig) -> LongitudinalDataset:
    """Draw the longitudinal (K=2) world with terminal events.

    Treatment varies as a counting process (once started it continues);
    after the event L3(t)=1, covariates and treatment are carried forward
    and the outcome is deterministically 1.
    """
    if config.horizon != LONGITUDINAL:
        raise ValueError("config horizon is not 'longitudinal'")
    bp, bpsi = config.beta_p, config.beta_psi
    blocks = []
    children = np.random.SeedSequence(config.seed).spawn(
        len(_block_sizes(config.n)))
    for m, child in zip(_block_sizes(config.n), children):
        rng = np.random.default_rng(child)
        W1, W2, W3, L1, L2, A = _baseline_block(rng, m, bp)
        cols = {"W1": W1, "W2": W2, "W3": W3, "L1_0": L1, "L2_0": L2,
                "A0": A}
        dead = np.zeros(m, dtype=bool)
        for t in range(1, LONG_K + 1):
            u_event = rng.random(m)
            event_now = ~dead & (u_event < _outcome_prob(bpsi, W1, W2,
                                                         L1, L2, A))
            dead = dead | event_now
            z1 = rng.standard_normal(m)
            z2 = rng.standard_normal(m)
            L1_new = (0.1 + 0.4 * W1 + 0.6 * L1 - 0.7 * L2
                      + 0.45 * bpsi * A + 0.5 * z1)
            L2_new = (-0.55 + 0.5 * W1 + 0.75 * W2 + 0.1 * L1 + 0.3 * L2
                      + 0.75 * bpsi * A + 0.5 * z2)
            L1 = np.where(dead, L1, L1_new)
            L2 = np.where(dead, L2, L2_new)
            u_a = rng.random(m)
            A_new = np.where(A == 1, 1,
                             (u_a < _treatment_prob(bp, W1, W2, L1, L2))
                             .astype(int))
            A = np.where(dead, A, A_new)
            cols[f"L1_{t}"] = L1
            cols[f"L2_{t}"] = L2
            cols[f"L3_{t}"] = dead.astype(int)
            cols[f"A{t}"] = A
        u_y = rng.random(m)
        y_prob = _outcome_prob(bpsi, W1, W2, L1, L2, A)
        cols["Y"] = np.where(dead, 1, (u_y < y_prob).astype(int))
        blocks.append(pd.DataFrame(cols))
    frame = pd.concat(blocks, ignore_index=True)
    return LongitudinalDataset.from_frame(frame, event_process="L3")


def generate(config: DgpConfig) -> LongitudinalDataset:
    return gen_point(config) if config.horizon == POINT else gen_long(config)


def true_psi(config: DgpConfig, m: int = 10 ** 6,
             regimes: Optional[Sequence[Regime]] = None
             ) -> tuple[float, float]:
    """Counterfactual Monte Carlo truth for E[Y_always] - E[Y_never].

    Treatments are set by the regimes (g draws skipped) using common random
    numbers across arms; the final Bernoulli node is integrated
    analytically, which only reduces Monte Carlo error.  Returns
    (psi_0, mc_se) so callers can widen tolerances by the MC error.
    """
    if m < 10 ** 4:
        raise ValueError("use at least 1e4 counterfactual draws")
    if regimes is None:
        regimes = (Regime.always(config.K), Regime.never(config.K))
    if not all(r.is_static for r in regimes):
        raise ValueError("counterfactual truth requires static regimes")
    bp, bpsi = config.beta_p, config.beta_psi
    children = np.random.SeedSequence((config.seed, 0xC0F)).spawn(
        len(_block_sizes(m)))
    diffs_sum, diffs_sq, total = 0.0, 0.0, 0
    for size, child in zip(_block_sizes(m), children):
        rng = np.random.default_rng(child)
        W1 = _truncated_normal(rng, size)
        _truncated_normal(rng, size)  # W3: drawn for stream parity, unused
        W2 = (rng.random(size) < expit(-1.0)).astype(int)
        zL1 = 0.5 * rng.standard_normal(size)
        zL2 = 0.5 * rng.standard_normal(size)
        L1_0 = 0.1 + 0.4 * W1 + zL1
        L2_0 = -0.55 + 0.5 * W1 + 0.75 * W2 + zL2
        if config.horizon == POINT:
            block_diff = (_outcome_prob(bpsi, W1, W2, L1_0, L2_0,
                                        regimes[0].static[0])
                          - _outcome_prob(bpsi, W1, W2, L1_0, L2_0,
                                          regimes[1].static[0]))
        else:
            noise = [(rng.random(size), rng.standard_normal(size),
                      rng.standard_normal(size)) for _ in range(LONG_K)]
            per_arm = []
            for r in regimes:
                L1, L2 = L1_0.copy(), L2_0.copy()
                dead = np.zeros(size, dtype=bool)
                a_prev = np.full(size, r.static[0])
                for t in range(1, LONG_K + 1):
                    u_e, z1, z2 = noise[t - 1]
                    p_event = _outcome_prob(bpsi, W1, W2, L1, L2, a_prev)
                    dead = dead | (~dead & (u_e < p_event))
                    L1n = (0.1 + 0.4 * W1 + 0.6 * L1 - 0.7 * L2
                           + 0.45 * bpsi * a_prev + 0.5 * z1)
                    L2n = (-0.55 + 0.5 * W1 + 0.75 * W2 + 0.1 * L1
                           + 0.3 * L2 + 0.75 * bpsi * a_prev + 0.5 * z2)
                    L1 = np.where(dead, L1, L1n)
                    L2 = np.where(dead, L2, L2n)
                    a_prev = np.full(size, r.static[t])
                p_y = _outcome_prob(bpsi, W1, W2, L1, L2, a_prev)
                per_arm.append(np.where(dead, 1.0, p_y))
            block_diff = per_arm[0] - per_arm[1]
        diffs_sum += float(np.sum(block_diff))
        diffs_sq += float(np.sum(block_diff ** 2))
        total += size
    psi = diffs_sum / total
    var = max(diffs_sq / total - psi ** 2, 0.0)
    return psi, float(np.sqrt(var / total))
