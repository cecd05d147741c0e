"""Monte Carlo harness: replicate loop, metric aggregation, grid CSVs.

Each grid cell (beta_p, beta_psi) runs R replicates; each replicate draws a
dataset, fits nuisances once, computes the AIPW, standard-TMLE, and
modified-TMLE contrasts, all variance methods, and Wald intervals/tests.
Seeds derive from master_seed -> cell hash -> replicate index -> stream, so
results are deterministic for any execution order or worker count.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .data import Regime
from .estimators import (
    aipw_mean,
    contrast,
    ipw_mean,
    modified_tmle_mean,
    tmle_mean,
)
from .nuisance import EstimationError, fit_g, fit_sequential_q
from .simgen import LONGITUDINAL, POINT, DgpConfig, generate, true_psi
from .variance import (
    bootstrap_targeting_variance,
    convex_combo_variance,
    empirical_eif_variance,
    red_flag_report,
    robust_variance_total,
    wald_inference,
)

# (estimator, variance method) pairs evaluated per replicate
PAIRINGS = (
    ("aipw", "empirical-eif"),
    ("aipw", "robust-eif-tmle"),
    ("tmle", "empirical-eif"),
    ("mtmle", "empirical-eif"),
    ("mtmle", "robust-eif-tmle"),
    ("mtmle", "robust-eif-ipw"),
    ("mtmle", "bootstrap"),
    ("mtmle", "convex-combo"),
)


@dataclass(frozen=True)
class GridSpec:
    """Simulation grid over (beta_p, beta_psi) cells."""

    beta_p: tuple
    beta_psi: tuple
    replicates: int = 500
    n: int = 500
    B: int = 1000
    horizon: str = POINT
    master_seed: int = 0
    truncation: Optional[float] = None
    truth_draws: int = 10 ** 6
    level: float = 0.95

    def __post_init__(self):
        if self.replicates < 2:
            raise ValueError("need at least two replicates")
        object.__setattr__(self, "beta_p", tuple(self.beta_p))
        object.__setattr__(self, "beta_psi", tuple(self.beta_psi))

    @property
    def effective_truncation(self) -> Optional[float]:
        if self.truncation is not None:
            return self.truncation
        return 0.001 if self.horizon == LONGITUDINAL else None

    def cells(self):
        for bp in self.beta_p:
            for bpsi in self.beta_psi:
                yield bp, bpsi

    def cell_id(self, beta_p: float, beta_psi: float) -> str:
        tag = "pt" if self.horizon == POINT else "lg"
        return f"{tag}_bp{beta_p:g}_bpsi{beta_psi:g}"


def _cell_hash(spec: GridSpec, beta_p: float, beta_psi: float) -> int:
    key = f"{spec.horizon}|{beta_p:.6g}|{beta_psi:.6g}|{spec.n}"
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "big")


def run_replicate(spec: GridSpec, beta_p: float, beta_psi: float,
                  r: int) -> dict:
    """One replicate: simulate, estimate, attach every variance method."""
    cell = _cell_hash(spec, beta_p, beta_psi)
    data_seed = (spec.master_seed, cell, r, 0)
    boot_seed = (spec.master_seed, cell, r, 1)
    record = {"beta_p": beta_p, "beta_psi": beta_psi, "r": r, "failed": 0}

    cfg = DgpConfig(beta_p=beta_p, beta_psi=beta_psi, n=spec.n,
                    seed=data_seed, horizon=spec.horizon)
    data = generate(cfg)
    K = data.K
    d1, d0 = Regime.always(K), Regime.never(K)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mech = fit_g(data, truncation=spec.effective_truncation)
            q1 = fit_sequential_q(data, d1, mech)
            q0 = fit_sequential_q(data, d0, mech)

            a = contrast([aipw_mean(data, d1, mech, q1),
                          aipw_mean(data, d0, mech, q0)])
            t = contrast([tmle_mean(data, d1, mech),
                          tmle_mean(data, d0, mech)])
            m1 = modified_tmle_mean(data, d1, mech, q1)
            m0 = modified_tmle_mean(data, d0, mech, q0)
            m = contrast([m1, m0])
            ipw = (ipw_mean(data, d1, mech).psi_hat
                   - ipw_mean(data, d0, mech).psi_hat)

            reports = {
                ("aipw", "empirical-eif"): empirical_eif_variance(a.eif),
                ("tmle", "empirical-eif"): empirical_eif_variance(t.eif),
                ("mtmle", "empirical-eif"): empirical_eif_variance(m.eif),
            }
            robust = robust_variance_total(data, [d1, d0], mech,
                                           [m1.q, m0.q])
            robust_ipw = robust_variance_total(data, [d1, d0], mech,
                                               [m1.q, m0.q],
                                               estimator="ipw")
            boot = bootstrap_targeting_variance(
                data, [d1, d0], mech, [q1, q0], B=spec.B, seed=boot_seed)
            reports[("aipw", "robust-eif-tmle")] = robust
            reports[("mtmle", "robust-eif-tmle")] = robust
            reports[("mtmle", "robust-eif-ipw")] = robust_ipw
            reports[("mtmle", "bootstrap")] = boot
            reports[("mtmle", "convex-combo")] = convex_combo_variance(
                reports[("mtmle", "empirical-eif")], robust)
    except EstimationError as exc:
        record["failed"] = 1
        record["failure"] = str(exc)
        return record

    psis = {"aipw": a.psi_hat, "tmle": t.psi_hat, "mtmle": m.psi_hat,
            "ipw": ipw}
    for est, psi in psis.items():
        record[f"psi_{est}"] = psi
    record["psi_mtmle_always"] = m1.psi_hat
    record["psi_mtmle_never"] = m0.psi_hat

    for est, method in PAIRINGS:
        rep = reports[(est, method)]
        wald = wald_inference(psis[est], rep, level=spec.level)
        key = f"{est}|{method}"
        record[f"var_{key}"] = rep.variance
        record[f"lo_{key}"] = wald.lower
        record[f"hi_{key}"] = wald.upper
        record[f"p_{key}"] = wald.p_value

    flag = red_flag_report(reports[("mtmle", "empirical-eif")], robust)
    record["red_flag"] = int(flag.flagged)
    record["truncated_fraction"] = flag.truncated_fraction
    record["max_clever_weight"] = flag.max_clever_weight
    record["boot_dropped"] = boot.diagnostics["dropped_replicates"]
    return record


def summarize(records: pd.DataFrame, truth: float,
              truth_mc_se: float = 0.0, level: float = 0.95) -> list:
    """Cell metrics: MC variance, variance-estimate moments, coverage, power.

    Returns long-format rows; the mc_se column carries each metric's own
    Monte Carlo standard error where one is defined.
    """
    ok = records[records["failed"] == 0]
    R = len(ok)
    if R < 2:
        raise EstimationError("fewer than two successful replicates")
    rows = []

    def add(estimator, method, metric, value, mc_se=np.nan):
        rows.append({"estimator": estimator, "var_method": method,
                     "metric": metric, "value": value, "mc_se": mc_se})

    add("", "", "n_replicates", R)
    add("", "", "n_failed", int(records["failed"].sum()))
    add("", "", "truth", truth, truth_mc_se)

    for est in ("aipw", "tmle", "mtmle", "ipw"):
        psi = ok[f"psi_{est}"].to_numpy()
        mc_var = float(np.var(psi, ddof=1))
        add(est, "", "mc_variance", mc_var, mc_var * np.sqrt(2 / (R - 1)))
        add(est, "", "mean_psi", float(psi.mean()),
            float(psi.std(ddof=1) / np.sqrt(R)))
        add(est, "", "bias", float(psi.mean() - truth),
            float(psi.std(ddof=1) / np.sqrt(R)))

    for est, method in PAIRINGS:
        key = f"{est}|{method}"
        v = ok[f"var_{key}"].to_numpy()
        add(est, method, "mean_variance", float(v.mean()),
            float(v.std(ddof=1) / np.sqrt(R)))
        add(est, method, "variance_of_variance", float(np.var(v, ddof=1)))
        covered = ((ok[f"lo_{key}"] <= truth)
                   & (truth <= ok[f"hi_{key}"])).to_numpy()
        cov = float(covered.mean())
        add(est, method, "coverage", cov,
            float(np.sqrt(cov * (1 - cov) / R)))
        rej = float((ok[f"p_{key}"] < 1 - level).mean())
        add(est, method, "reject_rate", rej,
            float(np.sqrt(rej * (1 - rej) / R)))

    add("", "", "mean_truncated_fraction",
        float(ok["truncated_fraction"].mean()))
    add("", "", "red_flag_rate", float(ok["red_flag"].mean()))
    return rows


def _truth_for(spec: GridSpec, beta_psi: float) -> tuple:
    if beta_psi == 0.0:
        return 0.0, 0.0  # treatment enters no structural equation
    cfg = DgpConfig(beta_p=0.0, beta_psi=beta_psi, n=1,
                    seed=(spec.master_seed, 0x7123, int(beta_psi * 10 ** 6)),
                    horizon=spec.horizon)
    return true_psi(cfg, m=spec.truth_draws)


def run_grid(spec: GridSpec, out_dir, n_jobs: int = 1,
             resume: bool = False, verbose: bool = False) -> pd.DataFrame:
    """Run every cell, checkpointing per-cell replicate records.

    Emits one long-format summary row per (cell, estimator, variance
    method, metric) to summary.csv; per-cell record CSVs land in cells/
    and are reused on resume.
    """
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    truths = {bpsi: _truth_for(spec, bpsi) for bpsi in set(spec.beta_psi)}

    all_rows = []
    for beta_p, beta_psi in spec.cells():
        cid = spec.cell_id(beta_p, beta_psi)
        cell_path = out / "cells" / f"{cid}.csv"
        records = None
        if resume and cell_path.exists():
            cached = pd.read_csv(cell_path)
            if len(cached) == spec.replicates:
                records = cached
                if verbose:
                    print(f"[{cid}] resumed from checkpoint")
        if records is None:
            if verbose:
                print(f"[{cid}] running {spec.replicates} replicates ...")
            results = Parallel(n_jobs=n_jobs)(
                delayed(run_replicate)(spec, beta_p, beta_psi, r)
                for r in range(spec.replicates))
            records = pd.DataFrame(sorted(results, key=lambda d: d["r"]))
            records.to_csv(cell_path, index=False)

        truth, truth_se = truths[beta_psi]
        for row in summarize(records, truth, truth_se, level=spec.level):
            row.update({"cell_id": cid, "beta_p": beta_p,
                        "beta_psi": beta_psi})
            all_rows.append(row)

    summary = pd.DataFrame(all_rows)[
        ["cell_id", "beta_p", "beta_psi", "estimator", "var_method",
         "metric", "value", "mc_se"]]
    summary.to_csv(out / "summary.csv", index=False)
    return summary
