"""Command-line surface: simulate, estimate, truth, experiment.

Exit codes: 0 success, 2 usage error, 3 data validation error,
4 estimation failure.  All outputs are UTF-8; JSON reports are written
with sorted keys so reruns diff cleanly.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    LongitudinalDataset,
    ParseError,
    Regime,
    ValidationError,
    ingest_csv,
)
from .estimators import (
    aipw_mean,
    contrast,
    ipw_mean,
    modified_tmle_mean,
    tmle_mean,
)
from .experiment import GridSpec, run_grid
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

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_ESTIMATION = 4

VARIANCE_CHOICES = ("empirical", "robust", "robust-ipw", "bootstrap",
                    "convex")
ESTIMATOR_CHOICES = ("tmle", "mtmle", "aipw", "ipw")


class UsageError(ValueError):
    pass


def _write_json(path, payload):
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n",
        encoding="utf-8")


def _load_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def _formulas_from_config(cfg, section):
    raw = cfg.get("formulas", {}).get(section)
    if raw is None:
        return None
    return {int(t): f for t, f in raw.items()}


def cmd_simulate(args) -> int:
    cfg = DgpConfig(beta_p=args.beta_p, beta_psi=args.beta_psi, n=args.n,
                    seed=args.seed, horizon=args.dgp)
    data = generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.to_csv(out / "dataset.csv")
    _write_json(out / "provenance.json", {
        "command": "simulate", "dgp": args.dgp, "beta_p": args.beta_p,
        "beta_psi": args.beta_psi, "n": args.n, "seed": args.seed,
        "columns": list(data.frame.columns), "version": __version__})
    print(f"wrote {out / 'dataset.csv'} ({data.n} rows, K={data.K})")
    return 0


def _resolve_regimes(name: str, K: int):
    if name == "contrast":
        return [Regime.always(K), Regime.never(K)], (1.0, -1.0)
    if name == "always":
        return [Regime.always(K)], (1.0,)
    if name == "never":
        return [Regime.never(K)], (1.0,)
    raise UsageError(f"unknown regime {name!r}")


def cmd_estimate(args) -> int:
    estimators = [e.strip() for e in args.estimator.split(",")]
    methods = [v.strip() for v in args.variance.split(",")] \
        if args.variance else []
    for e in estimators:
        if e not in ESTIMATOR_CHOICES:
            raise UsageError(f"unknown estimator {e!r}")
    for v in methods:
        if v not in VARIANCE_CHOICES:
            raise UsageError(f"unknown variance method {v!r}")
    needs_staging = {"bootstrap", "robust", "robust-ipw", "convex"}
    if needs_staging & set(methods) and "mtmle" not in estimators:
        raise UsageError(
            "robust/bootstrap variance methods require the modified TMLE "
            "(--estimator mtmle)")

    config = _load_config(args.config)
    data = ingest_csv(args.data, event_process=args.event_process)
    regimes, weights = _resolve_regimes(args.regime, data.K)
    g_formulas = _formulas_from_config(config, "g")
    q_formulas = _formulas_from_config(config, "q")

    mech = fit_g(data, formulas=g_formulas, truncation=args.truncation)
    qs = {r.label: fit_sequential_q(data, r, mech, formulas=q_formulas)
          for r in regimes}

    report = {"config": {
        "data": str(args.data), "regime": args.regime,
        "estimators": estimators, "variance": methods, "B": args.B,
        "seed": args.seed, "truncation": args.truncation,
        "level": args.level, "n": data.n, "K": data.K,
        "version": __version__}}
    estimates = {}
    mtmle_arms = None
    for est in estimators:
        arms = []
        for r in regimes:
            if est == "ipw":
                arms.append(ipw_mean(data, r, mech))
            elif est == "aipw":
                arms.append(aipw_mean(data, r, mech, qs[r.label]))
            elif est == "tmle":
                arms.append(tmle_mean(data, r, mech, formulas=q_formulas))
            else:
                arms.append(modified_tmle_mean(data, r, mech, qs[r.label]))
        res = arms[0] if len(arms) == 1 else contrast(arms, weights)
        if est == "mtmle":
            mtmle_arms = arms
        estimates[est] = {
            "psi": res.psi_hat,
            "per_arm": {a.regime_label: a.psi_hat for a in arms},
        }

    variances = {}
    if methods:
        anchor = "mtmle" if "mtmle" in estimates else estimators[0]
        psi = estimates[anchor]["psi"]
        emp = robust = None
        if mtmle_arms is not None:
            eif = (mtmle_arms[0].eif if len(mtmle_arms) == 1
                   else contrast(mtmle_arms, weights).eif)
            emp = empirical_eif_variance(eif)
            robust = robust_variance_total(
                data, regimes, mech, [a.q for a in mtmle_arms],
                weights=weights, formulas=q_formulas)
        for method in methods:
            if method == "empirical":
                rep = emp
            elif method == "robust":
                rep = robust
            elif method == "robust-ipw":
                rep = robust_variance_total(
                    data, regimes, mech, [a.q for a in mtmle_arms],
                    weights=weights, formulas=q_formulas, estimator="ipw")
            elif method == "bootstrap":
                rep = bootstrap_targeting_variance(
                    data, regimes, mech, [qs[r.label] for r in regimes],
                    B=args.B, seed=args.seed, weights=weights)
            else:
                rep = convex_combo_variance(emp, robust)
            wald = wald_inference(psi, rep, level=args.level)
            variances[method] = {**rep.to_dict(), "wald": wald.to_dict()}
        if emp is not None and robust is not None:
            report["red_flag"] = red_flag_report(emp, robust).to_dict()
    report["estimates"] = estimates
    report["variances"] = {"anchor_estimator":
                           "mtmle" if mtmle_arms is not None
                           else estimators[0], **variances}

    if args.out:
        _write_json(args.out, report)
        print(f"wrote {args.out}")
    else:
        print(json.dumps(report, indent=2, sort_keys=True, default=float))
    return 0


def cmd_truth(args) -> int:
    cfg = DgpConfig(beta_p=0.0, beta_psi=args.beta_psi, n=1,
                    seed=args.seed, horizon=args.dgp)
    psi, se = true_psi(cfg, m=args.m)
    payload = {"dgp": args.dgp, "beta_psi": args.beta_psi, "m": args.m,
               "seed": args.seed, "psi0": psi, "mc_se": se}
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_experiment(args) -> int:
    config = _load_config(args.config)
    grid_cfg = dict(config.get("grid", config))
    overrides = {
        "replicates": args.replicates, "n": args.n, "B": args.B,
        "master_seed": args.seed, "horizon": args.dgp,
    }
    for key, value in overrides.items():
        if value is not None:
            grid_cfg[key] = value
    known = {"beta_p", "beta_psi", "replicates", "n", "B", "horizon",
             "master_seed", "truncation", "truth_draws", "level"}
    unknown = set(grid_cfg) - known
    if unknown:
        raise UsageError(f"unknown grid config keys: {sorted(unknown)}")
    if "beta_p" not in grid_cfg or "beta_psi" not in grid_cfg:
        raise UsageError("grid config must list beta_p and beta_psi values")
    spec = GridSpec(**grid_cfg)
    print(f"grid: {len(spec.beta_p) * len(spec.beta_psi)} cells x "
          f"{spec.replicates} replicates (horizon={spec.horizon})")
    summary = run_grid(spec, args.out, n_jobs=args.threads,
                       resume=args.resume, verbose=True)
    failed = summary[(summary["metric"] == "n_failed")
                     & (summary["value"] > 0)]
    print(f"wrote {Path(args.out) / 'summary.csv'} "
          f"({len(summary)} metric rows)")
    if not failed.empty:
        print(f"warning: {len(failed)} cells had failed replicates",
              file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tmlevar",
        description="Longitudinal TMLE with robust and bootstrap variance "
                    "estimators")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a dataset from a built-in DGP")
    p.add_argument("--dgp", choices=(POINT, LONGITUDINAL), default=POINT)
    p.add_argument("--beta-p", type=float, required=True, dest="beta_p")
    p.add_argument("--beta-psi", type=float, required=True, dest="beta_psi")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("estimate", help="estimate E[Y_d] from a CSV dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--estimator", default="mtmle",
                   help="comma list of " + ",".join(ESTIMATOR_CHOICES))
    p.add_argument("--variance", default="empirical,robust",
                   help="comma list of " + ",".join(VARIANCE_CHOICES))
    p.add_argument("--regime", default="contrast",
                   choices=("contrast", "always", "never"))
    p.add_argument("--B", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--truncation", type=float, default=None)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--event-process", default=None, dest="event_process")
    p.add_argument("--config", default=None,
                   help="JSON file with formulas sections")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("truth", help="counterfactual Monte Carlo truth")
    p.add_argument("--dgp", choices=(POINT, LONGITUDINAL), default=POINT)
    p.add_argument("--beta-psi", type=float, required=True, dest="beta_psi")
    p.add_argument("--m", type=int, default=10 ** 6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_truth)

    p = sub.add_parser("experiment", help="run a Monte Carlo grid")
    p.add_argument("--config", default=None, help="JSON grid config")
    p.add_argument("--out", required=True)
    p.add_argument("--dgp", choices=(POINT, LONGITUDINAL), default=None)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--B", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, ValidationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
