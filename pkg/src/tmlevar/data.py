"""Core data model: longitudinal datasets, treatment regimes, outcome scaling.

Column conventions for CSV files (header row, UTF-8, '.' decimal separator):

* ``W*``       baseline covariates,
* ``L<j>_<t>`` covariate process ``j`` at time ``t`` (``t=0`` is baseline),
* ``A<t>``     binary treatment at node ``t`` for ``t = 0..K``,
* ``Y``        outcome measured after the final treatment node.

A covariate process may be designated as the terminal event process (e.g.
``L3``).  After the event occurs, covariates are carried forward and the
outcome is deterministically 1; the per-time alive mask is monotone.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

_TREATMENT_RE = re.compile(r"^A(\d+)$")
_COVARIATE_RE = re.compile(r"^(L\d+)_(\d+)$")
_BASELINE_RE = re.compile(r"^W\d+$")


class ParseError(ValueError):
    """Malformed input file (reported with the offending row index)."""


class ValidationError(ValueError):
    """Input data violates a dataset invariant."""


@dataclass(frozen=True)
class OutcomeScale:
    """Closed outcome range [lower, upper] used for logistic-scale fits."""

    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValidationError(
                f"invalid outcome range ({self.lower}, {self.upper})")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def to_unit(self, values) -> np.ndarray:
        """Map values in [lower, upper] onto [0, 1]."""
        v = np.asarray(values, dtype=float)
        tol = 1e-9 * max(self.width, 1.0)
        if np.any(v < self.lower - tol) or np.any(v > self.upper + tol):
            raise ValidationError(
                f"value outside outcome range ({self.lower}, {self.upper})")
        return np.clip((v - self.lower) / self.width, 0.0, 1.0)

    def from_unit(self, values) -> np.ndarray:
        return self.lower + np.asarray(values, dtype=float) * self.width

    @classmethod
    def from_values(cls, values, margin: float = 1e-3) -> "OutcomeScale":
        """Empirical range widened so no observation sits on the boundary."""
        v = np.asarray(values, dtype=float)
        lo, hi = float(np.min(v)), float(np.max(v))
        delta = margin * max(hi - lo, 1.0)
        return cls(lo - delta, hi + delta)


def scale_outcome(values, scale: OutcomeScale) -> np.ndarray:
    """Map values into [0, 1] under ``scale`` (inverse: ``unscale_outcome``)."""
    return scale.to_unit(values)


def unscale_outcome(values, scale: OutcomeScale) -> np.ndarray:
    return scale.from_unit(values)


class Regime:
    """A treatment rule d assigning a treatment value at each node.

    Static regimes carry a per-node vector of length K+1; dynamic regimes
    carry a deterministic evaluator ``rule(dataset, t) -> (n,) array``
    mapping observed covariate history to the assigned treatment.
    """

    def __init__(self, label: str, static: Optional[Sequence[int]] = None,
                 rule: Optional[Callable] = None):
        if (static is None) == (rule is None):
            raise ValueError("provide exactly one of static vector or rule")
        self.label = label
        self.static = None if static is None else tuple(int(a) for a in static)
        self.rule = rule
        if self.static is not None and any(a not in (0, 1) for a in self.static):
            raise ValueError("static regime treatments must be 0/1")

    @classmethod
    def always(cls, K: int) -> "Regime":
        return cls("always", static=(1,) * (K + 1))

    @classmethod
    def never(cls, K: int) -> "Regime":
        return cls("never", static=(0,) * (K + 1))

    @property
    def is_static(self) -> bool:
        return self.static is not None

    def assign(self, data: "LongitudinalDataset", t: int) -> np.ndarray:
        """Treatment the regime prescribes at node t, per subject."""
        if self.static is not None:
            if not 0 <= t < len(self.static):
                raise IndexError(f"node {t} outside regime horizon")
            return np.full(data.n, self.static[t], dtype=int)
        out = np.asarray(self.rule(data, t), dtype=int)
        if out.shape != (data.n,):
            raise ValueError("dynamic rule must return one value per subject")
        return out

    def __repr__(self):
        spec = self.static if self.static is not None else "<dynamic>"
        return f"Regime({self.label!r}, {spec})"


@dataclass
class LongitudinalDataset:
    """n subjects observed at nodes L(0), A(0), L(1), ..., A(K), Y.

    The backing frame holds one row per subject.  ``event_process`` names
    the covariate process whose value 1 marks the terminal event; the
    alive mask and carry-forward conventions derive from it.
    """

    frame: pd.DataFrame
    K: int
    baseline_cols: tuple
    treatment_cols: tuple
    covariate_cols: dict  # t >= 1 -> tuple of column names (event excluded)
    outcome_col: str = "Y"
    event_process: Optional[str] = None
    bounds: Optional[OutcomeScale] = None
    _alive: np.ndarray = field(init=False, repr=False, default=None)
    _treatments: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        self._validate()
        if self.bounds is None:
            self.bounds = OutcomeScale.from_values(self.outcome)

    # -- construction -------------------------------------------------

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, event_process: Optional[str] = None,
                   bounds: Optional[OutcomeScale] = None,
                   schema: Optional[dict] = None) -> "LongitudinalDataset":
        """Build a dataset from a one-row-per-subject frame.

        Column roles are inferred from the naming convention unless an
        explicit ``schema`` mapping is given.
        """
        if schema is not None:
            baseline = tuple(schema["baseline"])
            treatments = tuple(schema["treatments"])
            covariates = {int(t): tuple(c) for t, c in
                          schema.get("covariates", {}).items()}
            outcome = schema.get("outcome", "Y")
        else:
            baseline, treatments, covariates, outcome = _infer_schema(frame)
        K = len(treatments) - 1
        cov = {}
        for t, cols in covariates.items():
            kept = tuple(c for c in cols
                         if event_process is None
                         or not c.startswith(event_process + "_"))
            cov[t] = kept
        return cls(frame=frame.reset_index(drop=True), K=K,
                   baseline_cols=baseline, treatment_cols=treatments,
                   covariate_cols=cov, outcome_col=outcome,
                   event_process=event_process, bounds=bounds)

    def _validate(self):
        frame = self.frame
        for cols in (self.baseline_cols, self.treatment_cols,
                     (self.outcome_col,)):
            for c in cols:
                if c not in frame.columns:
                    raise ValidationError(f"missing column {c!r}")
        if len(self.treatment_cols) != self.K + 1:
            raise ValidationError(
                f"expected {self.K + 1} treatment columns, "
                f"got {len(self.treatment_cols)}")
        A = frame[list(self.treatment_cols)].to_numpy()
        if np.any(pd.isna(A)):
            raise ValidationError("missing treatment values")
        if not np.isin(A, (0, 1)).all():
            raise ValidationError("treatment not binary")
        if self.bounds is not None:
            y = frame[self.outcome_col].to_numpy(dtype=float)
            if np.any(y < self.bounds.lower) or np.any(y > self.bounds.upper):
                raise ValidationError("outcome outside declared bounds")
        if self.event_process is not None:
            cols = [self.event_column(t) for t in range(1, self.K + 1)]
            cols = [c for c in cols if c is not None]
            if cols:
                ev = frame[cols].to_numpy(dtype=float) > 0
                if ev.shape[1] > 1 and np.any(ev[:, 1:] < ev[:, :-1]):
                    raise ValidationError("event indicators are not monotone")

    # -- basic accessors ----------------------------------------------

    @property
    def n(self) -> int:
        return len(self.frame)

    @property
    def outcome(self) -> np.ndarray:
        return self.frame[self.outcome_col].to_numpy(dtype=float)

    @property
    def treatments(self) -> np.ndarray:
        """(n, K+1) integer array of observed treatments."""
        if self._treatments is None:
            object.__setattr__(
                self, "_treatments",
                self.frame[list(self.treatment_cols)].to_numpy(dtype=int))
        return self._treatments

    def event_column(self, t: int) -> Optional[str]:
        if self.event_process is None:
            return None
        name = f"{self.event_process}_{t}"
        return name if name in self.frame.columns else None

    def alive_history(self) -> np.ndarray:
        """(n, K+1) bool: event has not occurred by time t (inclusive).

        Row t governs at-risk status for treatment node A(t).  Everyone is
        alive at t=0; without an event process the mask is all True.
        """
        if self._alive is not None:
            return self._alive
        mask = np.ones((self.n, self.K + 1), dtype=bool)
        if self.event_process is not None:
            for t in range(1, self.K + 1):
                col = self.event_column(t)
                if col is not None:
                    occurred = self.frame[col].to_numpy(dtype=float) > 0
                    mask[:, t] = mask[:, t - 1] & ~occurred
        object.__setattr__(self, "_alive", mask)
        return mask

    def alive_at(self, t: int) -> np.ndarray:
        """Event-free through time t (t <= 0 means everyone)."""
        if t <= 0:
            return np.ones(self.n, dtype=bool)
        return self.alive_history()[:, min(t, self.K)]

    def history_columns(self, t: int) -> tuple:
        """Covariate history columns through time t (event columns excluded)."""
        cols = list(self.baseline_cols)
        for s in range(1, t + 1):
            cols.extend(self.covariate_cols.get(s, ()))
        return tuple(cols)

    def column(self, name: str) -> np.ndarray:
        if name not in self.frame.columns:
            raise ValidationError(f"missing column {name!r}")
        return self.frame[name].to_numpy(dtype=float)

    @property
    def scale(self) -> OutcomeScale:
        return self.bounds

    # -- IO -------------------------------------------------------------

    def to_csv(self, path) -> None:
        self.frame.to_csv(path, index=False)

    def with_outcome_transformed(self, fn, bounds: OutcomeScale
                                 ) -> "LongitudinalDataset":
        """Copy with outcome mapped through ``fn`` and new declared bounds."""
        frame = self.frame.copy()
        frame[self.outcome_col] = fn(frame[self.outcome_col].to_numpy(dtype=float))
        return LongitudinalDataset(
            frame=frame, K=self.K, baseline_cols=self.baseline_cols,
            treatment_cols=self.treatment_cols,
            covariate_cols=dict(self.covariate_cols),
            outcome_col=self.outcome_col, event_process=self.event_process,
            bounds=bounds)


def _infer_schema(frame: pd.DataFrame):
    baseline, covariates, treatments = [], {}, {}
    outcome = None
    for col in frame.columns:
        if col == "Y":
            outcome = col
        elif _BASELINE_RE.match(col):
            baseline.append(col)
        elif (m := _TREATMENT_RE.match(col)):
            treatments[int(m.group(1))] = col
        elif (m := _COVARIATE_RE.match(col)):
            t = int(m.group(2))
            if t == 0:
                baseline.append(col)
            else:
                covariates.setdefault(t, []).append(col)
        else:
            raise ParseError(f"unrecognised column name {col!r}")
    if outcome is None:
        raise ParseError("missing outcome column 'Y'")
    if not treatments:
        raise ParseError("no treatment columns 'A<t>' found")
    times = sorted(treatments)
    if times != list(range(len(times))):
        raise ParseError(f"treatment nodes not contiguous from 0: {times}")
    cov = {t: tuple(cols) for t, cols in sorted(covariates.items())}
    return (tuple(baseline), tuple(treatments[t] for t in times), cov, outcome)


def ingest_csv(path, event_process: Optional[str] = None,
               bounds: Optional[OutcomeScale] = None,
               schema: Optional[dict] = None) -> LongitudinalDataset:
    """Read a one-row-per-subject CSV into a validated dataset."""
    try:
        frame = pd.read_csv(path)
    except pd.errors.ParserError as exc:
        raise ParseError(str(exc)) from exc
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna() & frame.notna()
    if bad.to_numpy().any():
        row = int(np.argwhere(bad.to_numpy().any(axis=1))[0][0])
        raise ParseError(f"non-numeric value in row {row}")
    return LongitudinalDataset.from_frame(numeric, event_process=event_process,
                                          bounds=bounds, schema=schema)


def regime_indicator(data: LongitudinalDataset, regime: Regime,
                     t: int) -> np.ndarray:
    """Indicator that observed treatments through node t-1 match the regime.

    The node-0 indicator is identically 1.  Treatment nodes after the
    terminal event are ignored (the subject's follower status freezes at
    the event).
    """
    if not 0 <= t <= data.K + 2:
        raise IndexError(f"time {t} outside 0..{data.K + 2}")
    out = np.ones(data.n, dtype=float)
    A = data.treatments
    alive = data.alive_history()
    for s in range(min(t, data.K + 1)):
        assigned = regime.assign(data, s)
        matches = (A[:, s] == assigned) | ~alive[:, s]
        out *= matches.astype(float)
    return out
