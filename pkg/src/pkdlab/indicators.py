"""Technical indicators and the IC-based lag grid search.

Windows are 1-D price arrays, oldest price first. The crossover signal
``sma_cross`` is the fast-lag SMA minus the slow-lag SMA; the grid
search ranks candidate lags by absolute Spearman information
coefficient against forward returns.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

SMA_CROSS = "sma_cross"
ROC = "roc"


@dataclass(frozen=True)
class IndicatorSpec:
    kind: str
    lag_fast: int = 0
    lag_slow: int = 0
    lag: int = 0

    def __post_init__(self):
        if self.kind == SMA_CROSS:
            if not 1 <= self.lag_fast < self.lag_slow:
                raise ValueError("need 1 <= lag_fast < lag_slow")
        elif self.kind == ROC:
            if self.lag < 1:
                raise ValueError("need lag >= 1")
        else:
            raise ValueError(f"unknown indicator kind {self.kind!r}")

    def lag_key(self):
        if self.kind == SMA_CROSS:
            return (self.lag_fast, self.lag_slow)
        return (self.lag,)


@dataclass
class GridSearchResult:
    best_spec: IndicatorSpec
    ic: float
    table: list


def sma(w, lag: int) -> float:
    w = np.asarray(w, dtype=float)
    if not 1 <= lag <= w.size:
        raise ValueError(f"sma lag {lag} outside [1, {w.size}]")
    return float(np.mean(w[-lag:]))


def sma_cross(w, fast: int, slow: int) -> float:
    if fast >= slow:
        raise ValueError("fast lag must be smaller than slow lag")
    return sma(w, fast) - sma(w, slow)


def roc(w, lag: int) -> float:
    w = np.asarray(w, dtype=float)
    if not 1 <= lag <= w.size - 1:
        raise ValueError(f"roc lag {lag} outside [1, {w.size - 1}]")
    base = w[-1 - lag]
    if base == 0.0:
        raise ValueError("roc base price is zero")
    return float(w[-1] / base - 1.0)


def indicator_value(spec: IndicatorSpec, w) -> float:
    if spec.kind == SMA_CROSS:
        return sma_cross(w, spec.lag_fast, spec.lag_slow)
    return roc(w, spec.lag)


def evaluate(spec: IndicatorSpec, windows) -> np.ndarray:
    return np.array([indicator_value(spec, w) for w in windows])


def spearman(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size != b.size or a.size < 3:
        raise ValueError("need two equal-length vectors, length >= 3")
    ra = rankdata(a)                 # mid-ranks on ties
    rb = rankdata(b)
    if np.ptp(ra) == 0.0 or np.ptp(rb) == 0.0:
        raise ValueError("undefined correlation: constant input")
    return float(np.corrcoef(ra, rb)[0, 1])


def _grid_to_specs(kind: str, grid) -> list:
    specs = []
    for entry in grid:
        if kind == SMA_CROSS:
            fast, slow = entry
            specs.append(IndicatorSpec(SMA_CROSS, lag_fast=int(fast),
                                       lag_slow=int(slow)))
        else:
            lag = entry[0] if isinstance(entry, (tuple, list)) else entry
            specs.append(IndicatorSpec(ROC, lag=int(lag)))
    return specs


def grid_search(windows, forward_returns, kind: str, grid) -> GridSearchResult:
    """Pick the grid point whose indicator has max |Spearman IC|.

    Exact |IC| ties go to the smallest lag (then smallest slow lag).
    """
    if len(grid) == 0:
        raise ValueError("empty grid")
    forward_returns = np.asarray(forward_returns, dtype=float)
    if forward_returns.size != len(windows):
        raise ValueError("need one forward return per window")
    table = []
    for spec in _grid_to_specs(kind, grid):
        values = evaluate(spec, windows)
        try:
            ic = spearman(values, forward_returns)
        except ValueError:
            ic = float("nan")
        table.append((spec, ic))
    best = None
    for spec, ic in table:
        if np.isnan(ic):
            continue
        if best is None or abs(ic) > abs(best[1]) or \
                (abs(ic) == abs(best[1]) and spec.lag_key() < best[0].lag_key()):
            best = (spec, ic)
    if best is None:
        raise ValueError("degenerate IC at every grid point")
    return GridSearchResult(best_spec=best[0], ic=best[1], table=table)
