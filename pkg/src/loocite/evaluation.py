"""Ground truth, faithfulness metrics and FLOPs accounting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import betainc

from . import kernels


# -- outlier detection -----------------------------------------------------

def t_sf(t: float, df: float) -> float:
    """Upper tail probability of Student's t."""
    if t < 0:
        return 1.0 - t_sf(-t, df)
    return 0.5 * float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def t_upper_quantile(p: float, df: float, tol: float = 1e-10) -> float:
    """``t`` with ``P(T > t) = p`` for ``0 < p < 0.5``, by bisection on the tail."""
    if not 0 < p < 0.5:
        raise ValueError("upper-tail probability must lie in (0, 0.5)")
    lo, hi = 0.0, 1.0
    while t_sf(hi, df) > p:
        lo, hi = hi, hi * 2.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if t_sf(mid, df) > p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def grubbs_critical(n: int, alpha: float) -> float:
    """Critical value for the one-sided Grubbs test on ``n`` values."""
    t = t_upper_quantile(alpha / (2 * n), n - 2)
    return (n - 1) * t / (math.sqrt(n) * math.sqrt(n - 2 + t * t))


@dataclass(frozen=True)
class EsdConfig:
    alpha: float = 0.05
    max_outliers: int = 50

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("significance must lie in (0, 1)")
        if self.max_outliers < 0:
            raise ValueError("max_outliers must be non-negative")


@dataclass
class EsdResult:
    outliers: list[int]
    iterations: list[tuple[float, float]] = field(default_factory=list)
    reason: str = ""

    @property
    def n_out(self) -> int:
        return len(self.outliers)


def esd_outliers(values: Sequence[float], config: EsdConfig = EsdConfig()) -> EsdResult:
    """Generalized ESD test on the largest values.

    Each round takes the maximum of the remaining values, computes its
    Grubbs statistic, and accepts it as an outlier if the statistic exceeds
    the critical value for the current sample size.  The first rejection
    ends the test.  ``iterations`` holds ``(G, G_crit)`` for every round
    that was tested, including the final failing one.
    """
    x = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    if len(x) < 3:
        return EsdResult([], [], "fewer than 3 values")
    idx, stat, size = kernels.grubbs_sequence(x, config.max_outliers)
    out, its = [], []
    reason = "max outliers reached"
    for j, g, n in zip(idx, stat, size):
        crit = grubbs_critical(int(n), config.alpha)
        its.append((float(g), crit))
        if not g > crit:
            reason = "statistic below critical value"
            break
        out.append(int(j))
    else:
        if len(idx) < config.max_outliers:
            reason = "too few or constant values remain"
    return EsdResult(out, its, reason)


# -- ranking metrics -------------------------------------------------------

def ranking(scores: Sequence[float]) -> list[int]:
    """Indices by descending score; the earlier index wins ties."""
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def average_precision(scores: Sequence[float], relevant: Iterable[int]) -> float:
    relevant = set(relevant)
    if not relevant:
        raise ValueError("average precision needs a non-empty relevant set")
    if not relevant <= set(range(len(scores))):
        raise IndexError("relevant index out of range")
    hits, total = 0, 0.0
    for rank, i in enumerate(ranking(scores), start=1):
        if i in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def mean_ap(cases: Iterable[tuple[Sequence[float], Iterable[int]]]) -> float:
    """Mean AP over cases; cases with no relevant items are skipped (nan if none remain)."""
    aps = [average_precision(s, r) for s, r in cases if len(set(r))]
    return float(np.mean(aps)) if aps else float("nan")


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two equal-length vectors")
    if len(x) < 2:
        raise ValueError("pearson needs at least two points")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(xc @ xc), math.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise ValueError("correlation undefined for zero variance")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


# -- FLOPs -----------------------------------------------------------------

@dataclass(frozen=True)
class FlopsParams:
    P: float
    T: float
    C: float
    P_proxy: float | None = None
    H: float | None = None
    alpha: float | None = None
    beta: float | None = None


FLOPS_METHODS = ("loo", "kv", "proxy", "prune", "hier")


def theoretical_flops(method: str, p: FlopsParams) -> dict:
    """Closed-form FLOPs and speedup over plain LOO, ignoring query and response tokens."""
    P, T, C = p.P, p.T, p.C
    loo = 2 * P * T * C * (C - 1)
    if method == "loo":
        flops = loo
    elif method == "kv":
        flops = P * T * C * (C - 1)
    elif method == "proxy":
        flops = 2 * _need(p.P_proxy, "P_proxy") * T * C * (C - 1)
    elif method == "prune":
        r = _need(p.P_proxy, "P_proxy") / P
        a = _need(p.alpha, "alpha")
        flops = 2 * P * T * C * ((a * a + r) * C - a - r)
    elif method == "hier":
        H = _need(p.H, "H")
        b = _need(p.beta, "beta")
        flops = 2 * P * T * C * ((b * b + 1 / H) * C - b - 1)
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {FLOPS_METHODS}")
    if abs(flops) > 1e-12 * abs(loo):
        speedup = loo / flops
    else:
        # degenerate sizes (one source, one kept source per group) cost nothing;
        # fall back to the closed-form ratio
        try:
            speedup = speedup_formula(method, p)
        except ZeroDivisionError:
            speedup = math.nan
    return {"flops": flops, "speedup_over_loo": speedup}


def speedup_formula(method: str, p: FlopsParams) -> float:
    """Speedup as printed in closed form (algebraically equal to the FLOPs ratio)."""
    P, C = p.P, p.C
    if method == "loo":
        return 1.0
    if method == "kv":
        return 2.0
    if method == "proxy":
        return P / p.P_proxy
    if method == "prune":
        a, Pp = p.alpha, p.P_proxy
        return P * (C - 1) / ((a * a * P + Pp) * C - a * P - Pp)
    if method == "hier":
        b, H = p.beta, p.H
        return H * (C - 1) / ((b * b * H + 1) * C - b * H - H)
    raise ValueError(f"unknown method {method!r}")


def _need(v, name):
    if v is None:
        raise ValueError(f"{name} is required for this method")
    return v


def counted_flops(cost, param_counts: Mapping[str, float] | float | None = None,
                  include_base: bool = False, context_only: bool = False) -> float:
    """``2 * P * uncached tokens`` summed over stages; cached tokens are free.

    ``param_counts`` maps stage model names to parameter counts (or is one
    number for every stage); by default each stage's recorded count is used.
    ``context_only`` bills source tokens only, the idealization the closed
    forms use.
    """
    total = 0.0
    for s in cost.stages:
        if param_counts is None:
            P = s.param_count
        elif isinstance(param_counts, Mapping):
            P = param_counts[s.model]
        else:
            P = param_counts
        tokens = s.context_tokens if context_only else s.uncached_tokens
        if include_base:
            tokens += s.base_context_tokens if context_only else s.base_tokens
        total += 2.0 * P * tokens
    return total
