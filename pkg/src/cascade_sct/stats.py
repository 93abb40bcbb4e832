"""Paired comparisons between two model variants evaluated on the same subjects."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DataError, DegenerateTestError

Z95 = 1.96


def paired_t_test(x, y) -> tuple[float, float]:
    """Two-sided paired t-test on ``x - y`` with ``n - 1`` degrees of freedom."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("paired samples must be 1-D and of equal length")
    n = x.size
    if n < 2:
        raise DataError("paired t-test needs at least two pairs")
    d = x - y
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateTestError("paired differences have zero variance")
    t = float(d.mean()) / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), df=n - 1))
    return t, p


def mean_ci(values) -> tuple[float, float, float]:
    """Mean and mean +/- 1.96 * SE."""
    v = np.asarray(values, dtype=np.float64)
    m = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return m, m - Z95 * se, m + Z95 * se


@dataclass
class GainSummary:
    mean_pct: float
    se_pct: float
    ci_low_pct: float
    ci_high_pct: float
    n_used: int
    n_excluded: int


def relative_gain(single, multi, higher_is_better: bool = True) -> GainSummary:
    """Per-subject percentage gain of ``multi`` over ``single``.

    For lower-is-better metrics the sign is flipped so an error reduction
    reports as a positive gain. Subjects with a zero baseline are excluded.
    """
    s = np.asarray(single, dtype=np.float64)
    m = np.asarray(multi, dtype=np.float64)
    if s.shape != m.shape:
        raise DataError("relative_gain needs paired samples of equal length")
    keep = s != 0.0
    excluded = int((~keep).sum())
    if excluded:
        warnings.warn(f"{excluded} subject(s) with zero baseline excluded from relative gain", stacklevel=2)
    if not keep.any():
        raise DataError("no subjects with a non-zero baseline")
    gains = (m[keep] - s[keep]) / s[keep] * 100.0
    if not higher_is_better:
        gains = -gains
    n = gains.size
    se = float(gains.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    mean = float(gains.mean())
    return GainSummary(mean, se, mean - Z95 * se, mean + Z95 * se, n, excluded)


@dataclass
class ComparisonReport:
    metric: str
    mean_single: float
    mean_multi: float
    ci_single: tuple[float, float]
    ci_multi: tuple[float, float]
    p_value: float
    t_stat: float
    relative_gain_pct: float
    ci_low_pct: float
    ci_high_pct: float
    relative_increase_pct: float  # from group means
    n_excluded: int = 0
    warnings: list = field(default_factory=list)


def compare_metric(metric: str, single, multi, higher_is_better: bool = True) -> ComparisonReport:
    notes = []
    try:
        t, p = paired_t_test(multi, single)
    except DegenerateTestError as exc:
        t, p = math.nan, math.nan
        notes.append(f"{metric}: {exc}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        gain = relative_gain(single, multi, higher_is_better)
    notes.extend(str(w.message) for w in caught)
    ms, sl, sh = mean_ci(single)
    mm, ml, mh = mean_ci(multi)
    inc = (mm - ms) / ms * 100.0 if ms != 0 else math.nan
    if not higher_is_better:
        inc = -inc
    return ComparisonReport(
        metric=metric,
        mean_single=ms,
        mean_multi=mm,
        ci_single=(sl, sh),
        ci_multi=(ml, mh),
        p_value=p,
        t_stat=t,
        relative_gain_pct=gain.mean_pct,
        ci_low_pct=gain.ci_low_pct,
        ci_high_pct=gain.ci_high_pct,
        relative_increase_pct=inc,
        n_excluded=gain.n_excluded,
        warnings=notes,
    )
