"""Number formatting shared by all emitted tables."""
from __future__ import annotations

import math

from scipy import stats

STAR_LEVELS = ((0.01, "***"), (0.05, "**"), (0.10, "*"))


def stars(p_value: float) -> str:
    """Significance stars for p-values below 1%, 5% and 10%."""
    if p_value is None or math.isnan(p_value):
        return ""
    for level, mark in STAR_LEVELS:
        if p_value < level:
            return mark
    return ""


def two_sided_p(point: float, se: float) -> float:
    if se <= 0 or not math.isfinite(se):
        return math.nan
    return float(2 * stats.norm.sf(abs(point / se)))


def format_number(x: float, decimals: int = 1, adaptive: bool = False) -> str:
    """Fixed-decimal formatting; ``adaptive`` keeps one significant digit for small values.

    With ``adaptive`` a value that would print as zero at ``decimals`` places
    is shown with one significant digit (0.01, -0.002, ...).
    """
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if adaptive and x != 0 and abs(x) < 0.5 * 10 ** -decimals:
        digits = -int(math.floor(math.log10(abs(x))))
        return f"{x:.{digits}f}"
    # small negatives keep their sign ("-0.0")
    return f"{x:.{decimals}f}"


def format_estimate(point: float, se: float, decimals: int = 1, adaptive: bool = False,
                    with_stars: bool = True) -> str:
    """Render ``point (se) stars``, e.g. ``"3.4 (0.5) ***"``."""
    text = f"{format_number(point, decimals, adaptive)} ({format_number(se, decimals, adaptive)})"
    mark = stars(two_sided_p(point, se)) if with_stars else ""
    return f"{text} {mark}" if mark else text


def format_shares(shares, decimals: int = 1) -> str:
    """Space separated percentages, e.g. ``"2.1 2.0 1.8"`` for (0.021, 0.020, 0.018)."""
    return " ".join(format_number(100 * s, decimals) for s in shares)
