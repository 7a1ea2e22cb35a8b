"""Censoring-aware evaluation: concordance, Kaplan-Meier, log-rank, median split."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


def chi2_sf_1df(x: float) -> float:
    """Upper tail of the chi-square distribution with one degree of freedom."""
    if x <= 0:
        return 1.0
    return math.erfc(math.sqrt(x / 2.0))


def _arrays(records):
    t = np.array([r.time for r in records], dtype=np.float64)
    e = np.array([r.event for r in records], dtype=bool)
    return t, e


def c_index(records, risk) -> float:
    """Harrell's C.  ``risk`` is a mapping id -> score or a sequence aligned with records.

    A pair is comparable when the earlier time (strictly) belongs to an
    uncensored subject.  Higher risk for the earlier death counts 1, tied
    risks count 1/2.
    """
    if isinstance(risk, dict):
        try:
            r = np.array([risk[rec.id] for rec in records], dtype=np.float64)
        except KeyError as exc:
            raise MetricError(f"no risk for record {exc.args[0]!r}") from None
    else:
        r = np.asarray(risk, dtype=np.float64)
    if len(r) != len(records):
        raise MetricError("risk scores must align with records")
    if not np.isfinite(r).all():
        raise MetricError("risk scores must be finite")
    t, e = _arrays(records)
    comparable = e[:, None] & (t[:, None] < t[None, :])
    n_comp = int(comparable.sum())
    if n_comp == 0:
        raise MetricError("no comparable pairs")
    conc = (comparable & (r[:, None] > r[None, :])).sum()
    ties = (comparable & (r[:, None] == r[None, :])).sum()
    return float((conc + 0.5 * ties) / n_comp)


@dataclass
class KMCurve:
    times: np.ndarray     # distinct event times
    survival: np.ndarray  # S(t) right after each time
    at_risk: np.ndarray
    events: np.ndarray

    def at(self, t: float) -> float:
        """S(t) as a right-continuous step function, S = 1 before the first event."""
        idx = np.searchsorted(self.times, t, side="right") - 1
        return 1.0 if idx < 0 else float(self.survival[idx])


def km_curve(records) -> KMCurve:
    if not records:
        raise MetricError("Kaplan-Meier needs at least one record")
    t, e = _arrays(records)
    uniq = np.unique(t[e])
    at_risk = np.array([(t >= u).sum() for u in uniq], dtype=np.int64)
    deaths = np.array([((t == u) & e).sum() for u in uniq], dtype=np.int64)
    surv = np.cumprod(1.0 - deaths / at_risk)
    return KMCurve(uniq, surv, at_risk, deaths)


@dataclass
class LogRankResult:
    statistic: float
    p_value: float
    n_a: int
    n_b: int


def logrank_test(group_a, group_b) -> LogRankResult:
    """Two-sample log-rank test with hypergeometric variance pooled over tied deaths."""
    if not group_a or not group_b:
        raise MetricError("both groups must be nonempty")
    ta, ea = _arrays(group_a)
    tb, eb = _arrays(group_b)
    times = np.unique(np.concatenate([ta[ea], tb[eb]]))
    if len(times) == 0:
        raise MetricError("log-rank test needs at least one event")
    o_minus_e = 0.0
    var = 0.0
    for u in times:
        na = (ta >= u).sum()
        nb = (tb >= u).sum()
        da = ((ta == u) & ea).sum()
        d = da + ((tb == u) & eb).sum()
        n = na + nb
        o_minus_e += da - d * na / n
        if n > 1:
            var += d * (na / n) * (nb / n) * (n - d) / (n - 1)
    stat = 0.0 if var <= 0 else o_minus_e ** 2 / var
    return LogRankResult(float(stat), chi2_sf_1df(stat), len(group_a), len(group_b))


def median_split(ids, risk) -> tuple[list[str], list[str]]:
    """(high, low) id lists split at the median risk.

    Ids tied with the median are walked in sorted order and each goes to the
    currently smaller group (low on equal sizes), so sizes differ by at most 1.
    """
    ids = list(ids)
    if len(ids) < 2:
        raise MetricError("median split needs at least two records")
    r = {i: float(risk[i]) for i in ids}
    med = float(np.median(list(r.values())))
    high = sorted(i for i in ids if r[i] > med)
    low = sorted(i for i in ids if r[i] < med)
    for i in sorted(i for i in ids if r[i] == med):
        (high if len(high) < len(low) else low).append(i)
    return sorted(high), sorted(low)
