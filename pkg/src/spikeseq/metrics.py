"""Transcription error rates and their Bayesian uncertainty.

Error rates are Levenshtein edit counts over reference length. Treating
each reference token as a Bernoulli trial, the error count is binomial and
its posterior under a uniform prior is Beta(k+1, n-k+1); the equal-tailed
credible interval comes from numerically inverting the regularized
incomplete beta function.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from scipy.special import betainc


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Minimal number of substitutions, insertions, and deletions."""
    n, m = len(ref), len(hyp)
    if n == 0:
        return m
    if m == 0:
        return n
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[m]


def credible_interval(errors: int, trials: int, mass: float = 0.95,
                      prior: str = "uniform") -> tuple[float, float]:
    """Equal-tailed posterior interval for a binomial proportion.

    Posterior is Beta(errors + a, trials - errors + a) with a = 1 for the
    uniform prior and a = 0.5 for Jeffreys. Quantiles are found by
    bisection on the regularized incomplete beta CDF to 1e-10.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not 0 <= errors <= trials:
        raise ValueError(f"errors {errors} outside [0, {trials}]")
    if not 0.0 < mass < 1.0:
        raise ValueError("mass must lie in (0, 1)")
    if prior == "uniform":
        a0 = b0 = 1.0
    elif prior == "jeffreys":
        a0 = b0 = 0.5
    else:
        raise ValueError(f"unknown prior {prior!r}")
    a = errors + a0
    b = trials - errors + b0
    tail = (1.0 - mass) / 2.0
    return _beta_quantile(a, b, tail), _beta_quantile(a, b, 1.0 - tail)


def _beta_quantile(a: float, b: float, q: float, tol: float = 1e-10) -> float:
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if betainc(a, b, mid) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class ErrorRateReport:
    """Aggregate error rate over a corpus with its 95% credible interval.

    `rate` may exceed 1 when hypotheses carry many insertions; the
    interval is computed from the edit count clamped to the reference
    length (flagged via `clamped`). `empty_reference` flags a corpus whose
    references held no tokens at all.
    """

    edits: int
    reference_length: int
    rate: float
    interval_low: float
    interval_high: float
    clamped: bool = False
    empty_reference: bool = False

    @property
    def half_width(self) -> float:
        return 0.5 * (self.interval_high - self.interval_low)

    def format_line(self) -> str:
        return (f"{self.edits} {self.reference_length} {self.rate:.6f} "
                f"{self.interval_low:.6f} {self.interval_high:.6f}")


def parse_report_line(line: str) -> ErrorRateReport:
    k, n, rate, low, high = line.split()
    return ErrorRateReport(int(k), int(n), float(rate), float(low),
                           float(high))


def error_rate_report(refs: Sequence[Sequence], hyps: Sequence[Sequence],
                      mass: float = 0.95) -> ErrorRateReport:
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps must pair up")
    edits = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    n = sum(len(r) for r in refs)
    empty = n == 0
    rate = edits / max(1, n)
    k = min(edits, max(1, n))
    low, high = credible_interval(k, max(1, n), mass)
    return ErrorRateReport(edits=edits, reference_length=n, rate=rate,
                           interval_low=low, interval_high=high,
                           clamped=k != edits, empty_reference=empty)
