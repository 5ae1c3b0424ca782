"""Rank statistics, multiple-testing correction, percentiles, subgroup summaries.

These are the building blocks of the validation protocol: a one-sided
Mann-Whitney U test ("candidate greater"), the Holm step-down correction,
the single percentile convention used everywhere in the toolkit, and
boxplot-style subgroup summaries. A small hierarchical test plan runner
enforces stage gating (a later stage is never evaluated when its gate
stage failed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

# Exact Mann-Whitney enumeration is used for tie-free samples up to this
# product of sample sizes; beyond it the normal approximation takes over.
EXACT_UV_LIMIT = 400

METHOD_EXACT = "exact"
METHOD_NORMAL = "normal-approximation"


# ---------------------------------------------------------------------------
# Mann-Whitney U, one-sided (a stochastically greater than b)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StatTestResult:
    u: float
    p: float
    method: str
    n_a: int
    n_b: int


def _midranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        rank = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = rank
        i = j + 1
    return ranks


def _exact_u_counts(n: int, m: int) -> list[int]:
    """Distribution of U as integer counts, N(u) for u = 0..n*m.

    N(u) is the coefficient of q^u in the Gaussian binomial
    [n+m choose n]_q = prod_{i=1..n} (1 - q^(m+i)) / (1 - q^i), built by
    exact integer polynomial arithmetic truncated at degree n*m.
    """
    top = n * m
    counts = [0] * (top + 1)
    counts[0] = 1
    for i in range(1, n + 1):  # multiply by (1 - q^(m+i))
        k = m + i
        for u in range(top, k - 1, -1):
            counts[u] -= counts[u - k]
    for i in range(1, n + 1):  # multiply by the series 1 / (1 - q^i)
        for u in range(i, top + 1):
            counts[u] += counts[u - i]
    return counts


def mann_whitney_u_greater(a: Sequence[float], b: Sequence[float]) -> StatTestResult:
    """One-sided Mann-Whitney U test of `a` stochastically greater than `b`.

    U is computed from rank sums with midrank tie handling. The p-value is
    exact (full distribution of U) for tie-free samples with n*m <= 400 and
    a tie-corrected, continuity-corrected normal approximation otherwise.
    """
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise ValueError("both samples must be non-empty")

    combined = a + b
    ranks = _midranks(combined)
    rank_sum_a = sum(ranks[:n])
    u_a = rank_sum_a - n * (n + 1) / 2.0

    has_ties = len(set(combined)) != len(combined)
    if not has_ties and n * m <= EXACT_UV_LIMIT:
        counts = _exact_u_counts(n, m)
        u_int = int(round(u_a))
        tail = sum(counts[u_int:])
        p = tail / math.comb(n + m, n)
        return StatTestResult(u=float(u_int), p=p, method=METHOD_EXACT, n_a=n, n_b=m)

    mu = n * m / 2.0
    nm = n + m
    tie_term = 0.0
    seen: dict[float, int] = {}
    for v in combined:
        seen[v] = seen.get(v, 0) + 1
    for t in seen.values():
        tie_term += t**3 - t
    var = n * m / 12.0 * ((nm + 1) - tie_term / (nm * (nm - 1)))
    if var <= 0:
        # All values identical: U is degenerate at its mean.
        return StatTestResult(u=u_a, p=1.0 if u_a <= mu else 0.0, method=METHOD_NORMAL, n_a=n, n_b=m)
    z = (u_a - mu - 0.5) / math.sqrt(var)  # continuity correction, upper tail
    p = 0.5 * math.erfc(z / math.sqrt(2.0))
    return StatTestResult(u=u_a, p=min(1.0, max(0.0, p)), method=METHOD_NORMAL, n_a=n, n_b=m)


# ---------------------------------------------------------------------------
# Holm-Bonferroni step-down correction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrectionResult:
    """Adjusted p-values and rejections, aligned with the input order."""

    labels: tuple[str, ...]
    raw: tuple[float, ...]
    adjusted: tuple[float, ...]
    reject: tuple[bool, ...]
    alpha: float


def holm_bonferroni(
    pvalues: Sequence[float],
    alpha: float = 0.05,
    labels: Sequence[str] | None = None,
) -> CorrectionResult:
    """Holm step-down adjustment controlling the family-wise error rate.

    adjusted_(i) = min(1, max_{j<=i} (m-j+1) * p_(j)) over the ascending
    order; hypotheses are rejected while adjusted < alpha, stopping at the
    first failure.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    pvalues = [float(p) for p in pvalues]
    for p in pvalues:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p-value {p} outside [0, 1]")
    m = len(pvalues)
    if labels is None:
        labels = tuple(f"H{i + 1}" for i in range(m))
    else:
        labels = tuple(labels)
        if len(labels) != m:
            raise ValueError("labels and pvalues must have equal length")

    order = sorted(range(m), key=lambda i: pvalues[i])
    adjusted = [1.0] * m
    running = 0.0
    for pos, idx in enumerate(order):
        running = max(running, (m - pos) * pvalues[idx])
        adjusted[idx] = min(1.0, running)

    reject = [False] * m
    for idx in order:
        if adjusted[idx] < alpha:
            reject[idx] = True
        else:
            break
    return CorrectionResult(
        labels=labels,
        raw=tuple(pvalues),
        adjusted=tuple(adjusted),
        reject=tuple(reject),
        alpha=alpha,
    )


# ---------------------------------------------------------------------------
# percentile (the single convention used by the whole toolkit)
# ---------------------------------------------------------------------------


def percentile(values: Sequence[float], q: float) -> float:
    """Linear-interpolation percentile on (n - 1) spacing, q in [0, 1]."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be in [0, 1], got {q}")
    data = sorted(float(v) for v in values)
    if not data:
        raise ValueError("percentile of an empty list")
    h = q * (len(data) - 1)
    lo = math.floor(h)
    hi = math.ceil(h)
    if lo == hi:
        return data[lo]
    return data[lo] + (h - lo) * (data[hi] - data[lo])


# ---------------------------------------------------------------------------
# subgroup summaries (boxplot statistics)
# ---------------------------------------------------------------------------

UNKNOWN_GROUP = "unknown"


@dataclass(frozen=True)
class SubgroupSummary:
    """Boxplot-style statistics of one subgroup's defined metric values."""

    key: str
    group: str
    n: int
    n_undefined: int
    mean: float
    sd: float
    median: float
    q1: float
    q3: float
    whisker_lo: float
    whisker_hi: float
    outliers: tuple[float, ...] = ()


def summarize_values(key: str, group: str, values: Sequence[float], n_undefined: int = 0) -> SubgroupSummary:
    """Boxplot summary of defined values: quartiles, Tukey whiskers, outliers.

    Whiskers follow the 1.5 IQR convention: the most extreme data points
    within [Q1 - 1.5 IQR, Q3 + 1.5 IQR]. sd uses the sample (n - 1)
    convention, reported as 0 for a single value.
    """
    data = sorted(float(v) for v in values)
    if not data:
        raise ValueError(f"subgroup {group!r} has no defined values")
    n = len(data)
    mean = sum(data) / n
    sd = math.sqrt(sum((v - mean) ** 2 for v in data) / (n - 1)) if n > 1 else 0.0
    q1 = percentile(data, 0.25)
    med = percentile(data, 0.5)
    q3 = percentile(data, 0.75)
    iqr = q3 - q1
    lo_fence = q1 - 1.5 * iqr
    hi_fence = q3 + 1.5 * iqr
    inside = [v for v in data if lo_fence <= v <= hi_fence]
    outliers = tuple(v for v in data if v < lo_fence or v > hi_fence)
    return SubgroupSummary(
        key=key,
        group=group,
        n=n,
        n_undefined=n_undefined,
        mean=mean,
        sd=sd,
        median=med,
        q1=q1,
        q3=q3,
        whisker_lo=min(inside),
        whisker_hi=max(inside),
        outliers=outliers,
    )


def bin_label(value: float, edges: Sequence[float]) -> str:
    """Half-open bin label for `value` under ascending `edges`.

    Values below the first edge map to "<lo", values at or above the last
    edge to ">=hi"; otherwise "lo-hi" for lo <= value < hi.
    """
    edges = sorted(edges)
    if len(edges) < 2:
        raise ValueError("need at least two bin edges")
    if value < edges[0]:
        return f"<{_fmt_edge(edges[0])}"
    if value >= edges[-1]:
        return f">={_fmt_edge(edges[-1])}"
    for lo, hi in zip(edges, edges[1:]):
        if lo <= value < hi:
            return f"{_fmt_edge(lo)}-{_fmt_edge(hi)}"
    raise AssertionError("unreachable")


def _fmt_edge(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else str(v)


def subgroup_summarize(
    records: Iterable,
    key: str,
    value_of: Callable[[object], float | None],
    bins: Sequence[float] | None = None,
) -> list[SubgroupSummary]:
    """Group records by a metadata field and summarize a metric per group.

    Records expose a ``metadata`` mapping (attribute or plain dict).
    Numeric fields are grouped through `bins`; records missing the field or
    holding an unbinnable value fall into the "unknown" group. Undefined
    metric values (None) are counted per group but excluded from statistics.
    """
    groups: dict[str, list[float]] = {}
    undefined: dict[str, int] = {}
    seen_any = False
    for record in records:
        meta = record.metadata if hasattr(record, "metadata") else record
        if key not in meta:
            raise KeyError(f"records do not carry metadata field {key!r}")
        seen_any = True
        raw = meta[key]
        if raw is None or raw == "":
            group = UNKNOWN_GROUP
        elif bins is not None:
            try:
                group = bin_label(float(raw), bins)
            except (TypeError, ValueError):
                group = UNKNOWN_GROUP
        else:
            group = str(raw)
        value = value_of(record)
        if value is None:
            undefined[group] = undefined.get(group, 0) + 1
            groups.setdefault(group, [])
        else:
            groups.setdefault(group, []).append(float(value))
    if not seen_any:
        return []

    summaries = []
    for group in sorted(groups, key=_group_sort_key):
        values = groups[group]
        n_undef = undefined.get(group, 0)
        if not values:
            continue  # a group with only undefined values has no statistics
        summaries.append(summarize_values(key, group, values, n_undefined=n_undef))
    return summaries


def _group_sort_key(group: str):
    # Unknown last; binned labels in numeric order; plain labels alphabetical.
    if group == UNKNOWN_GROUP:
        return (2, 0.0, group)
    head = group.lstrip("<>=")
    head = head.split("-")[0]
    try:
        return (1, float(head), group)
    except ValueError:
        return (0, 0.0, group)


# ---------------------------------------------------------------------------
# hierarchical test plan
# ---------------------------------------------------------------------------

GATE_ALL = "all"
GATE_ANY = "any"


@dataclass(frozen=True)
class PlanHypothesis:
    """One hypothesis of a plan stage; samples are pulled lazily.

    The loader returns the (candidate, baseline) sample pair. It is only
    invoked when the stage actually runs, so gated-off stages never touch
    their data.
    """

    label: str
    loader: Callable[[], tuple[Sequence[float], Sequence[float]]]


@dataclass(frozen=True)
class PlanStage:
    name: str
    hypotheses: tuple[PlanHypothesis, ...]
    requires: str | None = None


@dataclass(frozen=True)
class HypothesisResult:
    label: str
    test: StatTestResult | None
    p_adjusted: float | None
    reject: bool
    error: str | None = None


@dataclass(frozen=True)
class StageResult:
    name: str
    skipped: bool
    skip_reason: str | None
    results: tuple[HypothesisResult, ...]

    @property
    def all_rejected(self) -> bool:
        return bool(self.results) and all(r.reject for r in self.results)

    @property
    def any_rejected(self) -> bool:
        return any(r.reject for r in self.results)


def run_plan(stages: Sequence[PlanStage], alpha: float = 0.05, gate: str = GATE_ALL) -> list[StageResult]:
    """Run a gated hierarchy of test stages with per-stage Holm correction.

    A stage with `requires` runs only if the named stage ran and its
    hypotheses were rejected (all of them under the "all" gate, at least
    one under "any"). Skipped stages carry no test results.
    """
    if gate not in (GATE_ALL, GATE_ANY):
        raise ValueError(f"gate must be '{GATE_ALL}' or '{GATE_ANY}'")
    done: dict[str, StageResult] = {}
    out: list[StageResult] = []
    for stage in stages:
        if stage.requires is not None:
            gate_stage = done.get(stage.requires)
            if gate_stage is None:
                raise ValueError(f"stage {stage.name!r} requires unknown stage {stage.requires!r}")
            passed = gate_stage.all_rejected if gate == GATE_ALL else gate_stage.any_rejected
            if gate_stage.skipped or not passed:
                result = StageResult(
                    name=stage.name,
                    skipped=True,
                    skip_reason=f"gate stage {stage.requires!r} not passed",
                    results=(),
                )
                done[stage.name] = result
                out.append(result)
                continue

        tests: list[StatTestResult | None] = []
        errors: list[str | None] = []
        for hyp in stage.hypotheses:
            try:
                a, b = hyp.loader()
                tests.append(mann_whitney_u_greater(a, b))
                errors.append(None)
            except ValueError as exc:
                tests.append(None)
                errors.append(str(exc))
        testable = [i for i, t in enumerate(tests) if t is not None]
        correction = holm_bonferroni(
            [tests[i].p for i in testable],
            alpha=alpha,
            labels=[stage.hypotheses[i].label for i in testable],
        ) if testable else None

        results = []
        adj_by_index = {}
        if correction is not None:
            for pos, i in enumerate(testable):
                adj_by_index[i] = (correction.adjusted[pos], correction.reject[pos])
        for i, hyp in enumerate(stage.hypotheses):
            if tests[i] is None:
                results.append(HypothesisResult(hyp.label, None, None, False, error=errors[i]))
            else:
                adj, rej = adj_by_index[i]
                results.append(HypothesisResult(hyp.label, tests[i], adj, rej))
        result = StageResult(name=stage.name, skipped=False, skip_reason=None, results=tuple(results))
        done[stage.name] = result
        out.append(result)
    return out
