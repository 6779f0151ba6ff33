"""Population agreement, tokens-to-convergence and cross-seed aggregation.

Agreement is measured over each agent's last emitted (or adopted) name.
Agents that have not spoken yet hold ``None``; their pairs stay in the
pairwise denominator but can never match.
"""

from __future__ import annotations

import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass
from math import comb
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Sequence, Tuple

from .core import AgreementMetric, Condition

if TYPE_CHECKING:
    from .engine import RunLog

CONDITION_COLUMNS = (("NL", Condition.NL), ("NL-SW", Condition.NL_SW), ("SCHEMA", Condition.SCHEMA))
DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7)


def pairwise_agreement(names: Sequence[Optional[int]], n: int) -> float:
    """Fraction of unordered agent pairs whose names are defined and equal."""
    if len(names) != n or n < 2:
        raise ValueError(f"need n >= 2 names, got {len(names)} for n={n}")
    counts = Counter(x for x in names if x is not None)
    same = sum(c * (c - 1) // 2 for c in counts.values())
    return same / comb(n, 2)


def modal_agreement(names: Sequence[Optional[int]], n: int) -> float:
    """Share of the population holding the single most common name."""
    if len(names) != n or n < 2:
        raise ValueError(f"need n >= 2 names, got {len(names)} for n={n}")
    counts = Counter(x for x in names if x is not None)
    return max(counts.values()) / n if counts else 0.0


@dataclass(frozen=True)
class AggregateCell:
    mean: float
    std: float
    n_seeds: int


def mean_std(values: Sequence[float]) -> AggregateCell:
    """Mean and sample (n-1) standard deviation; a single value has std 0."""
    values = list(values)
    if not values:
        raise ValueError("cannot aggregate an empty group")
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return AggregateCell(mean, std, len(values))


def _metric(log: "RunLog", metric: Optional[AgreementMetric]) -> AgreementMetric:
    return AgreementMetric(metric) if metric is not None else log.config.agreement_metric


def tokens_to_convergence(log: "RunLog", threshold: float,
                          metric: Optional[AgreementMetric] = None) -> Optional[int]:
    """Cumulative tokens at the first round reaching ``threshold``; None if never."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0,1], got {threshold}")
    m = _metric(log, metric)
    for event in log.events:
        if event.agreement(m) >= threshold:
            return event.cumulative_tokens
    return None


def final_agreement(log: "RunLog", metric: Optional[AgreementMetric] = None) -> float:
    if not log.events:
        return 0.0
    return log.events[-1].agreement(_metric(log, metric))


def cell_key(log: "RunLog") -> Tuple[str, int, int, float]:
    c = log.config
    return (c.condition.value, c.n_agents, c.memory_window, c.lose_shift_alpha)


def aggregate_cells(
    logs: Iterable["RunLog"],
    metric: Optional[AgreementMetric] = None,
    by: Tuple[str, ...] = ("condition", "N", "K", "alpha"),
) -> Dict[tuple, AggregateCell]:
    """Mean and sample std of final agreement per group of runs.

    ``by`` picks the grouping fields out of (condition, N, K, alpha); Table-1
    style output groups by (condition, N, K) and pools over alpha.
    """
    positions = {"condition": 0, "N": 1, "K": 2, "alpha": 3}
    groups: Dict[tuple, List[float]] = defaultdict(list)
    for log in logs:
        full = cell_key(log)
        groups[tuple(full[positions[b]] for b in by)].append(final_agreement(log, metric))
    return {key: mean_std(vals) for key, vals in sorted(groups.items())}


def format_cell(cell: Optional[AggregateCell]) -> str:
    if cell is None:
        return "-"
    text = f"{cell.mean:.3f} ± {cell.std:.3f}"
    if cell.n_seeds == 1:
        text += " (n=1)"
    return text


def table1_rows(logs: Iterable["RunLog"], metric: Optional[AgreementMetric] = None) -> List[List[str]]:
    """Rows of (N, K, NL, NL-SW, SCHEMA); conditions without runs get '-'."""
    cells = aggregate_cells(logs, metric, by=("condition", "N", "K"))
    nk = sorted({(n, k) for (_, n, k) in cells}, key=lambda x: (x[1], x[0]))
    rows = [["N", "K"] + [label for label, _ in CONDITION_COLUMNS]]
    for n, k in nk:
        rows.append([str(n), str(k)] + [format_cell(cells.get((c.value, n, k))) for _, c in CONDITION_COLUMNS])
    return rows


@dataclass(frozen=True)
class CurvePoint:
    round: int
    mean: float
    std: float
    cumulative_tokens: float


def agreement_curve(logs: Sequence["RunLog"], metric: Optional[AgreementMetric] = None) -> List[CurvePoint]:
    """Per-round mean and sample std of agreement across seeds."""
    logs = list(logs)
    if not logs:
        raise ValueError("no logs")
    lengths = {log.config.rounds for log in logs} | {len(log.events) for log in logs}
    if len(lengths) != 1:
        raise ValueError(f"logs disagree on the number of rounds: {sorted(lengths)}")
    out = []
    for t in range(len(logs[0].events)):
        vals = [log.events[t].agreement(_metric(log, metric)) for log in logs]
        cell = mean_std(vals)
        tokens = statistics.fmean(log.events[t].cumulative_tokens for log in logs)
        out.append(CurvePoint(t + 1, cell.mean, cell.std, tokens))
    return out


@dataclass(frozen=True)
class TokensRow:
    condition: str
    threshold: float
    mean_tokens: Optional[float]
    n_reached: int
    n_runs: int


def tokens_table(logs: Iterable["RunLog"], thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                 metric: Optional[AgreementMetric] = None) -> List[TokensRow]:
    """Mean tokens-to-convergence over the runs that reached each threshold."""
    by_condition: Dict[str, List["RunLog"]] = defaultdict(list)
    for log in logs:
        by_condition[log.config.condition.value].append(log)
    rows = []
    for _, cond in CONDITION_COLUMNS:
        group = by_condition.get(cond.value)
        if not group:
            continue
        for th in thresholds:
            hits = [t for t in (tokens_to_convergence(log, th, metric) for log in group) if t is not None]
            mean = statistics.fmean(hits) if hits else None
            rows.append(TokensRow(cond.value, th, mean, len(hits), len(group)))
    return rows
