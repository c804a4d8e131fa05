"""Closed-form generalization-bound terms for fixed and adaptive discretization."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .adaptive import CONTINUOUS_L

DEFAULT_DELTA = 0.05


@dataclass(frozen=True)
class BranchUsage:
    G: int
    L: int
    count: int
    continuous: bool = False

    @property
    def log_size(self) -> float:
        """``G ln L`` with continuous branches priced at ``L = 10**9``."""
        return self.G * math.log(CONTINUOUS_L if self.continuous else self.L)


@dataclass(frozen=True)
class UsageStats:
    n: int
    branches: tuple[BranchUsage, ...]
    delta: float = DEFAULT_DELTA
    alpha_sup: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if not self.branches:
            raise ValueError("usage stats need at least one branch")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.alpha_sup > 0:
            raise ValueError(f"alpha_sup must be positive, got {self.alpha_sup}")
        for b in self.branches:
            if b.G < 1 or b.L < 1:
                raise ValueError(f"branch sizes must be positive, got G={b.G}, L={b.L}")
            if b.count < 0:
                raise ValueError(f"branch counts must be non-negative, got {b.count}")
        total = sum(b.count for b in self.branches)
        if total != self.n:
            raise ValueError(f"branch counts sum to {total} but n = {self.n}")

    @property
    def N(self) -> int:
        return len(self.branches)

    @property
    def counts(self) -> list[int]:
        return [b.count for b in self.branches]


@dataclass(frozen=True)
class BoundReport:
    J1: float
    J2: float
    gap_bound: float
    fixed_term: float
    criterion_adaptive: float
    criterion_fixed: float
    adaptive_improves: bool
    N: int
    n: int
    delta: float
    note: str

    def to_dict(self) -> dict:
        return asdict(self)


def _check_common(n, delta):
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")


def adaptive_bound_terms(stats: UsageStats) -> tuple[float, float]:
    n, N, delta = stats.n, stats.N, stats.delta
    j1 = 0.0
    for b in stats.branches:
        j1 += (b.count / n) * math.sqrt((b.log_size + math.log(N / delta)) / (2 * n))
    j2 = math.sqrt((2 * N * math.log(2) + 2 * math.log(1 / delta)) / n) if N >= 2 else 0.0
    return j1, j2


def fixed_bound_term(G: int, L: int, n: int, delta: float) -> float:
    if G < 1 or L < 1:
        raise ValueError(f"G and L must be >= 1, got G={G}, L={L}")
    _check_common(n, delta)
    return math.sqrt((G * math.log(L) + math.log(1 / delta)) / (2 * n))


def continuous_bound_term(m: int, n: int, delta: float, alpha_sup: float,
                          varsigma_bar: float, radius: float) -> float:
    """Bound for an undiscretised representation of width ``m`` inside a ball of ``radius``.

    ``varsigma_bar`` is the usage-weighted Lipschitz constant; it is supplied by
    the caller rather than estimated.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    _check_common(n, delta)
    if alpha_sup < 0 or varsigma_bar < 0 or radius <= 0:
        raise ValueError("alpha_sup and varsigma_bar must be >= 0 and radius > 0")
    first = alpha_sup * math.sqrt((m * math.log(4 * math.sqrt(n * m)) + math.log(1 / delta)) / (2 * n))
    return first + varsigma_bar * radius / math.sqrt(n)


def tradeoff_report(stats: UsageStats, fixed_spec: tuple[int, int] | None = None) -> BoundReport:
    """Compare usage-weighted bottleneck sizes against a single fixed bottleneck.

    ``fixed_spec`` defaults to the first branch.
    """
    if fixed_spec is None:
        first = stats.branches[0]
        fixed_log = first.log_size
        G, L = first.G, (CONTINUOUS_L if first.continuous else first.L)
    else:
        G, L = fixed_spec
        fixed_log = G * math.log(L)
    j1, j2 = adaptive_bound_terms(stats)
    adaptive = sum((b.count / stats.n) * math.sqrt(b.log_size) for b in stats.branches)
    fixed = math.sqrt(fixed_log)
    note = (f"J2 = {j2:.6g} is the price of choosing among N={stats.N} bottlenecks; "
            f"it grows like sqrt(N/n)") if stats.N >= 2 else "single bottleneck: J2 = 0"
    return BoundReport(
        J1=j1, J2=j2, gap_bound=stats.alpha_sup * (j1 + j2),
        fixed_term=fixed_bound_term(G, L, stats.n, stats.delta),
        criterion_adaptive=adaptive, criterion_fixed=fixed,
        adaptive_improves=adaptive < fixed,
        N=stats.N, n=stats.n, delta=stats.delta, note=note,
    )


def stats_from_dict(d: dict) -> tuple[UsageStats, tuple[int, int] | None]:
    """Parse the usage-stats JSON schema; returns the stats and optional fixed spec."""
    allowed = {"format_version", "n", "delta", "alpha_sup", "branches", "fixed"}
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown keys in usage stats: {sorted(unknown)}")
    for key in ("n", "branches"):
        if key not in d:
            raise ValueError(f"usage stats missing '{key}'")
    branches = []
    for i, b in enumerate(d["branches"]):
        extra = set(b) - {"G", "L", "count", "continuous"}
        if extra:
            raise ValueError(f"branches[{i}]: unknown keys {sorted(extra)}")
        cont = bool(b.get("continuous", False))
        L = int(b.get("L", CONTINUOUS_L)) if cont else int(b["L"])
        branches.append(BranchUsage(int(b["G"]), L, int(b["count"]), cont))
    stats = UsageStats(int(d["n"]), tuple(branches), float(d.get("delta", DEFAULT_DELTA)),
                       float(d.get("alpha_sup", 1.0)))
    fixed = d.get("fixed")
    return stats, (None if fixed is None else (int(fixed["G"]), int(fixed["L"])))


def format_table(report: BoundReport) -> str:
    rows = [
        ("J1", report.J1), ("J2", report.J2), ("gap bound", report.gap_bound),
        ("fixed term", report.fixed_term),
        ("criterion adaptive", report.criterion_adaptive),
        ("criterion fixed", report.criterion_fixed),
    ]
    width = max(len(k) for k, _ in rows)
    lines = [f"{k:<{width}}  {v:.7f}" for k, v in rows]
    verdict = "yes" if report.adaptive_improves else "no"
    lines.append(f"{'adaptive smaller':<{width}}  {verdict}")
    lines.append(report.note)
    return "\n".join(lines)
