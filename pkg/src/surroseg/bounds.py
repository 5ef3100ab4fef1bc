"""Approximation guarantees for clustering on an aggregated problem.

With ``eta_tilde`` the group-mean predictions and ``eta_tilde_star`` the
fitted vector of the aggregated optimum,

    c1 = ||eta_tilde_star - eta|| - ||eta_tilde_star - eta_tilde|| + ||eta_tilde - eta||
    c2 = 2 ||eta_tilde - eta||

bound how far the aggregated optimum can be from the true optimum.  Reports
divide by the square root of the centred total sum of squares, so that a
single cluster scores an error ratio of exactly 1.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .aggregation import Aggregation, HyperrectScheme, hyperrect_aggregate, select_T_and_eta_hat
from .errors import InvalidParameter
from .graph import SpatialDataset, SpatialGraph
from .partition import (
    BRUTE_FORCE_MAX_N,
    Partition,
    _as_values,
    brute_force_oracle,
)

__all__ = [
    "BoundsReport",
    "Theorem2Report",
    "Prop1Report",
    "total_sum_of_squares",
    "expand_fitted",
    "compute_bounds",
    "theorem2_check",
    "prop1_check",
]

CHAIN_TOL = 1e-9


def _norm(x) -> float:
    x = np.asarray(x, dtype=float)
    return math.sqrt(math.fsum(x * x))


def total_sum_of_squares(eta) -> float:
    eta = _as_values(eta)
    r = eta - math.fsum(eta) / len(eta)
    return math.fsum(r * r)


def expand_fitted(solved: Partition, agg: Aggregation | None, n: int) -> np.ndarray:
    """``W v`` on the original points, expanding an aggregated partition if needed."""
    if solved.n == n:
        return solved.fitted()
    if agg is not None and solved.n == agg.l and agg.n == n:
        return solved.v[agg.expand(solved.labels)]
    raise InvalidParameter(f"partition over {solved.n} items does not match {n} points")


@dataclass(frozen=True)
class BoundsReport:
    error_ratio: float
    gap_ratio: float | None
    c1: float | None
    c2: float | None
    tss: float
    which_eta: str
    error: float
    degenerate: bool = False
    tss_centered: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "BoundsReport":
        return cls(**doc)


def compute_bounds(eta, agg: Aggregation | None, solved: Partition, use_hat: bool = False) -> BoundsReport:
    """Error and gap ratios for ``solved``, the aggregated optimum.

    Without an aggregation only the error is reported (``c1``, ``c2`` and the
    gap are ``None``).  With ``use_hat`` the vector ``eta_hat`` replaces
    ``eta_tilde`` in both constants.
    """
    eta = _as_values(eta)
    n = len(eta)
    fitted = expand_fitted(solved, agg, n)
    tss = total_sum_of_squares(eta)
    err = _norm(fitted - eta)
    c1 = c2 = None
    which = "none"
    if agg is not None:
        if use_hat:
            _, ref = select_T_and_eta_hat(agg, eta)
            which = "hat"
        else:
            ref = agg.aggregated_eta
            which = "tilde"
        d_ref = _norm(ref - eta)
        c2 = 2.0 * d_ref
        c1 = err - _norm(fitted - ref) + d_ref
    degenerate = tss == 0.0
    if degenerate:
        ratio, gap = 0.0, (0.0 if c1 is not None else None)
    else:
        root = math.sqrt(tss)
        ratio = err / root
        gap = c1 / root if c1 is not None else None
    return BoundsReport(ratio, gap, c1, c2, tss, which, err, degenerate)


@dataclass(frozen=True)
class Theorem2Report:
    skipped: bool
    lhs: float = math.nan
    c1: float = math.nan
    c2: float = math.nan
    holds: bool = False
    reason: str = ""
    true_objective: float = math.nan
    aggregated_objective: float = math.nan


def theorem2_check(g: SpatialGraph, eta, agg: Aggregation, m: int, oracle_budget: int = BRUTE_FORCE_MAX_N,
                   use_hat: bool = False, tol: float = CHAIN_TOL) -> Theorem2Report:
    """Check ``||eta_tilde_star - eta|| - ||eta_star - eta|| <= c1 <= c2`` by brute force.

    The true optimum ``eta_star`` is taken over connected partitions that
    also satisfy Constraint 1 for the groups of ``agg``, the setting in which
    the aggregated optimum is optimal for ``eta_tilde``.
    """
    eta = _as_values(eta)
    n = len(eta)
    if n > min(oracle_budget, BRUTE_FORCE_MAX_N):
        return Theorem2Report(True, reason=f"n={n} exceeds the brute-force budget")
    if not 1 <= m <= agg.l:
        raise InvalidParameter(f"m must lie in 1..{agg.l}")
    star = brute_force_oracle(g, eta, m, constraint_blocks=[grp.tolist() for grp in agg.groups])
    agg_opt = brute_force_oracle(agg.quotient, agg.representative_eta, m, weights=agg.group_sizes)
    rep = compute_bounds(eta, agg, agg_opt, use_hat)
    lhs = rep.error - _norm(star.fitted() - eta)
    holds = lhs <= rep.c1 + tol and rep.c1 <= rep.c2 + tol
    return Theorem2Report(False, lhs, rep.c1, rep.c2, holds, "", star.objective, rep.error ** 2)


@dataclass(frozen=True)
class Prop1Report:
    c2: float
    bound: float
    holds: bool
    n_groups: int


def prop1_check(data: SpatialDataset, g: SpatialGraph, eta_fn: Callable, scheme: HyperrectScheme,
                sup_grad) -> Prop1Report:
    """Compare ``c2`` of a grid aggregation with ``2 sqrt(n) sum_i side_i sup|d eta / dx_i|``.

    ``eta_fn`` maps an ``(n, d)`` array of points to predictions and
    ``sup_grad`` bounds its partial derivatives over the covered region.
    """
    sup = np.asarray(sup_grad, dtype=float).reshape(-1)
    if sup.shape[0] != data.d or np.any(sup < 0):
        raise InvalidParameter("need one nonnegative gradient bound per axis")
    eta = _as_values(eta_fn(data.points))
    agg = hyperrect_aggregate(data, g, eta, scheme)
    c2 = 2.0 * _norm(agg.aggregated_eta - eta)
    bound = 2.0 * math.sqrt(data.n) * math.fsum(np.asarray(scheme.side_lengths) * sup)
    return Prop1Report(c2, bound, c2 <= bound * (1 + 1e-12), agg.l)
