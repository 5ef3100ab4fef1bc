"""Prior aggregation of data points into connected groups.

An aggregation assigns each of the ``n`` points a sublabel in ``0..l-1``
such that every group induces a connected subgraph.  Replacing each
prediction by its group mean gives the smoothed vector ``eta_tilde``; the
clustering problem can then be solved on the ``l``-vertex quotient graph
with group sizes as weights, at an additive cost of at most
``2 * ||eta_tilde - eta||``.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from pathlib import Path
import numpy as np

from .errors import FormatError, InvalidParameter
from .graph import (
    DisjointSets,
    SpatialDataset,
    SpatialGraph,
    connected_components,
    is_connected,
    quotient_graph,
)

__all__ = [
    "Aggregation",
    "HyperrectScheme",
    "SideLengths",
    "AssumptionReport",
    "greedy_labels",
    "greedy_aggregate",
    "hyperrect_aggregate",
    "optimal_side_lengths",
    "c2_of",
    "select_T_and_eta_hat",
    "verify_assumptions",
    "save_aggregation",
    "load_aggregation",
]


def _as_eta(eta) -> np.ndarray:
    values = getattr(eta, "eta", eta)
    arr = np.asarray(values, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise InvalidParameter("predictions must be finite")
    return arr


def _canonical(sublabels: np.ndarray) -> np.ndarray:
    """Relabel so groups are numbered by their smallest member id."""
    _, first = np.unique(sublabels, return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.empty(len(order), dtype=np.int64)
    remap[order] = np.arange(len(order))
    _, inv = np.unique(sublabels, return_inverse=True)
    return remap[inv.reshape(-1)]


class Aggregation:
    """Sublabels, groups, group means and the quotient graph.

    Construct with :meth:`from_sublabels`; sublabels are renumbered so that
    group ``i`` is the one whose smallest member is the ``i``-th smallest.
    """

    def __init__(self, sublabels, representative_eta, group_sizes, quotient: SpatialGraph):
        self.sublabels = np.asarray(sublabels, dtype=np.int64)
        self.representative_eta = np.asarray(representative_eta, dtype=float)
        self.group_sizes = np.asarray(group_sizes, dtype=np.int64)
        self.quotient = quotient
        for arr in (self.sublabels, self.representative_eta, self.group_sizes):
            arr.setflags(write=False)
        order = np.argsort(self.sublabels, kind="stable")
        bounds = np.cumsum(self.group_sizes)[:-1]
        self.groups = [np.asarray(g) for g in np.split(order, bounds)]

    @classmethod
    def from_sublabels(cls, g: SpatialGraph, eta, sublabels) -> "Aggregation":
        eta = _as_eta(eta)
        sub = np.asarray(sublabels, dtype=np.int64).reshape(-1)
        if sub.shape[0] != eta.shape[0] or sub.shape[0] != g.n_vertices:
            raise InvalidParameter("sublabels, predictions and graph sizes differ")
        sub = _canonical(sub)
        l = int(sub.max()) + 1
        sizes = np.bincount(sub, minlength=l)
        order = np.argsort(sub, kind="stable")
        chunks = np.split(eta[order], np.cumsum(sizes)[:-1])
        means = np.array([math.fsum(c) / len(c) for c in chunks])
        groups = np.split(order, np.cumsum(sizes)[:-1])
        return cls(sub, means, sizes, quotient_graph(g, groups))

    @classmethod
    def identity(cls, g: SpatialGraph, eta) -> "Aggregation":
        return cls.from_sublabels(g, eta, np.arange(g.n_vertices))

    @property
    def n(self) -> int:
        return len(self.sublabels)

    @property
    def l(self) -> int:
        return len(self.group_sizes)

    @property
    def aggregated_eta(self) -> np.ndarray:
        return self.representative_eta[self.sublabels]

    def expand(self, labels) -> np.ndarray:
        """Map group labels (length ``l``) to point labels (length ``n``)."""
        return np.asarray(labels)[self.sublabels]

    def to_dict(self) -> dict:
        return {
            "sublabels": self.sublabels.tolist(),
            "representative_eta": self.representative_eta.tolist(),
            "group_sizes": self.group_sizes.tolist(),
            "quotient_vertices": self.quotient.n_vertices,
            "quotient_edges": self.quotient.edges.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Aggregation":
        try:
            q = SpatialGraph(doc["quotient_vertices"], doc["quotient_edges"])
            return cls(doc["sublabels"], doc["representative_eta"], doc["group_sizes"], q)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed aggregation document: {exc}") from None

    def __eq__(self, other):
        if not isinstance(other, Aggregation):
            return NotImplemented
        return (
            np.array_equal(self.sublabels, other.sublabels)
            and np.array_equal(self.representative_eta, other.representative_eta)
            and np.array_equal(self.group_sizes, other.group_sizes)
            and self.quotient == other.quotient
        )

    def __repr__(self):
        return f"Aggregation(n={self.n}, l={self.l})"


def greedy_labels(g: SpatialGraph, eta, l: int, weights=None) -> np.ndarray:
    """Merge adjacent groups greedily until ``l`` remain; returns canonical labels.

    Starting from singletons, each step merges the adjacent pair whose merge
    increases the weighted ``||eta_tilde - eta||^2`` the least.  For groups of
    weight ``a, b`` and means ``p, q`` that increase is
    ``a b / (a + b) (p - q)^2``.  Ties go to the pair whose smallest member ids
    are lexicographically smaller.  Stale heap entries are skipped using
    per-group version counters.
    """
    eta = _as_eta(eta)
    n = g.n_vertices
    l = int(l)
    if len(eta) != n:
        raise InvalidParameter(f"{len(eta)} predictions for {n} vertices")
    if not 1 <= l <= n:
        raise InvalidParameter(f"l must satisfy 1 <= l <= n (l={l}, n={n})")
    if not is_connected(g):
        raise InvalidParameter("greedy merging needs a connected graph")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != n or np.any(~(w > 0)):
            raise InvalidParameter("vertex weights must be positive, one per vertex")

    size = w.tolist()
    total = (w * eta).tolist()
    low = list(range(n))  # smallest member id per root
    version = [0] * n
    nbrs = [set(a) for a in g.adjacency()]
    ds = DisjointSets(n)

    def entry(a, b):
        sa, sb = size[a], size[b]
        diff = total[a] / sa - total[b] / sb
        lo, hi = (low[a], low[b]) if low[a] < low[b] else (low[b], low[a])
        return (sa * sb / (sa + sb) * diff * diff, lo, hi, a, b, version[a], version[b])

    heap = [entry(i, j) for i, j in g.edges.tolist()]
    heapq.heapify(heap)
    while ds.count > l:
        _, _, _, a, b, va, vb = heapq.heappop(heap)
        if va != version[a] or vb != version[b]:
            continue
        ds.union(a, b)
        r = ds.find(a)
        o = b if r == a else a
        size[r] += size[o]
        total[r] += total[o]
        low[r] = min(low[r], low[o])
        version[r] += 1
        version[o] = -1
        big, small = (nbrs[r], nbrs[o]) if len(nbrs[r]) >= len(nbrs[o]) else (nbrs[o], nbrs[r])
        big |= small
        big.discard(r)
        big.discard(o)
        nbrs[r], nbrs[o] = big, set()
        for c in big:
            nbrs[c].discard(o)
            nbrs[c].add(r)
            heapq.heappush(heap, entry(r, c))
    return _canonical(np.array([ds.find(i) for i in range(n)], dtype=np.int64))


def greedy_aggregate(g: SpatialGraph, eta, l: int) -> Aggregation:
    """Aggregation into ``l`` connected groups by :func:`greedy_labels`."""
    return Aggregation.from_sublabels(g, eta, greedy_labels(g, eta, l))


@dataclass(frozen=True)
class HyperrectScheme:
    """Axis-aligned grid with per-axis side lengths anchored at ``origin``."""

    side_lengths: tuple
    origin: tuple

    def __post_init__(self):
        sides = tuple(float(s) for s in np.atleast_1d(self.side_lengths))
        origin = tuple(float(o) for o in np.atleast_1d(self.origin))
        if len(sides) != len(origin):
            raise InvalidParameter("side_lengths and origin differ in dimension")
        if any(not s > 0 for s in sides):
            raise InvalidParameter("side lengths must be positive")
        object.__setattr__(self, "side_lengths", sides)
        object.__setattr__(self, "origin", origin)

    @property
    def d(self) -> int:
        return len(self.side_lengths)

    @property
    def delta(self) -> float:
        """Geometric mean of the side lengths."""
        return float(np.exp(np.mean(np.log(self.side_lengths))))

    def cell_index(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, self.d)
        return np.floor((pts - np.asarray(self.origin)) / np.asarray(self.side_lengths)).astype(np.int64)


def hyperrect_aggregate(data: SpatialDataset, g: SpatialGraph, eta, scheme: HyperrectScheme) -> Aggregation:
    """Group points by grid cell; a cell whose members are not connected in ``g``
    contributes one group per connected component."""
    if scheme.d != data.d:
        raise InvalidParameter(f"scheme dimension {scheme.d} != data dimension {data.d}")
    cells = scheme.cell_index(data.points)
    _, cell_id = np.unique(cells, axis=0, return_inverse=True)
    cell_id = cell_id.reshape(-1)
    sub = np.empty(data.n, dtype=np.int64)
    next_label = 0
    order = np.argsort(cell_id, kind="stable")
    counts = np.bincount(cell_id)
    for members in np.split(order, np.cumsum(counts)[:-1]):
        if len(members) == 0:
            continue
        for comp in connected_components(g, members.tolist()):
            sub[comp] = next_label
            next_label += 1
    return Aggregation.from_sublabels(g, eta, sub)


@dataclass(frozen=True)
class SideLengths:
    """Bound-minimising side lengths for a fixed geometric mean ``delta``.

    ``bound(n)`` is the minimal value ``2 (prod sup_i)^(1/d) sqrt(n) d delta``
    of ``2 sqrt(n) sum_i side_i sup_i``.
    """

    side_lengths: np.ndarray
    gradient_scale: float
    delta: float

    def bound(self, n) -> float:
        d = len(self.side_lengths)
        return 2.0 * self.gradient_scale * math.sqrt(n) * d * self.delta

    def scheme(self, origin) -> HyperrectScheme:
        return HyperrectScheme(tuple(self.side_lengths), tuple(np.atleast_1d(origin)))


def optimal_side_lengths(sup_grad, delta: float) -> SideLengths:
    sup = np.asarray(sup_grad, dtype=float).reshape(-1)
    if sup.size == 0 or np.any(~(sup > 0)) or not np.all(np.isfinite(sup)):
        raise InvalidParameter("gradient bounds must be positive and finite")
    if not delta > 0:
        raise InvalidParameter("delta must be positive")
    scale = float(np.exp(np.mean(np.log(sup))))
    return SideLengths(side_lengths=scale / sup * delta, gradient_scale=scale, delta=float(delta))


def c2_of(agg: Aggregation, eta) -> float:
    """Additive error bound ``2 ||eta_tilde - eta||_2``."""
    eta = _as_eta(eta)
    if len(eta) != agg.n:
        raise InvalidParameter("prediction length differs from aggregation size")
    return 2.0 * float(np.linalg.norm(agg.aggregated_eta - eta))


def select_T_and_eta_hat(agg: Aggregation, eta) -> tuple[list[int], np.ndarray]:
    """Groups adjacent to at most one other group, and ``eta_hat``.

    ``eta_hat`` equals ``eta_tilde`` except on members of the selected groups,
    which keep their original predictions.
    """
    eta = _as_eta(eta)
    deg = agg.quotient.degree()
    T = [int(i) for i in np.flatnonzero(deg <= 1)]
    eta_hat = agg.aggregated_eta.copy()
    mask = np.isin(agg.sublabels, T)
    eta_hat[mask] = eta[mask]
    return T, eta_hat


@dataclass(frozen=True)
class AssumptionReport:
    group_connected: tuple
    passed: bool

    @property
    def failing_groups(self) -> list[int]:
        return [i for i, ok in enumerate(self.group_connected) if not ok]


def verify_assumptions(agg: Aggregation, g: SpatialGraph) -> AssumptionReport:
    """Check that every group induces a connected subgraph of ``g``."""
    flags = tuple(len(connected_components(g, grp.tolist())) == 1 for grp in agg.groups)
    return AssumptionReport(group_connected=flags, passed=all(flags))


def save_aggregation(agg: Aggregation, path) -> None:
    Path(path).write_text(json.dumps(agg.to_dict(), sort_keys=True) + "\n", encoding="utf-8")


def load_aggregation(path) -> Aggregation:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return Aggregation.from_dict(doc)
