"""Spatial graphs: k-nearest-neighbour construction, Kruskal MST, quotients.

Every partitioning routine in the package runs on a :class:`SpatialGraph`, an
immutable undirected simple graph over ``n`` data points.  Construction follows
the usual recipe for point clouds: a symmetrised kNN candidate graph, its
minimum spanning tree, and a sparser kNN graph unioned back on top.

Nearest-neighbour search is brute force, O(n^2 d) time with O(chunk * n)
memory; that is fine for desk-scale problems (a few 10^4 points).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, GraphDisconnected, InvalidData, InvalidParameter

__all__ = [
    "SpatialDataset",
    "SpatialGraph",
    "DisjointSets",
    "build_knn_graph",
    "build_mst",
    "union_graphs",
    "connected_components",
    "is_connected",
    "quotient_graph",
    "write_edge_list",
    "read_edge_list",
]


@dataclass(frozen=True, eq=False)
class SpatialDataset:
    """``n`` points in ``R^d`` with ids ``0..n-1`` and optional responses."""

    points: np.ndarray
    responses: np.ndarray | None = None
    ids: np.ndarray = field(init=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise InvalidData(f"points must be an (n, d) array with n, d >= 1, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
            raise InvalidData(f"non-finite coordinate at point {bad}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        ids = np.arange(pts.shape[0])
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        if self.responses is not None:
            y = np.array(self.responses, dtype=float).reshape(-1)
            if y.shape[0] != pts.shape[0]:
                raise InvalidData(f"{y.shape[0]} responses for {pts.shape[0]} points")
            if not np.all(np.isfinite(y)):
                raise InvalidData("non-finite response value")
            y.setflags(write=False)
            object.__setattr__(self, "responses", y)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, SpatialDataset):
            return NotImplemented
        if self.responses is None or other.responses is None:
            same_y = self.responses is None and other.responses is None
        else:
            same_y = np.array_equal(self.responses, other.responses)
        return np.array_equal(self.points, other.points) and same_y


class SpatialGraph:
    """Immutable undirected simple graph.

    Edges are stored once as ``(i, j)`` with ``i < j``, sorted
    lexicographically.  ``weights`` (optional) is aligned with ``edges``.
    """

    __slots__ = ("n_vertices", "edges", "weights", "_adj")

    def __init__(self, n_vertices: int, edges=(), weights=None):
        n_vertices = int(n_vertices)
        if n_vertices < 0:
            raise InvalidParameter("n_vertices must be nonnegative")
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        w = None if weights is None else np.asarray(weights, dtype=float).reshape(-1)
        if w is not None and w.shape[0] != e.shape[0]:
            raise InvalidParameter(f"{w.shape[0]} weights for {e.shape[0]} edges")
        if e.size:
            if e.min() < 0 or e.max() >= n_vertices:
                raise InvalidParameter("edge endpoint out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise InvalidParameter("self-loops are not allowed")
            if w is not None and (np.any(w < 0) or not np.all(np.isfinite(w))):
                raise InvalidParameter("edge weights must be finite and nonnegative")
        e = np.sort(e, axis=1)
        order = np.lexsort((e[:, 1], e[:, 0]))
        e = e[order]
        keep = np.ones(len(e), dtype=bool)
        if len(e) > 1:
            keep[1:] = np.any(e[1:] != e[:-1], axis=1)
        e = np.ascontiguousarray(e[keep])
        e.setflags(write=False)
        if w is not None:
            w = np.ascontiguousarray(w[order][keep])
            w.setflags(write=False)
        object.__setattr__(self, "n_vertices", n_vertices)
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "_adj", None)

    def __setattr__(self, name, value):
        raise AttributeError("SpatialGraph is immutable")

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.edges}

    def adjacency(self) -> list[list[int]]:
        """Sorted neighbour lists, computed once and cached."""
        if self._adj is None:
            adj = [[] for _ in range(self.n_vertices)]
            for i, j in self.edges.tolist():
                adj[i].append(j)
                adj[j].append(i)
            for nb in adj:
                nb.sort()
            object.__setattr__(self, "_adj", adj)
        return self._adj

    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_vertices)

    def __eq__(self, other):
        if not isinstance(other, SpatialGraph):
            return NotImplemented
        if self.n_vertices != other.n_vertices or not np.array_equal(self.edges, other.edges):
            return False
        if self.weights is None or other.weights is None:
            return self.weights is None and other.weights is None
        return np.array_equal(self.weights, other.weights)

    def __hash__(self):
        return hash((self.n_vertices, self.edges.tobytes()))

    def __repr__(self):
        return f"SpatialGraph(n_vertices={self.n_vertices}, n_edges={self.n_edges})"


class DisjointSets:
    """Union-find with union by rank and path halving."""

    def __init__(self, n: int):
        if n < 0:
            raise InvalidParameter("DisjointSets size must be nonnegative")
        self.parent = list(range(n))
        self.rank = [0] * n
        self.count = n

    def __len__(self):
        return len(self.parent)

    def find(self, x: int) -> int:
        parent = self.parent
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        """Merge the sets of ``a`` and ``b``; False if they were already joined."""
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        self.count -= 1
        return True

    def connected(self, a: int, b: int) -> bool:
        return self.find(a) == self.find(b)


def _pairwise_rows(points: np.ndarray, rows: slice) -> np.ndarray:
    diff = points[rows, None, :] - points[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _edge_lengths(points: np.ndarray, edges: np.ndarray) -> np.ndarray:
    if not len(edges):
        return np.zeros(0)
    diff = points[edges[:, 0]] - points[edges[:, 1]]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def build_knn_graph(data: SpatialDataset, k: int) -> SpatialGraph:
    """Symmetrised k-nearest-neighbour graph with Euclidean edge weights.

    ``{i, j}`` is an edge when either endpoint is among the ``k`` nearest
    neighbours of the other.  Distance ties go to the smaller vertex id.
    """
    if not isinstance(data, SpatialDataset):
        data = SpatialDataset(data)
    n = data.n
    k = int(k)
    if k < 1 or k >= n:
        raise InvalidParameter(f"k must satisfy 1 <= k < n (k={k}, n={n})")
    pts = data.points
    chunk = max(1, (1 << 22) // max(1, n * data.d))
    src, dst = [], []
    for start in range(0, n, chunk):
        rows = slice(start, min(n, start + chunk))
        dist = _pairwise_rows(pts, rows)
        local = np.arange(rows.start, rows.stop)
        dist[local - start, local] = np.inf
        # stable sort: equal distances keep ascending id order
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
        src.append(np.repeat(local, k))
        dst.append(nearest.ravel())
    edges = np.column_stack([np.concatenate(src), np.concatenate(dst)])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    return SpatialGraph(n, edges, _edge_lengths(pts, edges))


def connected_components(g: SpatialGraph, vertex_subset: Iterable[int] | None = None) -> list[list[int]]:
    """Components of the subgraph induced by ``vertex_subset`` (default: all vertices).

    Each component is a sorted list; components are ordered by their smallest id.
    """
    adj = g.adjacency()
    if vertex_subset is None:
        members = range(g.n_vertices)
        inside = None
    else:
        members = sorted(set(int(v) for v in vertex_subset))
        inside = set(members)
    seen = set()
    comps = []
    for s in members:
        if s in seen:
            continue
        seen.add(s)
        comp = [s]
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if w not in seen and (inside is None or w in inside):
                    seen.add(w)
                    comp.append(w)
                    queue.append(w)
        comps.append(sorted(comp))
    return comps


def is_connected(g: SpatialGraph, vertex_subset: Iterable[int] | None = None) -> bool:
    return len(connected_components(g, vertex_subset)) <= 1


def build_mst(data: SpatialDataset | None, candidate: SpatialGraph) -> SpatialGraph:
    """Minimum spanning tree of ``candidate`` by Kruskal's algorithm.

    Edge weights come from ``candidate.weights``; when the candidate is
    unweighted they are recomputed from ``data``.  Ties are broken by
    ``(weight, min id, max id)``.
    """
    n = candidate.n_vertices
    weights = candidate.weights
    if weights is None:
        if data is None:
            raise InvalidParameter("unweighted candidate graph needs the dataset for edge lengths")
        weights = _edge_lengths(data.points, candidate.edges)
    e = candidate.edges
    order = np.lexsort((e[:, 1], e[:, 0], weights))
    ds = DisjointSets(n)
    chosen = []
    for idx in order.tolist():
        i, j = int(e[idx, 0]), int(e[idx, 1])
        if ds.union(i, j):
            chosen.append(idx)
            if ds.count == 1:
                break
    if ds.count > 1:
        raise GraphDisconnected(connected_components(candidate))
    chosen = np.array(sorted(chosen), dtype=np.int64)
    return SpatialGraph(n, e[chosen], weights[chosen] if len(chosen) else np.zeros(0))


def union_graphs(a: SpatialGraph, b: SpatialGraph) -> SpatialGraph:
    """Edge-set union; duplicate edges keep the weight from ``a``."""
    if a.n_vertices != b.n_vertices:
        raise InvalidParameter(f"vertex counts differ: {a.n_vertices} vs {b.n_vertices}")
    edges = np.concatenate([a.edges, b.edges])
    if a.weights is not None and b.weights is not None:
        weights = np.concatenate([a.weights, b.weights])
    else:
        weights = None
    # the constructor's stable sort keeps the first duplicate, i.e. the copy from ``a``
    return SpatialGraph(a.n_vertices, edges, weights)


def quotient_graph(g: SpatialGraph, groups: Sequence[Iterable[int]]) -> SpatialGraph:
    """Contract each group to one vertex; groups ``a`` and ``b`` are adjacent
    when some edge of ``g`` crosses them."""
    owner = np.full(g.n_vertices, -1, dtype=np.int64)
    for gi, grp in enumerate(groups):
        members = np.fromiter((int(v) for v in grp), dtype=np.int64)
        if members.size == 0:
            raise InvalidParameter(f"group {gi} is empty")
        if members.min() < 0 or members.max() >= g.n_vertices:
            raise InvalidParameter(f"group {gi} has a vertex out of range")
        if np.any(owner[members] >= 0) or len(np.unique(members)) != len(members):
            raise InvalidParameter(f"group {gi} overlaps another group")
        owner[members] = gi
    if np.any(owner < 0):
        raise InvalidParameter(f"groups do not cover vertex {int(np.flatnonzero(owner < 0)[0])}")
    ge = owner[g.edges] if g.n_edges else np.zeros((0, 2), dtype=np.int64)
    ge = ge[ge[:, 0] != ge[:, 1]]
    return SpatialGraph(len(groups), ge)


def write_edge_list(g: SpatialGraph, path) -> None:
    """``# vertices=<n>`` header, then ``i j weight`` per edge sorted by (i, j)."""
    lines = [f"# vertices={g.n_vertices}"]
    if g.weights is None:
        lines += [f"{i} {j}" for i, j in g.edges.tolist()]
    else:
        lines += [f"{i} {j} {w!r}" for (i, j), w in zip(g.edges.tolist(), g.weights.tolist())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_edge_list(path) -> SpatialGraph:
    n = None
    edges, weights = [], []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("vertices="):
                n = int(body.split("=", 1)[1])
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise FormatError(f"{path}:{lineno}: expected 'i j [weight]'")
        edges.append((int(parts[0]), int(parts[1])))
        if len(parts) == 3:
            weights.append(float(parts[2]))
    if n is None:
        raise FormatError(f"{path}: missing '# vertices=<n>' header")
    if weights and len(weights) != len(edges):
        raise FormatError(f"{path}: weights present on some edges only")
    return SpatialGraph(n, edges, weights if weights else None)
