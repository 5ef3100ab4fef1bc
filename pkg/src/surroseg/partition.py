"""Connected graph partitioning under the within-cluster sum of squares.

The problem: assign every vertex of a connected graph one of ``m`` labels so
that each cluster is nonempty and induces a connected subgraph, minimising
``sum_i w_i (eta_i - v_{label_i})^2`` with ``v`` the (weighted) cluster means.
Vertex weights default to 1; aggregated problems use group sizes.

:func:`solve_exact` is a depth-first branch and bound with a
connectivity-feasibility test and a one-dimensional k-means lower bound on the
unassigned vertices.  :func:`brute_force_oracle` enumerates every labelling
and is the reference it is tested against.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import BudgetExceeded, FormatError, InvalidParameter, InvalidPartition, NumericalError
from .aggregation import greedy_labels
from .graph import SpatialGraph, connected_components, is_connected

__all__ = [
    "Partition",
    "SolverConfig",
    "KMeans1D",
    "Constraint1Report",
    "cluster_means",
    "objective_wcss",
    "canonical_labels",
    "kmeans1d_dp",
    "solve_exact",
    "solve_greedy",
    "greedy_labels",
    "brute_force_oracle",
    "enumerate_labelings",
    "verify_constraint1",
    "mahalanobis_score",
    "save_partition",
    "load_partition",
]

BRUTE_FORCE_MAX_N = 12


def _as_values(eta) -> np.ndarray:
    arr = np.asarray(getattr(eta, "eta", eta), dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise InvalidParameter("predictions must be finite")
    return arr


def _as_weights(weights, n) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != n or np.any(~(w > 0)):
        raise InvalidParameter("vertex weights must be positive, one per vertex")
    return w


def canonical_labels(labels) -> np.ndarray:
    """Renumber labels in order of first appearance (= smallest member id)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.empty_like(labels)
    seen = {}
    for i, c in enumerate(labels.tolist()):
        out[i] = seen.setdefault(c, len(seen))
    return out


def _check_labels(labels, n, m) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise InvalidPartition(f"{labels.shape[0]} labels for {n} points")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise InvalidPartition(f"labels must lie in 0..{m - 1}")
    counts = np.bincount(labels, minlength=m)
    if np.any(counts == 0):
        raise InvalidPartition(f"cluster {int(np.flatnonzero(counts == 0)[0])} is empty")
    return labels


def cluster_means(labels, eta, m: int, weights=None) -> np.ndarray:
    """(Weighted) mean prediction of each cluster; every cluster must be used."""
    eta = _as_values(eta)
    labels = _check_labels(labels, len(eta), m)
    w = _as_weights(weights, len(eta))
    out = np.empty(m)
    for j in range(m):
        sel = labels == j
        out[j] = math.fsum(w[sel] * eta[sel]) / math.fsum(w[sel])
    return np.clip(out, eta.min(), eta.max())


def objective_wcss(labels, eta, m: int, weights=None) -> float:
    """Within-cluster sum of squares at the cluster means."""
    eta = _as_values(eta)
    v = cluster_means(labels, eta, m, weights)
    w = _as_weights(weights, len(eta))
    r = eta - v[np.asarray(labels, dtype=np.int64)]
    return math.fsum(w * r * r)


@dataclass(frozen=True)
class KMeans1D:
    objective: float
    breakpoints: tuple
    order: np.ndarray = field(repr=False)

    def labels(self) -> np.ndarray:
        """Cluster of every input value (clusters numbered in ascending value order)."""
        out = np.empty(len(self.order), dtype=np.int64)
        starts = (0,) + self.breakpoints + (len(self.order),)
        for j in range(len(starts) - 1):
            out[self.order[starts[j] : starts[j + 1]]] = j
        return out


def _kmeans_table(x: np.ndarray, w: np.ndarray, m: int):
    """DP tables over sorted ``x``: ``D[k][j]`` is the best cost of the first ``j``
    values in ``k + 1`` segments."""
    n = len(x)
    W = np.concatenate([[0.0], np.cumsum(w)])
    S1 = np.concatenate([[0.0], np.cumsum(w * x)])
    S2 = np.concatenate([[0.0], np.cumsum(w * x * x)])
    i = np.arange(n + 1)[:, None]
    j = np.arange(n + 1)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        dW = W[j] - W[i]
        dS = S1[j] - S1[i]
        cost = np.where(j > i, (S2[j] - S2[i]) - dS * dS / np.where(dW > 0, dW, 1.0), np.inf)
    cost = np.maximum(cost, 0.0)
    D = np.empty((m, n + 1))
    arg = np.zeros((m, n + 1), dtype=np.int64)
    D[0] = cost[0]
    for k in range(1, m):
        tot = D[k - 1][:, None] + cost
        arg[k] = np.argmin(tot, axis=0)
        D[k] = tot[arg[k], np.arange(n + 1)]
    return D, arg


def kmeans1d_dp(eta, m: int, weights=None) -> KMeans1D:
    """Exact one-dimensional (weighted) k-means with exactly ``m`` clusters.

    Optimal clusters are contiguous in sorted order, so a dynamic programme
    over split points with prefix-sum segment costs finds the optimum in
    O(n^2 m).  ``breakpoints`` are the sorted positions where clusters
    2..m start.
    """
    x = _as_values(eta)
    n = len(x)
    m = int(m)
    if not 1 <= m <= n:
        raise InvalidParameter(f"m must satisfy 1 <= m <= n (m={m}, n={n})")
    w = _as_weights(weights, n)
    order = np.argsort(x, kind="stable")
    xs, ws = x[order], w[order]
    centre = math.fsum(ws * xs) / math.fsum(ws)
    D, arg = _kmeans_table(xs - centre, ws, m)
    cuts = []
    j = n
    for k in range(m - 1, 0, -1):
        j = int(arg[k][j])
        cuts.append(j)
    return KMeans1D(objective=float(D[m - 1][n]), breakpoints=tuple(reversed(cuts)), order=order)


@dataclass(frozen=True)
class SolverConfig:
    m: int
    objective_kind: str = "wcss"
    tolerance: float = 1e-9
    node_budget: int = 5_000_000
    thread_count: int = 1

    def __post_init__(self):
        if int(self.m) < 1:
            raise InvalidParameter("m must be at least 1")
        if self.objective_kind not in ("wcss", "mahalanobis"):
            raise InvalidParameter(f"unknown objective kind {self.objective_kind!r}")
        if not self.tolerance > 0:
            raise InvalidParameter("tolerance must be positive")
        if int(self.node_budget) < 1:
            raise InvalidParameter("node_budget must be positive")


@dataclass(eq=False)
class Partition:
    """Labels ``0..m-1`` per point, representatives and objective value."""

    labels: np.ndarray
    v: np.ndarray
    objective: float
    m: int
    canonical: bool = True
    telemetry: dict = field(default_factory=dict)

    @classmethod
    def from_labels(cls, labels, eta, m: int, weights=None, telemetry=None) -> "Partition":
        labels = canonical_labels(labels)
        v = cluster_means(labels, eta, m, weights)
        obj = objective_wcss(labels, eta, m, weights)
        return cls(labels=labels, v=v, objective=obj, m=int(m), canonical=True, telemetry=dict(telemetry or {}))

    @property
    def n(self) -> int:
        return len(self.labels)

    def fitted(self) -> np.ndarray:
        """``W v``: each point's cluster representative."""
        return self.v[self.labels]

    def clusters(self) -> list[list[int]]:
        return [np.flatnonzero(self.labels == j).tolist() for j in range(self.m)]

    def to_dict(self) -> dict:
        return {
            "labels": self.labels.tolist(),
            "v": self.v.tolist(),
            "objective": self.objective,
            "canonical": self.canonical,
            "m": self.m,
            "telemetry": self.telemetry,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Partition":
        try:
            return cls(
                labels=np.asarray(doc["labels"], dtype=np.int64),
                v=np.asarray(doc["v"], dtype=float),
                objective=float(doc["objective"]),
                m=int(doc["m"]),
                canonical=bool(doc.get("canonical", True)),
                telemetry=dict(doc.get("telemetry", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed partition document: {exc}") from None

    def __eq__(self, other):
        if not isinstance(other, Partition):
            return NotImplemented
        return (
            np.array_equal(self.labels, other.labels)
            and np.array_equal(self.v, other.v)
            and self.objective == other.objective
            and self.m == other.m
            and self.canonical == other.canonical
            and self.telemetry == other.telemetry
        )


def _bfs_order(g: SpatialGraph) -> list[int]:
    adj = g.adjacency()
    order, seen = [0], {0}
    head = 0
    while head < len(order):
        for w in adj[order[head]]:
            if w not in seen:
                seen.add(w)
                order.append(w)
        head += 1
    return order


def _better(obj, labels, best_obj, best_labels, tol) -> bool:
    if best_labels is None or obj < best_obj - tol:
        return True
    return obj <= best_obj + tol and tuple(labels) < tuple(best_labels)


def solve_exact(g: SpatialGraph, eta, cfg: SolverConfig, weights=None) -> Partition:
    """Optimal connected ``m``-partition by branch and bound.

    Vertices are labelled in breadth-first order from vertex 0; a new label
    may only be opened as the next unused one, which removes label
    permutations.  A node is pruned when

    * some open cluster can no longer be connected: its vertices are not in a
      single component of the graph induced by that cluster's vertices plus
      the unassigned ones; or
    * the cost of the assigned part plus the one-dimensional k-means optimum
      of the unassigned suffix (with ``min(m, remaining)`` clusters) exceeds
      the incumbent by more than the tolerance.

    The second bound holds because splitting a cluster into its assigned and
    unassigned parts never increases its sum of squares.  Among optima within
    ``cfg.tolerance`` the lexicographically smallest canonical label vector
    is returned.
    """
    if cfg.objective_kind != "wcss":
        raise InvalidParameter("exact branch and bound supports the wcss objective only; export the MIQP instead")
    eta = _as_values(eta)
    n = g.n_vertices
    m = int(cfg.m)
    tol = float(cfg.tolerance)
    if len(eta) != n:
        raise InvalidParameter(f"{len(eta)} predictions for {n} vertices")
    if m > n:
        raise InvalidParameter(f"m={m} exceeds the number of vertices {n}")
    if not is_connected(g):
        raise InvalidParameter("exact solver needs a connected graph")
    w = _as_weights(weights, n)

    centre = math.fsum(w * eta) / math.fsum(w)
    x = (eta - centre).tolist()
    wl = w.tolist()
    order = _bfs_order(g)
    adj = g.adjacency()
    nbr = [0] * n
    for v in range(n):
        for u in adj[v]:
            nbr[v] |= 1 << u

    # lower bound on the unassigned suffix order[t:]
    scale = math.fsum(w * (eta - centre) ** 2)
    slack = 1e-12 * max(1.0, scale)
    suffix = [0.0] * (n + 1)
    for t in range(n):
        rest = order[t:]
        k = min(m, len(rest))
        suffix[t] = max(0.0, kmeans1d_dp(eta[rest], k, w[rest]).objective - slack)

    incumbent = solve_greedy(g, eta, m, weights=w)
    best_obj = incumbent.objective
    best_labels = incumbent.labels.tolist()
    root_bound = suffix[0]

    label = [-1] * n
    cw = [0.0] * m
    cs = [0.0] * m
    cmask = [0] * m
    cseed = [0] * m
    nodes = 0
    budget = int(cfg.node_budget)

    def reachable(j, unassigned):
        avail = cmask[j] | unassigned
        target = cmask[j]
        reach = frontier = cseed[j]
        while frontier:
            if not target & ~reach:
                return True
            nxt = 0
            f = frontier
            while f:
                low = f & -f
                nxt |= nbr[low.bit_length() - 1]
                f ^= low
            frontier = nxt & avail & ~reach
            reach |= frontier
        return not target & ~reach

    def search(t, opened, cost, unassigned):
        nonlocal nodes, best_obj, best_labels
        nodes += 1
        if nodes > budget:
            raise _Budget()
        if t == n:
            if opened < m:
                return
            labs = canonical_labels(label).tolist()
            if _better(cost, labs, best_obj, best_labels, tol):
                best_obj = min(best_obj, cost) if best_labels is not None else cost
                best_labels = labs
            return
        if m - opened > n - t:
            return
        v = order[t]
        bit = 1 << v
        rest = unassigned & ~bit
        xv, wv = x[v], wl[v]
        choices = []
        for j in range(min(m, opened + 1)):
            if j < opened:
                W = cw[j]
                d = xv - cs[j] / W
                inc = W * wv / (W + wv) * d * d
            else:
                inc = 0.0
            choices.append((inc, j))
        choices.sort()
        for inc, j in choices:
            new_cost = cost + inc
            if new_cost + suffix[t + 1] > best_obj + tol:
                continue
            is_new = j == opened
            label[v] = j
            cw[j] += wv
            cs[j] += wv * xv
            cmask[j] |= bit
            if is_new:
                cseed[j] = bit
            ok = True
            for k in range(opened):
                if not reachable(k, rest):
                    ok = False
                    break
            if ok:
                search(t + 1, opened + (1 if is_new else 0), new_cost, rest)
            label[v] = -1
            cw[j] -= wv
            cs[j] -= wv * xv
            cmask[j] &= ~bit
            if is_new:
                cseed[j] = 0
                cw[j] = 0.0
                cs[j] = 0.0

    full = (1 << n) - 1
    try:
        search(0, 0, 0.0, full)
    except _Budget:
        part = Partition.from_labels(best_labels, eta, m, w, telemetry={"nodes": nodes, "root_bound": root_bound})
        raise BudgetExceeded(f"node budget {budget} exhausted", incumbent=part) from None
    telemetry = {
        "nodes": nodes,
        "root_bound": root_bound,
        "greedy_objective": incumbent.objective,
    }
    return Partition.from_labels(best_labels, eta, m, w, telemetry=telemetry)


class _Budget(Exception):
    pass


def solve_greedy(g: SpatialGraph, eta, m: int, weights=None) -> Partition:
    """Greedy merging with ``l = m``, returned as a partition."""
    labels = greedy_labels(g, eta, m, weights)
    return Partition.from_labels(labels, eta, m, weights, telemetry={"method": "greedy"})


@lru_cache(maxsize=32)
def _rgs(n: int, m: int) -> np.ndarray:
    """All restricted growth strings of length ``n`` using exactly ``m`` labels."""
    rows = np.zeros((1, 1), dtype=np.int8)
    for pos in range(1, n):
        mx = rows.max(axis=1)
        parts = []
        for c in range(m):
            keep = mx + 1 >= c
            if not keep.any():
                continue
            blk = rows[keep]
            used = np.maximum(mx[keep], c) + 1
            # enough positions left to open the remaining labels
            ok = used + (n - pos - 1) >= m
            blk = blk[ok]
            parts.append(np.column_stack([blk, np.full(len(blk), c, dtype=np.int8)]))
        rows = np.concatenate(parts) if parts else np.zeros((0, pos + 1), dtype=np.int8)
    rows = rows[rows.max(axis=1) == m - 1] if n else rows
    order = np.lexsort(rows.T[::-1])
    rows = rows[order]
    rows.setflags(write=False)
    return rows


def enumerate_labelings(n: int, m: int) -> np.ndarray:
    """Every labelling of ``n`` points with ``m`` nonempty clusters, one per label
    permutation class, in lexicographic order (rows are canonical)."""
    if not 1 <= m <= n:
        raise InvalidParameter(f"m must satisfy 1 <= m <= n (m={m}, n={n})")
    return _rgs(int(n), int(m))


def _cluster_connected(nbr, mask) -> bool:
    low = mask & -mask
    reach = frontier = low
    while frontier:
        nxt = 0
        f = frontier
        while f:
            b = f & -f
            nxt |= nbr[b.bit_length() - 1]
            f ^= b
        frontier = nxt & mask & ~reach
        reach |= frontier
    return reach == mask


def brute_force_oracle(g: SpatialGraph, eta, m: int, weights=None, constraint_blocks=None, tol=1e-9) -> Partition:
    """Minimum-objective connected ``m``-partition by exhaustive enumeration.

    Labellings are enumerated up to label permutation and filtered for
    nonempty connected clusters (and for Constraint 1 w.r.t.
    ``constraint_blocks`` when given).  Among optima within ``tol`` the
    lexicographically smallest canonical label vector wins.
    """
    eta = _as_values(eta)
    n = g.n_vertices
    if n > BRUTE_FORCE_MAX_N:
        raise InvalidParameter(f"brute force refused for n={n} > {BRUTE_FORCE_MAX_N}")
    if len(eta) != n:
        raise InvalidParameter(f"{len(eta)} predictions for {n} vertices")
    w = _as_weights(weights, n)
    L = enumerate_labelings(n, m).astype(np.int64)
    x = eta - math.fsum(w * eta) / math.fsum(w)
    onehot = L[:, :, None] == np.arange(m)[None, None, :]
    W = np.einsum("kij,i->kj", onehot, w)
    S = np.einsum("kij,i->kj", onehot, w * x)
    obj = float(np.sum(w * x * x)) - np.sum(S * S / W, axis=1)
    nbr = [0] * n
    for i, j in g.edges.tolist():
        nbr[i] |= 1 << j
        nbr[j] |= 1 << i
    best = None
    best_obj = math.inf
    for idx in np.argsort(obj, kind="stable").tolist():
        if obj[idx] > best_obj + 2 * tol:
            break
        row = L[idx]
        ok = True
        for j in range(m):
            mask = 0
            for v in np.flatnonzero(row == j).tolist():
                mask |= 1 << v
            if not _cluster_connected(nbr, mask):
                ok = False
                break
        if ok and constraint_blocks is not None:
            ok = verify_constraint1(g, constraint_blocks, row).passed
        if not ok:
            continue
        exact = objective_wcss(row, eta, m, w)
        if _better(exact, row.tolist(), best_obj, best, tol):
            best_obj = min(best_obj, exact)
            best = row.tolist()
    if best is None:
        raise InvalidParameter("no feasible connected partition exists")
    return Partition.from_labels(best, eta, m, w, telemetry={"method": "brute_force"})


@dataclass(frozen=True)
class Constraint1Report:
    passed: bool
    exhaustive: bool
    component: tuple = ()
    removed_blocks: tuple = ()
    witness: tuple = ()
    reason: str = ""


def verify_constraint1(g: SpatialGraph, V: Sequence, labels) -> Constraint1Report:
    """Check Constraint 1 for the partition ``labels`` against the blocks ``V``.

    For each connected component ``C`` of the partition, the blocks of ``V``
    that meet ``C`` without being contained in it are removable.  Removing any
    subcollection of them must leave ``C`` nonempty and connected.  All
    subcollections are tried when there are at most 10 removable blocks;
    otherwise all-at-once and one-at-a-time removals are tried and the report
    says ``exhaustive=False``.
    ``witness`` holds one vertex from each of two separated pieces.
    """
    n = g.n_vertices
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    blocks = [sorted(int(v) for v in b) for b in V]
    owner = np.full(n, -1, dtype=np.int64)
    for bi, b in enumerate(blocks):
        if not b or owner[b].max() >= 0 or len(set(b)) != len(b):
            raise InvalidParameter(f"block {bi} is empty or overlaps another block")
        owner[b] = bi
    if np.any(owner < 0):
        raise InvalidParameter("blocks do not cover every vertex")
    exhaustive = True
    for j in np.unique(labels).tolist():
        for comp in connected_components(g, np.flatnonzero(labels == j).tolist()):
            cset = set(comp)
            partial = sorted({int(owner[v]) for v in comp if not set(blocks[owner[v]]) <= cset})
            if not partial:
                continue
            if len(partial) <= 10:
                subsets = itertools.chain.from_iterable(
                    itertools.combinations(partial, r) for r in range(1, len(partial) + 1)
                )
            else:
                exhaustive = False
                subsets = [tuple(partial)] + [(b,) for b in partial]
            for S in subsets:
                removed = set().union(*(blocks[b] for b in S))
                rest = [v for v in comp if v not in removed]
                if not rest:
                    return Constraint1Report(False, exhaustive, tuple(comp), S, (), "empty")
                pieces = connected_components(g, rest)
                if len(pieces) > 1:
                    wit = (pieces[0][0], pieces[1][0])
                    return Constraint1Report(False, exhaustive, tuple(comp), S, wit, "disconnected")
    return Constraint1Report(True, exhaustive)


def mahalanobis_score(labels, mu, sigma, m: int):
    """Generalised-least-squares representatives under covariance ``sigma``.

    Returns ``(v_hat, quadratic, correction)`` with
    ``v_hat = (W^T S^-1 W)^-1 W^T S^-1 mu``, ``quadratic`` the Mahalanobis
    residual ``(W v_hat - mu)^T S^-1 (W v_hat - mu)`` and ``correction =
    -0.5 log|W^T S^-1 W|``, the term added when ``v`` is integrated out.
    """
    mu = _as_values(mu)
    n = len(mu)
    labels = _check_labels(labels, n, m)
    Sigma = np.asarray(sigma, dtype=float)
    if Sigma.shape != (n, n):
        raise InvalidParameter(f"covariance must be {n}x{n}")
    try:
        cf = cho_factor(Sigma, lower=True)
    except np.linalg.LinAlgError:
        raise NumericalError("covariance is not positive definite") from None
    Wm = np.zeros((n, m))
    Wm[np.arange(n), labels] = 1.0
    SiW = cho_solve(cf, Wm)
    A = Wm.T @ SiW
    b = SiW.T @ mu
    try:
        ca = cho_factor(A, lower=True)
    except np.linalg.LinAlgError:
        raise NumericalError("W^T Sigma^-1 W is singular") from None
    v_hat = cho_solve(ca, b)
    r = Wm @ v_hat - mu
    quadratic = float(r @ cho_solve(cf, r))
    correction = -float(np.log(np.diag(ca[0])).sum())
    return v_hat, quadratic, correction


def save_partition(part: Partition, path, bounds: dict | None = None) -> None:
    doc = part.to_dict()
    if bounds is not None:
        doc["bounds"] = bounds
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_partition(path) -> Partition:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return Partition.from_dict(doc)
