"""Mixed-integer quadratic model of the connected partitioning problem.

The model has assignment binaries ``w{i}_{j}``, cluster values ``v{j}`` and
residuals ``e{i}``.  The objective is ``sum_i c_i e_i^2``.  Two big-M rows per
``(i, j)`` force ``e_i = v_j - eta_i`` whenever ``w_ij = 1``.  An optional
single-commodity flow system (``r``, ``s``, ``z``, ``f`` variables) makes every
cluster connected.

Models serialise to the LP text format read by most MIP solvers, and
solutions come back as ``name value`` lines for :func:`check_external_solution`.
"""

from __future__ import annotations

import json
import math
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .aggregation import Aggregation
from .errors import FormatError, InvalidParameter
from .graph import SpatialGraph, connected_components, is_connected
from .partition import _as_values, objective_wcss

__all__ = [
    "Variable",
    "Constraint",
    "MiqpModel",
    "SolutionReport",
    "build_miqp",
    "add_flow_constraints",
    "write_lp",
    "read_lp",
    "format_lp",
    "encode_solution",
    "decode_labels",
    "write_solution",
    "read_solution",
    "check_external_solution",
]

TERMS_PER_LINE = 6
INTEGRALITY_TOL = 1e-6
FEASIBILITY_TOL = 1e-6


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str  # "binary" or "continuous"
    lb: float
    ub: float


@dataclass(frozen=True)
class Constraint:
    name: str
    terms: tuple  # ((variable name, coefficient), ...)
    sense: str  # "<=", ">=" or "="
    rhs: float

    def activity(self, x: Mapping[str, float]) -> float:
        return math.fsum(c * x[v] for v, c in self.terms)


@dataclass(frozen=True, eq=False)
class MiqpModel:
    """Immutable model; ``graph``, ``eta`` and ``weights`` describe the instance it encodes."""

    variables: tuple
    constraints: tuple
    quadratic: tuple  # ((var, var, coefficient), ...)
    linear: tuple = ()
    meta: dict = field(default_factory=dict)
    graph: SpatialGraph | None = None
    eta: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        names = [v.name for v in self.variables]
        index = {nm: k for k, nm in enumerate(names)}
        if len(index) != len(names):
            raise InvalidParameter("duplicate variable names")
        for c in self.constraints:
            for v, _ in c.terms:
                if v not in index:
                    raise InvalidParameter(f"constraint {c.name} uses undeclared variable {v}")
        for a, b, _ in self.quadratic:
            if a not in index or b not in index:
                raise InvalidParameter(f"objective uses undeclared variable {a} or {b}")
        object.__setattr__(self, "_index", index)

    @property
    def n(self) -> int:
        return int(self.meta["n"])

    @property
    def m(self) -> int:
        return int(self.meta["m"])

    @property
    def big_m(self) -> float:
        return float(self.meta["big_m"])

    @property
    def has_flow(self) -> bool:
        return bool(self.meta.get("flow", False))

    def variable(self, name: str) -> Variable:
        return self.variables[self._index[name]]

    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def objective_value(self, x: Mapping[str, float]) -> float:
        q = math.fsum(c * x[a] * x[b] for a, b, c in self.quadratic)
        return q + math.fsum(c * x[v] for v, c in self.linear)

    def same_structure(self, other: "MiqpModel") -> bool:
        return (
            self.variables == other.variables
            and self.constraints == other.constraints
            and self.quadratic == other.quadratic
            and self.linear == other.linear
            and self.meta == other.meta
        )

    def __eq__(self, other):
        if not isinstance(other, MiqpModel):
            return NotImplemented
        return self.same_structure(other)

    def __repr__(self):
        return (
            f"MiqpModel(n={self.meta.get('n')}, m={self.meta.get('m')}, "
            f"variables={len(self.variables)}, constraints={len(self.constraints)})"
        )


def build_miqp(g: SpatialGraph, eta, m: int, aggregated: Aggregation | None = None) -> MiqpModel:
    """Assignment + big-M model; aggregated problems use the quotient graph and group sizes."""
    eta = _as_values(eta)
    if aggregated is not None:
        if aggregated.n != g.n_vertices or len(eta) != g.n_vertices:
            raise InvalidParameter("aggregation, graph and predictions disagree on n")
        graph = aggregated.quotient
        values = np.asarray(aggregated.representative_eta, dtype=float)
        weights = np.asarray(aggregated.group_sizes, dtype=float)
    else:
        if len(eta) != g.n_vertices:
            raise InvalidParameter(f"{len(eta)} predictions for {g.n_vertices} vertices")
        graph, values, weights = g, eta, np.ones(len(eta))
    n = graph.n_vertices
    if not 1 <= m <= n:
        raise InvalidParameter(f"m must lie in 1..{n}")
    if not is_connected(graph):
        raise InvalidParameter("graph must be connected")

    lo, hi = float(values.min()), float(values.max())
    big_m = 2.0 * (hi - lo)
    variables = [Variable(f"w{i}_{j}", "binary", 0.0, 1.0) for i in range(n) for j in range(m)]
    variables += [Variable(f"v{j}", "continuous", lo, hi) for j in range(m)]
    variables += [Variable(f"e{i}", "continuous", -math.inf, math.inf) for i in range(n)]

    cons = []
    for i in range(n):
        cons.append(Constraint(f"assign_{i}", tuple((f"w{i}_{j}", 1.0) for j in range(m)), "=", 1.0))
    for i in range(n):
        h = float(values[i])
        for j in range(m):
            # e_i + eta_i - v_j <= M (1 - w_ij)
            cons.append(Constraint(
                f"bigm_up_{i}_{j}", ((f"e{i}", 1.0), (f"v{j}", -1.0), (f"w{i}_{j}", big_m)), "<=", big_m - h))
            # -(e_i + eta_i - v_j) <= M (1 - w_ij)
            cons.append(Constraint(
                f"bigm_lo_{i}_{j}", ((f"e{i}", -1.0), (f"v{j}", 1.0), (f"w{i}_{j}", big_m)), "<=", big_m + h))
    quadratic = tuple((f"e{i}", f"e{i}", float(weights[i])) for i in range(n))
    meta = {
        "n": n,
        "m": int(m),
        "big_m": big_m,
        "aggregated": aggregated is not None,
        "n_points": int(g.n_vertices),
        "flow": False,
    }
    return MiqpModel(tuple(variables), tuple(cons), quadratic, (), meta, graph, values, weights)


def add_flow_constraints(model: MiqpModel, g: SpatialGraph) -> MiqpModel:
    """Return a copy of ``model`` with flow-based contiguity for every cluster."""
    if model.has_flow:
        raise InvalidParameter("model already carries flow constraints")
    n, m = model.n, model.m
    if g.n_vertices != n:
        raise InvalidParameter(f"graph has {g.n_vertices} vertices, model has {n}")
    cap = float(n)
    arcs = [(int(a), int(b)) for a, b in g.edges] + [(int(b), int(a)) for a, b in g.edges]
    arcs.sort()
    into = [[] for _ in range(n)]
    out = [[] for _ in range(n)]
    for a, b in arcs:
        out[a].append(b)
        into[b].append(a)

    variables = list(model.variables)
    cons = list(model.constraints)
    for k in range(m):
        variables += [Variable(f"r{i}_{k}", "binary", 0.0, 1.0) for i in range(n)]
        variables.append(Variable(f"s{k}", "continuous", 0.0, cap))
        variables += [Variable(f"z{i}_{k}", "continuous", 0.0, cap) for i in range(n)]
        variables += [Variable(f"f{a}_{b}_{k}", "continuous", 0.0, cap) for a, b in arcs]

        cons.append(Constraint(f"root_{k}", tuple((f"r{i}_{k}", 1.0) for i in range(n)), "=", 1.0))
        for i in range(n):
            cons.append(Constraint(f"rootsel_{i}_{k}", ((f"r{i}_{k}", 1.0), (f"w{i}_{k}", -1.0)), "<=", 0.0))
        cons.append(Constraint(
            f"size_{k}", ((f"s{k}", 1.0),) + tuple((f"w{i}_{k}", -1.0) for i in range(n)), "=", 0.0))
        for i in range(n):
            cons.append(Constraint(f"zroot_{i}_{k}", ((f"z{i}_{k}", 1.0), (f"r{i}_{k}", -cap)), "<=", 0.0))
            cons.append(Constraint(f"zsize_{i}_{k}", ((f"z{i}_{k}", 1.0), (f"s{k}", -1.0)), "<=", 0.0))
            # z >= s - n (1 - r)
            cons.append(Constraint(
                f"zlink_{i}_{k}", ((f"z{i}_{k}", 1.0), (f"s{k}", -1.0), (f"r{i}_{k}", -cap)), ">=", -cap))
        for i in range(n):
            # inflow - outflow = w - z
            terms = tuple((f"f{a}_{i}_{k}", 1.0) for a in into[i])
            terms += tuple((f"f{i}_{b}_{k}", -1.0) for b in out[i])
            terms += ((f"w{i}_{k}", -1.0), (f"z{i}_{k}", 1.0))
            cons.append(Constraint(f"balance_{i}_{k}", terms, "=", 0.0))
        for a, b in arcs:
            cons.append(Constraint(f"captail_{a}_{b}_{k}", ((f"f{a}_{b}_{k}", 1.0), (f"w{a}_{k}", -cap)), "<=", 0.0))
            cons.append(Constraint(f"caphead_{a}_{b}_{k}", ((f"f{a}_{b}_{k}", 1.0), (f"w{b}_{k}", -cap)), "<=", 0.0))
    meta = dict(model.meta, flow=True)
    return MiqpModel(tuple(variables), tuple(cons), model.quadratic, model.linear, meta,
                     model.graph if model.graph is not None else g, model.eta, model.weights)


# LP text format -------------------------------------------------------------

def _num(x: float) -> str:
    if x == math.inf:
        return "+inf"
    if x == -math.inf:
        return "-inf"
    s = format(float(x), ".17g")
    return "0" if s == "-0" else s


def _expr_lines(first: str, items: list[str]) -> list[str]:
    """Join signed terms, wrapping long expressions onto indented continuation lines."""
    lines, cur = [], first
    for k, item in enumerate(items):
        if k and k % TERMS_PER_LINE == 0:
            lines.append(cur)
            cur = "   "
        cur += item
    lines.append(cur)
    return lines


def _signed(c: float, body: str, first: bool) -> str:
    if c < 0 or (c == 0 and math.copysign(1.0, c) < 0):
        return f" - {_num(-c)} {body}"
    return f" {_num(c)} {body}" if first else f" + {_num(c)} {body}"


def format_lp(model: MiqpModel) -> str:
    if not model.constraints:
        raise InvalidParameter("refusing to write a model without constraints")
    out = ["\\ connected partitioning MIQP", "\\ meta " + json.dumps(model.meta, sort_keys=True)]
    out.append("Minimize")
    items = [_signed(c, v, k == 0) for k, (v, c) in enumerate(model.linear)]
    quad = []
    for k, (a, b, c) in enumerate(model.quadratic):
        body = f"{a} ^2" if a == b else f"{a} * {b}"
        quad.append(_signed(2.0 * c, body, k == 0))
    if quad:
        quad[0] = (" + [" if items else " [") + quad[0]
        quad[-1] += " ] / 2"
    out += _expr_lines(" obj:", items + quad)
    out.append("Subject To")
    for c in model.constraints:
        items = [_signed(coef, v, k == 0) for k, (v, coef) in enumerate(c.terms)]
        items[-1] += f" {c.sense} {_num(c.rhs)}"
        out += _expr_lines(f" {c.name}:", items)
    out.append("Bounds")
    for v in model.variables:
        if v.lb == -math.inf and v.ub == math.inf:
            out.append(f" {v.name} free")
        else:
            out.append(f" {_num(v.lb)} <= {v.name} <= {_num(v.ub)}")
    binaries = [v.name for v in model.variables if v.kind == "binary"]
    if binaries:
        out.append("Binaries")
        for k in range(0, len(binaries), 10):
            out.append(" " + " ".join(binaries[k:k + 10]))
    out.append("End")
    return "\n".join(out) + "\n"


def write_lp(model: MiqpModel, path) -> None:
    Path(path).write_text(format_lp(model), encoding="utf-8")


_SECTIONS = {"minimize": "obj", "subject to": "cons", "bounds": "bounds", "binaries": "bin", "end": "end"}
_LABEL = re.compile(r"^\s*([A-Za-z_][\w.]*):(.*)$")


def _parse_float(tok: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise FormatError(f"expected a number, got {tok!r}") from None


def _parse_linear(tokens: list[str]) -> list[tuple[str, float]]:
    terms, sign, k = [], 1.0, 0
    while k < len(tokens):
        t = tokens[k]
        if t in "+-":
            sign = -1.0 if t == "-" else 1.0
            k += 1
            continue
        if k + 1 >= len(tokens):
            raise FormatError(f"dangling token {t!r}")
        terms.append((tokens[k + 1], sign * _parse_float(t)))
        sign, k = 1.0, k + 2
    return terms


def read_lp(path) -> MiqpModel:
    """Parse a file produced by :func:`write_lp` (coefficients are always explicit)."""
    text = Path(path).read_text(encoding="utf-8")
    meta: dict = {}
    section = None
    stmts: dict[str, list[list[str]]] = {"obj": [], "cons": [], "bounds": [], "bin": []}
    for raw in text.splitlines():
        if raw.startswith("\\"):
            if raw.startswith("\\ meta "):
                meta = json.loads(raw[len("\\ meta "):])
            continue
        low = raw.strip().lower()
        if low in _SECTIONS:
            section = _SECTIONS[low]
            continue
        if not raw.strip():
            continue
        if section is None or section == "end":
            raise FormatError(f"text outside a section: {raw!r}")
        if section in ("obj", "cons"):
            if _LABEL.match(raw):
                stmts[section].append([raw])
            elif stmts[section]:
                stmts[section][-1].append(raw)
            else:
                raise FormatError(f"unlabelled statement: {raw!r}")
        else:
            stmts[section].append([raw])
    if not meta:
        raise FormatError("missing metadata comment")

    linear, quadratic = [], []
    if stmts["obj"]:
        body = _LABEL.match(" ".join(stmts["obj"][0])).group(2)
        if "[" in body:
            head, rest = body.split("[", 1)
            inner, tail = rest.split("]", 1)
            if tail.strip() != "/ 2":
                raise FormatError("quadratic bracket must be divided by 2")
            head = head.strip()
            if head.endswith("+"):
                head = head[:-1]
            linear = _parse_linear(head.split())
            toks = inner.replace("^2", " ^2 ").split()
            sign, k = 1.0, 0
            while k < len(toks):
                t = toks[k]
                if t in "+-":
                    sign = -1.0 if t == "-" else 1.0
                    k += 1
                    continue
                c = sign * _parse_float(t) / 2.0
                a = toks[k + 1]
                if k + 2 < len(toks) and toks[k + 2] == "^2":
                    quadratic.append((a, a, c))
                    k += 3
                elif k + 3 < len(toks) and toks[k + 2] == "*":
                    quadratic.append((a, toks[k + 3], c))
                    k += 4
                else:
                    raise FormatError(f"bad quadratic term near {t!r}")
                sign = 1.0
        else:
            linear = _parse_linear(body.split())

    cons = []
    for lines in stmts["cons"]:
        mt = _LABEL.match(" ".join(lines))
        toks = mt.group(2).split()
        pos = [k for k, t in enumerate(toks) if t in ("<=", ">=", "=")]
        if len(pos) != 1 or pos[0] != len(toks) - 2:
            raise FormatError(f"constraint {mt.group(1)} has no single sense")
        p = pos[0]
        cons.append(Constraint(mt.group(1), tuple(_parse_linear(toks[:p])), toks[p], _parse_float(toks[p + 1])))

    binaries = set()
    for (line,) in stmts["bin"]:
        binaries.update(line.split())
    variables = []
    for (line,) in stmts["bounds"]:
        toks = line.split()
        if len(toks) == 2 and toks[1] == "free":
            name, lb, ub = toks[0], -math.inf, math.inf
        elif len(toks) == 5 and toks[1] == toks[3] == "<=":
            name, lb, ub = toks[2], _parse_float(toks[0]), _parse_float(toks[4])
        else:
            raise FormatError(f"bad bounds line: {line!r}")
        variables.append(Variable(name, "binary" if name in binaries else "continuous", lb, ub))
    try:
        return MiqpModel(tuple(variables), tuple(cons), tuple(quadratic), tuple(linear), meta)
    except InvalidParameter as exc:
        raise FormatError(str(exc)) from None


# Solutions ------------------------------------------------------------------

def _bfs_tree_flows(adj, members: list[int], root: int) -> dict[tuple[int, int], float]:
    """Flow on a BFS tree of the cluster: each arc carries its subtree size."""
    inside = set(members)
    parent = {root: None}
    order = []
    dq = deque([root])
    while dq:
        u = dq.popleft()
        order.append(u)
        for w in adj[u]:
            if w in inside and w not in parent:
                parent[w] = u
                dq.append(w)
    if len(order) != len(members):
        raise InvalidParameter("cluster is not connected; no flow exists")
    sub = {u: 1.0 for u in order}
    flows = {}
    for u in reversed(order[1:]):
        flows[(parent[u], u)] = sub[u]
        sub[parent[u]] += sub[u]
    return flows


def encode_solution(model: MiqpModel, labels) -> dict[str, float]:
    """Variable values for a labelling of the model's vertices (cluster means, BFS-tree flows)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, m = model.n, model.m
    if labels.shape[0] != n:
        raise InvalidParameter(f"{labels.shape[0]} labels for a model on {n} vertices")
    eta, w = model.eta, model.weights
    if eta is None:
        raise InvalidParameter("model does not carry its instance data")
    from .partition import cluster_means

    v = cluster_means(labels, eta, m, w)
    x = {name: 0.0 for name in model.names()}
    for i in range(n):
        x[f"w{i}_{labels[i]}"] = 1.0
        x[f"e{i}"] = float(v[labels[i]] - eta[i])
    for j in range(m):
        x[f"v{j}"] = float(v[j])
    if model.has_flow:
        adj = model.graph.adjacency()
        for k in range(m):
            members = np.flatnonzero(labels == k).tolist()
            root = members[0]
            x[f"r{root}_{k}"] = 1.0
            x[f"s{k}"] = float(len(members))
            x[f"z{root}_{k}"] = float(len(members))
            for (a, b), f in _bfs_tree_flows(adj, members, root).items():
                x[f"f{a}_{b}_{k}"] = f
    return x


def write_solution(values: Mapping[str, float], path, comment: str | None = None) -> None:
    lines = [f"# {comment}"] if comment else []
    lines += [f"{name} {_num(val)}" for name, val in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_solution(path) -> dict[str, float]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        if len(toks) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'name value'")
        try:
            out[toks[0]] = float(toks[1])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad value {toks[1]!r}") from None
    return out


def decode_labels(model: MiqpModel, x: Mapping[str, float]) -> np.ndarray | None:
    """Labels from rounded ``w``; ``None`` if some vertex is not assigned exactly once."""
    labels = np.empty(model.n, dtype=np.int64)
    for i in range(model.n):
        ones = [j for j in range(model.m) if round(x[f"w{i}_{j}"]) == 1]
        if len(ones) != 1:
            return None
        labels[i] = ones[0]
    return labels


@dataclass
class SolutionReport:
    passed: bool
    objective: float
    issues: list = field(default_factory=list)
    labels: np.ndarray | None = None
    decoded_objective: float | None = None

    def summary(self) -> str:
        head = "solution accepted" if self.passed else f"solution rejected ({len(self.issues)} issues)"
        return "\n".join([head, f"objective {_num(self.objective)}"] + [f"  - {s}" for s in self.issues])


def check_external_solution(model: MiqpModel, solution, tol: float = FEASIBILITY_TOL) -> SolutionReport:
    """Verify a solver's assignment against the model and the instance it encodes."""
    x = dict(solution) if isinstance(solution, Mapping) else read_solution(solution)
    missing = [nm for nm in model.names() if nm not in x]
    if missing:
        raise FormatError(f"solution lacks {len(missing)} variables, first {missing[0]}")
    issues = []
    extra = sorted(set(x) - set(model.names()))
    if extra:
        issues.append(f"unknown variables: {', '.join(extra[:5])}")
    for v in model.variables:
        val = x[v.name]
        if not math.isfinite(val):
            issues.append(f"{v.name} is not finite")
            continue
        if v.kind == "binary" and abs(val - round(val)) > INTEGRALITY_TOL:
            issues.append(f"{v.name} = {_num(val)} is not integral")
        if val < v.lb - tol * max(1.0, abs(v.lb)) or val > v.ub + tol * max(1.0, abs(v.ub)):
            issues.append(f"{v.name} = {_num(val)} outside [{_num(v.lb)}, {_num(v.ub)}]")
    if issues and any("not finite" in s for s in issues):
        return SolutionReport(False, math.nan, issues)
    for c in model.constraints:
        act = c.activity(x)
        scale = max(1.0, abs(c.rhs), max(abs(coef * x[v]) for v, coef in c.terms))
        slack = tol * scale
        if (c.sense == "<=" and act > c.rhs + slack) or (c.sense == ">=" and act < c.rhs - slack) or (
                c.sense == "=" and abs(act - c.rhs) > slack):
            issues.append(f"{c.name} violated: {_num(act)} {c.sense} {_num(c.rhs)}")
    objective = model.objective_value(x)
    report = SolutionReport(False, objective, issues)

    if model.eta is not None and model.graph is not None:
        labels = decode_labels(model, x)
        if labels is None:
            issues.append("w does not assign every vertex to exactly one cluster")
        else:
            report.labels = labels
            counts = np.bincount(labels, minlength=model.m)
            empty = np.flatnonzero(counts == 0).tolist()
            if empty:
                issues.append(f"empty clusters: {empty}")
            else:
                for j in range(model.m):
                    members = np.flatnonzero(labels == j).tolist()
                    comps = connected_components(model.graph, members)
                    if len(comps) > 1:
                        issues.append(f"cluster {j} is disconnected ({len(comps)} pieces)")
                best = objective_wcss(labels, model.eta, model.m, model.weights)
                report.decoded_objective = best
                if abs(objective - best) > tol * max(1.0, abs(best)):
                    issues.append(
                        f"objective {_num(objective)} differs from the value {_num(best)} "
                        f"at the cluster means of the decoded labels")
    report.passed = not issues
    return report
