"""File-to-file pipeline stages and the end-to-end synthetic demo.

Each ``stage_*`` function reads its inputs from disk, writes one artifact and
returns a small summary, so the CLI subcommands are thin wrappers and any
stage can be rerun on unchanged upstream files.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import aggregation as agg_mod
from .bounds import compute_bounds
from .errors import BudgetExceeded, InvalidData, InvalidParameter, SurrosegError
from .gp import (
    KernelSpec,
    cholesky_with_jitter,
    compute_sigma_matrix,
    fit_exact_gp_grid,
    generate_query_points,
    load_model,
    predict_many,
    read_predictions,
    save_model,
    write_predictions,
)
from .graph import (
    SpatialDataset,
    build_knn_graph,
    build_mst,
    read_edge_list,
    union_graphs,
    write_edge_list,
)
from .io import read_points_csv, write_points_csv
from .miqp import (
    add_flow_constraints,
    build_miqp,
    check_external_solution,
    encode_solution,
    read_lp,
    write_lp,
    write_solution,
)
from .partition import (
    Partition,
    SolverConfig,
    load_partition,
    mahalanobis_score,
    save_partition,
    solve_exact,
    solve_greedy,
)
from .plot import plot_svg

log = logging.getLogger("surroseg")

__all__ = [
    "PipelineConfig",
    "StageError",
    "synthetic_field",
    "make_training_data",
    "default_kernel_grid",
    "stage_ingest",
    "stage_predict",
    "stage_graph",
    "stage_aggregate",
    "stage_segment",
    "stage_export",
    "stage_check",
    "stage_report",
    "stage_plot",
    "run_pipeline",
]

THREADS_ENV = "SURROSEG_THREADS"


class StageError(SurrosegError):
    """Wraps a failure with the name of the stage that raised it."""

    def __init__(self, stage: str, cause: SurrosegError):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = cause.exit_code


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except SurrosegError as exc:
        raise StageError(name, exc) from exc


def synthetic_field(points) -> np.ndarray:
    """Smooth 2-D test surface with a few bumps and a mild trend."""
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    x, y = p[:, 0], p[:, 1]
    return np.sin(6 * x) + np.cos(5 * y) + 0.5 * x * y


def make_training_data(n: int, seed: int, noise: float = 0.1) -> SpatialDataset:
    rng = np.random.default_rng(seed)
    pts = rng.random((int(n), 2))
    y = synthetic_field(pts) + noise * rng.standard_normal(int(n))
    return SpatialDataset(pts, y)


def default_kernel_grid(y, d: int) -> list[KernelSpec]:
    var = float(np.var(y)) or 1.0
    grid = []
    # theta is an inverse length scale; coordinates are expected on a unit-ish scale
    for theta in (1.0, 2.0, 4.0, 8.0, 16.0):
        for noise in (1e-3, 1e-2, 1e-1):
            grid.append(KernelSpec("rbf", (theta,) * d, var, noise * var))
    return grid


def _write_json(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InvalidParameter(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


# stages ---------------------------------------------------------------------

def stage_ingest(input_csv, out, resample: int | None = None, radius: float = 0.0, seed: int = 0) -> dict:
    """Validate a point table; optionally replace it by ``resample`` perturbed query points."""
    with _stage("ingest"):
        data = read_points_csv(input_csv)
        if resample:
            data = generate_query_points(data, np.ones(data.n), int(resample), float(radius), int(seed))
        write_points_csv(data, out)
    return {"n": data.n, "d": data.d, "responses": data.responses is not None}


def stage_predict(points, out, model=None, train=None, model_out=None) -> dict:
    """Predict at ``points`` with a saved model, or fit one on ``train`` first."""
    with _stage("predict"):
        data = read_points_csv(points)
        if model is not None:
            gp = load_model(model)
        elif train is not None:
            tr = read_points_csv(train)
            if tr.responses is None:
                raise InvalidData(f"{train}: training data needs a 'y' column")
            gp = fit_exact_gp_grid(tr, default_kernel_grid(tr.responses, tr.d))
            if model_out is not None:
                save_model(gp, model_out)
        else:
            raise InvalidParameter("predict needs --model or --train")
        pred = predict_many(gp, data.points)
        write_predictions(pred, out)
    return {"n": len(pred), "eta_min": pred.eta_min, "eta_max": pred.eta_max}


def stage_graph(points, out, knn: int, augment_knn: int = 0) -> dict:
    """MST of the ``knn`` graph, unioned with the ``augment_knn`` graph."""
    with _stage("graph"):
        data = read_points_csv(points)
        g = build_mst(data, build_knn_graph(data, int(knn)))
        if augment_knn:
            g = union_graphs(g, build_knn_graph(data, int(augment_knn)))
        write_edge_list(g, out)
    return {"n": g.n_vertices, "edges": g.n_edges}


def stage_aggregate(graph, predictions, l: int, out) -> dict:
    with _stage("aggregate"):
        g = read_edge_list(graph)
        pred = read_predictions(predictions)
        agg = agg_mod.greedy_aggregate(g, pred.eta, int(l))
        agg_mod.save_aggregation(agg, out)
    return {"l": agg.l, "c2": agg_mod.c2_of(agg, pred.eta)}


def stage_segment(graph, predictions, out, m: int, method: str = "exact", aggregation=None,
                  use_hat: bool = False, tolerance: float = 1e-9, node_budget: int = 5_000_000,
                  objective: str = "wcss", model=None, points=None) -> dict:
    """Solve, expand to the original points and save the partition with its bounds."""
    if method not in ("exact", "greedy"):
        raise InvalidParameter(f"unknown method {method!r}")
    if objective not in ("wcss", "mahalanobis"):
        raise InvalidParameter(f"unknown objective {objective!r}")
    if objective == "mahalanobis" and (model is None or points is None):
        raise InvalidParameter("the mahalanobis score needs --model and --points")
    with _stage("segment"):
        g = read_edge_list(graph)
        eta = read_predictions(predictions).eta
        if len(eta) != g.n_vertices:
            raise InvalidData(f"{len(eta)} predictions for a graph on {g.n_vertices} vertices")
        agg = agg_mod.load_aggregation(aggregation) if aggregation is not None else None
        if agg is not None and agg.n != g.n_vertices:
            raise InvalidData("aggregation does not match the graph")
        if agg is not None and m > agg.l:
            raise InvalidParameter(f"m={m} exceeds the number of groups l={agg.l}")
        cfg = SolverConfig(m=int(m), tolerance=float(tolerance), node_budget=int(node_budget),
                           thread_count=_thread_count())
        t0 = time.perf_counter()
        budget_hit = None
        if method == "greedy":
            # baseline: greedy merging on the full graph down to m groups
            part = solve_greedy(g, eta, int(m))
            report_agg = None
        else:
            try:
                if agg is not None:
                    sub = solve_exact(agg.quotient, agg.representative_eta, cfg, weights=agg.group_sizes)
                else:
                    sub = solve_exact(g, eta, cfg)
            except BudgetExceeded as exc:
                budget_hit, sub = exc, exc.incumbent
            if agg is not None:
                part = Partition.from_labels(agg.expand(sub.labels), eta, int(m), telemetry=sub.telemetry)
            else:
                part = sub
            report_agg = agg
        part.telemetry = dict(part.telemetry, method=method, budget_exhausted=budget_hit is not None)
        bounds = compute_bounds(eta, report_agg, part, use_hat).to_dict()
        extra = {}
        if objective == "mahalanobis":
            gp = load_model(model)
            data = read_points_csv(points)
            sigma = compute_sigma_matrix(gp, data.points)
            mu = predict_many(gp, data.points).mu
            # a smooth posterior is numerically low rank at many points
            _, jit = cholesky_with_jitter(sigma)
            sigma[np.diag_indices_from(sigma)] += jit
            v_hat, quad, corr = mahalanobis_score(part.labels, mu, sigma, int(m))
            extra = {"v_hat": v_hat.tolist(), "quadratic": quad, "correction": corr, "jitter": jit}
            bounds["mahalanobis"] = extra
        save_partition(part, out, bounds=bounds)
        seconds = time.perf_counter() - t0
        log.info("segment m=%d method=%s objective=%.6g in %.2fs", m, method, part.objective, seconds)
        if budget_hit is not None:
            raise budget_hit
    return {"m": int(m), "method": method, "objective": part.objective, "bounds": bounds, "seconds": seconds}


def stage_export(graph, predictions, m: int, out, aggregation=None, flow: bool = True,
                 partition=None, solution_out=None) -> dict:
    """Write the MIQP and, given a partition, the matching solution file."""
    with _stage("export-miqp"):
        model = _load_model_instance(graph, predictions, m, aggregation, flow)
        write_lp(model, out)
        if partition is not None:
            part = load_partition(partition)
            labels = part.labels
            if model.meta["aggregated"]:
                agg = agg_mod.load_aggregation(aggregation)
                labels = _collapse_labels(agg, labels)
            write_solution(encode_solution(model, labels), solution_out or Path(out).with_suffix(".sol"),
                           comment=f"encoded from {Path(partition).name}")
    return {"variables": len(model.variables), "constraints": len(model.constraints)}


def _load_model_instance(graph, predictions, m, aggregation, flow):
    g = read_edge_list(graph)
    eta = read_predictions(predictions).eta
    agg = agg_mod.load_aggregation(aggregation) if aggregation is not None else None
    model = build_miqp(g, eta, int(m), aggregated=agg)
    if flow:
        model = add_flow_constraints(model, model.graph)
    return model


def _collapse_labels(agg, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.empty(agg.l, dtype=np.int64)
    for i, grp in enumerate(agg.groups):
        vals = np.unique(labels[grp])
        if len(vals) != 1:
            raise InvalidData(f"partition splits aggregation group {i}")
        out[i] = vals[0]
    return out


def stage_check(lp, solution, graph, predictions, aggregation=None):
    """Rebuild the instance, confirm it matches ``lp`` and verify the solution."""
    with _stage("check-solution"):
        parsed = read_lp(lp)
        m = int(parsed.meta["m"])
        model = _load_model_instance(graph, predictions, m, aggregation, bool(parsed.meta.get("flow")))
        if not model.same_structure(parsed):
            raise InvalidData(f"{lp} does not encode the given graph and predictions")
        return check_external_solution(model, solution)


def stage_report(partitions) -> list[dict]:
    rows = []
    for p in partitions:
        doc = json.loads(Path(p).read_text(encoding="utf-8"))
        b = doc.get("bounds", {})
        rows.append({
            "file": Path(p).name,
            "m": doc["m"],
            "method": doc.get("telemetry", {}).get("method", "?"),
            "objective": doc["objective"],
            "error_pct": 100.0 * b["error_ratio"] if "error_ratio" in b else None,
            "gap_pct": 100.0 * b["gap_ratio"] if b.get("gap_ratio") is not None else None,
        })
    return rows


def format_report(rows) -> str:
    out = [f"{'file':<32} {'m':>3} {'method':>7} {'error %':>9} {'gap %':>9}"]
    for r in rows:
        err = "-" if r["error_pct"] is None else f"{r['error_pct']:.2f}"
        gap = "-" if r["gap_pct"] is None else f"{r['gap_pct']:.2f}"
        out.append(f"{r['file']:<32} {r['m']:>3} {r['method']:>7} {err:>9} {gap:>9}")
    return "\n".join(out)


def stage_plot(points, out, partition=None, predictions=None) -> dict:
    with _stage("plot"):
        data = read_points_csv(points)
        if partition is not None:
            part = load_partition(partition)
            plot_svg(data, out, labels=part.labels, title=f"segmentation m={part.m}")
        elif predictions is not None:
            plot_svg(data, out, eta=read_predictions(predictions).eta, title="predictions")
        else:
            raise InvalidParameter("plot needs --partition or --predictions")
    return {"path": str(out)}


# end-to-end -----------------------------------------------------------------

@dataclass
class PipelineConfig:
    """Settings for :func:`run_pipeline`; the defaults are the bundled synthetic demo."""

    seed: int = 7
    n_train: int = 300
    n_query: int = 2000
    radius: float = 0.02
    knn: int = 30
    augment_knn: int = 10
    l: int = 30
    m: list = field(default_factory=lambda: [2, 3, 4])
    methods: list = field(default_factory=lambda: ["exact", "greedy"])
    use_hat: bool = False
    tolerance: float = 1e-9
    node_budget: int = 5_000_000
    export_m: int | None = 2
    train_csv: str | None = None

    def validate(self) -> None:
        if not self.m:
            raise InvalidParameter("at least one m is required")
        if any(int(k) < 1 for k in self.m):
            raise InvalidParameter("m must be positive")
        if max(self.m) > self.l:
            raise InvalidParameter(f"m={max(self.m)} exceeds l={self.l}")
        if set(self.methods) - {"exact", "greedy"}:
            raise InvalidParameter(f"unknown methods {sorted(set(self.methods) - {'exact', 'greedy'})}")
        if self.train_csv is not None and not Path(self.train_csv).exists():
            raise InvalidParameter(f"training file {self.train_csv} does not exist")

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidParameter(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise InvalidParameter(f"{path}: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)


def run_pipeline(cfg: PipelineConfig, out_dir) -> dict:
    """Run every stage into ``out_dir``; returns a summary also saved as ``summary.json``."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = {k: out / name for k, name in [
        ("train", "train.csv"), ("query", "query.csv"), ("model", "model.json"),
        ("pred", "predictions.csv"), ("graph", "graph.txt"), ("agg", "aggregation.json"),
    ]}
    if cfg.train_csv is None:
        with _stage("ingest"):
            write_points_csv(make_training_data(cfg.n_train, cfg.seed), p["train"])
    else:
        stage_ingest(cfg.train_csv, p["train"])
    stage_ingest(p["train"], p["query"], resample=cfg.n_query, radius=cfg.radius, seed=cfg.seed + 1)
    stage_predict(p["query"], p["pred"], train=p["train"], model_out=p["model"])
    stage_graph(p["query"], p["graph"], cfg.knn, cfg.augment_knn)
    agg_info = stage_aggregate(p["graph"], p["pred"], cfg.l, p["agg"])
    stage_plot(p["query"], out / "predictions.svg", predictions=p["pred"])

    results, partitions = [], []
    for m in cfg.m:
        for method in cfg.methods:
            path = out / f"partition_{method}_m{m}.json"
            info = stage_segment(p["graph"], p["pred"], path, int(m), method,
                                 aggregation=p["agg"] if method == "exact" else None,
                                 use_hat=cfg.use_hat, tolerance=cfg.tolerance, node_budget=cfg.node_budget)
            partitions.append(path)
            results.append({k: info[k] for k in ("m", "method", "objective")} | {
                "error_ratio": info["bounds"]["error_ratio"], "gap_ratio": info["bounds"]["gap_ratio"],
                "seconds": info["seconds"]})
            if method == "exact":
                stage_plot(p["query"], out / f"partition_{method}_m{m}.svg", partition=path)

    check = None
    if cfg.export_m is not None and "exact" in cfg.methods and cfg.export_m in cfg.m:
        lp = out / f"miqp_m{cfg.export_m}.lp"
        sol = out / f"miqp_m{cfg.export_m}.sol"
        stage_export(p["graph"], p["pred"], cfg.export_m, lp, aggregation=p["agg"],
                     partition=out / f"partition_exact_m{cfg.export_m}.json", solution_out=sol)
        rep = stage_check(lp, sol, p["graph"], p["pred"], aggregation=p["agg"])
        check = {"passed": rep.passed, "issues": rep.issues}

    rows = stage_report(partitions)
    (out / "report.txt").write_text(format_report(rows) + "\n", encoding="utf-8")
    summary = {
        "config": cfg.to_dict(),
        "c2": agg_info["c2"],
        "results": [{k: v for k, v in r.items() if k != "seconds"} for r in results],
        "miqp_check": check,
    }
    _write_json(summary, out / "summary.json")
    summary["timings"] = {f"{r['method']}_m{r['m']}": r["seconds"] for r in results}
    return summary
