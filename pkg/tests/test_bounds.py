import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surroseg.aggregation import Aggregation, HyperrectScheme, greedy_aggregate, select_T_and_eta_hat
from surroseg.bounds import (
    BoundsReport,
    compute_bounds,
    expand_fitted,
    prop1_check,
    theorem2_check,
    total_sum_of_squares,
)
from surroseg.errors import InvalidParameter
from surroseg.graph import SpatialDataset, SpatialGraph, build_knn_graph, build_mst, union_graphs
from surroseg.partition import SolverConfig, solve_exact, solve_greedy

from oracles import block_labelings, brute_optimum, clusters_connected, random_connected_graph, to_nx, wcss


def path(n):
    return SpatialGraph(n, [(i, i + 1) for i in range(n - 1)])


def aggregated_solve(agg, m):
    return solve_exact(agg.quotient, agg.representative_eta, SolverConfig(m), weights=agg.group_sizes)


def test_total_sum_of_squares_is_centred():
    assert total_sum_of_squares([1.0, 3.0]) == 2.0
    assert total_sum_of_squares([5.0, 5.0, 5.0]) == 0.0


def test_identity_aggregation_has_zero_constants():
    eta = np.array([0.0, 3.0, 4.0, 10.0])
    agg = Aggregation.identity(path(4), eta)
    sol = aggregated_solve(agg, 2)
    rep = compute_bounds(eta, agg, sol)
    assert rep.c1 == 0.0 and rep.c2 == 0.0 and rep.gap_ratio == 0.0
    assert np.array_equal(expand_fitted(sol, agg, 4), solve_exact(path(4), eta, SolverConfig(2)).fitted())


def test_worked_example():
    eta = np.array([0.0, 2.0, 10.0, 12.0])
    agg = Aggregation.from_sublabels(path(4), eta, [0, 0, 1, 1])
    sol = aggregated_solve(agg, 2)
    assert expand_fitted(sol, agg, 4).tolist() == [1.0, 1.0, 11.0, 11.0]
    rep = compute_bounds(eta, agg, sol)
    assert rep.c2 == 4.0 and rep.c1 == 4.0
    assert rep.error == 2.0
    tss = float(np.sum((eta - eta.mean()) ** 2))
    assert rep.tss == tss
    assert rep.error_ratio == pytest.approx(2.0 / math.sqrt(tss), rel=1e-15)
    assert rep.gap_ratio == pytest.approx(4.0 / math.sqrt(tss), rel=1e-15)
    assert rep.which_eta == "tilde"


def test_without_aggregation_only_error_is_reported():
    eta = [0.0, 1.0, 5.0, 6.0]
    rep = compute_bounds(eta, None, solve_greedy(path(4), eta, 2))
    assert rep.c1 is None and rep.c2 is None and rep.gap_ratio is None
    assert rep.error_ratio == pytest.approx(1.0 / math.sqrt(26.0))
    assert rep.which_eta == "none"


def test_constant_predictions_are_degenerate():
    eta = [2.0] * 4
    agg = Aggregation.from_sublabels(path(4), eta, [0, 0, 1, 1])
    rep = compute_bounds(eta, agg, aggregated_solve(agg, 2))
    assert rep.degenerate and rep.error_ratio == 0.0 and rep.gap_ratio == 0.0


def test_partition_size_mismatch():
    eta = [0.0, 1.0, 2.0]
    with pytest.raises(InvalidParameter):
        compute_bounds(eta + [3.0], None, solve_exact(path(3), eta, SolverConfig(2)))


def test_report_round_trip():
    rep = BoundsReport(0.5, 0.1, 1.0, 2.0, 4.0, "hat", 1.0)
    assert BoundsReport.from_dict(rep.to_dict()) == rep


def random_instance(rng, n):
    g = random_connected_graph(rng, n)
    eta = rng.standard_normal(n) * 3
    agg = greedy_aggregate(g, eta, int(rng.integers(2, n + 1)))
    m = int(rng.integers(1, min(agg.l, 3) + 1))
    return g, eta, agg, m


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 20), st.integers(0, 10_000), st.booleans())
def test_c1_never_exceeds_c2(n, seed, use_hat):
    rng = np.random.default_rng(seed)
    g, eta, agg, m = random_instance(rng, n)
    rep = compute_bounds(eta, agg, aggregated_solve(agg, m), use_hat=use_hat)
    assert rep.c1 <= rep.c2 + 1e-12
    assert rep.c2 == pytest.approx(2 * np.linalg.norm((select_T_and_eta_hat(agg, eta)[1] if use_hat
                                                        else agg.aggregated_eta) - eta), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 20), st.integers(0, 10_000), st.floats(-1e3, 1e3))
def test_ratios_translation_invariant(n, seed, shift):
    rng = np.random.default_rng(seed)
    g, eta, agg, m = random_instance(rng, n)
    a = compute_bounds(eta, agg, aggregated_solve(agg, m))
    agg2 = Aggregation.from_sublabels(g, eta + shift, agg.sublabels)
    b = compute_bounds(eta + shift, agg2, aggregated_solve(agg2, m))
    assert b.error_ratio == pytest.approx(a.error_ratio, rel=1e-6, abs=1e-9)
    assert b.gap_ratio == pytest.approx(a.gap_ratio, rel=1e-6, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 20), st.integers(0, 10_000))
def test_hat_constant_no_larger(n, seed):
    rng = np.random.default_rng(seed)
    g, eta, agg, m = random_instance(rng, n)
    sol = aggregated_solve(agg, m)
    hat = compute_bounds(eta, agg, sol, use_hat=True)
    tilde = compute_bounds(eta, agg, sol)
    assert hat.c2 <= tilde.c2 + 1e-12
    assert hat.which_eta == "hat"


# additive guarantee

@settings(max_examples=40, deadline=None)
@given(st.integers(3, 10), st.integers(0, 10_000), st.booleans())
def test_additive_guarantee_chain_against_independent_oracle(n, seed, use_hat):
    rng = np.random.default_rng(seed)
    g, eta, agg, m = random_instance(rng, n)
    rep = theorem2_check(g, eta, agg, m, use_hat=use_hat)
    assert not rep.skipped and rep.holds
    assert rep.lhs <= rep.c1 + 1e-9 and rep.c1 <= rep.c2 + 1e-9
    # recompute every quantity without the package's solvers, against the
    # unrestricted connected optimum
    G = to_nx(g)
    scored = [(wcss(lab, agg.aggregated_eta, None), lab)
              for lab in block_labelings(agg.groups, m) if clusters_connected(G, lab, m)]
    lab_star = min(scored)[1]
    fit = np.empty(n)
    for j in range(m):
        sel = np.asarray(lab_star) == j
        fit[sel] = eta[sel].mean()
    ref = select_T_and_eta_hat(agg, eta)[1] if use_hat else agg.aggregated_eta
    best, _ = brute_optimum(g, eta, m)
    lhs = np.linalg.norm(fit - eta) - math.sqrt(best)
    c1 = np.linalg.norm(fit - eta) - np.linalg.norm(fit - ref) + np.linalg.norm(ref - eta)
    c2 = 2 * np.linalg.norm(ref - eta)
    assert c1 == pytest.approx(rep.c1, abs=1e-9) and c2 == pytest.approx(rep.c2, abs=1e-9)
    assert lhs <= c1 + 1e-9 <= c2 + 2e-9


def test_additive_guarantee_zero_error_aggregation():
    eta = np.array([0.0, 0.0, 5.0, 5.0, 9.0])
    agg = Aggregation.from_sublabels(path(5), eta, [0, 0, 1, 1, 2])
    rep = theorem2_check(path(5), eta, agg, 2)
    assert rep.c2 == 0.0 and rep.c1 == 0.0 and rep.lhs == pytest.approx(0.0, abs=1e-12) and rep.holds


def test_additive_guarantee_skips_large_instances():
    g = path(14)
    eta = np.arange(14.0)
    agg = greedy_aggregate(g, eta, 4)
    rep = theorem2_check(g, eta, agg, 2)
    assert rep.skipped and "budget" in rep.reason


# grid aggregation bound

def grid_data(rng, n=200):
    data = SpatialDataset(rng.random((n, 2)))
    g = union_graphs(build_mst(data, build_knn_graph(data, 8)), build_knn_graph(data, 4))
    return data, g


def test_grid_bound_linear_field():
    rng = np.random.default_rng(0)
    data, g = grid_data(rng)
    scheme = HyperrectScheme((0.25, 0.25), (0.0, 0.0))
    rep = prop1_check(data, g, lambda X: 3 * X[:, 0], scheme, (3.0, 0.0))
    assert rep.holds and rep.c2 < rep.bound
    assert rep.bound == pytest.approx(2 * math.sqrt(200) * 3 * 0.25)


def test_grid_bound_constant_field():
    rng = np.random.default_rng(1)
    data, g = grid_data(rng)
    rep = prop1_check(data, g, lambda X: np.full(len(X), 7.0), HyperrectScheme((0.3, 0.3), (0.0, 0.0)), (0.0, 0.0))
    assert rep.c2 == 0.0 and rep.holds


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.5))
def test_grid_bound_random_smooth_fields(seed, side):
    rng = np.random.default_rng(seed)
    data, g = grid_data(rng, 120)
    a, b = rng.uniform(0.5, 5, 2)
    # |d/dx sin(a x)| <= a, |d/dy cos(b y)| <= b
    rep = prop1_check(data, g, lambda X: np.sin(a * X[:, 0]) + np.cos(b * X[:, 1]),
                      HyperrectScheme((side, side), tuple(-rng.random(2))), (a, b))
    assert rep.holds and rep.c2 >= 0
