"""Interpretable spatial segmentation of black-box predictions.

Points are joined into a spatial graph, predictions come from a (sparse)
Gaussian process, and the graph is split into ``m`` connected segments that
minimise the within-segment sum of squared deviations from each segment's
mean prediction.  A prior aggregation into ``l`` connected groups shrinks the
problem with a computable additive error bound.
"""

from .errors import (
    BudgetExceeded,
    FormatError,
    GraphDisconnected,
    InvalidData,
    InvalidParameter,
    InvalidPartition,
    NumericalError,
    ResourceError,
    SurrosegError,
    UnsupportedDimension,
)
from .graph import SpatialDataset, SpatialGraph, build_knn_graph, build_mst, union_graphs, quotient_graph
from .gp import GpModel, KernelSpec, predict, predict_many, compute_sigma_matrix, sensitivity_bound
from .aggregation import Aggregation, greedy_aggregate, hyperrect_aggregate, optimal_side_lengths
from .partition import Partition, SolverConfig, solve_exact, solve_greedy, brute_force_oracle, objective_wcss
from .miqp import build_miqp, add_flow_constraints, write_lp, read_lp, check_external_solution
from .bounds import BoundsReport, compute_bounds

__version__ = "0.1.0"
