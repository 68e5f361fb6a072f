"""Low-rank plus sparse panel VAR estimation by multi-block ADMM."""

from .errors import (
    BundleError,
    DegenerateInput,
    DegenerateRow,
    DimensionMismatch,
    EmptyInput,
    LspvarError,
    NoConvergence,
    NonDescent,
    NonFinite,
    NotConverged,
    RankDeficient,
    SolveFailure,
    SvdFailure,
    TooShort,
    UnsortedInput,
    UnstableDraw,
    ZeroRow,
)
from .panel import PanelData, RawPanel, build_panel, min_gram_eigen, read_panel
from .projections import ConstraintSpec, IntersectionState, project_B, project_intersection, project_L, simplex_rank_project
from .solver import LsPvarState, SolverConfig, SolverTrace, evaluate_F, evaluate_G, fit, init_random, init_spectral, ols_refine
from .synthetic import DgpSpec, GroundTruth, generate, generate_truth, preset, simulate_panel
from .tuning import BicRecord, bic, default_eta_grid, grid_search_eta
from .diagnostics import IncoherenceReport, RecoveryMetrics, compute_metrics, incoherence, pca_weights, stability_check

__version__ = "0.1.0"
