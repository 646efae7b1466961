"""confdiff: restricted diffusion in complex geometries, two ways.

A stochastic engine (geometry-adapted fast random walks on prefractal
boundaries and grid labyrinths) and a spectral engine (Laplace-eigenbasis
matrix formalism on intervals, disks, spheres and layers), with analysis
tools that cross-validate them.
"""

from .errors import (
    CapacityError,
    ConfdiffError,
    ConvergenceError,
    DomainError,
    ValidationError,
)
from .geometry import (
    BoundaryCellId,
    FractalBoundary,
    HierarchicalCell,
    build_boundary,
    distance_to_boundary,
    export_csv,
    fractal_dimension,
    in_domain,
    locate_boundary_cell,
    triangular_angle_for_dimension,
)
from .walks import (
    SourceSpec,
    WalkConfig,
    WalkOutcome,
    jump,
    run_ensemble,
    run_hit_histogram,
    run_passage_ensemble,
    run_spread_distances,
    run_trajectory,
    sample_exit_time,
)

__version__ = "0.1.0"
