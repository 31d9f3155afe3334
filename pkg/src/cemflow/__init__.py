"""Multiscale finite element solver for nonlinear compressible flow in
highly heterogeneous porous media.

The package builds a spectral auxiliary space per coarse block, energy
minimizing basis functions on oversampling windows, and a coarse nonlinear
transient solver, together with the fine-scale reference solver, error
norms and a posteriori indicators used to verify convergence.
"""

from .errors import (CemflowError, ConfigurationError, RasterIOError,
                     SolverError, ValidationError)
from .fields import (FluidProps, FractureGeometry, PermeabilityField,
                     density, density_derivative, density_second_derivative,
                     gen_inclusions, load_raster_field, rasterize_fractures)
from .fine_solver import NewtonConfig, TimeGrid, TransientSolution, solve_transient
from .grid import (CoarsePartition, OversampleRegion, PartitionOfUnity,
                   StructuredGrid, build_coarse_partition, build_fine_grid,
                   build_partition_of_unity, neighborhood, oversample_region)
from .spectral import AuxiliarySpace, build_auxiliary_space, pi_project
from .cem import (CoarseState, MultiscaleBasis, build_cem_basis,
                  elliptic_projection, solve_transient_coarse)
from .estimator import (IndicatorReport, compute_indicators, enrich,
                        local_indicator, residual_functional)
from .harness import (ErrorReport, ExperimentConfig, error_norms,
                      export_field, load_config, run_experiment)

__version__ = "0.1.0"
