"""aclab: a one-dimensional atomistic / continuum coupling laboratory.

Reference atomistic chain, classical and higher-order Cauchy-Born continuum
models, four blended coupling schemes, and a harness for convergence,
coarsening and ghost-force experiments.  All types are immutable after
construction and all operations are pure, so concurrent use on distinct
problems is safe.
"""

from .atomistic import (
    AtomisticOperator,
    energy_atomistic,
    gradient_atomistic,
    hessian_atomistic,
    nn_laplacian,
    solve_atomistic,
    stability_margin,
)
from .continuum import (
    CBOperator,
    HOCDensity,
    HOCOperator,
    density_cb,
    density_hoc,
    energy_hoc,
    hessian_hoc,
    solve_cb,
    solve_hoc,
    stress_hoc,
    variation_hoc,
)
from .coupling import (
    BlendFunction,
    BQCEOperator,
    BQCFOperator,
    BQHOCEOperator,
    BQHOCFOperator,
    DomainDecomposition,
    build_blend,
    coupled_space,
    energy_bqce,
    energy_bqhoce,
    ghost_force_diagnostic,
    residual_bqcf,
    residual_bqhocf,
    solve_coupled,
)
from .errors import (
    AclabError,
    ConfigurationError,
    NonconvergenceError,
    NumericalError,
    PotentialDomainError,
    RangeViolationError,
)
from .fem import (
    AFFINE,
    QUINTIC,
    Mesh1D,
    MixedFEFunction,
    MixedFESpace,
    QuadratureRule,
    build_canonical_mesh,
    build_coarse_mesh,
    hermite_quintic_eval,
    integrate,
    interpolate_P1,
    interpolate_coarse_Pi_h,
    interpolate_mixed_Pi,
)
from .harness import (
    ConvergenceRecord,
    ExperimentConfig,
    dump_strain_profile,
    error_indicator_hoc,
    fit_slope,
    interface_jump_check,
    read_records,
    run_coarsening_study,
    run_convergence_study,
    strain_error,
    write_records,
)
from .lattice import (
    ExternalLoad,
    LatticeFunction,
    LatticeSystem,
    PairPotential,
    finite_difference,
    lattice_pairing,
    sample_load,
)
from .solver import NewtonConfig, SolveReport, banded_solve, newton_minimize, newton_root

__version__ = "0.1.0"
