"""Stiffness-field identification for elastic plates.

Full-order finite-element forward/adjoint solvers, a regularized Gauss-Newton
identification loop, a certified reduced-basis surrogate with adaptive
enrichment, and a trust-region driver coupling the two.
"""

from .model import (
    AffineOperatorFamily,
    ConfigError,
    Grid,
    LoadSignal,
    MaterialSpec,
    ObservationOperator,
    ParameterVector,
    assemble_load,
    assemble_observation,
    assemble_operators,
    operator_norm,
    project_admissible,
)
from .objective import (
    FomModel,
    eval_gradient,
    eval_linearized_gradient,
    eval_linearized_objective,
    eval_objective,
)
from .timestep import (
    SolverError,
    SteppingOperator,
    Trajectory,
    read_matrix,
    solve_adjoint,
    solve_linearized_adjoint,
    solve_linearized_primal,
    solve_primal,
    write_matrix,
)
from .irgnm import (
    IrgnmConfig,
    IrgnmResult,
    IterationRecord,
    irgnm_run,
    write_ledger,
)
from .rom import (
    EnrichmentError,
    ReducedBasisPair,
    RomModel,
    enrich,
    initial_basis,
    pod_compress,
    project_model,
)
from .estimator import (
    estimator_report,
    true_energy_error,
    write_effectivity,
)
from .tr import (
    TrResult,
    TrustRegionConfig,
    tr_irgnm,
    write_tr_ledger,
)

__version__ = "0.1.0"
