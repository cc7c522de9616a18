"""Lifted linear, bilinear, and input-state separable surrogate models with
sharp, closed-form certificates of their worst-case one-step prediction error.

The core objects: a normal separable basis Psi(x, u) = [H(x); G(u) H(x)]
(dictionary module), closed-form regression of its predictive top block
(regression), consistency certificates whose largest eigenvalue bounds the
relative RMSE of every representable function sharply (consistency),
multi-step predictors (predictor), benchmark systems and data collection
(systems), and gradient-based dictionary learning (learning).
"""

__version__ = "0.1.0"

from .consistency import (
    ConsistencyReport,
    certify,
    certify_matrices,
    consistency_matrix,
    consistency_matrix_from_data,
    rrmse_of_directions,
    rrmse_of_function,
    symmetrized,
    trace_bounds,
    trace_from_data,
    trace_proxy,
)
from .dictionary import (
    BilinearFactor,
    CallableDictionary,
    CallableInputFactor,
    ConstantAugmentedDictionary,
    InputFactor,
    LiftedLinearFactor,
    NormalBasis,
    PolynomialDictionary,
    StateDictionary,
    basis_from_spec,
    change_of_basis,
    eval_G,
    eval_H,
    eval_psi,
    make_bilinear,
    make_lifted_linear,
)
from .errors import (
    ArtifactError,
    DivergenceError,
    KcfError,
    NumericalError,
    RankDeficiencyError,
    ValidationError,
)
from .predictor import (
    RolloutResult,
    error_statistics,
    function_predict,
    relative_errors,
    rollout,
    step,
)
from .regression import (
    FittedModel,
    SnapshotDataset,
    design_matrices,
    edmd_full,
    fit_top_block,
    forward_backward,
    forward_backward_matrices,
    pinv_full_row_rank,
)
from .systems import (
    ControlSystem,
    ExperimentProtocol,
    collect,
    dc_motor,
    dc_motor_rhs,
    integrate_step,
    simulate_trajectory,
    synthetic_bilinear,
    synthetic_linear,
)

__all__ = [name for name in dir() if not name.startswith("_")]
