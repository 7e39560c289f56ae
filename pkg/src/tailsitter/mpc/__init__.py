"""On-manifold error-state model predictive control."""

from .controller import MpcController, MpcDiagnostics, control_step
from .error import (LinearizedErrorSystem, actual_from_error, error_dynamics, error_state,
                    error_state_of, linearize)
from .qp import (QP, BoxWarning, MpcConfig, QPSolution, build_qp, horizon_samples,
                 kkt_residual, regime_weights, solve_qp)

__all__ = [
    "MpcController", "MpcDiagnostics", "control_step", "LinearizedErrorSystem",
    "actual_from_error", "error_dynamics", "error_state", "error_state_of", "linearize",
    "QP", "BoxWarning", "MpcConfig", "QPSolution", "build_qp", "horizon_samples",
    "kkt_residual", "regime_weights", "solve_qp",
]
