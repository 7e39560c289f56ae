"""Minimum-snap trajectory construction and optimization."""

from .lbfgs import LbfgsResult, lbfgs
from .minco import FlatTrajectory, IllConditionedError, MincoSystem, build_trajectory, rest_state
from .objective import (NotConverged, PlanningProblem, PlanResult, objective_and_gradient,
                        optimize, rest_to_rest,
                        start_cache, seed_problem, smooth_hinge)
from .traverse import TraverseSpec, traverse_attitude, traverse_boundary_state
