"""Multiplicative iterative solvers: the generic split step, ISRA and EM.

Both algorithms are instances of x^(k+1) = x^(k) * U(x^(k)) / V(x^(k)):
ISRA uses U = H^T y, V = H^T H x and minimizes the least-squares objective
under x >= 0 (Gaussian noise); EM uses U = H^T(y / Hx), V = H^T 1 and
minimizes the Kullback-Leibler divergence (Poisson noise). Plain updates,
no acceleration. Iterations are counted from 1 for the first completed
update and rules are evaluated from k = 1 on, never at initialization.
"""

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .objectives import NoiseModel, d_kl, d_ls
from .operators import ForwardOperator, ImageVector, adjoint_apply, apply, as_data_vector
from .stopping import RuleTrace, StoppingRule, check_rule_compatible, evaluate

__all__ = [
    "SolverKind",
    "StopReason",
    "IterationState",
    "ReconstructionResult",
    "initial_state",
    "flux_matched_start",
    "multiplicative_step",
    "isra_step",
    "em_step",
    "run",
]

# denominators at or below this are treated as degenerate
_DENOM_FLOOR = 1e-300


class SolverKind(enum.Enum):
    ISRA = "isra"
    EM = "em"


class StopReason(enum.Enum):
    RULE_FIRED = "rule_fired"
    MAX_ITERATIONS = "max_iterations"


@dataclass(frozen=True)
class IterationState:
    """Current iterate, its index k, and the cached forward action Hx."""

    iterate: ImageVector
    k: int
    cached_forward: np.ndarray


@dataclass(frozen=True)
class ReconstructionResult:
    final: ImageVector
    stop_iteration: int
    stop_reason: StopReason
    objective_trace: np.ndarray  # objective at k = 0 .. stop_iteration
    rule_trace: Optional[RuleTrace]


def initial_state(op: ForwardOperator, x0) -> IterationState:
    if not isinstance(x0, ImageVector):
        x0 = ImageVector(np.asarray(x0, dtype=float))
    return IterationState(iterate=x0, k=0, cached_forward=apply(op, x0))


def flux_matched_start(op: ForwardOperator, y, shape=None) -> ImageVector:
    """Constant start scaled so that sum(H x0) = sum(max(y, 0)).

    A strictly positive interior point is required by the multiplicative
    form; the clamp discards negative data components when matching flux.
    """
    yv = as_data_vector(y, op.n_data, "data")
    flux = float(np.sum(np.maximum(yv, 0.0)))
    if flux <= 0:
        raise ValueError("data has no positive flux; provide x0 explicitly")
    level = flux / float(np.sum(op.column_sums))
    return ImageVector(np.full(op.n_params, level), shape=shape)


def multiplicative_step(x: ImageVector, numerator, denominator) -> ImageVector:
    """One multiplicative update x * max(U, 0) / V.

    Negative numerator components are clamped to zero before the division,
    which pins those pixels at zero permanently, consistent with the
    complementarity condition x * grad = 0.
    """
    u = np.asarray(numerator, dtype=float)
    v = np.asarray(denominator, dtype=float)
    if u.shape != (x.size,) or v.shape != (x.size,):
        raise ValueError("numerator and denominator must match the image length")
    if np.any(v < _DENOM_FLOOR):
        raise ValueError("degenerate denominator in multiplicative step")
    values = x.values * np.maximum(u, 0.0) / v
    return ImageVector(values, shape=x.shape)


def isra_step(state: IterationState, y, op: ForwardOperator, adjoint_y=None) -> IterationState:
    """One ISRA update x * (H^T y) / (H^T H x).

    `adjoint_y` optionally supplies the iteration-independent H^T y.
    """
    yv = as_data_vector(y, op.n_data, "data")
    u = adjoint_apply(op, yv) if adjoint_y is None else np.asarray(adjoint_y, dtype=float)
    v = adjoint_apply(op, state.cached_forward)
    new_x = multiplicative_step(state.iterate, u, v)
    return IterationState(iterate=new_x, k=state.k + 1, cached_forward=apply(op, new_x))


def em_step(state: IterationState, y, op: ForwardOperator) -> IterationState:
    """One EM (Richardson-Lucy) update (x / H^T 1) * H^T (y / Hx)."""
    yv = as_data_vector(y, op.n_data, "data")
    fw = state.cached_forward
    if np.any((fw <= _DENOM_FLOOR) & (yv > 0)):
        raise ValueError("EM update undefined: Hx vanishes where the data is positive")
    ratio = np.zeros_like(fw)
    pos = yv > 0
    ratio[pos] = yv[pos] / fw[pos]
    u = adjoint_apply(op, ratio)
    new_x = multiplicative_step(state.iterate, u, op.column_sums)
    return IterationState(iterate=new_x, k=state.k + 1, cached_forward=apply(op, new_x))


def _check_pairing(solver: SolverKind, noise: NoiseModel) -> None:
    if solver is SolverKind.ISRA and not noise.is_gaussian:
        raise ValueError("ISRA is paired with the Gaussian noise model")
    if solver is SolverKind.EM and not noise.is_poisson:
        raise ValueError("EM is paired with the Poisson noise model")


def run(
    op: ForwardOperator,
    y,
    noise: NoiseModel,
    solver: SolverKind,
    rule: Optional[StoppingRule],
    x0=None,
    max_iter: int = 5000,
) -> ReconstructionResult:
    """Iterate from x0, evaluating the rule after each completed update.

    Stops at the first iteration whose rule evaluation fires, or at
    max_iter; a rule that never fires is a reported outcome, not an error.
    With rule=None the solver always runs to max_iter (no trace).
    """
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    _check_pairing(solver, noise)
    yv = as_data_vector(y, op.n_data, "data")
    if noise.is_poisson and np.any(yv < 0):
        raise ValueError("Poisson data must be nonnegative")
    if rule is not None:
        check_rule_compatible(rule.kind, noise)

    if x0 is None:
        state = initial_state(op, flux_matched_start(op, yv))
    else:
        state = initial_state(op, x0)
    if rule is not None:
        rule.begin(state)

    if solver is SolverKind.ISRA:
        adjoint_y = adjoint_apply(op, yv)
        step = lambda s: isra_step(s, yv, op, adjoint_y=adjoint_y)
        objective = lambda s: d_ls(yv, s.iterate, op, forward=s.cached_forward)
    else:
        step = lambda s: em_step(s, yv, op)
        objective = lambda s: d_kl(yv, s.iterate, op, forward=s.cached_forward)

    objectives = [objective(state)]
    trace = RuleTrace() if rule is not None else None
    stop_reason = StopReason.MAX_ITERATIONS
    for k in range(1, max_iter + 1):
        state = step(state)
        objectives.append(objective(state))
        if rule is not None:
            lhs, rhs, fired = evaluate(rule, state, yv, op, noise)
            trace.append(k, lhs, rhs, fired)
            if fired:
                stop_reason = StopReason.RULE_FIRED
                break

    return ReconstructionResult(
        final=state.iterate,
        stop_iteration=state.k,
        stop_reason=stop_reason,
        objective_trace=np.asarray(objectives),
        rule_trace=trace,
    )
