"""Stopping rules for the iterative solvers.

Every rule is an instance of the same template: stop at the first iteration
k with lhs(x^(k), y) <= tau * rhs(x^(k), y), where rhs is (a proxy for) the
expected value of the lhs statistic. The right-hand sides that depend on
the iterate are always computed from the current one, never frozen at the
start. Ties fire (the comparison is <=).

The L2 oracle is the exception: it watches the distance to a known truth
and fires at the first increase (first local minimum), so for it fired
means lhs > rhs with lhs the current and rhs the previous distance.
"""

import enum
from dataclasses import dataclass, field
from typing import List, Optional, TYPE_CHECKING, Tuple

import numpy as np

from .objectives import NoiseModel, cbr_expected, cbr_residual, d_kl, d_ls
from .operators import ForwardOperator, ImageVector, as_data_vector

if TYPE_CHECKING:
    from .solvers import IterationState

__all__ = [
    "RuleKind",
    "StoppingRule",
    "RuleTrace",
    "evaluate",
    "default_tau",
    "check_rule_compatible",
    "write_trace_csv",
]


class RuleKind(enum.Enum):
    MOROZOV_GAUSSIAN = "morozov_gaussian"
    MOROZOV_POISSON = "morozov_poisson"
    PEARSON = "pearson"
    POISSON_DISCREPANCY = "poisson_discrepancy"
    CBR_GAUSSIAN = "cbr_gaussian"
    CBR_POISSON = "cbr_poisson"
    L2_ORACLE = "l2_oracle"


GAUSSIAN_RULES = frozenset({RuleKind.MOROZOV_GAUSSIAN, RuleKind.CBR_GAUSSIAN})
POISSON_RULES = frozenset(
    {
        RuleKind.MOROZOV_POISSON,
        RuleKind.PEARSON,
        RuleKind.POISSON_DISCREPANCY,
        RuleKind.CBR_POISSON,
    }
)
CLASSICAL_POISSON_RULES = (
    RuleKind.MOROZOV_POISSON,
    RuleKind.PEARSON,
    RuleKind.POISSON_DISCREPANCY,
)


def check_rule_compatible(kind: RuleKind, noise: NoiseModel) -> None:
    if kind in GAUSSIAN_RULES and not noise.is_gaussian:
        raise ValueError(f"rule {kind.value} requires a Gaussian noise model")
    if kind in POISSON_RULES and not noise.is_poisson:
        raise ValueError(f"rule {kind.value} requires a Poisson noise model")


@dataclass
class StoppingRule:
    """A rule kind plus its threshold factor tau (> 0).

    The L2 oracle additionally carries the ground truth and remembers the
    previous distance, so each run should own its rule instance; run()
    calls begin() to (re)initialize that state.
    """

    kind: RuleKind
    tau: float = 1.0
    truth: Optional[ImageVector] = None
    _prev_distance: Optional[float] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be strictly positive")
        if self.kind is RuleKind.L2_ORACLE:
            if self.truth is None:
                raise ValueError("the L2 oracle rule requires the true image")
        elif self.truth is not None:
            raise ValueError("truth only applies to the L2 oracle rule")

    def begin(self, initial_state: "IterationState") -> None:
        """Reset per-run state; primes the oracle with the start distance."""
        if self.kind is RuleKind.L2_ORACLE:
            delta = initial_state.iterate.values - self.truth.values
            self._prev_distance = float(np.linalg.norm(delta))
        else:
            self._prev_distance = None


@dataclass
class RuleTrace:
    """Per-iteration (k, lhs, rhs, fired) records of one rule evaluation."""

    ks: List[int] = field(default_factory=list)
    lhs: List[float] = field(default_factory=list)
    rhs: List[float] = field(default_factory=list)
    fired: List[bool] = field(default_factory=list)

    def append(self, k: int, lhs: float, rhs: float, fired: bool) -> None:
        self.ks.append(k)
        self.lhs.append(lhs)
        self.rhs.append(rhs)
        self.fired.append(fired)

    def __len__(self) -> int:
        return len(self.ks)

    def first_fired(self) -> Optional[int]:
        for k, f in zip(self.ks, self.fired):
            if f:
                return k
        return None


def evaluate(
    rule: StoppingRule,
    state: "IterationState",
    y,
    op: ForwardOperator,
    noise: NoiseModel,
) -> Tuple[float, float, bool]:
    """Evaluate one rule at the current iterate.

    Returns (lhs, rhs, fired). Template rules fire when lhs <= tau-scaled
    rhs (rhs is returned already scaled); the L2 oracle fires when the
    distance to truth exceeds the previous iteration's distance.
    """
    check_rule_compatible(rule.kind, noise)
    yv = as_data_vector(y, op.n_data, "data")
    x = state.iterate
    fw = state.cached_forward
    kind = rule.kind

    if kind is RuleKind.L2_ORACLE:
        if rule._prev_distance is None:
            raise RuntimeError(
                "L2 oracle rule was not primed; call rule.begin(initial_state) first"
            )
        current = float(np.linalg.norm(x.values - rule.truth.values))
        previous = rule._prev_distance
        rule._prev_distance = current
        return current, previous, current > previous

    if kind is RuleKind.MOROZOV_GAUSSIAN:
        lhs = d_ls(yv, x, op, forward=fw)
        rhs = rule.tau * op.n_data * noise.sigma ** 2
    elif kind is RuleKind.MOROZOV_POISSON:
        lhs = d_ls(yv, x, op, forward=fw)
        rhs = rule.tau * float(np.sum(fw))
    elif kind is RuleKind.PEARSON:
        if np.any(fw <= 0):
            raise ValueError("Pearson's test requires Hx > 0 elementwise")
        lhs = float(np.sum((fw - yv) ** 2 / fw))
        rhs = rule.tau * op.n_data
    elif kind is RuleKind.POISSON_DISCREPANCY:
        lhs = (2.0 / op.n_data) * d_kl(yv, x, op, forward=fw)
        rhs = rule.tau
    elif kind is RuleKind.CBR_GAUSSIAN or kind is RuleKind.CBR_POISSON:
        lhs = cbr_residual(yv, x, op, noise, forward=fw)
        rhs = rule.tau * cbr_expected(x, op, noise, forward=fw)
    else:  # pragma: no cover
        raise ValueError(f"unknown rule kind {kind!r}")
    return lhs, rhs, lhs <= rhs


def default_tau(
    kind: RuleKind,
    noise: Optional[NoiseModel] = None,
    y=None,
    n_data: Optional[int] = None,
) -> float:
    """Stock tau for each rule: 1/sigma^2 for the Gaussian backprojected
    residual, N / sum(y) for its Poisson counterpart, 1 for everything else.
    """
    if kind is RuleKind.CBR_GAUSSIAN:
        if noise is None or not noise.is_gaussian:
            raise ValueError("cbr_gaussian default tau needs the Gaussian noise model")
        return 1.0 / noise.sigma ** 2
    if kind is RuleKind.CBR_POISSON:
        if y is None:
            raise ValueError("cbr_poisson default tau needs the data vector")
        yv = as_data_vector(y, n=None, name="data")
        total = float(np.sum(yv))
        if total <= 0:
            raise ValueError("cbr_poisson default tau needs sum(y) > 0")
        n = n_data if n_data is not None else yv.shape[0]
        return n / total
    return 1.0


def write_trace_csv(trace: RuleTrace, path) -> None:
    """Write a rule trace as CSV with columns k, lhs, rhs, fired (0/1)."""
    with open(path, "w", newline="\n") as fh:
        fh.write("k,lhs,rhs,fired\n")
        for k, lhs, rhs, fired in zip(trace.ks, trace.lhs, trace.rhs, trace.fired):
            fh.write(f"{k},{lhs:.17g},{rhs:.17g},{int(fired)}\n")
