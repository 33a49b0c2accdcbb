"""Photometry and error metrics for comparing reconstructions to truth."""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .objectives import NoiseModel
from .operators import ForwardOperator, ImageVector, adjoint_apply, as_data_vector
from .simkit import PhantomSpec
from .solvers import SolverKind, em_step, flux_matched_start, initial_state, isra_step
from .stopping import StoppingRule, evaluate

__all__ = [
    "SourcePhotometry",
    "PhotometryReport",
    "box_flux",
    "photometry",
    "l2_error_trace",
    "StopQualityStudy",
    "stop_quality_study",
]


@dataclass(frozen=True)
class SourcePhotometry:
    label: str
    true_flux: float
    reconstructed_flux: float
    ratio_percent: float


@dataclass(frozen=True)
class PhotometryReport:
    sources: Tuple[SourcePhotometry, ...]
    box_side: int

    def write_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write("source,flux,rule_flux,ratio_percent\n")
            for s in self.sources:
                fh.write(
                    f"{s.label},{s.true_flux:.17g},{s.reconstructed_flux:.17g},"
                    f"{s.ratio_percent:.17g}\n"
                )


def box_flux(img: ImageVector, center: Tuple[float, float], side: int) -> float:
    """Total intensity in the side x side pixel box around center (col, row).

    The center is rounded to integer pixels and the box is clipped at the
    grid edges; side must be odd.
    """
    if img.shape is None:
        raise ValueError("box_flux requires an image with a 2-D grid shape")
    if side < 1 or side % 2 == 0:
        raise ValueError("box side must be a positive odd integer")
    rows, cols = img.shape
    c0 = int(round(center[0]))
    r0 = int(round(center[1]))
    half = side // 2
    c_lo, c_hi = max(c0 - half, 0), min(c0 + half, cols - 1)
    r_lo, r_hi = max(r0 - half, 0), min(r0 + half, rows - 1)
    if c_lo > c_hi or r_lo > r_hi:
        return 0.0
    grid = img.as_grid()
    return float(np.sum(grid[r_lo : r_hi + 1, c_lo : c_hi + 1]))


def photometry(
    truth: ImageVector,
    recon: ImageVector,
    spec: PhantomSpec,
    side: int = 13,
) -> PhotometryReport:
    """Per-source box fluxes of truth and reconstruction, with percentages."""
    if truth.shape is None or recon.shape is None:
        raise ValueError("photometry requires images with 2-D grid shapes")
    if truth.shape != recon.shape:
        raise ValueError(f"shape mismatch: truth {truth.shape} vs recon {recon.shape}")
    if truth.shape != spec.shape:
        raise ValueError(f"images {truth.shape} do not match phantom grid {spec.shape}")
    records = []
    for i, s in enumerate(spec.sources, start=1):
        tf = box_flux(truth, s.center, side)
        rf = box_flux(recon, s.center, side)
        ratio = 100.0 * rf / tf if tf > 0 else float("nan")
        records.append(SourcePhotometry(f"s{i}", tf, rf, ratio))
    return PhotometryReport(sources=tuple(records), box_side=side)


def l2_error_trace(iterates: Sequence, truth: ImageVector) -> np.ndarray:
    """Euclidean distances ||x^(k) - truth|| for a sequence of iterates."""
    tv = truth.values
    out = np.empty(len(iterates))
    for i, x in enumerate(iterates):
        xv = x.values if isinstance(x, ImageVector) else np.asarray(x, dtype=float)
        out[i] = np.linalg.norm(xv - tv)
    return out


@dataclass(frozen=True)
class StopQualityStudy:
    """Distance-to-truth trace of a full run plus where the rule fired."""

    distances: np.ndarray  # ||x^(k) - truth|| for k = 0 .. max_iter
    stop_iteration: Optional[int]
    stop_image: Optional[ImageVector]

    @property
    def argmin_iteration(self) -> int:
        return int(np.argmin(self.distances))

    @property
    def min_distance(self) -> float:
        return float(np.min(self.distances))


def stop_quality_study(
    op: ForwardOperator,
    y,
    noise: NoiseModel,
    solver: SolverKind,
    rule: StoppingRule,
    truth: ImageVector,
    x0=None,
    max_iter: int = 2000,
) -> StopQualityStudy:
    """Run the solver to max_iter regardless of the rule, recording the
    distance to truth each iteration and the iterate at the first firing.

    This is the oracle-comparison harness: the iterate sequence does not
    depend on when a rule fires, so one pass yields both the rule's stop
    and the full semiconvergence curve.
    """
    yv = as_data_vector(y, op.n_data, "data")
    if x0 is None:
        x0 = flux_matched_start(op, yv, shape=truth.shape)
    state = initial_state(op, x0)
    rule.begin(state)
    if solver is SolverKind.ISRA:
        adjoint_y = adjoint_apply(op, yv)
        step = lambda s: isra_step(s, yv, op, adjoint_y=adjoint_y)
    else:
        step = lambda s: em_step(s, yv, op)

    tv = truth.values
    distances = np.empty(max_iter + 1)
    distances[0] = np.linalg.norm(state.iterate.values - tv)
    stop_iteration = None
    stop_image = None
    for k in range(1, max_iter + 1):
        state = step(state)
        distances[k] = np.linalg.norm(state.iterate.values - tv)
        if stop_iteration is None:
            _, _, fired = evaluate(rule, state, yv, op, noise)
            if fired:
                stop_iteration = k
                stop_image = state.iterate
    return StopQualityStudy(
        distances=distances, stop_iteration=stop_iteration, stop_image=stop_image
    )
