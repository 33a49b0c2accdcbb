"""Phantom construction, seeded noise injection, ill-posed instances.

Randomness is counter-based for reproducibility: every data component i
draws from its own Philox stream keyed by (seed, i), so samples do not
depend on evaluation order or vector length. Gaussian draws map one
uniform through the inverse normal CDF; Poisson draws use product
inversion below mean 10 and Hormann's PTRS transformed rejection above,
so results are bit-exact for a fixed seed.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import ndtri

from ._kvtext import format_kv_text, parse_kv_text
from .objectives import NoiseModel, cbr_residual, d_kl, d_ls
from .operators import ForwardOperator, ImageVector, adjoint_apply, apply, as_data_vector
from .solvers import (
    SolverKind,
    em_step,
    flux_matched_start,
    initial_state,
    isra_step,
)
from .stopping import CLASSICAL_POISSON_RULES, RuleKind, StoppingRule, default_tau, evaluate

__all__ = [
    "GaussianSource",
    "PhantomSpec",
    "NoisySample",
    "build_phantom",
    "four_source_phantom",
    "sample_noise",
    "make_noisy_sample",
    "certify_outside_cone",
    "build_ill_posed_instance",
    "save_phantom_spec",
    "load_phantom_spec",
    "save_vector_csv",
    "load_vector_csv",
    "save_image_csv",
    "load_image_csv",
]


# ---------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class GaussianSource:
    """Isotropic Gaussian source: center in (col, row) pixels, variance in
    pixels^2, amplitude is the peak value."""

    center: Tuple[float, float]
    variance: float
    amplitude: float

    def __post_init__(self):
        if self.variance <= 0:
            raise ValueError("source variance must be strictly positive")
        if self.amplitude <= 0:
            raise ValueError("source amplitude must be strictly positive")


@dataclass(frozen=True)
class PhantomSpec:
    rows: int
    cols: int
    sources: Tuple[GaussianSource, ...]

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if self.rows < 1 or self.cols < 1:
            raise ValueError("phantom grid dimensions must be at least 1")
        if not self.sources:
            raise ValueError("phantom needs at least one source")
        for s in self.sources:
            c, r = s.center
            if not (0 <= c <= self.cols - 1 and 0 <= r <= self.rows - 1):
                raise ValueError(f"source center {s.center} outside the grid")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)


def build_phantom(spec: PhantomSpec) -> ImageVector:
    """Render the sources on the pixel grid.

    Pixel (c, r) gets sum_s amplitude_s * exp(-((c - c0)^2 + (r - r0)^2)
    / (2 variance_s)); the origin is the bottom-left pixel.
    """
    cgrid, rgrid = np.meshgrid(
        np.arange(spec.cols, dtype=float), np.arange(spec.rows, dtype=float)
    )
    values = np.zeros((spec.rows, spec.cols))
    for s in spec.sources:
        c0, r0 = s.center
        dist_sq = (cgrid - c0) ** 2 + (rgrid - r0) ** 2
        values += s.amplitude * np.exp(-dist_sq / (2.0 * s.variance))
    return ImageVector(values.ravel(), shape=spec.shape)


def four_source_phantom() -> PhantomSpec:
    """Stock 64 x 64 test configuration: four Gaussian footpoints of
    different strengths, the weakest in the upper right."""
    return PhantomSpec(
        rows=64,
        cols=64,
        sources=(
            GaussianSource(center=(16, 32), variance=0.64, amplitude=1.28),
            GaussianSource(center=(32, 32), variance=0.64, amplitude=1.60),
            GaussianSource(center=(42, 45), variance=0.48, amplitude=0.60),
            GaussianSource(center=(42, 19), variance=0.64, amplitude=1.28),
        ),
    )


# ---------------------------------------------------------------------------
# counter-based sampling

_U64 = np.uint64
_TWO64 = 1 << 64


class _UniformStream:
    """Uniforms in (0, 1) from the Philox stream keyed by (seed, index)."""

    __slots__ = ("_bitgen", "_buf", "_pos")
    _BLOCK = 16

    def __init__(self, seed: int, index: int):
        key = np.array([seed % _TWO64, index % _TWO64], dtype=_U64)
        self._bitgen = np.random.Philox(key=key)
        self._buf = None
        self._pos = 0

    def next(self) -> float:
        if self._buf is None or self._pos >= self._buf.shape[0]:
            raw = self._bitgen.random_raw(self._BLOCK)
            # top 53 bits, offset by half an ulp: strictly inside (0, 1)
            self._buf = ((raw >> _U64(11)) + 0.5) * (2.0 ** -53)
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return float(u)


def _first_uniform(seed: int, index: int) -> float:
    key = np.array([seed % _TWO64, index % _TWO64], dtype=_U64)
    raw = np.random.Philox(key=key).random_raw()
    return ((raw >> 11) + 0.5) * (2.0 ** -53)


def _poisson_inversion(stream: _UniformStream, lam: float) -> int:
    # product inversion, mean < 10
    threshold = math.exp(-lam)
    k = 0
    prod = stream.next()
    while prod > threshold:
        k += 1
        prod *= stream.next()
    return k


def _poisson_ptrs(stream: _UniformStream, lam: float) -> int:
    # Hormann's transformed rejection with squeeze, mean >= 10
    log_lam = math.log(lam)
    b = 0.931 + 2.53 * math.sqrt(lam)
    a = -0.059 + 0.02483 * b
    inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
    v_r = 0.9277 - 3.6224 / (b - 2.0)
    while True:
        u = stream.next() - 0.5
        v = stream.next()
        us = 0.5 - abs(u)
        k = int(math.floor((2.0 * a / us + b) * u + lam + 0.43))
        if us >= 0.07 and v <= v_r:
            return k
        if k < 0 or (us < 0.013 and v > us):
            continue
        if math.log(v) + math.log(inv_alpha) - math.log(a / (us * us) + b) <= (
            k * log_lam - lam - math.lgamma(k + 1.0)
        ):
            return k


def sample_noise(clean, noise: NoiseModel, seed: int) -> np.ndarray:
    """Draw one noisy realization of the clean data vector.

    Gaussian: clean + iid N(0, sigma^2). Poisson: independent counts with
    the clean components as means (a zero mean yields a zero count).
    Deterministic per seed and per component.
    """
    clean = as_data_vector(clean, name="clean data")
    n = clean.shape[0]
    if noise.is_gaussian:
        u = np.empty(n)
        for i in range(n):
            u[i] = _first_uniform(seed, i)
        return clean + noise.sigma * ndtri(u)
    if np.any(clean < 0):
        raise ValueError("Poisson sampling requires nonnegative means")
    out = np.empty(n)
    for i in range(n):
        lam = clean[i]
        if lam == 0.0:
            out[i] = 0.0
        elif lam < 10.0:
            out[i] = float(_poisson_inversion(_UniformStream(seed, i), lam))
        else:
            out[i] = float(_poisson_ptrs(_UniformStream(seed, i), lam))
    return out


@dataclass(frozen=True)
class NoisySample:
    """A clean signal y_T = H x_T and one noisy realization of it."""

    clean: np.ndarray
    noisy: np.ndarray
    seed: int
    noise: NoiseModel


def make_noisy_sample(op: ForwardOperator, image, noise: NoiseModel, seed: int) -> NoisySample:
    clean = apply(op, image)
    return NoisySample(clean=clean, noisy=sample_noise(clean, noise, seed), seed=seed, noise=noise)


# ---------------------------------------------------------------------------
# genuinely ill-posed instances

_CERTIFY_FLOOR = 1e-6
_GRAD_NORM_TOL = 1e-14


def _solver_for(noise: NoiseModel) -> SolverKind:
    return SolverKind.ISRA if noise.is_gaussian else SolverKind.EM


def certify_outside_cone(
    op: ForwardOperator,
    y,
    noise: NoiseModel,
    max_iter: int = 20000,
) -> Optional[float]:
    """Run the matching solver to near-convergence and bound the limit
    objective away from zero.

    Returns floor = limit objective / 2 when the certification succeeds
    (floor > 1e-6), else None: data reproducible by some nonnegative image
    drives the objective to zero, so no positive floor exists.
    """
    yv = as_data_vector(y, op.n_data, "data")
    solver = _solver_for(noise)
    if noise.is_poisson and np.any(yv < 0):
        raise ValueError("Poisson data must be nonnegative")
    state = initial_state(op, flux_matched_start(op, yv))
    if solver is SolverKind.ISRA:
        adjoint_y = adjoint_apply(op, yv)
        step = lambda s: isra_step(s, yv, op, adjoint_y=adjoint_y)
        objective = lambda s: d_ls(yv, s.iterate, op, forward=s.cached_forward)
    else:
        step = lambda s: em_step(s, yv, op)
        objective = lambda s: d_kl(yv, s.iterate, op, forward=s.cached_forward)

    obj = objective(state)
    for _ in range(max_iter):
        state = step(state)
        obj = objective(state)
        if obj < 2.0 * _CERTIFY_FLOOR:
            return None  # objective will reach zero; not ill-posed
        grad_norm = math.sqrt(cbr_residual(yv, state.iterate, op, noise, forward=state.cached_forward))
        if grad_norm < _GRAD_NORM_TOL:
            break
    floor = 0.5 * obj
    return floor if floor > _CERTIFY_FLOOR else None


def _attempt_seed(seed: int, attempt: int) -> int:
    return seed * 1009 + attempt


def _gaussian_candidate(op: ForwardOperator, sub_seed: int) -> Optional[np.ndarray]:
    rng = np.random.default_rng(sub_seed)
    x_true = rng.uniform(0.0, 1.0, size=op.n_params)
    x_true[rng.uniform(size=op.n_params) < 0.5] = 0.0
    clean = apply(op, ImageVector(x_true))
    scale = float(np.mean(clean))
    if scale <= 0:
        return None
    clean = clean / scale
    y = clean + sample_noise(np.zeros_like(clean), NoiseModel.gaussian(0.5), sub_seed)
    # a strictly negative component certifies y outside the cone H(C),
    # which lies inside the nonnegative orthant for positive H
    if float(np.min(y)) > -0.05:
        return None
    return y


def _poisson_candidate(op: ForwardOperator, sub_seed: int, spike_mean: float) -> Optional[np.ndarray]:
    rng = np.random.default_rng(sub_seed)
    n = op.n_data
    mean = np.zeros(n)
    jitter = max(1, n // 20)
    for frac in (0.2, 0.5, 0.8):
        idx = int(round(frac * (n - 1))) + int(rng.integers(-jitter, jitter + 1))
        mean[min(max(idx, 0), n - 1)] = spike_mean
    y = sample_noise(mean, NoiseModel.poisson(), sub_seed)
    if float(np.sum(y)) <= 0:
        return None
    return y


def _verify_classical_plateau(
    op: ForwardOperator,
    y: np.ndarray,
    max_iter: int = 10000,
    window: int = 1000,
    slope_tol: float = 1e-8,
) -> bool:
    """Check that no classical Poisson rule (tau = 1) fires along EM and
    that each lhs has flattened (|slope| < slope_tol per iteration over the
    final window), while the backprojected-residual rule does fire."""
    noise = NoiseModel.poisson()
    rules = [StoppingRule(kind, tau=1.0) for kind in CLASSICAL_POISSON_RULES]
    cbr = StoppingRule(RuleKind.CBR_POISSON, tau=default_tau(RuleKind.CBR_POISSON, y=y))
    state = initial_state(op, flux_matched_start(op, y))
    histories: List[List[float]] = [[] for _ in rules]
    cbr_fired = False
    for _ in range(max_iter):
        state = em_step(state, y, op)
        for rule, hist in zip(rules, histories):
            lhs, rhs, fired = evaluate(rule, state, y, op, noise)
            if fired:
                return False
            hist.append(lhs - rhs)
        if not cbr_fired:
            _, _, cbr_fired = evaluate(cbr, state, y, op, noise)
    if not cbr_fired:
        return False
    for hist in histories:
        tail = np.asarray(hist[-window:])
        if np.any(tail <= 0):
            return False
        slope = np.polyfit(np.arange(tail.shape[0]), tail, 1)[0]
        if abs(slope) >= slope_tol:
            return False
    return True


def build_ill_posed_instance(
    op: ForwardOperator,
    seed: int,
    noise: NoiseModel,
    certify_iters: int = 20000,
    verify_iters: int = 10000,
    spike_mean: float = 150.0,
    attempts: int = 10,
) -> Tuple[np.ndarray, float]:
    """Construct data certified outside the cone H(C), plus its objective
    floor.

    Gaussian: a noisy signal with at least one strictly negative component
    (necessarily outside the cone). Poisson: unblurred count spikes on a
    zero background, which a blur-type operator cannot reproduce; the
    construction also verifies that the classical Poisson rules plateau
    above their thresholds while the backprojected-residual rule fires.
    Retries derived seeds up to `attempts` times, then raises.
    """
    for attempt in range(attempts):
        sub_seed = _attempt_seed(seed, attempt)
        if noise.is_gaussian:
            y = _gaussian_candidate(op, sub_seed)
        else:
            y = _poisson_candidate(op, sub_seed, spike_mean)
        if y is None:
            continue
        floor = certify_outside_cone(op, y, noise, max_iter=certify_iters)
        if floor is None:
            continue
        if noise.is_poisson and not _verify_classical_plateau(op, y, max_iter=verify_iters):
            continue
        return y, floor
    raise RuntimeError(
        f"failed to certify an ill-posed instance in {attempts} attempts (seed {seed})"
    )


# ---------------------------------------------------------------------------
# serialization

_FLOAT_FMT = "{:.17g}"


def save_phantom_spec(spec: PhantomSpec, path) -> None:
    top = {"rows": str(spec.rows), "cols": str(spec.cols)}
    blocks = []
    for s in spec.sources:
        blocks.append(
            (
                "source",
                {
                    "center": f"{_FLOAT_FMT.format(s.center[0])},{_FLOAT_FMT.format(s.center[1])}",
                    "variance": _FLOAT_FMT.format(s.variance),
                    "amplitude": _FLOAT_FMT.format(s.amplitude),
                },
            )
        )
    with open(path, "w", newline="\n") as fh:
        fh.write(format_kv_text(top, blocks))


def load_phantom_spec(path) -> PhantomSpec:
    with open(path, "r") as fh:
        top, blocks = parse_kv_text(fh.read())
    try:
        rows = int(top["rows"])
        cols = int(top["cols"])
    except KeyError as exc:
        raise ValueError(f"phantom spec missing key {exc}") from exc
    sources = []
    for name, pairs in blocks:
        if name != "source":
            raise ValueError(f"unexpected block [{name}] in phantom spec")
        try:
            c_str, r_str = pairs["center"].split(",")
            sources.append(
                GaussianSource(
                    center=(float(c_str), float(r_str)),
                    variance=float(pairs["variance"]),
                    amplitude=float(pairs["amplitude"]),
                )
            )
        except (KeyError, ValueError) as exc:
            raise ValueError(f"malformed [source] block: {exc}") from exc
    return PhantomSpec(rows=rows, cols=cols, sources=tuple(sources))


def save_vector_csv(values, path) -> None:
    """One value per line, '.' decimal separator, LF endings."""
    arr = as_data_vector(values, name="vector")
    with open(path, "w", newline="\n") as fh:
        for v in arr:
            fh.write(_FLOAT_FMT.format(v) + "\n")


def load_vector_csv(path) -> np.ndarray:
    with open(path, "r") as fh:
        values = [float(line.strip()) for line in fh if line.strip()]
    if not values:
        raise ValueError(f"no values in {path}")
    return np.asarray(values)


def save_image_csv(image: ImageVector, path) -> None:
    """Grid CSV, one row of comma-separated pixel values per grid row
    (row 0, the bottom row, first)."""
    grid = image.as_grid()
    with open(path, "w", newline="\n") as fh:
        for row in grid:
            fh.write(",".join(_FLOAT_FMT.format(v) for v in row) + "\n")


def load_image_csv(path) -> ImageVector:
    rows = []
    with open(path, "r") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(tok) for tok in line.split(",")])
    if not rows:
        raise ValueError(f"no values in {path}")
    grid = np.asarray(rows)
    return ImageVector(grid.ravel(), shape=grid.shape)
