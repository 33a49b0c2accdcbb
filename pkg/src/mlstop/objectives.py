"""Scalar data-fit objectives and the backprojected-residual statistics.

Conventions: the least-squares objective is the plain squared residual norm
||Hx - y||^2 (no 1/2, no 1/sigma^2 weighting) and the Gaussian residual
statistic uses H^T(Hx - y) without the factor 2, so left- and right-hand
sides of the stopping criteria pair up exactly.
"""

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .operators import ForwardOperator, apply, adjoint_apply, as_data_vector, image_values, squared_adjoint_apply

__all__ = [
    "NoiseKind",
    "NoiseModel",
    "d_ls",
    "d_kl",
    "cbr_residual",
    "cbr_expected",
]


class NoiseKind(enum.Enum):
    GAUSSIAN = "gaussian"
    POISSON = "poisson"


@dataclass(frozen=True)
class NoiseModel:
    """Homoscedastic Gaussian (known sigma) or Poisson observation noise."""

    kind: NoiseKind
    sigma: Optional[float] = None

    def __post_init__(self):
        if self.kind is NoiseKind.GAUSSIAN:
            if self.sigma is None or self.sigma <= 0:
                raise ValueError("Gaussian noise requires sigma > 0")
        elif self.sigma is not None:
            raise ValueError("sigma only applies to Gaussian noise")

    @classmethod
    def gaussian(cls, sigma: float) -> "NoiseModel":
        return cls(NoiseKind.GAUSSIAN, float(sigma))

    @classmethod
    def poisson(cls) -> "NoiseModel":
        return cls(NoiseKind.POISSON)

    @property
    def is_gaussian(self) -> bool:
        return self.kind is NoiseKind.GAUSSIAN

    @property
    def is_poisson(self) -> bool:
        return self.kind is NoiseKind.POISSON


def _forward(op, x, forward):
    if forward is None:
        return apply(op, x)
    return as_data_vector(forward, op.n_data, "forward")


def d_ls(y, x, op: ForwardOperator, forward=None) -> float:
    """Least-squares objective ||Hx - y||^2.

    `forward` optionally supplies a precomputed Hx (e.g. a solver cache).
    """
    yv = as_data_vector(y, op.n_data, "data")
    fw = _forward(op, x, forward)
    r = fw - yv
    return float(r @ r)


def d_kl(y, x, op: ForwardOperator, forward=None) -> float:
    """Kullback-Leibler divergence sum(y log(y / Hx) + Hx - y).

    Uses the continuity convention 0 * log(0 / a) = 0. Requires y >= 0 and
    Hx > 0 elementwise.
    """
    yv = as_data_vector(y, op.n_data, "data")
    if np.any(yv < 0):
        raise ValueError("Kullback-Leibler divergence requires nonnegative data")
    fw = _forward(op, x, forward)
    if np.any(fw <= 0):
        raise ValueError("Kullback-Leibler divergence requires Hx > 0 elementwise")
    total = float(np.sum(fw) - np.sum(yv))
    pos = yv > 0
    if np.any(pos):
        total += float(np.sum(yv[pos] * np.log(yv[pos] / fw[pos])))
    # nonnegative in exact arithmetic; guard the last few ulps near zero
    return max(total, 0.0)


def _likelihood_gradient(y, x, op, noise, forward):
    """Gradient statistic of the negative log-likelihood at x.

    Gaussian: H^T(Hx - y) (the 1/2-free convention). Poisson: H^T(1 - y/Hx),
    the exact gradient of the KL divergence.
    """
    yv = as_data_vector(y, op.n_data, "data")
    fw = _forward(op, x, forward)
    if noise.is_gaussian:
        return adjoint_apply(op, fw - yv)
    if np.any(fw <= 0):
        raise ValueError("Poisson residual requires Hx > 0 elementwise")
    return adjoint_apply(op, 1.0 - yv / fw)


def cbr_residual(y, x, op: ForwardOperator, noise: NoiseModel, forward=None) -> float:
    """Constrained backprojected residual ||x * grad L_y(x)||^2.

    This is the squared norm of the iterate-weighted likelihood gradient;
    it vanishes exactly at constrained maximum-likelihood solutions.
    """
    xv = image_values(x)
    g = _likelihood_gradient(y, x, op, noise, forward)
    z = xv * g
    return float(z @ z)


def cbr_expected(x, op: ForwardOperator, noise: NoiseModel, forward=None) -> float:
    """Expected value of the backprojected residual under the noise model.

    Gaussian: sum_j x_j^2 (H2^T sigma^2)_j with constant variance sigma^2.
    Poisson:  sum_j x_j^2 (H2^T (1 / Hx))_j.
    H2 is the elementwise square of H.
    """
    xv = image_values(x)
    if xv.shape[0] != op.n_params:
        raise ValueError(f"image has length {xv.shape[0]}, operator expects {op.n_params}")
    if not np.any(xv):
        return 0.0
    if noise.is_gaussian:
        weights = (noise.sigma ** 2) * op.squared_column_sums
    else:
        fw = _forward(op, x, forward)
        if np.any(fw <= 0):
            raise ValueError("Poisson expected residual requires Hx > 0 elementwise")
        weights = squared_adjoint_apply(op, 1.0 / fw)
    return float(np.sum(xv ** 2 * weights))
