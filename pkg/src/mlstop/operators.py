"""Dense strictly positive forward operators and their derived actions.

The forward model is y = H x with every entry of H strictly positive.
Operators are stored dense (desk scale, N, M <= 4096) so the adjoint is
exact by construction; there is no matrix-free path.
"""

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

__all__ = [
    "ForwardOperator",
    "ImageVector",
    "apply",
    "adjoint_apply",
    "squared_adjoint_apply",
    "build_dense_positive",
    "build_blur_operator",
    "save_operator_csv",
    "load_operator_csv",
]


def as_data_vector(v, n: Optional[int] = None, name: str = "vector") -> np.ndarray:
    """Coerce to a 1-D float64 array, optionally checking its length."""
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"{name} has length {arr.shape[0]}, expected {n}")
    return arr


@dataclass(frozen=True)
class ImageVector:
    """Nonnegative parameter vector, optionally laid out on a 2-D grid.

    The flat layout is row-major with (col, row) pixel coordinates and the
    origin at the bottom-left: entry r * cols + c is pixel (c, r).
    """

    values: np.ndarray
    shape: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 0:
            values = values.reshape(1)
        if values.ndim != 1:
            raise ValueError(f"image values must be one-dimensional, got shape {values.shape}")
        if values.size == 0:
            raise ValueError("image must have at least one pixel")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("image values must be finite and nonnegative")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        if self.shape is not None:
            rows, cols = int(self.shape[0]), int(self.shape[1])
            if rows < 1 or cols < 1 or rows * cols != values.size:
                raise ValueError(
                    f"grid shape {self.shape} incompatible with {values.size} values"
                )
            object.__setattr__(self, "shape", (rows, cols))

    @property
    def size(self) -> int:
        return self.values.size

    def as_grid(self) -> np.ndarray:
        """Return a (rows, cols) view; row 0 is the bottom row."""
        if self.shape is None:
            raise ValueError("image has no 2-D grid shape")
        return self.values.reshape(self.shape)


def image_values(x) -> np.ndarray:
    """Accept an ImageVector or a bare array and return the flat values."""
    if isinstance(x, ImageVector):
        return x.values
    return as_data_vector(x, name="image")


class ForwardOperator:
    """Dense N x M matrix with strictly positive entries.

    Caches the column sums (the adjoint applied to the one-vector) and,
    lazily, the elementwise-squared matrix needed by the expected-value
    formulas. Immutable after construction and safe to share across
    concurrent reconstructions.
    """

    def __init__(self, entries):
        entries = np.array(entries, dtype=float)
        if entries.ndim != 2 or entries.size == 0:
            raise ValueError("operator entries must form a nonempty 2-D matrix")
        if not np.all(np.isfinite(entries)):
            raise ValueError("operator entries must be finite")
        if not np.all(entries > 0):
            raise ValueError("every operator entry must be strictly positive")
        entries.flags.writeable = False
        self.entries = entries
        self.n_data, self.n_params = entries.shape
        column_sums = entries.sum(axis=0)
        column_sums.flags.writeable = False
        self.column_sums = column_sums
        self._entries_squared = None
        self._squared_column_sums = None

    @property
    def entries_squared(self) -> np.ndarray:
        if self._entries_squared is None:
            sq = self.entries ** 2
            sq.flags.writeable = False
            self._entries_squared = sq
        return self._entries_squared

    @property
    def squared_column_sums(self) -> np.ndarray:
        """Column sums of the elementwise-squared matrix."""
        if self._squared_column_sums is None:
            s = self.entries_squared.sum(axis=0)
            s.flags.writeable = False
            self._squared_column_sums = s
        return self._squared_column_sums

    def __repr__(self):
        return f"ForwardOperator(n_data={self.n_data}, n_params={self.n_params})"


def apply(op: ForwardOperator, x) -> np.ndarray:
    """Forward action H x."""
    xv = image_values(x)
    if xv.shape[0] != op.n_params:
        raise ValueError(f"image has length {xv.shape[0]}, operator expects {op.n_params}")
    return op.entries @ xv


def adjoint_apply(op: ForwardOperator, v) -> np.ndarray:
    """Adjoint action H^T v."""
    vv = as_data_vector(v, op.n_data, "data vector")
    return op.entries.T @ vv


def squared_adjoint_apply(op: ForwardOperator, v) -> np.ndarray:
    """Action of the elementwise-squared matrix transposed, H2^T v."""
    vv = as_data_vector(v, op.n_data, "data vector")
    return op.entries_squared.T @ vv


def build_dense_positive(n: int, m: int, seed: int, floor: float = 1e-3) -> ForwardOperator:
    """Random dense operator with entries uniform on [floor, 1 + floor].

    Deterministic for a fixed seed; used to generate small test instances.
    """
    if n < 1 or m < 1:
        raise ValueError("operator dimensions must be at least 1")
    if floor <= 0:
        raise ValueError("floor must be strictly positive")
    rng = np.random.default_rng(seed)
    entries = rng.uniform(floor, 1.0 + floor, size=(n, m))
    return ForwardOperator(entries)


def build_blur_operator(
    rows: int,
    cols: int,
    psf_sigma: float,
    floor: float = 1e-6,
    periodic: bool = False,
) -> ForwardOperator:
    """Gaussian blur matrix on a rows x cols pixel grid, N = M = rows * cols.

    Entry (i, j) is exp(-d(i, j)^2 / (2 psf_sigma^2)) + floor where d is the
    pixel distance, so the strict positivity assumption holds for any floor
    > 0. The kernel is truncated at the grid boundary by default; periodic
    wrapping makes all row sums equal (useful as a construction check).
    """
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be at least 1")
    if psf_sigma <= 0:
        raise ValueError("psf_sigma must be strictly positive")
    if floor <= 0:
        raise ValueError("floor must be strictly positive")
    idx = np.arange(rows * cols)
    px_col = (idx % cols).astype(float)
    px_row = (idx // cols).astype(float)
    dc = np.abs(px_col[:, None] - px_col[None, :])
    dr = np.abs(px_row[:, None] - px_row[None, :])
    if periodic:
        dc = np.minimum(dc, cols - dc)
        dr = np.minimum(dr, rows - dr)
    dist_sq = dc ** 2 + dr ** 2
    entries = np.exp(-dist_sq / (2.0 * psf_sigma ** 2)) + floor
    return ForwardOperator(entries)


def save_operator_csv(op: ForwardOperator, path) -> None:
    """Write the operator row-major as CSV with a leading "N,M" line."""
    with open(path, "w", newline="\n") as fh:
        fh.write(f"{op.n_data},{op.n_params}\n")
        for row in op.entries:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def load_operator_csv(path) -> ForwardOperator:
    """Read an operator written by save_operator_csv."""
    with open(path, "r") as fh:
        header = fh.readline().strip()
        try:
            n_str, m_str = header.split(",")
            n, m = int(n_str), int(m_str)
        except ValueError as exc:
            raise ValueError(f"malformed operator header {header!r}, expected 'N,M'") from exc
        rows = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rows.append([float(tok) for tok in line.split(",")])
    entries = np.asarray(rows, dtype=float)
    if entries.ndim != 2 or entries.shape != (n, m):
        got = entries.shape if entries.ndim == 2 else f"{len(rows)} ragged rows"
        raise ValueError(f"operator body has shape {got}, header says ({n}, {m})")
    return ForwardOperator(entries)
