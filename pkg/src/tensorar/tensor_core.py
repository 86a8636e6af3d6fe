"""Dense tensor algebra: matricizations, mode products and Tucker/HOSVD.

Tensors are float64 numpy arrays. The canonical vectorization runs the first
index fastest, so ``vec(t)`` is ``t.reshape(-1, order="F")`` and every
matricization is built as a transpose followed by a column-major reshape.
Modes are 0-based throughout.
"""

import logging
import math
from functools import reduce
from typing import Iterable, Optional, Sequence

import numpy as np

from .models import DimensionError, InvalidArgument, MatricizationMap, TuckerDecomposition

logger = logging.getLogger(__name__)

# Entries below this magnitude are skipped when fixing singular vector signs.
SIGN_TOL = 1e-8
# Default relative tolerance of multilinear rank detection.
RANK_TOL = 1e-8


def as_tensor(value: Iterable | np.ndarray | float) -> np.ndarray:
    """Convert to a float64 array (no copy when already float64)."""
    return np.asarray(value, dtype=float)


def vec(t: np.ndarray) -> np.ndarray:
    """Canonical vectorization (first index fastest)."""
    return np.asarray(t).reshape(-1, order="F")


def unvec(v: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`vec` for the given dimension list."""
    v = np.asarray(v, dtype=float)
    if v.size != math.prod(dims):
        raise DimensionError(f"cannot fold {v.size} values into dims {tuple(dims)}")
    return v.reshape(tuple(dims), order="F")


def unvec_rows(rows: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Fold each row of a (T, p) matrix into a tensor, stacked on axis 0."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[1] != math.prod(dims):
        raise DimensionError(f"rows of shape {rows.shape} do not fold into dims {tuple(dims)}")
    folded = rows.T.reshape(tuple(dims) + (rows.shape[0],), order="F")
    return np.moveaxis(folded, -1, 0)


def matricization_map(dims: Sequence[int], row_modes: Iterable[int]) -> MatricizationMap:
    """Validate a mode subset and return the matricization layout.

    Args:
        dims: Tensor dimensions.
        row_modes: Modes collapsed into rows. Order is irrelevant; modes are
            collapsed following their original order.

    Returns:
        MatricizationMap with row and column modes in increasing order.

    Raises:
        DimensionError: If a mode is out of range or repeated.
    """
    dims = tuple(int(p) for p in dims)
    modes = [int(k) for k in row_modes]
    if len(set(modes)) != len(modes):
        raise DimensionError(f"duplicate mode in {modes}")
    for k in modes:
        if not 0 <= k < len(dims):
            raise DimensionError(f"mode {k} out of range for order {len(dims)}")
    rows = tuple(sorted(modes))
    cols = tuple(k for k in range(len(dims)) if k not in rows)
    return MatricizationMap(
        tensor_dims=dims,
        row_modes=rows,
        col_modes=cols,
        row_dim=math.prod(dims[k] for k in rows),
        col_dim=math.prod(dims[k] for k in cols),
    )


def matricize(t: np.ndarray, row_modes: Iterable[int]) -> np.ndarray:
    """Multi-mode matricization ``t_[S]``.

    The empty set gives the 1 x N row ``vec(t)^T``.
    """
    t = as_tensor(t)
    layout = matricization_map(t.shape, row_modes)
    return np.transpose(t, layout.permutation).reshape(
        (layout.row_dim, layout.col_dim), order="F"
    )


def dematricize(m: np.ndarray, dims: Sequence[int], row_modes: Iterable[int]) -> np.ndarray:
    """Fold a matricization back into a tensor with the given dimensions.

    Raises:
        DimensionError: If ``m`` does not have the matricization's shape.
    """
    m = as_tensor(m)
    layout = matricization_map(dims, row_modes)
    if m.shape != (layout.row_dim, layout.col_dim):
        raise DimensionError(
            f"matrix shape {m.shape} does not match "
            f"({layout.row_dim}, {layout.col_dim}) for dims {layout.tensor_dims}"
        )
    permuted = m.reshape(
        tuple(layout.tensor_dims[k] for k in layout.permutation), order="F"
    )
    return np.transpose(permuted, np.argsort(layout.permutation))


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """One-mode matricization ``t_(k)``."""
    return matricize(t, (mode,))


def mode_product(t: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """Mode-k product ``t x_k m`` for an m of shape (q_k, p_k).

    Raises:
        DimensionError: If the column count of ``m`` differs from ``dims[k]``.
    """
    t = as_tensor(t)
    m = as_tensor(m)
    if not 0 <= mode < t.ndim:
        raise DimensionError(f"mode {mode} out of range for order {t.ndim}")
    if m.ndim != 2 or m.shape[1] != t.shape[mode]:
        raise DimensionError(
            f"matrix of shape {m.shape} cannot act on mode {mode} of size {t.shape[mode]}"
        )
    return np.moveaxis(np.tensordot(m, t, axes=(1, mode)), 0, mode)


def multi_mode_product(
    t: np.ndarray,
    matrices: Sequence[np.ndarray],
    modes: Optional[Sequence[int]] = None,
    transpose: bool = False,
) -> np.ndarray:
    """Apply ``t x_{k} M_k`` for every given mode.

    Args:
        t: Input tensor.
        matrices: One matrix per mode in ``modes``.
        modes: Target modes, defaults to ``0..len(matrices)-1``.
        transpose: Multiply by ``M_k^T`` instead.
    """
    if modes is None:
        modes = range(len(matrices))
    result = as_tensor(t)
    for k, m in zip(modes, matrices, strict=True):
        result = mode_product(result, m.T if transpose else m, k)
    return result


def generalized_inner(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Generalized inner product contracting the leading modes of x with y.

    Returns a tensor of order ``x.ndim - y.ndim`` (a 0-d array if equal).

    Raises:
        DimensionError: If the leading dimensions of x differ from y's.
    """
    x = as_tensor(x)
    y = as_tensor(y)
    m = y.ndim
    if m > x.ndim or x.shape[:m] != y.shape:
        raise DimensionError(
            f"leading dims {x.shape[:m]} of x do not match dims {y.shape} of y"
        )
    return np.asarray(np.tensordot(x, y, axes=(list(range(m)), list(range(m)))))


def outer_product(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Tensor outer product of order ``ord(x) + ord(y)``."""
    return np.multiply.outer(as_tensor(x), as_tensor(y))


def kron_reverse(matrices: Sequence[np.ndarray]) -> np.ndarray:
    """Kronecker product taken in reverse order: ``M_last (x) ... (x) M_first``.

    This is the convention under which the first listed mode varies fastest,
    matching :func:`vec` and :func:`matricize`.
    """
    if not matrices:
        return np.ones((1, 1))
    return reduce(np.kron, [as_tensor(m) for m in reversed(matrices)])


def sign_normalize(u: np.ndarray) -> np.ndarray:
    """Flip columns so the first non-negligible entry of each is positive."""
    u = np.array(u, dtype=float)
    for j in range(u.shape[1]):
        column = u[:, j]
        nonzero = np.flatnonzero(np.abs(column) > SIGN_TOL)
        if nonzero.size and column[nonzero[0]] < 0:
            u[:, j] = -column
    return u


def leading_left_singular_vectors(m: np.ndarray, r: int) -> np.ndarray:
    """Top-r left singular vectors of m, sign-normalized."""
    u, _, _ = np.linalg.svd(as_tensor(m), full_matrices=False)
    return sign_normalize(u[:, :r])


def hosvd(t: np.ndarray, ranks: Sequence[int]) -> TuckerDecomposition:
    """Truncated higher-order SVD.

    Each factor holds the top ``r_i`` left singular vectors of the mode-i
    unfolding and the core is ``t x_i U_i^T`` for all modes.

    Raises:
        DimensionError: If the rank list does not fit the tensor.
    """
    t = as_tensor(t)
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != t.ndim:
        raise DimensionError(f"expected {t.ndim} ranks, got {len(ranks)}")
    for i, (r, p) in enumerate(zip(ranks, t.shape)):
        if not 1 <= r <= p:
            raise DimensionError(f"rank {r} of mode {i} must lie in [1, {p}]")
    factors = tuple(leading_left_singular_vectors(unfold(t, i), r) for i, r in enumerate(ranks))
    core = multi_mode_product(t, factors, transpose=True)
    return TuckerDecomposition(core=core, factors=factors)


def tucker_to_tensor(tucker: TuckerDecomposition) -> np.ndarray:
    """Reconstruct ``core x_1 U_1 ... x_d U_d``."""
    return multi_mode_product(tucker.core, tucker.factors)


def multilinear_ranks(t: np.ndarray, tol: float = RANK_TOL) -> tuple[int, ...]:
    """Matrix ranks of the one-mode unfoldings relative to the largest singular value.

    Raises:
        InvalidArgument: If tol is negative.
    """
    if tol < 0:
        raise InvalidArgument("tol must be nonnegative")
    t = as_tensor(t)
    ranks = []
    for i in range(t.ndim):
        sigma = np.linalg.svd(unfold(t, i), compute_uv=False)
        if sigma.size == 0 or sigma[0] == 0:
            ranks.append(0)
        else:
            ranks.append(int(np.sum(sigma > tol * sigma[0])))
    return tuple(ranks)


def soft_threshold_svd(m: np.ndarray, tau: float) -> np.ndarray:
    """Proximal map of ``tau * ||.||_*``: shrink singular values by tau.

    Raises:
        InvalidArgument: If tau is negative.
    """
    if tau < 0:
        raise InvalidArgument("tau must be nonnegative")
    m = as_tensor(m)
    if tau == 0:
        return m.copy()
    u, sigma, vt = np.linalg.svd(m, full_matrices=False)
    shrunk = np.maximum(sigma - tau, 0.0)
    keep = shrunk > 0
    return (u[:, keep] * shrunk[keep]) @ vt[keep]


def nuclear_norm(m: np.ndarray) -> float:
    return float(np.linalg.svd(as_tensor(m), compute_uv=False).sum())


def operator_norm(m: np.ndarray) -> float:
    return float(np.linalg.norm(as_tensor(m), 2))


def matricization_permutation(
    dims: Sequence[int], from_modes: Iterable[int], to_modes: Iterable[int]
) -> np.ndarray:
    """Index array taking one vectorized matricization to another.

    For any tensor ``t`` with these dims,
    ``vec(matricize(t, to_modes)) == vec(matricize(t, from_modes))[perm]``.
    Stands in for the dense permutation matrices of the Jacobian algebra.
    """
    dims = tuple(int(p) for p in dims)
    labels = np.arange(math.prod(dims), dtype=float).reshape(dims, order="F")
    source = vec(matricize(labels, from_modes)).astype(np.int64)
    target = vec(matricize(labels, to_modes)).astype(np.int64)
    return np.argsort(source)[target]
