"""Small dense covariance algebra and the Cholesky covariance parameterization.

Functions accept either plain arrays or :class:`~dmuq.autodiff.Tensor` values and
return the same kind. Leading axes are batch axes; the last one or two axes
hold the vector or matrix.

Raw Cholesky parameters are laid out as ``D`` raw diagonal entries followed by
the strict lower triangle in row-major order, so for ``D = 2`` the vector is
``(d1, d2, l21)``.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, make, matmul, swap_last
from .errors import InvalidParameterError, NonPSDError, SingularMatrixError, UsageError

RAW_DIAG_BOUND = 10.0
SINGULAR_DET = 1e-15


def n_chol_params(dim: int) -> int:
    return dim * (dim + 1) // 2


def chol_dim(n_params: int) -> int:
    dim = int(round((np.sqrt(8 * n_params + 1) - 1) / 2))
    if n_chol_params(dim) != n_params:
        raise UsageError(f"{n_params} is not a triangular number of Cholesky parameters")
    return dim


def strict_lower_indices(dim: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.tril_indices(dim, k=-1)
    return rows, cols


def _returns_like(x, out: Tensor):
    return out if isinstance(x, Tensor) else out.data


def chol_factor(raw) -> Tensor:
    """Lower-triangular factor with ``L[d, d] = exp(clip(raw_d, -10, 10))``."""
    raw = as_tensor(raw)
    if not np.all(np.isfinite(raw.data)):
        raise InvalidParameterError("Cholesky parameters must be finite")
    dim = chol_dim(raw.shape[-1])
    rows, cols = strict_lower_indices(dim)
    diag_idx = np.arange(dim)
    raw_diag = raw.data[..., :dim]
    inside = (raw_diag >= -RAW_DIAG_BOUND) & (raw_diag <= RAW_DIAG_BOUND)
    diag = np.exp(np.clip(raw_diag, -RAW_DIAG_BOUND, RAW_DIAG_BOUND))
    factor = np.zeros(raw.shape[:-1] + (dim, dim))
    factor[..., diag_idx, diag_idx] = diag
    factor[..., rows, cols] = raw.data[..., dim:]

    def backward(g):
        graw = np.empty_like(raw.data)
        graw[..., :dim] = g[..., diag_idx, diag_idx] * diag * inside
        graw[..., dim:] = g[..., rows, cols]
        return (graw,)

    return make(factor, (raw,), backward, "chol_factor")


def cholesky_reconstruct(raw):
    """Symmetric positive-definite ``L @ L.T`` from unconstrained parameters."""
    factor = chol_factor(raw)
    return _returns_like(raw, matmul(factor, swap_last(factor)))


def _det(mat: np.ndarray) -> np.ndarray:
    if mat.shape[-1] == 2:
        return mat[..., 0, 0] * mat[..., 1, 1] - mat[..., 0, 1] * mat[..., 1, 0]
    return np.linalg.det(mat)


def _inv(mat: np.ndarray) -> np.ndarray:
    if mat.shape[-1] == 2:
        det = _det(mat)
        out = np.empty_like(mat)
        out[..., 0, 0] = mat[..., 1, 1]
        out[..., 1, 1] = mat[..., 0, 0]
        out[..., 0, 1] = -mat[..., 0, 1]
        out[..., 1, 0] = -mat[..., 1, 0]
        return out / det[..., None, None]
    return np.linalg.inv(mat)


def _check_square(mat: np.ndarray) -> None:
    if mat.ndim < 2 or mat.shape[-1] != mat.shape[-2]:
        raise UsageError(f"expected square matrices, got shape {mat.shape}")


def logdet(sigma):
    """Natural log of the determinant of positive-definite matrices."""
    s = as_tensor(sigma)
    _check_square(s.data)
    if s.shape[-1] == 2:
        det = _det(s.data)
        if np.any(~(det > 0)):
            raise NonPSDError("determinant must be positive")
        value = np.log(det)
    else:
        sign, value = np.linalg.slogdet(s.data)
        if np.any(sign <= 0):
            raise NonPSDError("determinant must be positive")
    inv = None

    def backward(g):
        nonlocal inv
        if inv is None:
            inv = _inv(s.data)
        return (np.asarray(g)[..., None, None] * np.swapaxes(inv, -1, -2),)

    return _returns_like(sigma, make(np.asarray(value), (s,), backward, "logdet"))


def mat_inverse(sigma):
    """Inverse of positive-definite matrices; near-singular input is rejected."""
    s = as_tensor(sigma)
    _check_square(s.data)
    det = _det(s.data)
    if np.any(~(np.abs(det) >= SINGULAR_DET)):
        raise SingularMatrixError(f"matrix is singular to working precision (det={np.min(np.abs(det)):.3g})")
    inv = _inv(s.data)

    def backward(g):
        inv_t = np.swapaxes(inv, -1, -2)
        return (-(inv_t @ g @ inv_t),)

    return _returns_like(sigma, make(inv, (s,), backward, "inverse"))


def tri_solve(factor, rhs):
    """Solve ``L z = b`` for lower-triangular ``L``; entries above the diagonal are ignored."""
    L, b = as_tensor(factor), as_tensor(rhs)
    _check_square(L.data)
    if b.shape[-1] != L.shape[-1]:
        raise UsageError(f"rhs dimension {b.shape[-1]} does not match factor {L.shape[-1]}")
    Lt = np.tril(L.data)
    z = np.linalg.solve(Lt, b.data[..., None])[..., 0]

    def backward(g):
        gb = np.linalg.solve(np.swapaxes(Lt, -1, -2), g[..., None])[..., 0]
        gL = -np.tril(gb[..., :, None] * z[..., None, :])
        return gL, gb

    out = make(z, (L, b), backward, "tri_solve")
    return out if isinstance(factor, Tensor) or isinstance(rhs, Tensor) else out.data


def is_psd(mat: np.ndarray, tol: float = 0.0) -> bool:
    mat = np.asarray(mat, dtype=np.float64)
    if not np.all(np.isfinite(mat)):
        return False
    if not np.allclose(mat, np.swapaxes(mat, -1, -2), rtol=0.0, atol=1e-12 * max(1.0, np.abs(mat).max())):
        return False
    return bool(np.all(np.linalg.eigvalsh(mat) >= -tol))


def eig2_closed_form(mat: np.ndarray) -> np.ndarray:
    """Eigenvalues of symmetric 2x2 matrices, ascending."""
    a, b, d = mat[..., 0, 0], mat[..., 0, 1], mat[..., 1, 1]
    half_trace = 0.5 * (a + d)
    radius = np.sqrt(0.25 * (a - d) ** 2 + b * b)
    return np.stack([half_trace - radius, half_trace + radius], axis=-1)
