"""Dense complex linear algebra for channel simulation and zero-forcing.

Matrices are ``complex128`` numpy arrays. Every function accepts either a
single matrix ``(rows, cols)`` or a stack ``(..., rows, cols)`` and works
on the trailing two axes.
"""

from __future__ import annotations

import numpy as np

# Cholesky pivot threshold, relative to the largest Gram diagonal entry.
SINGULAR_RTOL = 1e-12


class SingularMatrixError(np.linalg.LinAlgError):
    """Gram matrix is numerically rank deficient."""

    def __init__(self, pivot: int, magnitude: float, scale: float):
        super().__init__(
            f"singular Gram matrix: pivot {pivot} has magnitude {magnitude:.3e} "
            f"(threshold {SINGULAR_RTOL:.0e} x {scale:.3e})"
        )
        self.pivot = pivot


def as_complex_matrix(a) -> np.ndarray:
    """Coerce to a finite complex128 array with at least two dimensions."""
    m = np.asarray(a, dtype=np.complex128)
    if m.ndim < 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def hermitian(a) -> np.ndarray:
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(as_complex_matrix(a), -1, -2))


def matmul(a, b) -> np.ndarray:
    a, b = as_complex_matrix(a), as_complex_matrix(b)
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"cannot multiply {a.shape[-2:]} by {b.shape[-2:]}: inner dimensions differ")
    return a @ b


def frobenius_norm_sq(a) -> np.ndarray | float:
    """Sum of squared magnitudes over the last two axes."""
    a = as_complex_matrix(a)
    out = np.sum(a.real**2 + a.imag**2, axis=(-2, -1))
    return float(out) if out.ndim == 0 else out


def cholesky(gram: np.ndarray) -> np.ndarray:
    """Lower-triangular factor of a Hermitian positive-definite (stack of) matrix.

    Raises ``SingularMatrixError`` naming the first pivot that falls below
    ``SINGULAR_RTOL`` times the largest diagonal magnitude.
    """
    g = np.asarray(gram, dtype=np.complex128)
    n = g.shape[-1]
    scale = np.max(np.abs(np.diagonal(g, axis1=-2, axis2=-1)), axis=-1)
    low = np.zeros_like(g)
    for j in range(n):
        d = g[..., j, j].real - np.sum(np.abs(low[..., j, :j]) ** 2, axis=-1)
        bad = ~(d > SINGULAR_RTOL * scale)
        if np.any(bad):
            idx = np.argmax(np.atleast_1d(bad))
            raise SingularMatrixError(j, float(np.atleast_1d(d)[idx]), float(np.atleast_1d(scale)[idx]))
        ljj = np.sqrt(d)
        low[..., j, j] = ljj
        if j + 1 < n:
            s = g[..., j + 1 :, j] - np.einsum("...ik,...k->...i", low[..., j + 1 :, :j], np.conj(low[..., j, :j]))
            low[..., j + 1 :, j] = s / ljj[..., None]
    return low


def _forward_sub(low: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = low.shape[-1]
    x = np.zeros_like(b)
    for i in range(n):
        acc = b[..., i, :] - np.einsum("...k,...kc->...c", low[..., i, :i], x[..., :i, :])
        x[..., i, :] = acc / low[..., i, i][..., None]
    return x


def _back_sub_hermitian(low: np.ndarray, b: np.ndarray) -> np.ndarray:
    # solves L^H x = b
    up = np.conj(np.swapaxes(low, -1, -2))
    n = up.shape[-1]
    x = np.zeros_like(b)
    for i in range(n - 1, -1, -1):
        acc = b[..., i, :] - np.einsum("...k,...kc->...c", up[..., i, i + 1 :], x[..., i + 1 :, :])
        x[..., i, :] = acc / up[..., i, i][..., None]
    return x


def solve_least_squares(h, y) -> np.ndarray:
    """Zero-forcing estimate ``(H^H H)^{-1} H^H Y`` via a Cholesky solve.

    ``h`` is ``(..., M, N)`` with ``M >= N`` and full column rank, ``y`` is
    ``(..., M, K)``. Leading axes broadcast.
    """
    h, y = as_complex_matrix(h), as_complex_matrix(y)
    m, n = h.shape[-2:]
    if m < n:
        raise ValueError(f"need at least as many rows as columns, got {m}x{n}")
    if y.shape[-2] != m:
        raise ValueError(f"channel has {m} rows but observation has {y.shape[-2]}")
    hh = np.conj(np.swapaxes(h, -1, -2))
    gram = hh @ h
    rhs = hh @ y
    low = cholesky(gram)
    batch = np.broadcast_shapes(low.shape[:-2], rhs.shape[:-2])
    low = np.broadcast_to(low, batch + low.shape[-2:])
    rhs = np.broadcast_to(rhs, batch + rhs.shape[-2:])
    return _back_sub_hermitian(low, _forward_sub(low, rhs))


def crandn(rng: np.random.Generator, shape, variance: float = 1.0) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples, ``variance`` per entry."""
    s = np.sqrt(variance / 2.0)
    return s * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


__all__ = [
    "SingularMatrixError", "SINGULAR_RTOL", "as_complex_matrix", "hermitian", "matmul",
    "frobenius_norm_sq", "cholesky", "solve_least_squares", "crandn",
]
