"""Generator-basis arithmetic.

A generator basis is an ordered set of J real d x d matrices.  This
module provides the matrix exponential, exact and first-order group
actions on latent vectors, assembly of the per-pair coefficient matrix
A (column m equals ``G^m z``), the flat d x (dJ) block form used by the
Kronecker normal equations, and the PCA step that replaces a basis by a
minimal Frobenius-orthonormal one after each EM iteration.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian import NumericError

DEFAULT_EXP_TOL = 1e-12
_MAX_SERIES_TERMS = 40


@dataclass(frozen=True)
class GeneratorBasis:
    """Ordered set of square generator matrices, stored as ``(J, d, d)``."""

    generators: np.ndarray

    def __post_init__(self):
        gens = np.asarray(self.generators, dtype=float)
        if gens.ndim == 2:
            gens = gens[None]
        if gens.ndim != 3 or gens.shape[1] != gens.shape[2]:
            raise ValueError("generators must be a (J, d, d) array of square matrices")
        if gens.shape[0] < 1:
            raise ValueError("at least one generator is required")
        if not np.all(np.isfinite(gens)):
            raise NumericError("generators contain non-finite entries")
        gens = gens.copy()
        gens.flags.writeable = False
        object.__setattr__(self, "generators", gens)

    @property
    def count(self) -> int:
        return self.generators.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.generators.shape[1]


def _check_coeffs(basis: GeneratorBasis, coeffs: np.ndarray) -> np.ndarray:
    lam = np.atleast_1d(np.asarray(coeffs, dtype=float))
    if lam.shape != (basis.count,):
        raise ValueError(f"expected {basis.count} coefficients, got shape {lam.shape}")
    if not np.all(np.isfinite(lam)):
        raise NumericError("coefficients contain non-finite entries")
    return lam


def combine(basis: GeneratorBasis, coeffs: np.ndarray) -> np.ndarray:
    """The matrix ``sum_j lambda_j G^j``."""
    lam = _check_coeffs(basis, coeffs)
    return np.einsum("j,jab->ab", lam, basis.generators)


def matrix_exp(m: np.ndarray, tol: float = DEFAULT_EXP_TOL) -> np.ndarray:
    """Matrix exponential by scaling and squaring.

    The input is scaled by ``2^-s`` until its Frobenius norm is at most
    0.5, expanded in a truncated power series (terms are added until the
    next term falls below ``tol / 4``; 13 terms at the default
    tolerance), then squared ``s`` times.
    """
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix_exp requires a square matrix")
    if not np.all(np.isfinite(a)):
        raise NumericError("matrix_exp input has non-finite entries")
    norm = float(np.linalg.norm(a))
    squarings = 0
    if norm > 0.5:
        squarings = int(np.ceil(np.log2(norm / 0.5)))
        a = a / (2.0 ** squarings)
    n = a.shape[0]
    term = np.eye(n)
    acc = np.eye(n)
    for k in range(1, _MAX_SERIES_TERMS + 1):
        term = term @ a / k
        acc = acc + term
        if np.linalg.norm(term) <= 0.25 * tol:
            break
    for _ in range(squarings):
        acc = acc @ acc
    return acc


def apply_first_order(basis: GeneratorBasis, coeffs: np.ndarray,
                      z: np.ndarray) -> np.ndarray:
    """``z + sum_j lambda_j G^j z`` (small-transformation approximation)."""
    lam = _check_coeffs(basis, coeffs)
    vec = np.atleast_1d(np.asarray(z, dtype=float))
    if vec.shape != (basis.latent_dim,):
        raise ValueError("vector dimension does not match the basis")
    return vec + np.einsum("j,jab,b->a", lam, basis.generators, vec)


def apply_exact(basis: GeneratorBasis, coeffs: np.ndarray, z: np.ndarray,
                tol: float = DEFAULT_EXP_TOL) -> np.ndarray:
    """``exp(sum_j lambda_j G^j) z``."""
    vec = np.atleast_1d(np.asarray(z, dtype=float))
    if vec.shape != (basis.latent_dim,):
        raise ValueError("vector dimension does not match the basis")
    return matrix_exp(combine(basis, coeffs), tol=tol) @ vec


def assemble_A(basis: GeneratorBasis, z: np.ndarray) -> np.ndarray:
    """The d x J matrix whose column m is ``G^m z``, so ``A lam`` is the
    combined action ``sum_j lam_j G^j z``."""
    vec = np.atleast_1d(np.asarray(z, dtype=float))
    if vec.shape != (basis.latent_dim,):
        raise ValueError("vector dimension does not match the basis")
    return np.einsum("jab,b->aj", basis.generators, vec)


def block_flatten(basis: GeneratorBasis) -> np.ndarray:
    """Flatten to the d x (dJ) block matrix F with ``F (z kron lam) =
    sum_j lam_j G^j z`` (column ``a*J + j`` holds column a of ``G^j``)."""
    d, j = basis.latent_dim, basis.count
    return basis.generators.transpose(1, 2, 0).reshape(d, d * j)


def block_unflatten(m: np.ndarray, d: int, count: int) -> GeneratorBasis:
    """Inverse of :func:`block_flatten`."""
    flat = np.asarray(m, dtype=float)
    if flat.shape != (d, d * count):
        raise ValueError(f"expected shape {(d, d * count)}, got {flat.shape}")
    return GeneratorBasis(flat.reshape(d, d, count).transpose(2, 0, 1))


def _fix_signs(rows: np.ndarray) -> np.ndarray:
    """Deterministic sign convention: first entry of each row whose
    magnitude exceeds 1e-12 of the row peak is made positive."""
    out = rows.copy()
    for i, row in enumerate(out):
        peak = np.abs(row).max()
        if peak == 0.0:
            continue
        lead = row[np.abs(row) > 1e-12 * peak][0]
        if lead < 0:
            out[i] = -row
    return out


def orthogonalize(basis: GeneratorBasis,
                  variance_threshold: float = 0.99) -> GeneratorBasis:
    """Minimal Frobenius-orthonormal basis spanning the dominant variance.

    Each generator is vectorized to a d^2 vector; an (uncentered) PCA of
    the J vectors retains the smallest number of principal components
    whose variance share reaches ``variance_threshold``.  Components are
    ordered by decreasing singular value with a fixed sign convention.
    The output span is contained in the input span.
    """
    if not 0.0 < variance_threshold <= 1.0:
        raise ValueError("variance_threshold must lie in (0, 1]")
    d, j = basis.latent_dim, basis.count
    flat = basis.generators.reshape(j, d * d)
    if not np.any(flat):
        raise NumericError("cannot orthogonalize an all-zero basis")
    _, svals, vt = np.linalg.svd(flat, full_matrices=False)
    energy = np.cumsum(svals ** 2)
    total = energy[-1]
    kept = int(np.searchsorted(energy, variance_threshold * total * (1.0 - 1e-12)) + 1)
    kept = min(kept, j)
    if kept == j and np.allclose(flat @ flat.T, np.eye(j), atol=1e-12):
        # already orthonormal and nothing to drop: the PCA basis is
        # underdetermined (all singular values equal), keep the input
        components = flat
    else:
        components = vt[:kept]
    return GeneratorBasis(_fix_signs(components).reshape(-1, d, d))
