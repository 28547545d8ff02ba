"""Brute-force numerical ground truth for tests and calibration.

Tensor-grid trapezoid quadrature, self-normalized importance sampling
and central finite differences.  These are reference implementations:
slow, dimension-limited (grids up to 6 dims) and deliberately
independent of the closed-form code they validate.  The command-line
tool never imports this module.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import rng
from .gaussian import Gaussian, NumericError, spd_cholesky

MAX_GRID_DIMS = 6
MIN_POINTS = 16
BOUNDARY_LIMIT = 1e-8


class BoxTooSmallError(NumericError):
    """Integration box carries non-negligible boundary mass."""


class EssTooLowError(NumericError):
    """Importance sampling collapsed onto too few effective samples."""


@dataclass(frozen=True)
class GridSpec:
    """Tensor-product grid: per-dimension bounds and point counts."""

    lo: np.ndarray
    hi: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        pts = np.atleast_1d(np.asarray(self.points, dtype=int))
        if not (lo.shape == hi.shape == pts.shape):
            raise ValueError("lo, hi and points must have matching lengths")
        if lo.size > MAX_GRID_DIMS:
            raise ValueError(f"grids are limited to {MAX_GRID_DIMS} dimensions")
        if np.any(pts < MIN_POINTS):
            raise ValueError(f"at least {MIN_POINTS} points per dimension required")
        if np.any(hi <= lo):
            raise ValueError("box must have positive extent in every dimension")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "points", pts)

    @classmethod
    def cube(cls, lo: float, hi: float, points: int, dims: int) -> "GridSpec":
        return cls(np.full(dims, lo), np.full(dims, hi), np.full(dims, points))

    @property
    def dims(self) -> int:
        return self.lo.size

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(l, h, p) for l, h, p in zip(self.lo, self.hi, self.points)]

    def nodes_weights(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flattened nodes ``(m, dims)``, trapezoid weights ``(m,)`` and a
        boolean mask marking nodes on the box boundary."""
        axes = self.axes()
        mesh = np.meshgrid(*axes, indexing="ij")
        nodes = np.stack([g.ravel() for g in mesh], axis=-1)
        weights = np.ones(1)
        boundary = np.zeros(1, dtype=bool)
        for ax in axes:
            w = np.full(ax.size, ax[1] - ax[0])
            w[0] *= 0.5
            w[-1] *= 0.5
            edge = np.zeros(ax.size, dtype=bool)
            edge[0] = edge[-1] = True
            weights = np.multiply.outer(weights, w).ravel()
            boundary = np.logical_or.outer(boundary, edge).ravel()
        return nodes, weights, boundary


@dataclass(frozen=True)
class GridPosterior:
    """Normalized density values on a grid, ready for taking expectations."""

    nodes: np.ndarray
    probs: np.ndarray          # trapezoid-weighted, sums to 1
    log_norm: float            # log of the integral of the unnormalized density
    boundary_ratio: float

    def expect(self, values: np.ndarray) -> np.ndarray:
        """E[f] for per-node values of shape ``(m, ...)``."""
        return np.tensordot(self.probs, values, axes=(0, 0))


def grid_posterior(log_density, grid: GridSpec) -> GridPosterior:
    """Normalize ``exp(log_density)`` on the grid.

    ``log_density`` must accept an ``(m, dims)`` array of points and
    return ``(m,)`` log values.  Raises :class:`BoxTooSmallError` when
    the density on the box faces exceeds ``1e-8`` of the peak.
    """
    nodes, weights, boundary = grid.nodes_weights()
    logf = np.asarray(log_density(nodes), dtype=float)
    if logf.shape != (nodes.shape[0],):
        raise ValueError("log_density must return one value per node")
    peak = logf.max()
    if not np.isfinite(peak):
        raise NumericError("log density is non-finite on the grid")
    boundary_ratio = float(np.exp(logf[boundary].max() - peak)) if boundary.any() else 0.0
    if boundary_ratio > BOUNDARY_LIMIT:
        raise BoxTooSmallError(
            f"boundary density is {boundary_ratio:.3e} of the peak; enlarge the box")
    f = weights * np.exp(logf - peak)
    total = f.sum()
    return GridPosterior(nodes, f / total, float(peak + np.log(total)), boundary_ratio)


def quadrature_moments(log_density, grid: GridSpec):
    """Normalizer, mean and second-moment matrix of a density on a grid.

    Returns ``(log_norm, mean, second_moment, boundary_ratio)`` where
    ``second_moment = E[x x^T]``.
    """
    post = grid_posterior(log_density, grid)
    mean = post.expect(post.nodes)
    second = np.einsum("m,ma,mb->ab", post.probs, post.nodes, post.nodes)
    return post.log_norm, mean, second, post.boundary_ratio


def quadrature_expectation(log_density, grid: GridSpec, func) -> np.ndarray:
    """E[func(x)] under the normalized density; ``func`` maps ``(m, dims)``
    node arrays to per-node values ``(m, ...)``."""
    post = grid_posterior(log_density, grid)
    return post.expect(np.asarray(func(post.nodes), dtype=float))


@dataclass(frozen=True)
class McMoments:
    mean: np.ndarray
    second_moment: np.ndarray
    ess: float
    log_norm: float


def mc_moments(log_unnormalized, proposal: Gaussian, samples: int,
               seed: int, ess_floor: float = 0.01) -> McMoments:
    """Self-normalized importance-sampling moments with an ESS diagnostic.

    Draws from ``proposal`` using the library's counter-based streams,
    weights by ``exp(log_unnormalized - log_proposal)`` and raises
    :class:`EssTooLowError` if the effective sample size drops below
    ``ess_floor * samples``.
    """
    dim = proposal.dim
    eps = rng.normals(seed, (0x4D43,), samples * dim).reshape(samples, dim)
    chol = spd_cholesky(proposal.cov)
    draws = proposal.mean + eps @ chol.T
    white = solve_triangular(chol, (draws - proposal.mean).T, lower=True)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    log_q = -0.5 * (dim * np.log(2.0 * np.pi) + log_det + np.sum(white * white, axis=0))
    log_w = np.asarray(log_unnormalized(draws), dtype=float) - log_q
    shift = log_w.max()
    w = np.exp(log_w - shift)
    total = w.sum()
    probs = w / total
    ess = float(1.0 / np.sum(probs ** 2))
    if ess < ess_floor * samples:
        raise EssTooLowError(f"effective sample size {ess:.1f} of {samples}")
    mean = probs @ draws
    second = np.einsum("m,ma,mb->ab", probs, draws, draws)
    return McMoments(mean, second, ess, float(shift + np.log(total / samples)))


def finite_difference_gradient(f, point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector."""
    x = np.asarray(point, dtype=float)
    grad = np.zeros_like(x)
    for k in range(x.size):
        step = np.zeros_like(x)
        step.flat[k] = h
        hi = f(x + step)
        lo = f(x - step)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError("function is non-finite at a finite-difference stencil point")
        grad.flat[k] = (hi - lo) / (2.0 * h)
    return grad
