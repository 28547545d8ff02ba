"""EM for transition dynamics over given latent representations.

Each data pair ``(z_i, z_next)`` is modelled as
``z_next = z_i + sum_j lambda_j G^j z_i + noise`` with Gaussian
coefficients ``lambda ~ N(0, Lambda)`` and transition noise
``N(0, Omega)``.  The E-step is the exact Gaussian posterior of the
coefficients per pair; the M-step solves the Kronecker normal equations
for the flattened generator block and refreshes the noise covariance.
Each iteration may be followed by a PCA orthogonalization of the
generator basis.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import liealg
from . import rng
from .gaussian import (
    Gaussian,
    LinearGaussianMap,
    NumericError,
    default_jitter,
    posterior,
    spd_cholesky,
    spd_solve,
    symmetrize,
)
from .liealg import GeneratorBasis


@dataclass(frozen=True)
class DynamicsModel:
    """Transition parameters: generator basis, noise covariance Omega and
    coefficient prior covariance Lambda."""

    basis: GeneratorBasis
    trans_cov: np.ndarray
    coeff_prior_cov: np.ndarray

    def __post_init__(self):
        omega = np.atleast_2d(np.asarray(self.trans_cov, dtype=float))
        lam_cov = np.atleast_2d(np.asarray(self.coeff_prior_cov, dtype=float))
        d, j = self.basis.latent_dim, self.basis.count
        if omega.shape != (d, d):
            raise ValueError("transition covariance dimension must match the basis")
        if lam_cov.shape != (j, j):
            raise ValueError("coefficient prior dimension must match the generator count")
        spd_cholesky(omega)
        spd_cholesky(lam_cov)
        object.__setattr__(self, "trans_cov", symmetrize(omega))
        object.__setattr__(self, "coeff_prior_cov", symmetrize(lam_cov))

    @property
    def latent_dim(self) -> int:
        return self.basis.latent_dim

    @property
    def coeff_count(self) -> int:
        return self.basis.count


@dataclass(frozen=True)
class PairDataset:
    """N aligned pairs of consecutive latent representations."""

    z_i: np.ndarray
    z_next: np.ndarray

    def __post_init__(self):
        zi = np.atleast_2d(np.asarray(self.z_i, dtype=float))
        zn = np.atleast_2d(np.asarray(self.z_next, dtype=float))
        if zi.shape != zn.shape or zi.ndim != 2 or zi.shape[0] < 1:
            raise ValueError("z_i and z_next must be matching (N, d) arrays with N >= 1")
        object.__setattr__(self, "z_i", zi)
        object.__setattr__(self, "z_next", zn)

    @property
    def count(self) -> int:
        return self.z_i.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.z_i.shape[1]

    @property
    def delta(self) -> np.ndarray:
        return self.z_next - self.z_i

    def pairs(self):
        return zip(self.z_i, self.z_next)


@dataclass(frozen=True)
class CoeffPosterior:
    """Gaussian posterior of the combination coefficients for one pair."""

    mean: np.ndarray
    cov: np.ndarray


@dataclass
class EmConfig:
    j_init: int = 1
    max_iters: int = 500
    tol: float = 1e-8
    orth_threshold: float = 0.99
    seed: int = 0
    estimate_lambda: bool = False
    orthogonalize: bool = True
    jitter_scale: float = 1e-9
    threads: int = 1


def e_step_lambda(model: DynamicsModel, z_i: np.ndarray,
                  z_next: np.ndarray) -> CoeffPosterior:
    """Exact coefficient posterior ``N(q, K)`` for one pair.

    This is the linear-Gaussian posterior with prior ``N(0, Lambda)``
    and observation ``delta_z = A lambda + noise``; it is delegated to
    the Gaussian core so the two stay consistent by construction.
    """
    zi = np.asarray(z_i, dtype=float)
    zn = np.asarray(z_next, dtype=float)
    a = liealg.assemble_A(model.basis, zi)
    prior = Gaussian(np.zeros(model.coeff_count), model.coeff_prior_cov)
    lin = LinearGaussianMap(a, np.zeros(model.latent_dim), model.trans_cov)
    post = posterior(prior, lin, zn - zi)
    return CoeffPosterior(post.mean, post.cov)


def _posterior_stack(posteriors) -> tuple[np.ndarray, np.ndarray]:
    q = np.stack([p.mean for p in posteriors])
    k = np.stack([p.cov for p in posteriors])
    return q, k


def _e_step_block(model: DynamicsModel, z_i: np.ndarray,
                  delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized coefficient posteriors for a block of pairs.

    Returns stacked means ``(N, J)`` and covariances ``(N, J, J)``.
    """
    j = model.coeff_count
    a = np.einsum("jab,nb->naj", model.basis.generators, z_i)
    omega_chol = spd_cholesky(model.trans_cov)
    lam_prec = spd_solve(spd_cholesky(model.coeff_prior_cov), np.eye(j))
    # Omega^{-1} A for every pair
    d = model.latent_dim
    oia = spd_solve(omega_chol, a.transpose(1, 0, 2).reshape(d, -1))
    oia = oia.reshape(d, -1, j).transpose(1, 0, 2)
    prec = lam_prec + np.einsum("ndj,ndk->njk", a, oia)
    cov = np.linalg.solve(prec, np.broadcast_to(np.eye(j), prec.shape))
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    mean = np.einsum("njk,nk->nj", cov, np.einsum("ndj,nd->nj", oia, delta))
    return mean, cov


def e_step_all(model: DynamicsModel, dataset: PairDataset,
               threads: int = 1) -> list[CoeffPosterior]:
    """Coefficient posteriors for every pair.

    The per-pair computation is pure; with ``threads > 1`` the dataset is
    split into contiguous blocks whose results are combined in block
    order, so the output does not depend on the schedule.
    """
    if dataset.latent_dim != model.latent_dim:
        raise ValueError("dataset and model latent dimensions disagree")
    if threads <= 1 or dataset.count < 2 * threads:
        mean, cov = _e_step_block(model, dataset.z_i, dataset.delta)
    else:
        bounds = np.linspace(0, dataset.count, threads + 1, dtype=int)
        blocks = [(dataset.z_i[a:b], dataset.delta[a:b])
                  for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda blk: _e_step_block(model, *blk), blocks))
        mean = np.concatenate([p[0] for p in parts])
        cov = np.concatenate([p[1] for p in parts])
    return [CoeffPosterior(m, c) for m, c in zip(mean, cov)]


def m_step_G(dataset: PairDataset, posteriors) -> GeneratorBasis:
    """Maximum-likelihood generator update via the Kronecker normal
    equations, solved as a linear system (never an explicit inverse)."""
    q, k = _posterior_stack(posteriors)
    if q.shape[0] != dataset.count:
        raise ValueError("need exactly one posterior per pair")
    second = k + np.einsum("nj,nk->njk", q, q)
    d, j = dataset.latent_dim, q.shape[1]
    num = np.einsum("nr,ne,nj->rej", dataset.delta, dataset.z_i, q).reshape(d, d * j)
    den = np.einsum("ne,nf,njk->ejfk", dataset.z_i, dataset.z_i,
                    second).reshape(d * j, d * j)
    den = symmetrize(den)
    try:
        flat = np.linalg.solve(den, num.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"singular {d * j}x{d * j} Gram matrix in generator update "
            f"(condition number {np.linalg.cond(den):.3e})") from exc
    cond = np.linalg.cond(den)
    if cond > 1e14:
        raise NumericError(
            f"singular {d * j}x{d * j} Gram matrix in generator update "
            f"(condition number {cond:.3e})")
    return liealg.block_unflatten(flat, d, j)


def m_step_Omega(dataset: PairDataset, posteriors,
                 basis: GeneratorBasis) -> np.ndarray:
    """Transition-noise update using the freshly updated generators.

    Averages the expected residual outer product over the N pairs and
    symmetrizes the result.
    """
    q, k = _posterior_stack(posteriors)
    second = k + np.einsum("nj,nk->njk", q, q)
    a = np.einsum("jab,nb->naj", basis.generators, dataset.z_i)
    aq = np.einsum("naj,nj->na", a, q)
    cross = np.einsum("na,nb->ab", aq, dataset.delta)
    total = (np.einsum("na,nb->ab", dataset.delta, dataset.delta)
             - cross - cross.T
             + np.einsum("naj,njk,nbk->ab", a, second, a))
    return symmetrize(total / dataset.count)


def update_Lambda(posteriors) -> np.ndarray:
    """Zero-mean Gaussian MLE of the coefficient prior covariance."""
    q, k = _posterior_stack(posteriors)
    second = k + np.einsum("nj,nk->njk", q, q)
    return symmetrize(second.mean(axis=0))


def expected_complete_data_ll(model: DynamicsModel, dataset: PairDataset,
                              posteriors) -> float:
    """Expected complete-data log-likelihood under the given posteriors.

    ``sum_i E[log N(z_next | z_i + A lambda, Omega) + log N(lambda | 0, Lambda)]``
    evaluated in closed form from the posterior moments.
    """
    q, k = _posterior_stack(posteriors)
    second = k + np.einsum("nj,nk->njk", q, q)
    n, d = dataset.count, dataset.latent_dim
    j = model.coeff_count
    omega_chol = spd_cholesky(model.trans_cov)
    lam_chol = spd_cholesky(model.coeff_prior_cov)
    log_det_omega = 2.0 * float(np.sum(np.log(np.diag(omega_chol))))
    log_det_lam = 2.0 * float(np.sum(np.log(np.diag(lam_chol))))
    a = np.einsum("jab,nb->naj", model.basis.generators, dataset.z_i)
    oi_delta = spd_solve(omega_chol, dataset.delta.T).T
    oia = spd_solve(omega_chol, a.transpose(1, 0, 2).reshape(d, -1))
    oia = oia.reshape(d, -1, j).transpose(1, 0, 2)
    quad = (np.einsum("nd,nd->", dataset.delta, oi_delta)
            - 2.0 * np.einsum("nd,ndj,nj->", oi_delta, a, q)
            + np.einsum("ndj,njk,ndk->", oia, second, a))
    lam_quad = np.einsum("jk,njk->", spd_solve(lam_chol, np.eye(j)), second)
    const = -0.5 * n * ((d + j) * np.log(2.0 * np.pi) + log_det_omega + log_det_lam)
    return float(const - 0.5 * quad - 0.5 * lam_quad)


def marginal_log_likelihood(model: DynamicsModel, dataset: PairDataset) -> float:
    """Exact log-likelihood ``sum_i log N(delta_z | 0, Omega + A Lambda A^T)``
    with the coefficients integrated out; the quantity EM ascends."""
    a = np.einsum("jab,nb->naj", model.basis.generators, dataset.z_i)
    cov = model.trans_cov + np.einsum("naj,jk,nbk->nab", a,
                                      model.coeff_prior_cov, a)
    sign, log_det = np.linalg.slogdet(cov)
    if np.any(sign <= 0):
        raise NumericError("marginal covariance is not positive definite")
    sol = np.linalg.solve(cov, dataset.delta[..., None])[..., 0]
    quad = np.einsum("nd,nd->n", dataset.delta, sol)
    d = dataset.latent_dim
    return float(-0.5 * np.sum(d * np.log(2.0 * np.pi) + log_det + quad))


def _project_lambda(old_basis: GeneratorBasis, new_basis: GeneratorBasis,
                    lam_cov: np.ndarray) -> np.ndarray:
    """Carry the coefficient prior through a change of generator basis."""
    change = (new_basis.generators.reshape(new_basis.count, -1)
              @ old_basis.generators.reshape(old_basis.count, -1).T)
    projected = symmetrize(change @ lam_cov @ change.T)
    jitter = max(default_jitter(projected, 1e-9), 1e-12)
    return projected + jitter * np.eye(new_basis.count)


def init_model(latent_dim: int, j_init: int, seed: int) -> DynamicsModel:
    """Seeded starting point: generator entries iid N(0, 1/d), identity
    noise and coefficient prior."""
    gens = rng.normal_matrix(seed, (0xD1,), (j_init, latent_dim, latent_dim),
                             scale=1.0 / np.sqrt(latent_dim))
    return DynamicsModel(GeneratorBasis(gens), np.eye(latent_dim), np.eye(j_init))


def fit(dataset: PairDataset, config: EmConfig) -> tuple[DynamicsModel, list[float]]:
    """EM loop: coefficient posteriors, closed-form G/Omega (optionally
    Lambda) updates, then basis orthogonalization.

    The returned trace holds the marginal log-likelihood of the model
    right after each M-step, before orthogonalization (orthogonalization
    may decrease it).  Stops when the relative trace change falls below
    ``config.tol`` or after ``config.max_iters`` iterations;
    non-convergence is reported through the trace, not an error.
    """
    model = init_model(dataset.latent_dim, config.j_init, config.seed)
    trace: list[float] = []
    for _ in range(config.max_iters):
        posteriors = e_step_all(model, dataset, threads=config.threads)
        basis = m_step_G(dataset, posteriors)
        omega = m_step_Omega(dataset, posteriors, basis)
        omega = omega + max(default_jitter(omega, config.jitter_scale),
                            1e-300) * np.eye(dataset.latent_dim)
        lam_cov = (update_Lambda(posteriors) if config.estimate_lambda
                   else model.coeff_prior_cov)
        if config.estimate_lambda:
            lam_cov = lam_cov + default_jitter(lam_cov, config.jitter_scale) \
                * np.eye(lam_cov.shape[0])
        model = DynamicsModel(basis, omega, lam_cov)
        trace.append(marginal_log_likelihood(model, dataset))
        if config.orthogonalize and np.any(basis.generators):
            new_basis = liealg.orthogonalize(basis, config.orth_threshold)
            lam_after = (_project_lambda(basis, new_basis, lam_cov)
                         if config.estimate_lambda else np.eye(new_basis.count))
            model = DynamicsModel(new_basis, omega, lam_after)
        if len(trace) >= 2:
            prev, cur = trace[-2], trace[-1]
            if abs(cur - prev) < config.tol * abs(prev):
                break
    return model, trace
