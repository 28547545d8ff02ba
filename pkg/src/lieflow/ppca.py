"""Joint EM over image pairs with a probabilistic-PCA observation model.

The generative model per pair: ``z_i ~ N(0, I)``, ``x_i = W z_i + mu +
noise``, coefficients ``lambda ~ N(0, Lambda)``, transition
``z_next = z_i + A(z_i) lambda + noise`` and ``x_next = W z_next + mu +
noise``, with isotropic observation noise of variance ``sigma^2``.

The joint posterior over ``(z_i, lambda, z_next)`` is non-Gaussian (the
transition couples ``z_i`` and ``lambda`` bilinearly), so the E-step
offers three backends: tensor-grid quadrature (exact to grid resolution,
tiny dimensions only), a mean-field fixed point cycling the three
closed-form conditionals (production default) and self-normalized
importance sampling (cross-check).  All M-steps are closed form in the
expectation bundle.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import liealg, rng
from .dynamics import DynamicsModel, init_model
from .gaussian import (
    Gaussian,
    NumericError,
    default_jitter,
    spd_cholesky,
    spd_inverse,
    spd_solve,
    symmetrize,
)
from .liealg import GeneratorBasis
from .synth import ImagePairDataset

LOG_2PI = float(np.log(2.0 * np.pi))
SIGMA_FLOOR = 1e-12
E_STEP_METHODS = ("quadrature", "fixed_point", "monte_carlo")

_TAG_MC_Z, _TAG_MC_LAM = 0x5A, 0x5B


@dataclass(frozen=True)
class PpcaModel:
    """Linear observation model bundled with the transition dynamics."""

    loading: np.ndarray
    data_mean: np.ndarray
    noise_var: float
    dynamics: DynamicsModel

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.loading, dtype=float))
        mu = np.atleast_1d(np.asarray(self.data_mean, dtype=float))
        if w.shape[0] != mu.shape[0]:
            raise ValueError("loading rows and data mean length must agree")
        if w.shape[1] > w.shape[0]:
            raise ValueError("latent dimension cannot exceed the data dimension")
        if self.noise_var <= 0:
            raise ValueError("noise variance must be positive")
        if self.dynamics.latent_dim != w.shape[1]:
            raise ValueError("dynamics latent dimension must match the loading")
        object.__setattr__(self, "loading", w)
        object.__setattr__(self, "data_mean", mu)
        object.__setattr__(self, "noise_var", float(self.noise_var))

    @property
    def data_dim(self) -> int:
        return self.loading.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.loading.shape[1]


@dataclass(frozen=True)
class LatentMoments:
    """Per-pair expectations under the joint posterior of (z_i, lambda, z_next).

    ``e_dz_zkronlam`` is ``E[dz (z kron lam)^T]`` with ``dz = z_next - z_i``
    and ``e_zz_kron_lamlam`` is ``E[z z^T kron lam lam^T]``; both feed the
    Kronecker normal equations of the dynamics M-step.
    """

    ez_i: np.ndarray
    ez_next: np.ndarray
    ezz_i: np.ndarray
    ezz_next: np.ndarray
    elam: np.ndarray
    elamlam: np.ndarray
    e_dz_dz: np.ndarray
    e_dz_zkronlam: np.ndarray
    e_zz_kron_lamlam: np.ndarray
    e_lam_dz: np.ndarray

    def __post_init__(self):
        for ez, ezz, label in ((self.ez_i, self.ezz_i, "z_i"),
                               (self.ez_next, self.ezz_next, "z_next"),
                               (self.elam, self.elamlam, "lambda")):
            cov = ezz - np.outer(ez, ez)
            floor = -1e-8 * max(1.0, float(np.abs(ezz).max()))
            if np.linalg.eigvalsh(symmetrize(cov)).min() < floor:
                raise NumericError(f"{label} moment block is not positive semidefinite")

    @property
    def cov_z_i(self) -> np.ndarray:
        return symmetrize(self.ezz_i - np.outer(self.ez_i, self.ez_i))

    @property
    def cov_z_next(self) -> np.ndarray:
        return symmetrize(self.ezz_next - np.outer(self.ez_next, self.ez_next))

    @property
    def cov_lam(self) -> np.ndarray:
        return symmetrize(self.elamlam - np.outer(self.elam, self.elam))


@dataclass
class EStepConfig:
    """Knobs for the three E-step backends."""

    fixed_point_iters: int = 500
    fixed_point_tol: float = 1e-10
    mc_samples: int = 100_000
    grid_points: int = 64
    grid_sigmas: float = 8.0
    grid_inflation: float = 1.5
    seed: int = 0


@dataclass
class PpcaConfig:
    latent_dim: int = 2
    j_init: int = 1
    estep: str = "fixed_point"
    max_iters: int = 200
    tol: float = 1e-8
    orth_threshold: float = 0.99
    seed: int = 0
    estimate_lambda: bool = False
    freeze_coefficients: bool = False
    update_dynamics: bool = True
    orthogonalize: bool = True
    jitter_scale: float = 1e-9
    init_omega_scale: float = 1.0
    estep_config: EStepConfig | None = None
    threads: int = 1

    def resolved_estep(self) -> EStepConfig:
        cfg = self.estep_config or EStepConfig()
        cfg.seed = self.seed
        return cfg


def posterior_z_given_x(model: PpcaModel, x: np.ndarray) -> Gaussian:
    """Latent posterior ``N(M^{-1} W^T x_mu, sigma^2 M^{-1})`` with
    ``M = W^T W + sigma^2 I`` (the quadrature-verified parameterization)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (model.data_dim,):
        raise ValueError("observation dimension does not match the model")
    w = model.loading
    m = w.T @ w + model.noise_var * np.eye(model.latent_dim)
    chol = spd_cholesky(m)
    mean = spd_solve(chol, w.T @ (x - model.data_mean))
    cov = model.noise_var * spd_solve(chol, np.eye(model.latent_dim))
    return Gaussian(mean, symmetrize(cov))


def posterior_znext(model: PpcaModel, x_next: np.ndarray, z_i: np.ndarray,
                    lam: np.ndarray) -> Gaussian:
    """Conditional of the transformed latent given the next frame and
    ``(z_i, lambda)``: precision ``Omega^{-1} + sigma^{-2} W^T W``."""
    x_next = np.atleast_1d(np.asarray(x_next, dtype=float))
    z_i = np.atleast_1d(np.asarray(z_i, dtype=float))
    w = model.loading
    omega_prec = spd_inverse(model.dynamics.trans_cov)
    gamma_prec = omega_prec + (w.T @ w) / model.noise_var
    chol = spd_cholesky(gamma_prec)
    drift = z_i + liealg.assemble_A(model.dynamics.basis, z_i) @ np.atleast_1d(lam)
    info = w.T @ (x_next - model.data_mean) / model.noise_var + omega_prec @ drift
    mean = spd_solve(chol, info)
    cov = spd_solve(chol, np.eye(model.latent_dim))
    return Gaussian(mean, symmetrize(cov))


# ---------------------------------------------------------------------------
# E-step backends


@dataclass
class _Blocks:
    """Mean-field state: per-pair Gaussian blocks for z_i, lambda, z_next."""

    m_zi: np.ndarray
    cov_zi: np.ndarray
    m_zn: np.ndarray
    cov_zn: np.ndarray
    q: np.ndarray
    k: np.ndarray


def _moments_from_blocks(blocks: _Blocks) -> list[LatentMoments]:
    """Assemble expectation bundles under the factorized posterior
    ``q(z_i) q(lambda) q(z_next)``."""
    n, d = blocks.m_zi.shape
    j = blocks.q.shape[1]
    ezz_i = blocks.cov_zi + np.einsum("na,nb->nab", blocks.m_zi, blocks.m_zi)
    ezz_n = blocks.cov_zn + np.einsum("na,nb->nab", blocks.m_zn, blocks.m_zn)
    elamlam = blocks.k + np.einsum("nj,nk->njk", blocks.q, blocks.q)
    dm = blocks.m_zn - blocks.m_zi
    e_dz_dz = (ezz_n + ezz_i
               - np.einsum("na,nb->nab", blocks.m_zn, blocks.m_zi)
               - np.einsum("na,nb->nab", blocks.m_zi, blocks.m_zn))
    # E[dz (z kron lam)^T] = E[lam_j] (E[z_n] E[z_i]^T - E[z_i z_i^T])
    core = (np.einsum("nr,na->nra", blocks.m_zn, blocks.m_zi) - ezz_i)
    e_dz_zkronlam = np.einsum("nra,nj->nraj", core, blocks.q).reshape(n, d, d * j)
    e_zz_kron = np.einsum("nab,njk->najbk", ezz_i, elamlam).reshape(n, d * j, d * j)
    e_lam_dz = np.einsum("nj,nr->njr", blocks.q, dm)
    return [LatentMoments(blocks.m_zi[i], blocks.m_zn[i], ezz_i[i], ezz_n[i],
                          blocks.q[i], elamlam[i], e_dz_dz[i],
                          e_dz_zkronlam[i], e_zz_kron[i], e_lam_dz[i])
            for i in range(n)]


def _frozen_coefficient_blocks(model: PpcaModel, xc_i: np.ndarray,
                               xc_n: np.ndarray) -> _Blocks:
    """Mean-field fixed point with the coefficients pinned at zero.

    The (z_i, z_next) problem is then jointly Gaussian, so the
    coordinate-update fixed point is available in closed form: the means
    solve the joint precision system and the factor covariances invert
    its diagonal blocks.  (The cycled updates converge to exactly this
    point, but arbitrarily slowly as the transition noise shrinks.)
    """
    w = model.loading
    d = model.latent_dim
    j = model.dynamics.coeff_count
    n = xc_i.shape[0]
    sig2 = model.noise_var
    m = w.T @ w + sig2 * np.eye(d)
    m_chol = spd_cholesky(m)
    u_i = spd_solve(m_chol, w.T @ xc_i.T).T
    ppca_prec = symmetrize(spd_inverse(sig2 * spd_solve(m_chol, np.eye(d))))
    omega_prec = spd_inverse(model.dynamics.trans_cov)
    prec = np.zeros((2 * d, 2 * d))
    prec[:d, :d] = ppca_prec + omega_prec
    prec[:d, d:] = -omega_prec
    prec[d:, :d] = -omega_prec
    prec[d:, d:] = omega_prec + (w.T @ w) / sig2
    info = np.concatenate([u_i @ ppca_prec, xc_n @ w / sig2], axis=1)
    chol = spd_cholesky(symmetrize(prec))
    means = spd_solve(chol, info.T).T
    cov_zi = symmetrize(spd_solve(spd_cholesky(prec[:d, :d]), np.eye(d)))
    cov_zn = symmetrize(spd_solve(spd_cholesky(prec[d:, d:]), np.eye(d)))
    return _Blocks(
        m_zi=means[:, :d], cov_zi=np.broadcast_to(cov_zi, (n, d, d)).copy(),
        m_zn=means[:, d:], cov_zn=np.broadcast_to(cov_zn, (n, d, d)).copy(),
        q=np.zeros((n, j)), k=np.zeros((n, j, j)))


def _fixed_point_blocks(model: PpcaModel, xc_i: np.ndarray, xc_n: np.ndarray,
                        cfg: EStepConfig, freeze_coefficients: bool = False
                        ) -> _Blocks:
    """Cycle the three closed-form conditionals at the current block means
    until self-consistent."""
    if freeze_coefficients:
        return _frozen_coefficient_blocks(model, xc_i, xc_n)
    w = model.loading
    d, j = model.latent_dim, model.dynamics.coeff_count
    n = xc_i.shape[0]
    gens = model.dynamics.basis.generators
    sig2 = model.noise_var

    m = w.T @ w + sig2 * np.eye(d)
    m_chol = spd_cholesky(m)
    u_i = spd_solve(m_chol, w.T @ xc_i.T).T
    u_n = spd_solve(m_chol, w.T @ xc_n.T).T
    ppca_cov = sig2 * symmetrize(spd_solve(m_chol, np.eye(d)))
    ppca_prec = symmetrize(spd_inverse(ppca_cov))
    omega_prec = spd_inverse(model.dynamics.trans_cov)
    lam_prec = spd_inverse(model.dynamics.coeff_prior_cov)
    gamma_prec = omega_prec + (w.T @ w) / sig2
    gamma = symmetrize(spd_solve(spd_cholesky(gamma_prec), np.eye(d)))
    wt_xn = xc_n @ w / sig2

    blocks = _Blocks(
        m_zi=u_i.copy(),
        cov_zi=np.broadcast_to(ppca_cov, (n, d, d)).copy(),
        m_zn=u_n.copy(),
        cov_zn=np.broadcast_to(gamma, (n, d, d)).copy(),
        q=np.zeros((n, j)),
        k=np.broadcast_to(model.dynamics.coeff_prior_cov, (n, j, j)).copy(),
    )
    eye_j = np.broadcast_to(np.eye(j), (n, j, j))
    eye_d = np.eye(d)
    for _ in range(cfg.fixed_point_iters):
        prev = (blocks.m_zi.copy(), blocks.m_zn.copy(), blocks.q.copy(),
                blocks.cov_zi.copy(), blocks.k.copy())
        a = np.einsum("jab,nb->naj", gens, blocks.m_zi)
        at_oi = np.einsum("naj,ab->njb", a, omega_prec)
        prec = lam_prec + np.einsum("njb,nbk->njk", at_oi, a)
        blocks.k = np.linalg.solve(prec, eye_j)
        blocks.k = 0.5 * (blocks.k + blocks.k.transpose(0, 2, 1))
        info = np.einsum("njb,nb->nj", at_oi, blocks.m_zn - blocks.m_zi)
        blocks.q = np.einsum("njk,nk->nj", blocks.k, info)
        drift = blocks.m_zi + np.einsum("naj,nj->na", a, blocks.q)
        blocks.m_zn = (wt_xn + drift @ omega_prec) @ gamma
        blocks.cov_zn = np.broadcast_to(gamma, (n, d, d)).copy()
        b = eye_d + np.einsum("nj,jab->nab", blocks.q, gens)
        bt_oi = np.einsum("nca,cd->nad", b, omega_prec)
        prec_zi = ppca_prec + np.einsum("nad,ndb->nab", bt_oi, b)
        info_zi = u_i @ ppca_prec + np.einsum("nad,nd->na", bt_oi, blocks.m_zn)
        blocks.cov_zi = np.linalg.solve(prec_zi, np.broadcast_to(eye_d, (n, d, d)))
        blocks.cov_zi = 0.5 * (blocks.cov_zi + blocks.cov_zi.transpose(0, 2, 1))
        blocks.m_zi = np.linalg.solve(prec_zi, info_zi[..., None])[..., 0]
        residual = max(
            np.abs(blocks.m_zi - prev[0]).max(),
            np.abs(blocks.m_zn - prev[1]).max(),
            np.abs(blocks.q - prev[2]).max(),
            np.abs(blocks.cov_zi - prev[3]).max(),
            np.abs(blocks.k - prev[4]).max(),
        )
        if residual < cfg.fixed_point_tol:
            break
    else:
        raise NumericError(
            f"fixed-point E-step did not converge within {cfg.fixed_point_iters} "
            f"iterations (residual {residual:.3e})")
    return blocks


def _linearized_joint_cov(model: PpcaModel, xc_i: np.ndarray,
                          m_zi: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Covariance of the joint posterior over ``(z_i, lambda, z_next)``
    with the bilinear transition linearized at the supplied means; used
    to calibrate quadrature boxes."""
    d, j = model.latent_dim, model.dynamics.coeff_count
    gens = model.dynamics.basis.generators
    omega_prec = spd_inverse(model.dynamics.trans_cov)
    b = np.eye(d) + np.einsum("j,jab->ab", q, gens)
    a = liealg.assemble_A(model.dynamics.basis, m_zi)
    prior_zi = posterior_z_given_x(model, xc_i + model.data_mean)
    prec = np.zeros((2 * d + j, 2 * d + j))
    sl_i, sl_l, sl_n = slice(0, d), slice(d, d + j), slice(d + j, 2 * d + j)
    prec[sl_i, sl_i] = spd_inverse(prior_zi.cov) + b.T @ omega_prec @ b
    prec[sl_l, sl_l] = spd_inverse(model.dynamics.coeff_prior_cov) \
        + a.T @ omega_prec @ a
    prec[sl_n, sl_n] = omega_prec \
        + (model.loading.T @ model.loading) / model.noise_var
    prec[sl_i, sl_l] = b.T @ omega_prec @ a
    prec[sl_l, sl_i] = prec[sl_i, sl_l].T
    prec[sl_i, sl_n] = -b.T @ omega_prec
    prec[sl_n, sl_i] = prec[sl_i, sl_n].T
    prec[sl_l, sl_n] = -a.T @ omega_prec
    prec[sl_n, sl_l] = prec[sl_l, sl_n].T
    return spd_inverse(symmetrize(prec))


def _quadrature_moments_pair(model: PpcaModel, xc_i: np.ndarray,
                             xc_n: np.ndarray, cfg: EStepConfig
                             ) -> tuple[LatentMoments, float]:
    """Grid-exact moments for one pair, plus the log of
    ``p(x_next | x_i)`` (the normalizer of the integrand)."""
    from .oracles import GridSpec, grid_posterior

    d, j = model.latent_dim, model.dynamics.coeff_count
    dims = 2 * d + j
    if dims > 6:
        raise ValueError("quadrature E-step supports at most 6 joint dimensions")
    w = model.loading
    gens = model.dynamics.basis.generators
    sig2 = model.noise_var
    big_d = model.data_dim

    # center on the (cheap) mean-field solution; size the box from the
    # marginal stds of the joint Gaussian linearized at that solution
    # (the factor stds alone understate marginal spread when the
    # transition couples the blocks tightly)
    blocks = _fixed_point_blocks(model, xc_i[None], xc_n[None], cfg)
    center = np.concatenate([blocks.m_zi[0], blocks.q[0], blocks.m_zn[0]])
    stds = cfg.grid_inflation * np.sqrt(np.diag(_linearized_joint_cov(
        model, xc_i, blocks.m_zi[0], blocks.q[0])))

    prior_zi = posterior_z_given_x(model, xc_i + model.data_mean)
    zi_chol = spd_cholesky(prior_zi.cov)
    lam_chol = spd_cholesky(model.dynamics.coeff_prior_cov)
    omega_chol = spd_cholesky(model.dynamics.trans_cov)

    def gauss_quad(chol, diffs):
        white = solve_triangular(chol, diffs.T, lower=True)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        k = diffs.shape[1]
        return -0.5 * (k * LOG_2PI + log_det + np.sum(white * white, axis=0))

    def log_target(nodes):
        zi = nodes[:, :d]
        lam = nodes[:, d:d + j]
        zn = nodes[:, d + j:]
        drift = zi + np.einsum("jab,mb,mj->ma", gens, zi, lam)
        recon = xc_n[None, :] - zn @ w.T
        return (gauss_quad(zi_chol, zi - prior_zi.mean)
                + gauss_quad(lam_chol, lam)
                + gauss_quad(omega_chol, zn - drift)
                - 0.5 * (big_d * np.log(2.0 * np.pi * sig2)
                         + np.sum(recon * recon, axis=1) / sig2))

    # the boundary-mass diagnostic governs the box: widen and retry when
    # the linearized sizing underestimates the true posterior spread
    from .oracles import BoxTooSmallError

    post = None
    for attempt in range(3):
        widen = 2.0 ** attempt
        half = cfg.grid_sigmas * stds * widen
        grid = GridSpec(center - half, center + half,
                        np.full(dims, cfg.grid_points))
        try:
            post = grid_posterior(log_target, grid)
            break
        except BoxTooSmallError:
            if attempt == 2:
                raise
    zi = post.nodes[:, :d]
    lam = post.nodes[:, d:d + j]
    zn = post.nodes[:, d + j:]
    dz = zn - zi
    zl = np.einsum("ma,mj->maj", zi, lam).reshape(-1, d * j)
    p = post.probs
    moments = LatentMoments(
        ez_i=p @ zi,
        ez_next=p @ zn,
        ezz_i=np.einsum("m,ma,mb->ab", p, zi, zi),
        ezz_next=np.einsum("m,ma,mb->ab", p, zn, zn),
        elam=p @ lam,
        elamlam=np.einsum("m,mj,mk->jk", p, lam, lam),
        e_dz_dz=np.einsum("m,ma,mb->ab", p, dz, dz),
        e_dz_zkronlam=np.einsum("m,mr,mk->rk", p, dz, zl),
        e_zz_kron_lamlam=np.einsum("m,mk,ml->kl", p, zl, zl),
        e_lam_dz=np.einsum("m,mj,mr->jr", p, lam, dz),
    )
    return moments, post.log_norm


def _monte_carlo_moments_pair(model: PpcaModel, xc_i: np.ndarray,
                              xc_n: np.ndarray, cfg: EStepConfig,
                              stream: tuple[int, ...] = ()
                              ) -> tuple[LatentMoments, float]:
    """Self-normalized sampling from ``q(z_i | x_i) p(lambda)`` with the
    next-frame latent integrated out in closed form per draw."""
    d, j = model.latent_dim, model.dynamics.coeff_count
    w = model.loading
    gens = model.dynamics.basis.generators
    sig2 = model.noise_var
    s = cfg.mc_samples

    prior_zi = posterior_z_given_x(model, xc_i + model.data_mean)
    zi = prior_zi.mean + rng.normal_matrix(
        cfg.seed, (_TAG_MC_Z, *stream), (s, d)) @ spd_cholesky(prior_zi.cov).T
    lam = rng.normal_matrix(cfg.seed, (_TAG_MC_LAM, *stream), (s, j)) \
        @ spd_cholesky(model.dynamics.coeff_prior_cov).T

    drift = zi + np.einsum("jab,mb,mj->ma", gens, zi, lam)
    # weight: x_next likelihood with z_next marginalized out
    resid_cov = sig2 * np.eye(model.data_dim) \
        + w @ model.dynamics.trans_cov @ w.T
    resid_chol = spd_cholesky(resid_cov)
    resid = xc_n[None, :] - drift @ w.T
    white = solve_triangular(resid_chol, resid.T, lower=True)
    log_w = -0.5 * np.sum(white * white, axis=0)
    log_w -= log_w.max()
    probs = np.exp(log_w)
    probs /= probs.sum()
    ess = float(1.0 / np.sum(probs ** 2))
    if ess < 0.01 * s:
        raise NumericError(
            f"monte-carlo E-step degenerate (effective sample size {ess:.1f} of {s})")

    omega_prec = spd_inverse(model.dynamics.trans_cov)
    gamma = symmetrize(spd_inverse(omega_prec + (w.T @ w) / sig2))
    m_zn = (xc_n @ w / sig2 + drift @ omega_prec) @ gamma
    dz = m_zn - zi
    zl = np.einsum("ma,mj->maj", zi, lam).reshape(s, d * j)
    moments = LatentMoments(
        ez_i=probs @ zi,
        ez_next=probs @ m_zn,
        ezz_i=np.einsum("m,ma,mb->ab", probs, zi, zi),
        ezz_next=gamma + np.einsum("m,ma,mb->ab", probs, m_zn, m_zn),
        elam=probs @ lam,
        elamlam=np.einsum("m,mj,mk->jk", probs, lam, lam),
        e_dz_dz=gamma + np.einsum("m,ma,mb->ab", probs, dz, dz),
        e_dz_zkronlam=np.einsum("m,mr,mk->rk", probs, dz, zl),
        e_zz_kron_lamlam=np.einsum("m,mk,ml->kl", probs, zl, zl),
        e_lam_dz=np.einsum("m,mj,mr->jr", probs, lam, dz),
    )
    return moments, ess


def e_step_joint(model: PpcaModel, x_i: np.ndarray, x_next: np.ndarray,
                 method: str = "fixed_point",
                 config: EStepConfig | None = None) -> LatentMoments:
    """Expectation bundle for one image pair under the joint posterior."""
    if method not in E_STEP_METHODS:
        raise ValueError(f"unknown E-step method {method!r}")
    cfg = config or EStepConfig()
    xc_i = np.asarray(x_i, dtype=float) - model.data_mean
    xc_n = np.asarray(x_next, dtype=float) - model.data_mean
    if method == "quadrature":
        return _quadrature_moments_pair(model, xc_i, xc_n, cfg)[0]
    if method == "monte_carlo":
        return _monte_carlo_moments_pair(model, xc_i, xc_n, cfg)[0]
    blocks = _fixed_point_blocks(model, xc_i[None], xc_n[None], cfg)
    return _moments_from_blocks(blocks)[0]


# ---------------------------------------------------------------------------
# M-steps


def m_step_mu(dataset: ImagePairDataset) -> np.ndarray:
    """Average of all 2N frames."""
    return 0.5 * (dataset.x_i.mean(axis=0) + dataset.x_next.mean(axis=0))


def m_step_W(dataset: ImagePairDataset, moments: list[LatentMoments],
             mu: np.ndarray) -> np.ndarray:
    """Loading update from both frames' cross moments, via a linear solve."""
    if len(moments) != dataset.count:
        raise ValueError("need exactly one moment bundle per pair")
    ez_i = np.stack([m.ez_i for m in moments])
    ez_n = np.stack([m.ez_next for m in moments])
    num = (dataset.x_next - mu).T @ ez_n + (dataset.x_i - mu).T @ ez_i
    gram = sum(m.ezz_i + m.ezz_next for m in moments)
    try:
        return np.linalg.solve(symmetrize(gram), num.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"singular latent Gram matrix in loading update "
            f"(condition number {np.linalg.cond(gram):.3e})") from exc


def m_step_sigma(dataset: ImagePairDataset, moments: list[LatentMoments],
                 w: np.ndarray, mu: np.ndarray) -> float:
    """Isotropic noise update: expected residual power over both frames of
    every pair, averaged over the ``2N D`` scalar observations and clamped
    at ``1e-12``."""
    xc_i = dataset.x_i - mu
    xc_n = dataset.x_next - mu
    ez_i = np.stack([m.ez_i for m in moments])
    ez_n = np.stack([m.ez_next for m in moments])
    gram = w.T @ w
    total = (np.sum(xc_i * xc_i) + np.sum(xc_n * xc_n)
             - 2.0 * (np.sum(xc_i * (ez_i @ w.T)) + np.sum(xc_n * (ez_n @ w.T)))
             + float(np.einsum("ab,ab->", gram,
                               sum(m.ezz_i + m.ezz_next for m in moments))))
    return max(total / (2.0 * dataset.count * dataset.image_dim), SIGMA_FLOOR)


def m_step_dynamics(moments: list[LatentMoments], latent_dim: int,
                    coeff_count: int) -> tuple[GeneratorBasis, np.ndarray]:
    """Generator and transition-noise updates from summed cross moments;
    the same normal equations as the fixed-representation estimator with
    expectations over (z, lambda) substituted."""
    n = len(moments)
    s_dz = sum(m.e_dz_dz for m in moments)
    s_cross = sum(m.e_dz_zkronlam for m in moments)
    s_kron = symmetrize(sum(m.e_zz_kron_lamlam for m in moments))
    try:
        flat = np.linalg.solve(s_kron, s_cross.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"singular Kronecker Gram matrix in dynamics update "
            f"(condition number {np.linalg.cond(s_kron):.3e})") from exc
    omega = (s_dz - flat @ s_cross.T - s_cross @ flat.T
             + flat @ s_kron @ flat.T) / n
    return liealg.block_unflatten(flat, latent_dim, coeff_count), symmetrize(omega)


# ---------------------------------------------------------------------------
# Objective


def _first_frame_evidence(model: PpcaModel, xc_i: np.ndarray) -> float:
    """``sum_i log N(x_i | mu, W W^T + sigma^2 I)``."""
    cov = model.loading @ model.loading.T \
        + model.noise_var * np.eye(model.data_dim)
    chol = spd_cholesky(cov)
    white = solve_triangular(chol, xc_i.T, lower=True)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    n = xc_i.shape[0]
    return float(-0.5 * (n * (model.data_dim * LOG_2PI + log_det)
                         + np.sum(white * white)))


def _entropy(cov: np.ndarray) -> float:
    dim = cov.shape[0]
    eigs = np.linalg.eigvalsh(symmetrize(cov))
    eigs = np.maximum(eigs, 1e-300)
    return 0.5 * float(dim * (1.0 + LOG_2PI) + np.sum(np.log(eigs)))


def expected_complete_data_ll(model: PpcaModel, xc_i: np.ndarray,
                              xc_n: np.ndarray, moments: LatentMoments,
                              include_coeff_terms: bool = True) -> float:
    """Per-pair expected complete-data log-likelihood (two-frame
    factorization) under the supplied expectation bundle."""
    w = model.loading
    d, j = model.latent_dim, model.dynamics.coeff_count
    big_d = model.data_dim
    sig2 = model.noise_var
    gram = w.T @ w

    def recon(xc, ez, ezz):
        return -0.5 * (big_d * np.log(2.0 * np.pi * sig2)
                       + (xc @ xc - 2.0 * xc @ (w @ ez)
                          + float(np.einsum("ab,ab->", gram, ezz))) / sig2)

    omega_chol = spd_cholesky(model.dynamics.trans_cov)
    omega_prec = spd_solve(omega_chol, np.eye(d))
    flat = liealg.block_flatten(model.dynamics.basis)
    trans_quad = (np.einsum("ab,ab->", omega_prec, moments.e_dz_dz)
                  - 2.0 * np.einsum("ab,bk,ak->", omega_prec, flat,
                                    moments.e_dz_zkronlam)
                  + np.einsum("ab,ak,bl,kl->", omega_prec, flat, flat,
                              moments.e_zz_kron_lamlam))
    trans = -0.5 * (d * LOG_2PI
                    + 2.0 * float(np.sum(np.log(np.diag(omega_chol))))
                    + float(trans_quad))
    lam_term = 0.0
    if include_coeff_terms:
        lam_chol = spd_cholesky(model.dynamics.coeff_prior_cov)
        lam_prec = spd_solve(lam_chol, np.eye(j))
        lam_term = -0.5 * (j * LOG_2PI
                           + 2.0 * float(np.sum(np.log(np.diag(lam_chol))))
                           + float(np.einsum("jk,jk->", lam_prec,
                                             moments.elamlam)))
    prior_zi = -0.5 * (d * LOG_2PI + float(np.trace(moments.ezz_i)))
    return (recon(xc_i, moments.ez_i, moments.ezz_i)
            + recon(xc_n, moments.ez_next, moments.ezz_next)
            + trans + lam_term + prior_zi)


def mean_field_elbo(model: PpcaModel, dataset: ImagePairDataset,
                    moments: list[LatentMoments]) -> float:
    """Evidence lower bound of the factorized posterior: expected
    complete-data log-likelihood plus the Gaussian block entropies.

    A degenerate coefficient block (all moments zero, as under frozen
    coefficients) contributes neither a prior term nor an entropy.
    """
    xc_i = dataset.x_i - model.data_mean
    xc_n = dataset.x_next - model.data_mean
    total = 0.0
    for i, m in enumerate(moments):
        live_coeffs = bool(np.any(m.elamlam) or np.any(m.elam))
        total += expected_complete_data_ll(model, xc_i[i], xc_n[i], m,
                                           include_coeff_terms=live_coeffs)
        total += _entropy(m.cov_z_i) + _entropy(m.cov_z_next)
        if live_coeffs:
            total += _entropy(m.cov_lam)
    return float(total)


# ---------------------------------------------------------------------------
# Fit


def init_loading(dataset: ImagePairDataset, latent_dim: int,
                 mu: np.ndarray) -> tuple[np.ndarray, float]:
    """Deterministic start: dominant right singular vectors of the pooled
    centered frames, scaled by the singular values; noise variance from
    the mean residual variance."""
    stacked = np.vstack([dataset.x_i, dataset.x_next]) - mu
    n2 = stacked.shape[0]
    _, svals, vt = np.linalg.svd(stacked, full_matrices=False)
    v = vt[:latent_dim].T
    signs = np.ones(latent_dim)
    for k in range(latent_dim):
        col = v[:, k]
        lead = col[np.abs(col) > 1e-12 * np.abs(col).max()][0]
        signs[k] = 1.0 if lead >= 0 else -1.0
    w = v * signs * (svals[:latent_dim] / np.sqrt(n2))
    tail = svals[latent_dim:] ** 2
    dof = max(dataset.image_dim - latent_dim, 1)
    sigma2 = float(tail.sum() / (n2 * dof)) if tail.size else SIGMA_FLOOR
    return w, max(sigma2, SIGMA_FLOOR)


def _e_step_dataset(model: PpcaModel, dataset: ImagePairDataset,
                    method: str, cfg: EStepConfig, threads: int,
                    freeze_coefficients: bool
                    ) -> tuple[list[LatentMoments], float | None]:
    """All-pair moments plus, for the quadrature backend, the exact
    conditional evidence ``sum_i log p(x_next | x_i)``."""
    xc_i = dataset.x_i - model.data_mean
    xc_n = dataset.x_next - model.data_mean
    if method == "fixed_point":
        if threads > 1 and dataset.count >= 2 * threads:
            from concurrent.futures import ThreadPoolExecutor
            bounds = np.linspace(0, dataset.count, threads + 1, dtype=int)
            chunks = [(xc_i[a:b], xc_n[a:b]) for a, b in zip(bounds[:-1], bounds[1:])
                      if b > a]
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(
                    lambda c: _fixed_point_blocks(model, c[0], c[1], cfg,
                                                  freeze_coefficients), chunks))
            moments = [m for part in parts for m in _moments_from_blocks(part)]
        else:
            blocks = _fixed_point_blocks(model, xc_i, xc_n, cfg,
                                         freeze_coefficients)
            moments = _moments_from_blocks(blocks)
        return moments, None
    if method == "quadrature":
        results = [_quadrature_moments_pair(model, xc_i[i], xc_n[i], cfg)
                   for i in range(dataset.count)]
        log_norm = float(sum(r[1] for r in results))
        return [r[0] for r in results], log_norm
    results = [_monte_carlo_moments_pair(model, xc_i[i], xc_n[i], cfg, (i,))
               for i in range(dataset.count)]
    return [r[0] for r in results], None


def fit(dataset: ImagePairDataset, config: PpcaConfig
        ) -> tuple[PpcaModel, list[float]]:
    """Joint EM: per-pair expectation bundles, then closed-form updates of
    W, sigma^2 and the dynamics, then generator orthogonalization.

    The traced objective is the model evidence of both frames: exact
    (via the quadrature normalizers) for the quadrature E-step, the
    mean-field lower bound otherwise, recorded after each M-step before
    orthogonalization.
    """
    if config.estep not in E_STEP_METHODS:
        raise ValueError(f"unknown E-step method {config.estep!r}")
    d = config.latent_dim
    mu = m_step_mu(dataset)
    w, sigma2 = init_loading(dataset, d, mu)
    dyn = init_model(d, config.j_init, config.seed)
    dyn = DynamicsModel(dyn.basis, config.init_omega_scale * np.eye(d),
                        dyn.coeff_prior_cov)
    model = PpcaModel(w, mu, sigma2, dyn)
    cfg = config.resolved_estep()
    trace: list[float] = []
    for _ in range(config.max_iters):
        moments, exact_evidence = _e_step_dataset(
            model, dataset, config.estep, cfg, config.threads,
            config.freeze_coefficients)
        if exact_evidence is not None:
            # exact conditional evidence at the parameters the E-step used
            trace.append(_first_frame_evidence(model, dataset.x_i - mu)
                         + exact_evidence)
        w = m_step_W(dataset, moments, mu)
        sigma2 = m_step_sigma(dataset, moments, w, mu)
        dyn = model.dynamics
        if config.update_dynamics and not config.freeze_coefficients:
            basis, omega = m_step_dynamics(moments, d, dyn.coeff_count)
            omega = omega + max(default_jitter(omega, config.jitter_scale),
                                1e-300) * np.eye(d)
            lam_cov = dyn.coeff_prior_cov
            if config.estimate_lambda:
                lam_cov = symmetrize(
                    sum(m.elamlam for m in moments) / dataset.count)
                lam_cov = lam_cov + default_jitter(lam_cov, config.jitter_scale) \
                    * np.eye(dyn.coeff_count)
            dyn = DynamicsModel(basis, omega, lam_cov)
        model = PpcaModel(w, mu, sigma2, dyn)
        if exact_evidence is None:
            trace.append(mean_field_elbo(model, dataset, moments))
        if (config.update_dynamics and not config.freeze_coefficients
                and config.orthogonalize and np.any(dyn.basis.generators)):
            new_basis = liealg.orthogonalize(dyn.basis, config.orth_threshold)
            lam_cov = np.eye(new_basis.count)
            if config.estimate_lambda:
                from .dynamics import _project_lambda
                lam_cov = _project_lambda(dyn.basis, new_basis,
                                          dyn.coeff_prior_cov)
            dyn = DynamicsModel(new_basis, dyn.trans_cov, lam_cov)
            model = PpcaModel(w, mu, sigma2, dyn)
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) \
                < config.tol * abs(trace[-2]):
            break
    return model, trace
