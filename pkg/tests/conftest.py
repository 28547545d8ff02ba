"""Shared builders for the estimator tests and the acceptance suite."""
import numpy as np

from lieflow import rng
from lieflow.dynamics import DynamicsModel
from lieflow.liealg import GeneratorBasis
from lieflow.ppca import PpcaModel


def tiny_joint_instance(seed: int, big_d: int = 3):
    """A well-conditioned D x 1 x 1 joint model plus one pair drawn from it.

    Kept in the weak-coupling regime (small coefficient scale) where the
    mean-field factorization is accurate, which is what the fixed-point
    cross-validation tolerances assume.
    """
    w = rng.normal_matrix(seed, (0,), (big_d, 1))
    w *= 1.0 / max(np.linalg.norm(w), 0.5)
    mu = 0.5 * rng.normals(seed, (1,), big_d)
    sigma_sd, omega_sd, lam_sd = 0.02, 0.1, 0.05
    gen = np.array([[[1.0]]])
    model = PpcaModel(w, mu, sigma_sd ** 2,
                      DynamicsModel(GeneratorBasis(gen),
                                    np.array([[omega_sd ** 2]]),
                                    np.array([[lam_sd ** 2]])))

    z_i = rng.normals(seed, (2,), 1)
    lam = lam_sd * rng.normals(seed, (3,), 1)
    z_n = z_i + gen[0] @ z_i * lam + omega_sd * rng.normals(seed, (4,), 1)
    x_i = w @ z_i + mu + sigma_sd * rng.normals(seed, (5,), big_d)
    x_n = w @ z_n + mu + sigma_sd * rng.normals(seed, (6,), big_d)
    return model, x_i, x_n


def reference_ppca_em(frames: np.ndarray, w0: np.ndarray, sigma2_0: float,
                      iters: int):
    """Plain probabilistic-PCA EM on pre-centered frames, used as the
    comparator for the degenerate-dynamics reduction."""
    n, big_d = frames.shape
    d = w0.shape[1]
    w, sigma2 = w0.copy(), float(sigma2_0)
    for _ in range(iters):
        m = w.T @ w + sigma2 * np.eye(d)
        minv = np.linalg.inv(m)
        ez = frames @ w @ minv.T
        szz = n * sigma2 * minv + ez.T @ ez
        sxz = frames.T @ ez
        w = np.linalg.solve(szz.T, sxz.T).T
        sigma2 = float((np.sum(frames ** 2)
                        - 2.0 * np.einsum("nd,nd->", frames @ w, ez)
                        + np.einsum("ab,ab->", w.T @ w, szz))
                       / (n * big_d))
    return w, sigma2
