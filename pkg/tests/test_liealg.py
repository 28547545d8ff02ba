import numpy as np
import pytest

from lieflow import rng
from lieflow.gaussian import NumericError
from lieflow.liealg import (
    GeneratorBasis,
    apply_exact,
    apply_first_order,
    assemble_A,
    block_flatten,
    block_unflatten,
    combine,
    matrix_exp,
    orthogonalize,
)

ROT = np.array([[0.0, -1.0], [1.0, 0.0]])


def taylor_exp(m, terms=60):
    """Raw power-series oracle, independent of the scaling-and-squaring path."""
    acc = np.eye(m.shape[0])
    term = np.eye(m.shape[0])
    for k in range(1, terms + 1):
        term = term @ m / k
        acc = acc + term
    return acc


class TestMatrixExp:
    def test_exp_zero_is_identity(self):
        assert np.array_equal(matrix_exp(np.zeros((3, 3))), np.eye(3))

    def test_quarter_turn(self):
        assert np.allclose(matrix_exp((np.pi / 2) * ROT), ROT, atol=1e-12)

    def test_diagonal(self):
        out = matrix_exp(np.diag([0.3, -1.2]))
        assert np.allclose(out, np.diag(np.exp([0.3, -1.2])), atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_taylor_oracle(self, seed):
        m = rng.normal_matrix(seed, (0,), (4, 4))
        m *= 2.0 / np.linalg.norm(m)
        assert np.allclose(matrix_exp(m), taylor_exp(m), atol=1e-10)

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            matrix_exp(np.zeros((2, 3)))

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            matrix_exp(np.array([[np.nan, 0.0], [0.0, 0.0]]))

    @pytest.mark.parametrize("seed", range(4))
    def test_inverse_property(self, seed):
        m = rng.normal_matrix(10 + seed, (0,), (3, 3))
        m *= 5.0 / np.linalg.norm(m)
        assert np.allclose(matrix_exp(m) @ matrix_exp(-m), np.eye(3), atol=1e-9)


class TestGroupAction:
    def test_zero_coefficients(self):
        basis = GeneratorBasis(rng.normal_matrix(1, (0,), (2, 3, 3)))
        z = rng.normals(1, (1,), 3)
        assert np.allclose(apply_first_order(basis, np.zeros(2), z), z)
        assert np.allclose(apply_exact(basis, np.zeros(2), z), z)

    def test_identity_generator_scales(self):
        basis = GeneratorBasis(np.eye(3)[None])
        z = np.array([1.0, 2.0, -1.0])
        assert np.allclose(apply_first_order(basis, [0.25], z), 1.25 * z)

    def test_first_order_error_is_second_order(self):
        basis = GeneratorBasis(rng.normal_matrix(2, (0,), (2, 3, 3)))
        z = rng.normals(2, (1,), 3)
        lam = 1e-3 * rng.normals(2, (2,), 2)
        lam /= np.linalg.norm(lam) / 1e-3
        gap = np.linalg.norm(apply_first_order(basis, lam, z)
                             - apply_exact(basis, lam, z))
        bound = 10.0 * np.linalg.norm(lam) ** 2 * np.linalg.norm(z)
        assert gap < bound

    def test_planar_rotation_half_turn(self):
        basis = GeneratorBasis(ROT[None])
        out = apply_exact(basis, [np.pi], [1.0, 0.0])
        assert np.allclose(out, [-1.0, 0.0], atol=1e-12)

    def test_one_parameter_subgroup_composes(self):
        basis = GeneratorBasis(rng.normal_matrix(3, (0,), (1, 3, 3)))
        z = rng.normals(3, (1,), 3)
        via_two = apply_exact(basis, [0.7], apply_exact(basis, [0.4], z))
        direct = apply_exact(basis, [1.1], z)
        assert np.allclose(via_two, direct, atol=1e-9)


class TestAssembleA:
    def test_single_identity_generator(self):
        basis = GeneratorBasis(np.eye(3)[None])
        z = np.array([1.0, -2.0, 0.5])
        assert np.allclose(assemble_A(basis, z), z[:, None])

    def test_zero_vector(self):
        basis = GeneratorBasis(rng.normal_matrix(4, (0,), (3, 2, 2)))
        assert np.array_equal(assemble_A(basis, np.zeros(2)), np.zeros((2, 3)))

    def test_action_identity_on_random_coefficients(self):
        basis = GeneratorBasis(rng.normal_matrix(5, (0,), (3, 4, 4)))
        z = rng.normals(5, (1,), 4)
        a = assemble_A(basis, z)
        for k in range(100):
            lam = rng.normals(5, (2, k), 3)
            direct = np.einsum("j,jab,b->a", lam, basis.generators, z)
            assert np.allclose(a @ lam, direct, atol=1e-12)


class TestBlockForm:
    def test_single_generator_flatten_is_identity(self):
        g = rng.normal_matrix(6, (0,), (1, 3, 3))
        assert np.array_equal(block_flatten(GeneratorBasis(g)), g[0])

    def test_round_trip(self):
        basis = GeneratorBasis(rng.normal_matrix(7, (0,), (3, 4, 4)))
        back = block_unflatten(block_flatten(basis), 4, 3)
        assert np.array_equal(back.generators, basis.generators)

    def test_kronecker_identity(self):
        basis = GeneratorBasis(rng.normal_matrix(8, (0,), (2, 3, 3)))
        flat = block_flatten(basis)
        z = rng.normals(8, (1,), 3)
        lam = rng.normals(8, (2,), 2)
        lhs = flat @ np.kron(z, lam)
        assert np.allclose(lhs, assemble_A(basis, z) @ lam, atol=1e-12)

    def test_three_way_consistency(self):
        basis = GeneratorBasis(rng.normal_matrix(9, (0,), (2, 3, 3)))
        z = rng.normals(9, (1,), 3)
        lam = rng.normals(9, (2,), 2)
        via_flat = block_flatten(basis) @ np.kron(z, lam)
        via_a = assemble_A(basis, z) @ lam
        via_first_order = apply_first_order(basis, lam, z) - z
        assert np.allclose(via_flat, via_a, atol=1e-12)
        assert np.allclose(via_a, via_first_order, atol=1e-12)

    def test_unflatten_shape_check(self):
        with pytest.raises(ValueError):
            block_unflatten(np.zeros((2, 5)), 2, 2)


class TestOrthogonalize:
    def test_orthonormal_basis_kept(self):
        g = np.stack([np.diag([1.0, 0.0]), np.diag([0.0, 1.0])])
        out = orthogonalize(GeneratorBasis(g), 1.0)
        assert out.count == 2
        flat_in = g.reshape(2, -1)
        flat_out = out.generators.reshape(2, -1)
        # same span
        proj = flat_in.T @ flat_in
        assert np.allclose(flat_out @ proj, flat_out, atol=1e-12)

    def test_duplicate_collapses(self):
        g = rng.normal_matrix(10, (0,), (2, 2))
        out = orthogonalize(GeneratorBasis(np.stack([g, g])), 1.0)
        assert out.count == 1
        direction = out.generators[0].ravel()
        assert abs(abs(direction @ g.ravel()) - np.linalg.norm(g)) < 1e-10

    def test_rank_deficient_triple(self):
        a = rng.normal_matrix(11, (0,), (3, 3))
        b = rng.normal_matrix(11, (1,), (3, 3))
        c = 0.5 * a - 2.0 * b
        out = orthogonalize(GeneratorBasis(np.stack([a, b, c])), 1.0 - 1e-9)
        assert out.count == 2
        flat_in = np.stack([a, b]).reshape(2, -1)
        q_in, _ = np.linalg.qr(flat_in.T)
        flat_out = out.generators.reshape(2, -1)
        residual = flat_out.T - q_in @ (q_in.T @ flat_out.T)
        assert np.linalg.norm(residual) < 1e-8

    def test_output_is_frobenius_orthonormal(self):
        basis = GeneratorBasis(rng.normal_matrix(12, (0,), (4, 3, 3)))
        out = orthogonalize(basis, 1.0)
        flat = out.generators.reshape(out.count, -1)
        assert np.allclose(flat @ flat.T, np.eye(out.count), atol=1e-8)

    @pytest.mark.parametrize("threshold", [0.5, 0.9, 1.0])
    def test_idempotent(self, threshold):
        basis = GeneratorBasis(rng.normal_matrix(13, (0,), (3, 3, 3)))
        once = orthogonalize(basis, threshold)
        twice = orthogonalize(once, threshold)
        assert twice.count == once.count
        for g1, g2 in zip(once.generators, twice.generators):
            assert min(np.abs(g1 - g2).max(), np.abs(g1 + g2).max()) < 1e-10

    def test_never_increases_count(self):
        basis = GeneratorBasis(rng.normal_matrix(14, (0,), (3, 2, 2)))
        for thr in (0.3, 0.8, 1.0):
            assert orthogonalize(basis, thr).count <= basis.count

    def test_rejects_zero_basis(self):
        with pytest.raises(NumericError):
            orthogonalize(GeneratorBasis(np.zeros((2, 2, 2))))


def test_generator_derivative_at_identity():
    # d/dt exp(tG) z at t=0 equals Gz (central finite difference)
    g = rng.normal_matrix(15, (0,), (3, 3))
    basis = GeneratorBasis(g[None])
    z = rng.normals(15, (1,), 3)
    h = 1e-5
    fd = (apply_exact(basis, [h], z) - apply_exact(basis, [-h], z)) / (2 * h)
    exact = g @ z
    assert np.linalg.norm(fd - exact) / np.linalg.norm(exact) < 1e-6


def test_combine_matches_sum():
    basis = GeneratorBasis(rng.normal_matrix(16, (0,), (3, 2, 2)))
    lam = rng.normals(16, (1,), 3)
    manual = sum(l * g for l, g in zip(lam, basis.generators))
    assert np.allclose(combine(basis, lam), manual, atol=1e-15)
