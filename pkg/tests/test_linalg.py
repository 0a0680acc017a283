"""Kernels against independent oracles: thin SVD and sparse NNLS."""

import numpy as np
import pytest

from hyperred.linalg import LinalgError, NnlsSolution, snnls, svd_thin, truncate_basis


def eigen_oracle(matrix: np.ndarray):
    """Singular triplets from a symmetric eigensolve of D^T D."""
    gram = matrix.T @ matrix
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    sigmas = np.sqrt(evals)
    right = evecs[:, order]
    left = np.zeros((matrix.shape[0], sigmas.size))
    for i, s in enumerate(sigmas):
        if s > 1e-12:
            left[:, i] = matrix @ right[:, i] / s
    return left, sigmas, right


def exhaustive_support_oracle(y: np.ndarray, b: np.ndarray):
    """Best non-negative solution over all support sets (brute force)."""
    n = y.shape[1]
    best_r, best_w = np.linalg.norm(b), np.zeros(n)
    for mask in range(1, 2**n):
        cols = [j for j in range(n) if mask >> j & 1]
        sol, *_ = np.linalg.lstsq(y[:, cols], b, rcond=None)
        if np.any(sol < 0.0):
            continue
        w = np.zeros(n)
        w[cols] = sol
        r = np.linalg.norm(y @ w - b)
        if r < best_r - 1e-12:
            best_r, best_w = r, w
    return best_w, best_r


class TestSvdThin:
    def test_identity(self):
        res = svd_thin(np.eye(3))
        assert np.allclose(res.singular_values, 1.0)
        # left vectors are signed permutations of identity columns
        assert np.allclose(np.abs(res.left_vectors).sum(axis=0), 1.0)
        assert np.allclose(res.left_vectors @ np.diag(res.singular_values) @ res.right_vectors,
                           np.eye(3), atol=1e-14)

    def test_rank_one_outer_product(self):
        rng = np.random.default_rng(3)
        u = rng.standard_normal(6)
        u *= 2.0 / np.linalg.norm(u)
        v = rng.standard_normal(4)
        v *= 3.0 / np.linalg.norm(v)
        res = svd_thin(np.outer(u, v))
        assert res.singular_values[0] == pytest.approx(6.0, rel=1e-12)
        assert np.all(res.singular_values[1:] < 1e-12)

    def test_matches_eigen_oracle(self):
        rng = np.random.default_rng(7)
        d = rng.standard_normal((10, 5))
        res = svd_thin(d)
        _, sig_o, _ = eigen_oracle(d)
        assert np.allclose(res.singular_values, sig_o, rtol=1e-8)

    @pytest.mark.parametrize("shape", [(5, 9), (9, 5), (4, 4)])
    def test_reconstruction(self, shape):
        rng = np.random.default_rng(sum(shape))
        d = rng.standard_normal(shape)
        res = svd_thin(d)
        assert res.rank == min(shape)
        rec = res.left_vectors @ np.diag(res.singular_values) @ res.right_vectors
        assert np.linalg.norm(rec - d) <= 1e-10 * np.linalg.norm(d)
        gram = res.left_vectors.T @ res.left_vectors
        assert np.abs(gram - np.eye(res.rank)).max() < 1e-12

    def test_ordering_and_sign_convention(self):
        rng = np.random.default_rng(11)
        res = svd_thin(rng.standard_normal((8, 6)))
        assert np.all(np.diff(res.singular_values) <= 1e-14)
        dominant = np.abs(res.left_vectors).argmax(axis=0)
        assert np.all(res.left_vectors[dominant, np.arange(6)] > 0.0)

    def test_deterministic(self):
        rng = np.random.default_rng(13)
        d = rng.standard_normal((12, 7))
        a = svd_thin(d.copy())
        b = svd_thin(d.copy())
        assert np.array_equal(a.left_vectors, b.left_vectors)

    def test_nonfinite_rejected_naming_column(self):
        d = np.ones((3, 3))
        d[1, 2] = np.nan
        with pytest.raises(LinalgError, match="column: 2"):
            svd_thin(d)

    def test_empty_rejected(self):
        with pytest.raises(LinalgError):
            svd_thin(np.zeros((0, 3)))


class TestTruncateBasis:
    def test_full_truncation_is_identity(self):
        rng = np.random.default_rng(17)
        res = svd_thin(rng.standard_normal((6, 4)))
        assert np.array_equal(truncate_basis(res, 4), res.left_vectors)

    def test_identity_single_column(self):
        res = svd_thin(np.eye(3))
        col = truncate_basis(res, 1)
        assert col.shape == (3, 1)
        assert np.linalg.norm(col) == pytest.approx(1.0)

    def test_matches_eigen_oracle_up_to_sign(self):
        rng = np.random.default_rng(19)
        d = rng.standard_normal((10, 5))
        phi = truncate_basis(svd_thin(d), 3)
        left_o, _, _ = eigen_oracle(d)
        for j in range(3):
            dot = abs(phi[:, j] @ left_o[:, j])
            assert dot == pytest.approx(1.0, abs=1e-8)

    def test_orthonormal(self):
        rng = np.random.default_rng(23)
        phi = truncate_basis(svd_thin(rng.standard_normal((12, 6))), 4)
        assert np.abs(phi.T @ phi - np.eye(4)).max() < 1e-10

    def test_out_of_range_carries_rank(self):
        res = svd_thin(np.eye(3))
        with pytest.raises(LinalgError, match="r=3"):
            truncate_basis(res, 4)
        with pytest.raises(LinalgError):
            truncate_basis(res, 0)


class TestSnnls:
    def test_single_matching_column(self):
        rng = np.random.default_rng(29)
        b = rng.random(5) + 0.1
        sol = snnls(b[:, None], b, 1e-6)
        assert sol.weights == pytest.approx([1.0])
        assert sol.residual_norm < 1e-12
        assert sol.termination == "tolerance_met"

    def test_zero_rhs(self):
        rng = np.random.default_rng(31)
        sol = snnls(rng.random((5, 3)), np.zeros(5), 0.5)
        assert np.array_equal(sol.weights, np.zeros(3))
        assert sol.residual_norm == 0.0
        assert not sol.tolerance_not_met

    def test_matches_exhaustive_support_oracle(self):
        rng = np.random.default_rng(37)
        for _ in range(25):
            y = rng.random((6, 4))
            b = rng.random(6)
            sol = snnls(y, b, 1e-8)
            w_o, _ = exhaustive_support_oracle(y, b)
            assert np.abs(sol.weights - w_o).max() < 1e-8

    def test_weights_never_negative(self):
        rng = np.random.default_rng(41)
        for _ in range(10):
            y = rng.standard_normal((8, 5))
            b = rng.standard_normal(8)
            sol = snnls(y, b, 1e-3)
            assert np.all(sol.weights >= 0.0)

    def test_zero_column_never_changes_residual(self):
        rng = np.random.default_rng(43)
        y = rng.random((6, 3))
        b = rng.random(6)
        r1 = snnls(y, b, 1e-10).residual_norm
        y_padded = np.concatenate([np.zeros((6, 1)), y], axis=1)
        r2 = snnls(y_padded, b, 1e-10).residual_norm
        assert r1 == pytest.approx(r2, abs=1e-12)

    def test_loose_tolerance_returns_empty(self):
        rng = np.random.default_rng(47)
        y = rng.random((6, 4))
        b = 0.01 * rng.random(6)
        sol = snnls(y, b, 2.0)  # tau > 1: w = 0 feasible
        assert np.array_equal(sol.weights, np.zeros(4))
        assert sol.iterations == 0

    def test_early_exit_is_sparse(self):
        rng = np.random.default_rng(53)
        y = rng.random((40, 30))
        w_true = np.zeros(30)
        w_true[[3, 7, 15]] = (1.0, 2.0, 0.5)
        b = y @ w_true
        sol = snnls(y, b, 1e-2)
        assert np.count_nonzero(sol.weights) <= 6
        assert sol.residual_norm < 1e-2 * np.linalg.norm(b)

    def test_unit_recovery_at_tight_tolerance(self):
        rng = np.random.default_rng(59)
        y = rng.random((60, 10))
        b = y @ np.ones(10)
        sol = snnls(y, b, 1e-12)
        assert np.abs(sol.weights - 1.0).max() < 1e-8

    def test_tolerance_not_met_flag(self):
        # b has a component outside the non-negative cone of Y columns.
        y = np.array([[1.0], [0.0]])
        b = np.array([-1.0, 1.0])
        sol = snnls(y, b, 1e-6)
        assert sol.tolerance_not_met
        assert sol.termination == "optimum_reached"
        assert np.all(sol.weights >= 0.0)

    def test_residual_recomputed(self):
        rng = np.random.default_rng(61)
        y = rng.random((7, 3))
        b = rng.random(7)
        sol = snnls(y, b, 1e-9)
        assert sol.residual_norm == pytest.approx(
            float(np.linalg.norm(y @ sol.weights - b)), rel=1e-10
        )

    def test_shape_and_tau_validation(self):
        with pytest.raises(LinalgError):
            snnls(np.ones((3, 2)), np.ones(4), 0.1)
        with pytest.raises(LinalgError):
            snnls(np.ones((3, 2)), np.ones(3), -0.1)

    def test_result_type(self):
        sol = snnls(np.eye(2), np.ones(2), 1e-9)
        assert isinstance(sol, NnlsSolution)
