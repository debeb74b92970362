import math

import numpy as np
import pytest

from conftest import rel_err
from pnca.kernels import (
    Bandwidth,
    clamp_nonneg,
    median_bandwidth,
    orf_build,
    orf_map,
    pairwise_sq_dists,
    param_rbf,
    param_rbf_matrix,
    sqexp,
    sqexp_grad,
)
from pnca.rng import seeded_rng


class TestSqexp:
    def test_coincident_points(self):
        z = np.array([0.3, -1.2, 4.0])
        assert sqexp(z, z) == 1.0

    def test_log_two_distance(self):
        z = np.zeros(1)
        zp = np.array([math.sqrt(math.log(2.0))])
        assert abs(sqexp(z, zp) - 0.5) < 1e-15

    def test_matches_direct_evaluation(self):
        rng = np.random.default_rng(0)
        z, zp = rng.normal(size=(2, 5))
        direct = math.exp(-sum((a - b) ** 2 for a, b in zip(z, zp)))
        assert abs(sqexp(z, zp) - direct) < 1e-15

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            z, zp = rng.normal(size=(2, 4))
            k = sqexp(z, zp)
            assert k == sqexp(zp, z)
            assert 0.0 < k <= 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            sqexp(np.zeros(3), np.zeros(4))


class TestSqexpGrad:
    def test_zero_at_maximum(self):
        z = np.array([1.0, 2.0])
        gz, gzp = sqexp_grad(z, z)
        assert not gz.any() and not gzp.any()

    def test_one_dimensional_value(self):
        gz, gzp = sqexp_grad(np.array([0.0]), np.array([1.0]))
        assert abs(gz[0] - 2.0 * math.exp(-1.0)) < 1e-15
        assert gzp[0] == -gz[0]

    @pytest.mark.parametrize("trial", range(20))
    def test_matches_finite_differences(self, trial):
        rng = np.random.default_rng(trial)
        z, zp = rng.normal(scale=0.7, size=(2, 4))
        gz, gzp = sqexp_grad(z, zp)
        eps = 1e-6
        for i in range(4):
            dz = np.zeros(4)
            dz[i] = eps
            fd_z = (sqexp(z + dz, zp) - sqexp(z - dz, zp)) / (2 * eps)
            fd_zp = (sqexp(z, zp + dz) - sqexp(z, zp - dz)) / (2 * eps)
            assert abs(gz[i] - fd_z) / max(abs(fd_z), 1e-12) < 1e-7
            assert abs(gzp[i] - fd_zp) / max(abs(fd_zp), 1e-12) < 1e-7


class TestParamRbf:
    def test_self_kernel_is_one(self):
        w = np.random.default_rng(0).normal(size=10)
        assert param_rbf(w, w, Bandwidth(2.0)) == 1.0

    def test_distance_equal_to_bandwidth(self):
        w = np.zeros(4)
        wp = np.array([1.0, 1.0, 1.0, 0.0])  # squared distance 3
        assert abs(param_rbf(w, wp, Bandwidth(3.0)) - math.exp(-1.0)) < 1e-15

    def test_matches_direct_evaluation(self):
        rng = np.random.default_rng(3)
        w, wp = rng.normal(size=(2, 16))
        h = float(median_bandwidth(np.stack([w, wp])).h)
        direct = math.exp(-float(((w - wp) ** 2).sum()) / h)
        assert abs(param_rbf(w, wp, Bandwidth(h)) - direct) < 1e-15


class TestMedianBandwidth:
    def test_single_particle_fallback(self):
        assert median_bandwidth(np.ones((1, 5))).h == 1.0

    def test_coincident_particles_fallback(self):
        assert median_bandwidth(np.ones((4, 5))).h == 1.0

    def test_two_particles_at_distance_two(self):
        w = np.zeros((2, 3))
        w[1, 0] = 2.0
        assert abs(median_bandwidth(w).h - 4.0 / math.log(3.0)) < 1e-12

    def test_kernel_rows_act_like_distributions(self):
        # The heuristic should make each particle's kernel row sum sit
        # near one; this is a soft property, so it is only reported.
        rng = np.random.default_rng(7)
        w = rng.normal(size=(5, 12))
        kappa = param_rbf_matrix(w, median_bandwidth(w))
        sums = kappa.sum(axis=1)
        print(f"median-heuristic kappa row sums: {np.round(sums, 3)}")
        assert np.all(np.isfinite(sums))


class TestPairwiseSqDists:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(6, 3))
        b = rng.normal(size=(4, 3))
        d = pairwise_sq_dists(a, b)
        for i in range(6):
            for j in range(4):
                assert abs(d[i, j] - ((a[i] - b[j]) ** 2).sum()) < 1e-12

    def test_self_distances_symmetric_zero_diagonal(self):
        a = np.random.default_rng(3).normal(size=(8, 5))
        d = pairwise_sq_dists(a)
        assert np.array_equal(d, d.T)
        assert np.array_equal(np.diag(d), np.zeros(8))
        assert d.min() >= 0.0


class TestOrf:
    def test_default_feature_count_is_ten_d(self):
        proj = orf_build(3, seeded_rng(0))
        assert proj.num_features == 30
        assert proj.projection.shape == (15, 3)

    def test_deterministic(self):
        a = orf_build(4, seeded_rng(5))
        b = orf_build(4, seeded_rng(5))
        assert a.projection.tobytes() == b.projection.tobytes()

    def test_invalid_sizes_rejected(self):
        with pytest.raises(ValueError):
            orf_build(0, seeded_rng(0))
        with pytest.raises(ValueError):
            orf_build(3, seeded_rng(0), num_features=7)
        with pytest.raises(ValueError):
            orf_build(3, seeded_rng(0), num_features=0)

    def test_feature_rows_have_unit_norm(self):
        proj = orf_build(4, seeded_rng(1))
        z = np.random.default_rng(2).normal(size=(20, 4))
        phi = orf_map(proj, z)
        assert np.abs((phi**2).sum(axis=1) - 1.0).max() < 1e-12

    def test_continuity_near_coincidence(self):
        proj = orf_build(3, seeded_rng(2))
        z = np.random.default_rng(0).normal(size=(1, 3))
        zp = z + 1e-8
        phis = orf_map(proj, np.vstack([z, zp]))
        dot = float(phis[0] @ phis[1])
        assert 1.0 - 1e-9 <= dot <= 1.0 + 1e-12

    def test_estimates_kernel_within_monte_carlo_tolerance(self):
        proj = orf_build(2, seeded_rng(3), num_features=1000)
        rng = np.random.default_rng(4)
        z = rng.normal(scale=0.5, size=(200, 2))
        zp = rng.normal(scale=0.5, size=(200, 2))
        phi_z = orf_map(proj, z)
        phi_zp = orf_map(proj, zp)
        errs = [
            abs(float(phi_z[i] @ phi_zp[i]) - sqexp(z[i], zp[i])) for i in range(200)
        ]
        assert np.mean(errs) < 0.05

    def test_error_decreases_as_features_double(self):
        d = 5
        rng = np.random.default_rng(8)
        z = rng.normal(scale=0.5, size=(500, d))
        zp = rng.normal(scale=0.5, size=(500, d))
        exact = np.array([sqexp(z[i], zp[i]) for i in range(500)])
        maes = {}
        for factor in (2, 8, 32):
            per_seed = []
            for seed in range(20):
                proj = orf_build(d, seeded_rng(seed), num_features=factor * d)
                approx = np.einsum(
                    "ij,ij->i", orf_map(proj, z), orf_map(proj, zp)
                )
                per_seed.append(np.abs(approx - exact).mean())
            maes[factor] = np.mean(per_seed)
        assert maes[2] > maes[8] > maes[32]


class TestClamp:
    def test_zeroes_spurious_negatives(self):
        k = np.array([[-0.01, 0.3], [0.3, 1.0]])
        assert np.array_equal(clamp_nonneg(k), np.array([[0.0, 0.3], [0.3, 1.0]]))

    def test_nonnegative_input_unchanged(self):
        k = np.array([[0.2, 0.0], [0.5, 1.0]])
        assert np.array_equal(clamp_nonneg(k), k)

    def test_idempotent(self):
        k = np.random.default_rng(0).normal(size=(5, 5))
        once = clamp_nonneg(k)
        assert np.array_equal(clamp_nonneg(once), once)


def test_bandwidth_requires_positive_finite():
    with pytest.raises(ValueError):
        Bandwidth(0.0)
    with pytest.raises(ValueError):
        Bandwidth(math.inf)
