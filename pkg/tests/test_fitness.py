import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evoloss.fitness import (
    ClusterModel,
    FitnessError,
    FitnessReport,
    cluster_mass,
    elo_fitness,
    kl_divergence,
    kmeans,
    parity_split,
    soft_membership,
    weak_fitness,
    zipf_prior,
)


def blobs(rng, means, counts, sigma):
    return np.concatenate([rng.normal(m, sigma, (c, len(m))) for m, c in zip(means, counts)])


class TestKmeans:
    def test_single_cluster_is_mean(self):
        X = np.random.default_rng(0).normal(size=(50, 3))
        np.testing.assert_allclose(kmeans(X, 1, seed=0).centroids[0], X.mean(0), atol=1e-12)

    def test_two_blobs(self):
        rng = np.random.default_rng(1)
        means = np.array([[0.0, 0.0], [10.0, 0.0]])
        X = blobs(rng, means, [100, 100], 0.1)
        C = kmeans(X, 2, seed=3).centroids
        C = C[np.argsort(C[:, 0])]
        assert np.abs(C - means).max() < 0.2

    def test_deterministic(self):
        X = np.random.default_rng(2).normal(size=(80, 4))
        assert kmeans(X, 5, seed=7).centroids.tobytes() == kmeans(X, 5, seed=7).centroids.tobytes()

    def test_sse_non_increasing(self):
        X = np.random.default_rng(3).normal(size=(300, 5))
        trace = kmeans(X, 6, seed=0).sse_trace
        assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))

    def test_too_few_points(self):
        with pytest.raises(FitnessError):
            kmeans(np.zeros((2, 2)), 3)

    def test_duplicate_points(self):
        model = kmeans(np.ones((10, 2)), 3, seed=0)
        assert np.isfinite(model.centroids).all()


class TestMembership:
    def test_equidistant_uniform(self):
        model = ClusterModel(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]), 4, 0)
        np.testing.assert_allclose(soft_membership([0.0, 0.0], model), 0.25, atol=1e-12)

    def test_worked_example(self):
        model = ClusterModel(np.array([[0.0], [math.sqrt(math.log(9.0))]]), 2, 0)
        np.testing.assert_allclose(soft_membership([0.0], model), [0.9, 0.1], atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), scale=st.floats(0.01, 100.0))
    def test_rows_sum_to_one(self, seed, scale):
        rng = np.random.default_rng(seed)
        model = ClusterModel(rng.normal(size=(5, 3)) * scale, 5, 0)
        p = soft_membership(rng.normal(size=(20, 3)) * scale, model)
        assert np.all(np.abs(p.sum(1) - 1) < 1e-12) and np.isfinite(p).all()


class TestZipfAndKL:
    def test_zipf_values(self):
        assert zipf_prior(1, 1.0).tolist() == [1.0]
        np.testing.assert_allclose(zipf_prior(3, 1.0), [6 / 11, 3 / 11, 2 / 11], atol=1e-12, rtol=0)
        assert zipf_prior(3, 10.0)[0] > 0.99

    def test_zipf_decreasing(self):
        q = zipf_prior(8, 1.3)
        assert np.all(np.diff(q) < 0) and abs(q.sum() - 1) < 1e-12

    def test_zipf_bad_args(self):
        with pytest.raises(FitnessError):
            zipf_prior(0, 1.0)
        with pytest.raises(FitnessError):
            zipf_prior(3, 0.0)

    def test_mass(self):
        np.testing.assert_array_equal(cluster_mass([[0.2, 0.8]]), [0.2, 0.8])
        np.testing.assert_array_equal(cluster_mass([[1, 0], [0, 1]]), [0.5, 0.5])

    def test_mass_scalar_loop(self):
        m = np.random.default_rng(0).dirichlet(np.ones(4), size=37)
        exp = [0.0] * 4
        for row in m:
            for j in range(4):
                exp[j] += row[j] / len(m)
        np.testing.assert_allclose(cluster_mass(m), exp, atol=1e-12, rtol=0)

    def test_kl_basic(self):
        p = np.array([0.2, 0.3, 0.5])
        assert abs(kl_divergence(p, p)) < 1e-12
        assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-9)

    def test_kl_scalar_loop(self):
        rng = np.random.default_rng(1)
        p, q = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        exp = sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
        assert kl_divergence(p, q) == pytest.approx(exp, abs=1e-12)

    def test_kl_zero_support(self):
        with pytest.raises(FitnessError):
            kl_divergence([0.5, 0.5], [1.0, 0.0])


class TestElo:
    def test_uniform_masses_hand_value(self):
        # three tight, equal, far-apart blobs -> masses (1/3, 1/3, 1/3)
        rng = np.random.default_rng(0)
        X = blobs(rng, np.eye(3) * 20, [200, 200, 200], 0.01)
        q = [6 / 11, 3 / 11, 2 / 11]
        exp = sum(1 / 3 * math.log((1 / 3) / qi) for qi in q)
        rep = elo_fitness(X, 3, 1.0, trials=3)
        assert rep.mean_kl == pytest.approx(exp, abs=1e-6)
        # (1/3) ln(11^3 / (18 * 9 * 6)) by hand
        assert exp == pytest.approx(math.log(1331 / 972) / 3, abs=1e-12)

    def test_zipf_shaped_masses_near_zero(self):
        rng = np.random.default_rng(1)
        X = blobs(rng, np.eye(3) * 20, [600, 300, 200], 0.01)
        rep = elo_fitness(X, 3, 1.0, trials=3)
        assert rep.mean_kl < 1e-6 and rep.fitness <= 0

    def test_report_shape_and_json(self):
        X = np.random.default_rng(2).normal(size=(100, 4))
        rep = elo_fitness(X, 4, trials=5)
        assert len(rep.per_trial_kl) == 5 and rep.fitness == -rep.mean_kl <= 0
        assert abs(sum(rep.cluster_masses) - 1) < 1e-9 and abs(sum(rep.prior) - 1) < 1e-9
        back = FitnessReport.from_dict(__import__("json").loads(rep.to_json()))
        assert back == rep

    def test_row_permutation_invariant(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(120, 5))
        a = elo_fitness(X, 4, trials=4)
        b = elo_fitness(X[rng.permutation(120)], 4, trials=4)
        assert a.per_trial_kl == b.per_trial_kl

    def test_rotation_within_trial_spread(self):
        rng = np.random.default_rng(4)
        X = blobs(rng, rng.normal(0, 3, (4, 6)), [80, 60, 40, 20], 0.5)
        Q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        a, b = elo_fitness(X, 4, trials=10), elo_fitness(X @ Q, 4, trials=10)
        spread = max(np.std(a.per_trial_kl), np.std(b.per_trial_kl), 1e-6)
        assert abs(a.mean_kl - b.mean_kl) <= 3 * spread


class TestWeak:
    def test_one_hot_is_perfect(self):
        y = np.random.default_rng(0).integers(0, 5, 400)
        assert weak_fitness(np.eye(5)[y], y, 5, trials=3) == 1.0

    def test_noise_is_chance(self):
        rng = np.random.default_rng(1)
        y = rng.integers(0, 4, 2000)
        acc = weak_fitness(rng.normal(size=(2000, 8)), y, 4, trials=5)
        assert abs(acc - 0.25) < 0.05

    def test_permutation_invariant(self):
        rng = np.random.default_rng(2)
        y = rng.integers(0, 3, 300)
        X = rng.normal(size=(300, 4)) + y[:, None]
        ids = np.arange(300)
        perm = rng.permutation(300)
        a = weak_fitness(X, y, 3, trials=4, clip_ids=ids)
        b = weak_fitness(X[perm], y[perm], 3, trials=4, clip_ids=ids[perm])
        assert a == b

    def test_parity_split(self):
        fit, ev = parity_split([5, 2, 3, 4])
        assert fit.tolist() == [1, 3] and ev.tolist() == [2, 0]

    def test_length_mismatch(self):
        with pytest.raises(FitnessError):
            weak_fitness(np.zeros((4, 2)), [0, 1], 2)
