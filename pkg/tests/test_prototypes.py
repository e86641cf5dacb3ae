import numpy as np
import pytest
from scipy import stats

from fedgraph.errors import InvalidInputError
from fedgraph.prototypes import (
    Prototype,
    PrototypeSet,
    compute_sensitivities,
    fit_gmm,
    fit_gmm_full,
    l1_bound_rows,
    l1_normalize,
    noise_draw_count,
    privatize_prototypes,
    psd_repair,
    reset_noise_draw_count,
)


def blob_pair(n_per=60, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 0.4, (n_per, 2))
    b = rng.normal(10.0, 0.4, (n_per, 2))
    return np.vstack([a, b])


def simple_protoset(d=3, c=2, seed=0):
    rng = np.random.default_rng(seed)
    protos = []
    for _ in range(c):
        a = rng.normal(size=(d, d))
        protos.append(
            Prototype(mean=rng.normal(size=d), covariance=a @ a.T + np.eye(d), weight=1.0 / c)
        )
    return PrototypeSet(client_id=0, prototypes=protos)


class TestFitGmm:
    def test_single_component_is_sample_moments(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(50, 3))
        protos, assign = fit_gmm(x, 1, seed=0)
        assert np.allclose(protos.prototypes[0].mean, x.mean(axis=0), atol=1e-9)
        expected = np.cov(x, rowvar=False, ddof=0) + 1e-6 * np.eye(3)
        assert np.allclose(protos.prototypes[0].covariance, expected, atol=1e-9)
        assert np.all(assign.labels == 0)

    def test_two_blobs_recovers_centers(self):
        x = blob_pair()
        protos, _ = fit_gmm(x, 2, seed=3)
        means = np.sort(protos.means()[:, 0])
        assert abs(means[0] - 0.0) < 0.5
        assert abs(means[1] - 10.0) < 0.5

    def test_deterministic_bitwise(self):
        x = blob_pair(seed=4)
        a, _ = fit_gmm(x, 2, seed=11)
        b, _ = fit_gmm(x, 2, seed=11)
        for pa, pb in zip(a.prototypes, b.prototypes):
            assert np.array_equal(pa.mean, pb.mean)
            assert np.array_equal(pa.covariance, pb.covariance)
            assert pa.weight == pb.weight

    def test_responsibilities_rows_sum_to_one(self):
        fit = fit_gmm_full(blob_pair(seed=5), 2, seed=0)
        sums = fit.responsibilities.sum(axis=1)
        assert np.allclose(sums, 1.0, atol=1e-9)

    def test_log_likelihood_non_decreasing(self):
        fit = fit_gmm_full(blob_pair(seed=6), 2, seed=1)
        trace = fit.log_likelihood_trace
        assert all(b >= a - 1e-7 for a, b in zip(trace, trace[1:]))

    def test_weights_sum_to_one(self):
        protos, _ = fit_gmm(blob_pair(seed=7), 2, seed=2)
        protos.validate()
        assert protos.weights().sum() == pytest.approx(1.0, abs=1e-6)

    def test_init_labels_respected(self):
        x = blob_pair(seed=8)
        truth = np.repeat([0, 1], 60)
        protos, assign = fit_gmm(x, 2, seed=0, init_labels=truth)
        agree = max(
            np.mean(assign.labels == truth), np.mean(assign.labels == 1 - truth)
        )
        assert agree == 1.0


class TestL1Normalize:
    def test_hand_example(self):
        out = l1_normalize(np.array([[3.0, 1.0], [1.0, 1.0]]))
        assert np.allclose(out[0], [0.75, 0.25])

    def test_signed_row(self):
        out = l1_normalize(np.array([[-2.0, 2.0], [1.0, 0.0]]))
        assert np.allclose(out[0], [-0.5, 0.5])
        assert np.abs(out).sum(axis=1) == pytest.approx(1.0)

    def test_idempotent(self):
        x = np.array([[0.25, 0.75], [0.5, -0.5]])
        assert np.allclose(l1_normalize(x), x)

    def test_zero_row_named(self):
        with pytest.raises(InvalidInputError, match="row 1"):
            l1_normalize(np.array([[1.0, 2.0], [0.0, 0.0]]))


class TestL1BoundRows:
    def test_bounds_and_preserves_shape(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0, 5, (40, 3))
        scaled, scale = l1_bound_rows(x)
        assert np.abs(scaled).sum(axis=1).max() <= 1.0 + 1e-12
        assert np.allclose(scaled * scale, x)

    def test_small_data_untouched(self):
        x = np.array([[0.1, 0.2], [0.0, 0.3]])
        scaled, scale = l1_bound_rows(x)
        assert scale == 1.0
        assert np.array_equal(scaled, x)


class TestSensitivities:
    def test_reference_values(self):
        b = compute_sensitivities(100)
        assert b.delta_mu == pytest.approx(0.02)
        assert b.delta_sigma == pytest.approx(0.068284, abs=1e-6)

    def test_unit_cluster(self):
        assert compute_sensitivities(1).delta_mu == pytest.approx(2.0)

    def test_exact_formulas(self):
        for n in (1, 10, 100, 1000):
            b = compute_sensitivities(n)
            assert b.delta_mu == 2.0 / n
            assert b.delta_sigma == (2.0 * np.sqrt(2.0) + 4.0) / n

    def test_zero_rejected(self):
        with pytest.raises(InvalidInputError):
            compute_sensitivities(0)


class TestPrivatize:
    def test_huge_epsilon_is_identity(self):
        ps = simple_protoset()
        bounds = compute_sensitivities(100)
        out = privatize_prototypes(ps, bounds, epsilon=1e9, rng_seed=0)
        for a, b in zip(ps.prototypes, out.prototypes):
            assert np.allclose(a.mean, b.mean, atol=1e-6)
            assert np.allclose(a.covariance, b.covariance, atol=1e-6)
        assert out.noised and out.epsilon_spent == 1e9

    def test_noise_scale_moment_calibration(self):
        # Mean absolute deviation of Laplace(b) is exactly b.
        d = 10
        reps = 1000  # 10,000 mean-noise draws total
        epsilon = 2.0
        bounds = compute_sensitivities(50)
        b_mu = bounds.delta_mu / (epsilon / 2.0)
        rng = np.random.default_rng(1)
        base = Prototype(mean=np.zeros(d), covariance=np.eye(d), weight=1.0)
        draws = []
        for rep in range(reps):
            ps = PrototypeSet(client_id=0, prototypes=[base])
            out = privatize_prototypes(ps, bounds, epsilon, rng_seed=rep)
            draws.append(out.prototypes[0].mean)
        noise = np.concatenate(draws)
        assert 0.95 * b_mu <= np.abs(noise).mean() <= 1.05 * b_mu

    def test_goodness_of_fit_over_ten_seeds(self):
        d = 40
        epsilon = 1.0
        bounds = compute_sensitivities(20)
        b_mu = bounds.delta_mu / (epsilon / 2.0)
        base = Prototype(mean=np.zeros(d), covariance=np.eye(d), weight=1.0)
        for seed in range(10):
            samples = []
            for rep in range(50):
                ps = PrototypeSet(client_id=0, prototypes=[base])
                out = privatize_prototypes(ps, bounds, epsilon, rng_seed=seed * 1000 + rep)
                samples.append(out.prototypes[0].mean)
            noise = np.concatenate(samples)
            _, pvalue = stats.kstest(noise, stats.laplace(scale=b_mu).cdf)
            assert pvalue >= 0.01

    def test_distortion_monotone_in_epsilon(self):
        bounds = compute_sensitivities(50)
        mean_dist = []
        for epsilon in (0.1, 1.0, 10.0, 100.0):
            dists = []
            for seed in range(20):
                ps = simple_protoset(seed=seed)
                out = privatize_prototypes(ps, bounds, epsilon, rng_seed=seed)
                dists.append(
                    np.mean(
                        [
                            np.linalg.norm(a.mean - b.mean)
                            for a, b in zip(ps.prototypes, out.prototypes)
                        ]
                    )
                )
            mean_dist.append(np.mean(dists))
        assert all(b <= a for a, b in zip(mean_dist, mean_dist[1:]))

    def test_bad_epsilon_rejected(self):
        ps = simple_protoset()
        with pytest.raises(InvalidInputError):
            privatize_prototypes(ps, compute_sensitivities(10), 0.0, rng_seed=0)

    def test_noise_counter_tracks_draws(self):
        reset_noise_draw_count()
        ps = simple_protoset(d=3, c=2)
        privatize_prototypes(ps, compute_sensitivities(10), 1.0, rng_seed=0)
        assert noise_draw_count() == 2 * (3 + 9)
        reset_noise_draw_count()
        assert noise_draw_count() == 0


class TestPsdRepair:
    def test_already_psd_unchanged(self):
        m = np.array([[2.0, 0.3], [0.3, 1.0]])
        assert np.allclose(psd_repair(m), m, atol=1e-9)

    def test_hand_eigen_clip(self):
        out = psd_repair(np.diag([1.0, -0.5]), floor=1e-6)
        assert np.allclose(out, np.diag([1.0, 1e-6]), atol=1e-12)

    def test_random_indefinite_floor(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(5, 5))
        m = 0.5 * (a + a.T)
        out = psd_repair(m, floor=1e-6)
        assert np.linalg.eigvalsh(out).min() >= 1e-6 - 1e-12

    def test_projection_idempotent(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(4, 4))
        m = 0.5 * (a + a.T)
        once = psd_repair(m)
        twice = psd_repair(once)
        assert np.allclose(once, twice, atol=1e-9)
