import numpy as np
import pytest

from fedgraph.datasets import (
    gen_moons,
    gen_ring,
    load_csv,
    partition_clients,
    standardize,
)
from fedgraph.errors import InvalidInputError


class TestGenMoons:
    def test_counts_and_balanced_labels(self):
        ds = gen_moons(1000, 0.06, seed=1)
        assert ds.n == 1000
        assert ds.points.shape == (1000, 2)
        assert np.bincount(ds.labels).tolist() == [500, 500]

    def test_noiseless_arcs_satisfy_circle_equations(self):
        ds = gen_moons(400, 0.0, seed=2)
        arc0 = ds.points[ds.labels == 0]
        arc1 = ds.points[ds.labels == 1]
        assert np.allclose(np.sum(arc0**2, axis=1), 1.0, atol=1e-12)
        assert np.all(arc0[:, 1] >= -1e-12)
        shifted = arc1 - np.array([1.0, 0.5])
        assert np.allclose(np.sum(shifted**2, axis=1), 1.0, atol=1e-12)
        assert np.all(arc1[:, 1] <= 0.5 + 1e-12)

    def test_deterministic(self):
        a = gen_moons(100, 0.06, seed=7)
        b = gen_moons(100, 0.06, seed=7)
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.labels, b.labels)

    def test_odd_n_rejected(self):
        with pytest.raises(InvalidInputError):
            gen_moons(101)


class TestGenRing:
    def test_reference_shape(self):
        ds = gen_ring(5000, dim=20, classes=5, seed=0)
        assert ds.points.shape == (5000, 20)
        assert ds.class_count == 5
        assert np.bincount(ds.labels).tolist() == [1000] * 5

    def test_radii_strictly_increasing(self):
        ds = gen_ring(500, dim=6, classes=5, seed=3)
        radii = np.linalg.norm(ds.points[:, :2], axis=1)
        means = [radii[ds.labels == c].mean() for c in range(5)]
        assert np.allclose(means, [1, 2, 3, 4, 5], atol=1e-9)
        assert all(means[i] < means[i + 1] for i in range(4))

    def test_deterministic(self):
        a = gen_ring(100, dim=4, classes=5, seed=9)
        b = gen_ring(100, dim=4, classes=5, seed=9)
        assert np.array_equal(a.points, b.points)

    def test_indivisible_n_rejected(self):
        with pytest.raises(InvalidInputError):
            gen_ring(101, classes=5)


class TestLoadCsv:
    def test_iris_file(self):
        ds = load_csv("data/iris.csv", label_column="species")
        assert ds.points.shape == (150, 4)
        assert ds.class_count == 3
        assert sorted(np.bincount(ds.labels).tolist()) == [50, 50, 50]

    def test_header_skipped(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("a,b,label\n1,2,x\n3,4,y\n")
        ds = load_csv(p, label_column=2)
        assert ds.points.shape == (2, 2)
        assert ds.labels.tolist() == [0, 1]

    def test_headerless_numeric(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("1,2\n3,4\n")
        ds = load_csv(p)
        assert ds.points.shape == (2, 2)
        assert ds.labels is None

    def test_missing_file(self):
        with pytest.raises(OSError):
            load_csv("/nonexistent/file.csv")

    def test_ragged_row_reports_line(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("1,2\n3,4,5\n")
        with pytest.raises(InvalidInputError, match=":2:"):
            load_csv(p)

    def test_non_numeric_cell_reports_line(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("1,2\n3,oops\n")
        with pytest.raises(InvalidInputError, match=":2:"):
            load_csv(p)

    def test_label_factorization_first_appearance(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("1,zz\n2,aa\n3,zz\n")
        ds = load_csv(p, label_column=1)
        assert ds.labels.tolist() == [0, 1, 0]


class TestStandardize:
    def test_zero_mean_unit_std(self):
        rng = np.random.default_rng(0)
        x = rng.normal(3.0, 5.0, (200, 4))
        z = standardize(x)
        assert np.allclose(z.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(z.std(axis=0), 1.0, atol=1e-12)


class TestPartitionClients:
    def test_uniform_split_matches_global_histogram(self):
        ds = gen_moons(2000, 0.06, seed=0)
        plan = partition_clients(ds, 2, het=0.0, seed=1)
        plan.validate(2000)
        for idx in plan.client_indices:
            hist = np.bincount(ds.labels[idx], minlength=2) / len(idx)
            assert np.all(np.abs(hist - 0.5) < 0.05)

    def test_high_heterogeneity_dominant_fraction(self):
        # 6 classes over 3 clients: every dominant pool covers its quota.
        ds = gen_ring(1800, dim=4, classes=6, seed=0)
        plan = partition_clients(ds, 3, het=0.95, seed=2)
        dominant = {0: [0, 3], 1: [1, 4], 2: [2, 5]}
        for k, idx in enumerate(plan.client_indices):
            frac = np.isin(ds.labels[idx], dominant[k]).mean()
            assert 0.90 <= frac <= 1.0

    def test_short_dominant_pool_spills_with_warning(self):
        ds = gen_ring(2000, dim=4, classes=5, seed=0)
        with pytest.warns(UserWarning, match="spilling"):
            plan = partition_clients(ds, 3, het=0.95, seed=2)
        plan.validate(2000)

    def test_partition_exact_for_many_settings(self):
        ds = gen_ring(600, dim=4, classes=5, seed=1)
        for m in (1, 2, 3, 4):
            for het in (0.0, 0.3, 0.8):
                plan = partition_clients(ds, m, het=het, seed=5)
                plan.validate(600)

    def test_deterministic(self):
        ds = gen_moons(500, seed=0)
        a = partition_clients(ds, 3, het=0.4, seed=9)
        b = partition_clients(ds, 3, het=0.4, seed=9)
        for x, y in zip(a.client_indices, b.client_indices):
            assert np.array_equal(x, y)

    def test_bad_ratio_rejected(self):
        ds = gen_moons(100, seed=0)
        with pytest.raises(InvalidInputError):
            partition_clients(ds, 2, het=1.0)
