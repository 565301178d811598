import numpy as np
import pytest

from clustr.datasets import LabeledDataset, gen_circles, gen_moons, load_csv, save_csv, split
from clustr.errors import DataFormatError, InfeasibleError


class TestMoons:
    def test_noise_zero_points_on_arcs(self):
        # reconstruct the arcs, apply the same bounding-box rescale, compare
        data = gen_moons(200, 0.0, 0)
        half = 100
        t = np.linspace(0.0, np.pi, half)
        outer = np.column_stack([np.cos(t), np.sin(t)])
        inner = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
        pts = np.concatenate([outer, inner])
        mins, maxs = pts.min(axis=0), pts.max(axis=0)
        expected = 0.05 + 0.9 * (pts - mins) / (maxs - mins)
        assert np.allclose(data.inputs, expected, atol=1e-12)

    def test_balanced_labels(self):
        data = gen_moons(500, 0.1, 3)
        assert np.sum(data.labels == 0) == 250
        assert np.sum(data.labels == 1) == 250

    def test_deterministic_per_seed(self):
        a = gen_moons(100, 0.1, 42)
        b = gen_moons(100, 0.1, 42)
        assert np.array_equal(a.inputs, b.inputs)

    def test_unit_box(self):
        data = gen_moons(400, 0.3, 5)
        assert data.inputs.min() >= 0.0 and data.inputs.max() <= 1.0

    def test_small_n_rejected(self):
        with pytest.raises(InfeasibleError):
            gen_moons(2, 0.1, 0)

    def test_odd_n_rejected(self):
        with pytest.raises(InfeasibleError):
            gen_moons(101, 0.1, 0)


class TestCircles:
    def test_noise_zero_radial_separation(self):
        data = gen_circles(200, 0.5, 0.0, 0)
        center = np.array([0.5, 0.5])
        radii = np.linalg.norm(data.inputs - center, axis=1)
        assert radii[data.labels == 0].max() < radii[data.labels == 1].min()

    def test_balanced(self):
        data = gen_circles(300, 0.5, 0.05, 1)
        assert np.sum(data.labels == 0) == 150

    def test_nonpositive_gap_rejected(self):
        with pytest.raises(InfeasibleError):
            gen_circles(100, 0.0, 0.05, 0)

    def test_nearest_neighbor_oracle_perfect_at_zero_noise(self):
        data = gen_circles(200, 0.5, 0.0, 0)
        d2 = np.sum((data.inputs[:, None, :] - data.inputs[None, :, :]) ** 2, axis=2)
        np.fill_diagonal(d2, np.inf)
        neighbor = np.argmin(d2, axis=1)
        assert np.array_equal(data.labels[neighbor], data.labels)

    def test_deterministic(self):
        a = gen_circles(100, 0.4, 0.02, 9)
        b = gen_circles(100, 0.4, 0.02, 9)
        assert np.array_equal(a.inputs, b.inputs)


class TestSplit:
    def test_zero_fraction_empty_test(self):
        data = gen_moons(100, 0.1, 0)
        train, test = split(data, 0.0, 0)
        assert len(test) == 0
        assert len(train) == 100

    def test_stratified_counts(self):
        data = LabeledDataset(np.random.default_rng(0).uniform(size=(10, 2)),
                              np.array([0] * 5 + [1] * 5))
        train, test = split(data, 0.2, 0)
        assert np.sum(test.labels == 0) == 1
        assert np.sum(test.labels == 1) == 1

    def test_ratios_within_one_instance(self):
        rng = np.random.default_rng(4)
        data = LabeledDataset(rng.uniform(size=(97, 2)), rng.integers(0, 3, size=97))
        train, test = split(data, 0.3, 1)
        for c in range(3):
            total = np.sum(data.labels == c)
            got = np.sum(test.labels == c)
            assert abs(got - 0.3 * total) <= 1.0

    def test_deterministic_and_disjoint(self):
        data = gen_moons(60, 0.1, 2)
        t1 = split(data, 0.25, 5)
        t2 = split(data, 0.25, 5)
        assert np.array_equal(t1[0].inputs, t2[0].inputs)
        assert np.array_equal(t1[1].inputs, t2[1].inputs)
        assert len(t1[0]) + len(t1[1]) == 60


class TestCsv:
    def test_round_trip_bitwise(self, tmp_path):
        data = gen_moons(50, 0.17, 13)
        path = tmp_path / "d.csv"
        save_csv(data, path)
        loaded = load_csv(path)
        assert np.array_equal(loaded.inputs, data.inputs)
        assert np.array_equal(loaded.labels, data.labels)

    def test_parse_error_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x_0,x_1,label\n0.1,0.2,0\n0.3,oops,1\n")
        with pytest.raises(DataFormatError, match="line 3"):
            load_csv(path)

    def test_wrong_field_count_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x_0,x_1,label\n0.1,0.2\n")
        with pytest.raises(DataFormatError, match="line 2"):
            load_csv(path)

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("0.1,0.2,0\n")
        with pytest.raises(DataFormatError):
            load_csv(path)


class TestLabeledDataset:
    def test_out_of_box_rejected(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.array([[1.5, 0.0]]), np.array([0]))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((3, 2)), np.zeros(2, dtype=int))
