"""Tests for synthetic data, Dirichlet partitioning, label subsampling and PNM folders."""

import json
import math

import numpy as np
import pytest

from selffed.datalab import (
    UNLABELED,
    Dataset,
    PartitionPlan,
    dirichlet_partition,
    export_partition,
    heterogeneity_score,
    load_folder,
    read_pnm,
    split_train_test,
    subsample_labels,
    synth_dataset,
    write_pnm,
)
from selffed.errors import (
    FractionOutOfRangeError,
    SizeMismatchError,
    TooFewSamplesError,
    UnknownLabelError,
    UnreadableImageError,
)
from selffed.federation import fit_linear_probe, probe_accuracy


def _blank(labels, num_classes):
    labels = np.asarray(labels)
    return Dataset(np.zeros((len(labels), 1, 1, 1)), labels, np.arange(len(labels)), num_classes)


def _plan(counts):
    counts = np.asarray(counts)
    return PartitionPlan(
        num_clients=len(counts), delta=1.0, proportions=np.zeros((counts.shape[1], len(counts))),
        assignment=[np.arange(int(c.sum())) for c in counts], class_counts=counts,
    )


class TestDataset:

    def test_rejects_duplicate_ids(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 1, 1, 1)), [0, 1], [3, 3], 2)

    def test_rejects_large_labels(self):
        with pytest.raises(ValueError):
            _blank([0, 2], 2)

    def test_select_and_hide(self):
        ds = _blank([0, 1, 1, 0], 2)
        picked = ds.select_ids([3, 1])
        np.testing.assert_array_equal(picked.ids, [3, 1])
        np.testing.assert_array_equal(picked.labels, [0, 1])
        hidden = ds.hide_labels()
        assert np.all(hidden.labels == UNLABELED)
        np.testing.assert_array_equal(hidden.class_counts(), [0, 0])


class TestSynthetic:

    def test_balanced(self, rng):
        ds = synth_dataset(2, 500, 16, 1, 0.1, rng)
        assert len(ds) == 1000
        np.testing.assert_array_equal(ds.class_counts(), [500, 500])
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_noise_free_templates_repeat(self, rng):
        ds = synth_dataset(2, 30, 16, 1, 0.0, rng)
        for k in range(2):
            sums = ds.images[ds.labels == k].sum(axis=(1, 2, 3))
            assert np.all(sums == sums[0])
        assert not np.array_equal(ds.images[0], ds.images[-1])

    def test_seeded(self):
        a = synth_dataset(3, 5, 8, 3, 0.1, np.random.default_rng(1))
        b = synth_dataset(3, 5, 8, 3, 0.1, np.random.default_rng(1))
        np.testing.assert_array_equal(a.images, b.images)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_raw_pixels_are_linearly_separable(self, seed):
        rng = np.random.default_rng(seed)
        train, test = split_train_test(synth_dataset(2, 100, 16, 1, 0.1, rng), 0.3, rng)
        probe = fit_linear_probe(train.images, train.labels, 2)
        assert probe_accuracy(probe, test.images, test.labels) >= 0.8

    def test_split_is_stratified(self, rng):
        ds = synth_dataset(2, 50, 8, 1, 0.1, rng)
        train, test = split_train_test(ds, 0.2, rng)
        np.testing.assert_array_equal(test.class_counts(), [10, 10])
        assert set(train.ids).isdisjoint(test.ids)
        assert len(train) + len(test) == len(ds)
        assert list(train.ids) == sorted(train.ids)
        with pytest.raises(FractionOutOfRangeError):
            split_train_test(ds, 1.0, rng)


class TestDirichletPartition:

    def test_complete_and_disjoint(self, rng):
        ds = _blank(rng.integers(0, 3, size=300), 3)
        plan = dirichlet_partition(ds, 5, 0.5, rng)
        ids = np.concatenate(plan.assignment)
        assert sorted(ids.tolist()) == list(range(300))
        assert sum(plan.sizes) == 300
        np.testing.assert_allclose(plan.proportions.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(plan.proportions >= 0)
        np.testing.assert_array_equal(plan.class_counts.sum(axis=0), ds.class_counts())

    def test_single_client(self, rng):
        ds = _blank([0, 1, 1, 0, 1], 2)
        plan = dirichlet_partition(ds, 1, 0.5, rng)
        np.testing.assert_array_equal(plan.proportions, [[1.0], [1.0]])
        np.testing.assert_array_equal(plan.assignment[0], np.arange(5))

    def test_large_concentration_is_uniform(self, rng):
        ds = _blank(np.repeat(np.arange(4), 100), 4)
        plan = dirichlet_partition(ds, 5, 1e6, rng)
        np.testing.assert_allclose(plan.proportions, 0.2, atol=0.01)

    def test_share_band_at_delta_100(self):
        ds = _blank(np.repeat([0, 1], 10), 2)
        rng = np.random.default_rng(0)
        inside = []
        for _ in range(1000):
            rho = dirichlet_partition(ds, 5, 100.0, rng).proportions
            inside.append(np.all((rho >= 0.12) & (rho <= 0.28)))
        assert np.mean(inside) >= 0.95

    def test_seeded(self):
        ds = _blank(np.repeat([0, 1, 2], 20), 3)
        a = dirichlet_partition(ds, 4, 0.5, np.random.default_rng(3))
        b = dirichlet_partition(ds, 4, 0.5, np.random.default_rng(3))
        assert a.to_dict() == b.to_dict()

    def test_min_samples_redraws(self, rng):
        ds = _blank(np.repeat([0, 1], 50), 2)
        plan = dirichlet_partition(ds, 4, 1.0, rng, min_samples=5)
        assert min(plan.sizes) >= 5

    def test_size_multipliers_skew_quantity(self, rng):
        ds = _blank(np.repeat([0, 1], 500), 2)
        plan = dirichlet_partition(ds, 2, 1e6, rng, size_multipliers=[3.0, 1.0])
        assert plan.sizes[0] == pytest.approx(750, abs=10)

    def test_errors(self, rng):
        with pytest.raises(TooFewSamplesError):
            dirichlet_partition(_blank([0, 0, 0], 2), 2, 1.0, rng)
        with pytest.raises(TooFewSamplesError):
            dirichlet_partition(_blank([0, 1, 0, 1], 2), 3, 1.0, rng, min_samples=2)
        with pytest.raises(ValueError):
            dirichlet_partition(_blank([0, 1], 2), 2, 0.0, rng)

    def test_export(self, rng, tmp_path):
        plan = dirichlet_partition(_blank(np.repeat([0, 1], 6), 2), 3, 1.0, rng)
        data = json.loads(export_partition(plan, tmp_path / "parts" / "plan.json").read_text())
        assert set(data["clients"]) == {"0", "1", "2"}
        assert data["clients"]["1"] == plan.assignment[1].tolist()
        assert len(data["proportions"]) == 2


class TestHeterogeneity:

    def test_iid_split(self):
        score = heterogeneity_score(_plan([[5, 5], [5, 5], [5, 5]]))
        assert score.mean_entropy == pytest.approx(math.log(2))
        assert score.max_tv == 0.0

    def test_one_class_per_client(self):
        score = heterogeneity_score(_plan([[10, 0], [0, 10]]))
        assert score.mean_entropy == 0.0
        assert score.max_tv == pytest.approx(1.0)

    def test_entropy_grows_with_delta(self):
        ds = _blank(np.repeat(np.arange(4), 200), 4)
        medians = []
        for delta in (0.1, 0.5, 1.0, 10.0, 100.0):
            scores = [
                heterogeneity_score(dirichlet_partition(ds, 5, delta, np.random.default_rng(seed))).mean_entropy
                for seed in range(20)
            ]
            medians.append(float(np.median(scores)))
        assert medians == sorted(medians)


class TestSubsampleLabels:

    def test_full_fraction(self, rng):
        shard = _blank([0, 1, 1, 0, 1], 2)
        labeled, unlabeled = subsample_labels(shard, 1.0, rng)
        assert len(labeled) == 5 and len(unlabeled) == 0

    def test_ten_percent_of_ten_thousand(self, rng):
        shard = _blank(np.repeat([0, 1, 2, 3], 2500), 4)
        labeled, unlabeled = subsample_labels(shard, 0.1, rng)
        assert len(labeled) == 1000
        assert np.all(np.abs(labeled.class_counts() - 250) <= 1)
        assert np.all(unlabeled.labels == UNLABELED)

    def test_partition_of_shard(self, rng):
        shard = _blank(rng.integers(0, 3, size=37), 3)
        labeled, unlabeled = subsample_labels(shard, 0.3, rng)
        assert len(labeled) == math.ceil(0.3 * 37)
        assert set(labeled.ids).isdisjoint(unlabeled.ids)
        assert sorted(set(labeled.ids) | set(unlabeled.ids)) == list(range(37))
        expected = 0.3 * shard.class_counts()
        assert np.all(np.abs(labeled.class_counts() - expected) <= 1)

    def test_fraction_out_of_range(self, rng):
        for fraction in (0.0, 1.5):
            with pytest.raises(FractionOutOfRangeError):
                subsample_labels(_blank([0, 1], 2), fraction, rng)


class TestPNMFolder:

    def test_round_trip_at_8_bits(self, rng, tmp_path):
        image = np.rint(rng.uniform(size=(4, 5, 3)) * 255) / 255
        np.testing.assert_array_equal(read_pnm(write_pnm(tmp_path / "a.ppm", image)), image)
        gray = np.rint(rng.uniform(size=(3, 3, 1)) * 255) / 255
        np.testing.assert_array_equal(read_pnm(write_pnm(tmp_path / "b.pgm", gray)), gray)

    def test_max_pixel_is_one(self, tmp_path):
        path = tmp_path / "white.ppm"
        path.write_bytes(b"P6\n# comment\n1 1\n255\n" + bytes([255, 255, 255]))
        np.testing.assert_array_equal(read_pnm(path), np.ones((1, 1, 3)))

    def test_unreadable(self, tmp_path):
        with pytest.raises(UnreadableImageError):
            read_pnm(tmp_path / "missing.pgm")
        bad = tmp_path / "bad.pgm"
        bad.write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(UnreadableImageError):
            read_pnm(bad)
        short = tmp_path / "short.pgm"
        short.write_bytes(b"P5\n4 4\n255\n" + bytes(3))
        with pytest.raises(UnreadableImageError):
            read_pnm(short)

    def _folder(self, tmp_path, rows):
        for name in ("a.pgm", "b.pgm"):
            write_pnm(tmp_path / name, np.full((4, 4, 1), 0.5))
        write_pnm(tmp_path / "big.pgm", np.zeros((8, 8, 1)))
        manifest = tmp_path / "manifest.csv"
        manifest.write_text("\n".join(rows) + "\n")
        return manifest

    def test_load_with_class_names(self, tmp_path):
        manifest = self._folder(tmp_path, ["file,label", "# ignored", "a.pgm,cat", "b.pgm,dog"])
        ds = load_folder(tmp_path, manifest, 4, 1, 2, classes=("cat", "dog"))
        np.testing.assert_array_equal(ds.labels, [0, 1])
        assert ds.images.shape == (2, 4, 4, 1)

    def test_load_with_indices(self, tmp_path):
        ds = load_folder(tmp_path, self._folder(tmp_path, ["a.pgm,1"]), 4, 1, 2)
        np.testing.assert_array_equal(ds.labels, [1])

    def test_empty_manifest(self, tmp_path):
        ds = load_folder(tmp_path, self._folder(tmp_path, ["file,label"]), 4, 1, 2)
        assert len(ds) == 0

    def test_errors(self, tmp_path):
        with pytest.raises(UnknownLabelError):
            load_folder(tmp_path, self._folder(tmp_path, ["a.pgm,bird"]), 4, 1, 2, classes=("cat", "dog"))
        with pytest.raises(UnknownLabelError):
            load_folder(tmp_path, self._folder(tmp_path, ["a.pgm,5"]), 4, 1, 2)
        with pytest.raises(SizeMismatchError):
            load_folder(tmp_path, self._folder(tmp_path, ["big.pgm,0"]), 4, 1, 2)
        with pytest.raises(UnreadableImageError):
            load_folder(tmp_path, self._folder(tmp_path, ["nope.pgm,0"]), 4, 1, 2)
