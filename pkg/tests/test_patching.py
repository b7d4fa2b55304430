"""Tests for patch grids, mask sampling and augmentation."""

import numpy as np
import pytest

from selffed.config import AugmentSpec, Interpolation, Phase
from selffed.errors import CountMismatchError, CropTooLargeError, IndivisibleImageError, ValidationError
from selffed.patching import (
    MaskPlan,
    PatchGrid,
    augment,
    hflip,
    masked_count,
    partition_patches,
    reassemble,
    resized_crop,
    rotate,
    sample_mask,
    window_groups,
)


class TestPatchGrid:

    def test_patch_count(self):
        assert PatchGrid(256, 256, 3, 64).num_patches == 16
        assert PatchGrid(32, 32, 3, 4).num_patches == 64
        assert PatchGrid(32, 32, 3, 4).patch_dim == 48

    def test_indivisible(self):
        with pytest.raises(IndivisibleImageError):
            PatchGrid(10, 10, 1, 4)
        with pytest.raises(IndivisibleImageError):
            partition_patches(np.zeros((10, 10, 1)), 4)


class TestPartition:

    @pytest.mark.parametrize("v", [1, 2, 4, 8])
    def test_round_trip_is_exact(self, rng, v):
        image = rng.normal(size=(8, 8, 3))
        grid = PatchGrid(8, 8, 3, v)
        np.testing.assert_array_equal(reassemble(partition_patches(image, v), grid).data, image)

    def test_batched_round_trip(self, rng):
        images = rng.normal(size=(3, 8, 8, 2))
        patches = partition_patches(images, 4)
        assert patches.shape == (3, 4, 32)
        np.testing.assert_array_equal(reassemble(patches, PatchGrid(8, 8, 2, 4)).data, images)

    def test_row_major_order(self):
        image = np.arange(16, dtype=float).reshape(4, 4, 1)
        patches = partition_patches(image, 2).data
        np.testing.assert_array_equal(patches[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(patches[1], [2, 3, 6, 7])
        np.testing.assert_array_equal(patches[2], [8, 9, 12, 13])

    def test_single_patch_is_flat_image(self, rng):
        image = rng.normal(size=(4, 4, 2))
        np.testing.assert_array_equal(partition_patches(image, 4).data[0], image.reshape(-1))

    def test_reassemble_count_mismatch(self):
        with pytest.raises(CountMismatchError):
            reassemble(np.zeros((3, 4)), PatchGrid(4, 4, 1, 2))


class TestMaskSampling:

    def test_floor_rule(self):
        assert masked_count(64, 0.6) == 38
        assert masked_count(16, 0.6) == 9
        assert masked_count(100, 0.29) == 29
        assert masked_count(10, 1.0) == 10

    def test_plan_partitions_indices(self, rng):
        plan = sample_mask(64, 0.6, rng)
        assert len(plan.masked) == 38
        assert set(plan.masked).isdisjoint(plan.visible)
        assert sorted(plan.masked + plan.visible) == list(range(64))
        assert list(plan.masked) == sorted(plan.masked)

    def test_degenerate_ratios(self, rng):
        none = sample_mask(16, 0.0, rng)
        assert none.masked == () and none.visible == tuple(range(16))
        everything = sample_mask(16, 1.0, rng)
        assert everything.visible == ()

    def test_seeded(self):
        a = sample_mask(64, 0.6, np.random.default_rng(5))
        b = sample_mask(64, 0.6, np.random.default_rng(5))
        assert a == b

    def test_invalid_ratio(self, rng):
        with pytest.raises(ValueError):
            sample_mask(16, 1.5, rng)

    def test_uniform_frequency(self):
        rng = np.random.default_rng(42)
        counts = np.zeros(16)
        draws = 100_000
        for _ in range(draws):
            counts[list(sample_mask(16, 0.6, rng).masked)] += 1
        np.testing.assert_allclose(counts / draws, 9 / 16, atol=0.01)

    def test_window_stratified_counts(self, rng):
        windows = window_groups(4, 4, 2)
        assert [list(w) for w in windows][0] == [0, 1, 4, 5]
        plan = sample_mask(16, 0.6, rng, windows)
        per_window = [len(set(plan.masked) & set(w.tolist())) for w in windows]
        assert sum(per_window) == 9
        assert max(per_window) - min(per_window) <= 1

    def test_from_masked_set_semantics(self):
        a = MaskPlan.from_masked(8, [5, 1, 5, 3])
        b = MaskPlan.from_masked(8, [1, 3, 5])
        assert a == b
        np.testing.assert_array_equal(a.visible_flags(), [1, 0, 1, 0, 1, 0, 1, 1])

    def test_from_masked_out_of_range(self):
        with pytest.raises(CountMismatchError):
            MaskPlan.from_masked(4, [4])


class TestAugment:

    def test_identity_spec(self, rng):
        image = rng.uniform(size=(8, 8, 3))
        out = augment(image, AugmentSpec.identity(), rng)
        np.testing.assert_array_equal(out.data, image)

    def test_output_shape_and_range(self, rng):
        image = rng.uniform(0.2, 0.7, size=(8, 8, 3))
        for spec in (AugmentSpec(), AugmentSpec.finetune_default()):
            out = augment(image, spec, rng).data
            assert out.shape == image.shape
            assert out.min() >= image.min() and out.max() <= image.max()

    def test_seeded(self):
        image = np.random.default_rng(0).uniform(size=(8, 8, 1))
        a = augment(image, AugmentSpec(), np.random.default_rng(9)).data
        b = augment(image, AugmentSpec(), np.random.default_rng(9)).data
        np.testing.assert_array_equal(a, b)

    def test_crop_too_large(self, rng):
        with pytest.raises(CropTooLargeError):
            augment(np.zeros((8, 8, 1)), AugmentSpec(crop_size=16), rng)

    def test_double_flip(self, rng):
        image = rng.normal(size=(6, 6, 2))
        np.testing.assert_array_equal(hflip(hflip(image)), image)
        spec = AugmentSpec(flip_prob=1.0, scale=(1.0, 1.0), jitter=0.0)
        once = augment(image, spec, rng).data
        np.testing.assert_array_equal(once, np.clip(hflip(image), image.min(), image.max()))

    def test_rotation_round_trip(self):
        card = np.zeros((32, 32, 1))
        card[8:20, 10:18] = 1.0
        card[12:16, 12:14] = 0.5
        back = rotate(rotate(card, 10.0, Interpolation.NEAREST), -10.0, Interpolation.NEAREST)
        assert np.mean(back == card) >= 0.95

    def test_zero_rotation(self, rng):
        image = rng.uniform(size=(8, 8, 1))
        np.testing.assert_array_equal(rotate(image, 0.0), image)

    def test_phase_specific_transforms(self):
        with pytest.raises(ValidationError):
            AugmentSpec(phase=Phase.FINETUNE, jitter=0.1).validate()
        with pytest.raises(ValidationError):
            AugmentSpec(phase=Phase.PRETRAIN, rotation=10.0).validate()

    # corner weights worked out by hand: (0.25, 0.25) mixes 1, 5, 0, 4 as 9/16, 3/16, 3/16, 1/16
    GRID = np.array([[1.0, 5.0, 2.0], [0.0, 4.0, 8.0], [3.0, 9.0, 6.0]])[..., None]
    GRID_DOWN = np.array([[1.75, 3.8125], [3.625, 6.8125]])[..., None]

    def test_bilinear_downsample(self):
        out = resized_crop(self.GRID, 0, 0, 3, 3, 2, Interpolation.BILINEAR)
        np.testing.assert_allclose(out, self.GRID_DOWN, atol=1e-12)
        nearest = resized_crop(self.GRID, 0, 0, 3, 3, 2, Interpolation.NEAREST)
        np.testing.assert_array_equal(nearest[..., 0], [[1.0, 2.0], [3.0, 6.0]])

    def test_bilinear_upsample_is_exact_on_ramps(self):
        ramp = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]  # x + 2y
        out = resized_crop(ramp, 0, 0, 2, 2, 4, Interpolation.BILINEAR)
        # sample centres at -0.25, 0.25, 0.75, 1.25, clamped to the pixel grid
        c = np.clip(np.array([-0.25, 0.25, 0.75, 1.25]), 0.0, 1.0)
        np.testing.assert_allclose(out[..., 0], c[None, :] + 2.0 * c[:, None], atol=1e-12)

    def test_bilinear_on_pixel_centres_copies(self):
        image = np.arange(16.0).reshape(4, 4, 1)
        out = resized_crop(image, 1, 2, 2, 2, 2, Interpolation.BILINEAR)
        np.testing.assert_array_equal(out, image[1:3, 2:4])

    def test_augment_uses_bilinear_crop(self):
        spec = AugmentSpec(flip_prob=0.0, scale=(1.0, 1.0), jitter=0.0, crop_size=2,
                           interpolation=Interpolation.BILINEAR)
        out = augment(self.GRID, spec, np.random.default_rng(0)).data
        np.testing.assert_allclose(out, self.GRID_DOWN, atol=1e-12)
