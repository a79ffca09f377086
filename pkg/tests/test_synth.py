"""Synthesis pipeline: compositing contract, augmentations, determinism."""

import numpy as np
import pytest

from deflare.synth import (
    AugmentationParams,
    DomainError,
    LabeledPair,
    Rng,
    flare_region_masks,
    hflip,
    mixup,
    procedural_background,
    procedural_flare,
    strong_augment,
    synthesize_pair,
    to_grayscale,
    weak_augment,
)
from deflare.tensor import DimensionError


@pytest.fixture
def sources():
    rng = Rng(7)
    return procedural_background(rng.child(0), 32), procedural_flare(rng.child(1), 32)


class TestRng:
    def test_same_seed_bit_identical(self):
        a = Rng(123).uniform(0, 1, size=100)
        b = Rng(123).uniform(0, 1, size=100)
        assert np.array_equal(a, b)

    def test_children_independent_of_sibling_consumption(self):
        r1 = Rng(5)
        r1.child(1).uniform(0, 1, size=1000)  # consuming a sibling stream
        a = r1.child(2).uniform(0, 1, size=10)
        b = Rng(5).child(2).uniform(0, 1, size=10)
        assert np.array_equal(a, b)

    def test_state_roundtrip(self):
        r = Rng(9)
        r.uniform(0, 1, size=17)
        state = r.state()
        a = r.uniform(0, 1, size=5)
        r2 = Rng(9)
        r2.restore(state)
        assert np.array_equal(a, r2.uniform(0, 1, size=5))


class TestSynthesizePair:
    def test_null_flare_roundtrips_background(self, sources):
        bg, _ = sources
        pair = synthesize_pair(
            bg,
            np.zeros_like(bg),
            AugmentationParams(),
            Rng(0),
            apply_geometric=False,
            apply_blur=False,
            apply_photometric=False,
            apply_noise=False,
        )
        assert np.abs(pair.input - bg).max() < 1e-6
        assert np.abs(pair.target - bg).max() < 1e-6

    def test_single_bright_pixel_localizes(self, sources):
        bg, _ = sources
        flare = np.zeros_like(bg)
        flare[:, 16, 16] = 0.9
        pair = synthesize_pair(
            bg, flare, AugmentationParams(), Rng(1),
            apply_geometric=False, apply_blur=False, apply_photometric=False, apply_noise=False,
        )
        diff = np.abs(pair.input - pair.target).max(axis=0)
        far = diff.copy()
        far[14:19, 14:19] = 0.0
        assert diff[16, 16] > 0.05
        assert far.max() < 1e-9

    def test_deterministic(self, sources):
        bg, fl = sources
        a = synthesize_pair(bg, fl, AugmentationParams(), Rng(42))
        b = synthesize_pair(bg, fl, AugmentationParams(), Rng(42))
        assert np.array_equal(a.input, b.input)
        assert np.array_equal(a.target, b.target)

    def test_outputs_in_unit_range(self, sources):
        bg, fl = sources
        for seed in range(5):
            pair = synthesize_pair(bg, fl, AugmentationParams(), Rng(seed))
            for img in (pair.input, pair.target):
                assert img.min() >= 0.0 and img.max() <= 1.0

    def test_target_never_exceeds_input_before_reencoding(self, sources):
        bg, fl = sources
        for seed in range(8):
            pair = synthesize_pair(bg, fl, AugmentationParams(), Rng(seed), apply_noise=False)
            # gamma re-encoding is monotone, so the ordering survives it
            assert (pair.target <= pair.input + 1e-6).all()

    def test_out_of_range_inputs_rejected(self, sources):
        bg, fl = sources
        with pytest.raises(DomainError):
            synthesize_pair(bg * 2.0, fl, AugmentationParams(), Rng(0))

    def test_shape_mismatch_rejected(self, sources):
        bg, fl = sources
        with pytest.raises(DimensionError):
            synthesize_pair(bg, fl[:, :16, :16], AugmentationParams(), Rng(0))


class TestAugmentationParams:
    def test_sampled_values_stay_in_ranges(self):
        params = AugmentationParams()
        rng = Rng(0)
        n = 10_000
        draws = {
            "gamma_range": rng.uniform(*params.gamma_range, size=n),
            "rotation_range": rng.uniform(*params.rotation_range, size=n),
            "translation_range": rng.uniform(*params.translation_range, size=n),
            "shear_range": rng.uniform(*params.shear_range, size=n),
            "scale_range": rng.uniform(*params.scale_range, size=n),
            "blur_sigma_range": rng.uniform(*params.blur_sigma_range, size=n),
            "flare_offset_range": rng.uniform(*params.flare_offset_range, size=n),
            "bg_rgb_scale_range": rng.uniform(*params.bg_rgb_scale_range, size=n),
            "jitter_range": rng.uniform(*params.jitter_range, size=n),
        }
        for name, vals in draws.items():
            lo, hi = getattr(params, name)
            assert lo < hi
            assert vals.min() >= lo and vals.max() <= hi, name

    def test_degenerate_range_rejected(self):
        with pytest.raises(DomainError):
            AugmentationParams(gamma_range=(2.0, 2.0)).validate()

    def test_noise_variance_law(self):
        # variance = 0.01 * chi^2(1): mean 0.01, all draws nonnegative
        rng = Rng(1)
        draws = 0.01 * np.array([rng.chisquare(1) for _ in range(10_000)])
        assert draws.min() >= 0.0
        assert abs(draws.mean() - 0.01) < 0.002


class TestStrongAugment:
    def test_identity_limit(self, sources):
        bg, _ = sources
        out = strong_augment(bg, Rng(0), jitter_range=(1.0, 1.0 + 1e-12), grayscale_prob=0.0, blur_sigma_range=(0.05, 0.051))
        assert np.abs(out - bg).max() < 1e-3

    def test_grayscale_idempotent_on_gray(self):
        rng = Rng(2)
        gray = to_grayscale(procedural_background(rng, 16))
        assert np.abs(to_grayscale(gray) - gray).max() < 1e-12

    def test_output_bounds_over_many_draws(self, sources):
        bg, _ = sources
        small = bg[:, :16, :16]
        for seed in range(1000):
            out = strong_augment(small, Rng(seed))
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_purely_photometric_marker_pixel(self):
        # a lone bright marker must stay at its coordinates through augmentation
        img = np.full((3, 17, 17), 0.2)
        img[:, 5, 11] = 1.0
        for seed in range(20):
            out = strong_augment(img, Rng(seed), blur_sigma_range=(0.05, 0.0500001))
            flat = out.max(axis=0)
            assert np.unravel_index(np.argmax(flat), flat.shape) == (5, 11)


class TestWeakAugment:
    def test_flip_is_involution(self, sources):
        bg, _ = sources
        assert np.array_equal(hflip(hflip(bg)), bg)

    def test_flip_changes_asymmetric_image(self, sources):
        bg, _ = sources
        assert not np.array_equal(hflip(bg), bg)

    def test_flip_is_pixel_permutation_preserving_means(self, sources):
        bg, _ = sources
        flipped = hflip(bg)
        for c in range(3):  # exact multiset equality: flip only permutes pixels
            assert np.array_equal(np.sort(flipped[c].ravel()), np.sort(bg[c].ravel()))
        assert np.allclose(flipped.mean(axis=(1, 2)), bg.mean(axis=(1, 2)), atol=1e-12)

    def test_flag_matches_content(self, sources):
        bg, _ = sources
        for seed in range(10):
            out, flipped = weak_augment(bg, Rng(seed))
            assert np.array_equal(out, hflip(bg) if flipped else bg)

    def test_flip_probability_near_half(self, sources):
        bg, _ = sources
        flips = sum(weak_augment(bg, Rng(seed))[1] for seed in range(400))
        assert 140 <= flips <= 260


class TestMixup:
    def test_endpoint_lambda_one(self, sources):
        bg, fl = sources
        a = LabeledPair(bg, bg * 0.5)
        b = LabeledPair(fl, fl * 0.5)
        out = mixup(a, b, 0.2, Rng(0), lam=1.0)
        assert np.array_equal(out.input, a.input)
        assert np.array_equal(out.target, a.target)

    def test_midpoint(self):
        a = LabeledPair(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)))
        b = LabeledPair(np.ones((3, 4, 4)), np.ones((3, 4, 4)))
        out = mixup(a, b, 0.2, Rng(0), lam=0.5)
        assert np.allclose(out.input, 0.5)
        assert np.allclose(out.target, 0.5)

    def test_convexity_keeps_unit_range(self, sources):
        bg, fl = sources
        a, b = LabeledPair(bg, bg), LabeledPair(fl, fl)
        for seed in range(50):
            out = mixup(a, b, 0.2, Rng(seed))
            assert out.input.min() >= 0.0 and out.input.max() <= 1.0

    def test_shape_mismatch(self, sources):
        bg, _ = sources
        with pytest.raises(DimensionError):
            mixup(LabeledPair(bg, bg), LabeledPair(bg[:, :16, :16], bg[:, :16, :16]), 0.2, Rng(0))

    def test_alpha_must_be_positive(self, sources):
        bg, _ = sources
        with pytest.raises(DomainError):
            mixup(LabeledPair(bg, bg), LabeledPair(bg, bg), 0.0, Rng(0))


class TestRegionMasks:
    def test_detects_drawn_streak(self):
        flare = np.zeros((3, 48, 48))
        flare[:, 23:25, 4:44] = 0.5  # thin horizontal bar
        glare, streak = flare_region_masks(flare)
        assert glare.sum() >= streak.sum() > 0
        assert streak[24, 24]

    def test_blob_is_glare_not_streak(self):
        yy, xx = np.mgrid[0:48, 0:48]
        blob = np.exp(-((yy - 24) ** 2 + (xx - 24) ** 2) / 60.0)
        flare = np.stack([blob] * 3)
        glare, streak = flare_region_masks(flare)
        assert glare.sum() > 50
        assert streak.sum() == 0

    def test_procedural_flares_yield_both_masks(self):
        glare_total = streak_total = 0
        for seed in range(6):
            flare = procedural_flare(Rng(seed), 64) ** 2.0
            glare, streak = flare_region_masks(flare)
            assert glare.sum() > 0  # every flare brightens something
            streak_total += streak.sum()
        assert streak_total > 0  # rays show up as streaks across the sample
