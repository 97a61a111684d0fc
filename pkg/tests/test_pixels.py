import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prompttank.pixels import (
    PixelChainParams,
    apply_brightness,
    apply_chain,
    apply_colourise,
    apply_contrast,
    apply_gamma,
    apply_noise,
    apply_salford,
    decode_png,
    encode_png,
    from_uint8,
    luma,
    noise_field,
    to_uint8,
)

import oracles


def gray(value, h=4, w=5):
    return np.full((h, w, 3), float(value), dtype=np.float64)


def random_image(rng, h=6, w=7):
    return rng.random((h, w, 3))


RNG = np.random.default_rng(20240811)


class TestBrightness:
    def test_neutral_identity(self):
        img = random_image(RNG)
        assert apply_brightness(img, 0.0) is img

    def test_additive(self):
        out = apply_brightness(gray(0.5), 0.25)
        assert np.all(out == 0.75)

    def test_clamps(self):
        out = apply_brightness(gray(0.9), 0.5)
        assert np.all(out == 1.0)
        assert np.all(apply_brightness(gray(0.1), -0.5) == 0.0)

    @given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
    def test_monotone_in_b(self, b1, b2):
        lo, hi = sorted((b1, b2))
        img = RNG.random((3, 3, 3))
        assert np.all(apply_brightness(img, hi) >= apply_brightness(img, lo))

    def test_round_trip_exact_on_dyadic_lattice(self):
        # v + b exactly representable => the inverse shift is exact.
        v = np.arange(0, 1025, dtype=np.float64).reshape(-1, 1, 1) / 1024.0
        img = np.repeat(v, 3, axis=2)
        for b in (0.25, 0.5, 3 / 1024, 255 / 1024):
            fwd = apply_brightness(img, b)
            back = apply_brightness(fwd, -b)
            unclamped = (img + b <= 1.0) & (img + b >= 0.0)
            assert np.array_equal(back[unclamped], img[unclamped])

    @given(st.floats(-0.9, 0.9))
    def test_round_trip_close_on_arbitrary_floats(self, b):
        img = RNG.random((4, 4, 3))
        back = apply_brightness(apply_brightness(img, b), -b)
        unclamped = (img + b < 1.0) & (img + b > 0.0)
        assert np.allclose(back[unclamped], img[unclamped], atol=1e-15, rtol=0)


class TestContrast:
    def test_neutral_identity(self):
        img = random_image(RNG)
        assert apply_contrast(img, 1.0) is img

    def test_pivot_fixed_point(self):
        for c in (0.0, 0.5, 2.0, 4.0):
            assert np.all(apply_contrast(gray(0.5), c) == 0.5)

    def test_expansion(self):
        assert np.all(apply_contrast(gray(0.75), 2.0) == 1.0)

    def test_zero_contrast_collapses_to_pivot(self):
        img = random_image(RNG)
        assert np.all(apply_contrast(img, 0.0) == 0.5)


class TestGamma:
    def test_neutral_identity(self):
        img = random_image(RNG)
        assert apply_gamma(img, 1.0) is img

    def test_endpoints_fixed(self):
        img = np.zeros((2, 2, 3))
        img[0, :, :] = 1.0
        for g in (0.2, 0.5, 2.0, 5.0):
            assert np.array_equal(apply_gamma(img, g), img)

    def test_square_root(self):
        assert np.all(apply_gamma(gray(0.25), 0.5) == 0.5)

    @given(st.floats(0.5, 2.0))
    @settings(max_examples=30)
    def test_inverse_gamma_within_2_255(self, g):
        img = 0.05 + 0.9 * RNG.random((5, 5, 3))
        back = apply_gamma(apply_gamma(img, g), 1.0 / g)
        assert np.max(np.abs(back - img)) <= 2.0 / 255.0


class TestColourise:
    def test_neutral_identity(self):
        img = random_image(RNG)
        assert apply_colourise(img, 0.0, (1.0, 0.5, 0.2)) is img

    def test_white_tint_full_amount_is_grayscale(self):
        img = random_image(RNG)
        out = apply_colourise(img, 1.0, (1.0, 1.0, 1.0))
        lum = luma(img)
        for ch in range(3):
            assert np.allclose(out[..., ch], np.clip(lum, 0, 1))

    def test_white_pixel_full_amount_takes_tint(self):
        out = apply_colourise(gray(1.0), 1.0, (0.0, 0.9, 1.0))
        assert np.allclose(out[0, 0], (0.0, 0.9, 1.0))


class TestNoise:
    def test_neutral_identity(self):
        img = random_image(RNG)
        assert apply_noise(img, 0.0, 1, 42) is img

    def test_static_contract_bit_identical(self):
        img = random_image(RNG, 16, 16)
        a = apply_noise(img, 0.3, 2, 7)
        b = apply_noise(img, 0.3, 2, 7)
        assert np.array_equal(a, b)

    def test_field_matches_scalar_oracle(self):
        field = noise_field(99, 12, 9, 3)
        for y in range(9):
            for x in range(12):
                assert field[y, x] == oracles.scalar_noise_cell(99, x // 3, y // 3)

    def test_seed_change_flips_cells(self):
        a = noise_field(1, 64, 64, 1)
        b = noise_field(2, 64, 64, 1)
        assert np.mean(a != b) >= 0.99

    def test_scale_blocks_constant_and_variance_matches(self):
        fine = noise_field(5, 128, 128, 1)
        coarse = noise_field(5, 128, 128, 8)
        blocks = coarse.reshape(16, 8, 16, 8)
        assert np.all(blocks == blocks[:, :1, :, :1])
        # Both are uniform-[0,1) samples; population variance 1/12.
        assert abs(np.var(fine) - 1.0 / 12.0) < 0.01
        assert abs(np.var(coarse) - 1.0 / 12.0) < 0.02

    def test_field_read_only(self):
        field = noise_field(3, 8, 8, 1)
        with pytest.raises(ValueError):
            field[0, 0] = 0.5


class TestSalford:
    def test_neutral_identity(self):
        img = random_image(RNG)
        assert apply_salford(img, 0.0, PixelChainParams()) is img

    def test_black_pixel_defaults(self):
        # invert -> white; contrast 2 keeps it white; luma 1 > 0.7 so the
        # 0.8-strength cyan tint lands: (0.2, 0.92, 1.0).
        out = apply_salford(gray(0.0), 1.0, PixelChainParams(salford_mix=1.0))
        assert np.allclose(out[0, 0], (0.2, 0.92, 1.0), atol=1e-12)

    def test_mid_gray_pivot_untinted(self):
        out = apply_salford(gray(0.5), 1.0, PixelChainParams(salford_mix=1.0))
        assert np.allclose(out[0, 0], (0.5, 0.5, 0.5), atol=1e-12)

    def test_matches_scalar_oracle(self):
        p = PixelChainParams(salford_mix=0.6, salford_contrast=1.5,
                             salford_threshold=0.5, salford_tint=(1.0, 0.2, 0.1),
                             salford_tint_strength=0.4)
        img = random_image(RNG, 4, 4)
        out = apply_salford(img, p.salford_mix, p)
        for y in range(4):
            for x in range(4):
                want = oracles.scalar_salford(
                    tuple(img[y, x]), p.salford_mix, p.salford_contrast,
                    p.salford_threshold, p.salford_tint, p.salford_tint_strength)
                assert np.allclose(out[y, x], want, atol=1e-12)


class TestChain:
    def test_all_neutral_is_bit_identity(self):
        img = random_image(RNG, 32, 32)
        out = apply_chain(img, PixelChainParams())
        assert out is img or np.array_equal(out, img)
        assert np.max(np.abs(out - img)) == 0.0

    def test_single_active_stage_equals_direct_call(self):
        img = random_image(RNG)
        chained = apply_chain(img, PixelChainParams(brightness=0.2))
        assert np.array_equal(chained, apply_brightness(img, 0.2))

    def test_stage_order_observable(self):
        img = gray(0.4)
        out = apply_chain(img, PixelChainParams(brightness=0.5, contrast=2.0))
        assert np.all(out == 1.0)  # clamp((0.9-0.5)*2+0.5) = 1.0
        reverse = apply_brightness(apply_contrast(img, 2.0), 0.5)
        assert np.all(reverse == 0.8)

    def test_zero_dimension_rejected(self):
        with pytest.raises(ValueError):
            apply_chain(np.zeros((0, 4, 3)), PixelChainParams())

    def test_dimensions_and_range_preserved(self):
        img = random_image(RNG, 9, 13)
        p = PixelChainParams(brightness=-0.3, contrast=3.0, gamma=0.4,
                             colourise_amount=0.5, colourise_tint=(0.9, 0.1, 0.4),
                             noise_gain=0.8, noise_scale=2, noise_seed=3,
                             salford_mix=0.7)
        out = apply_chain(img, p)
        assert out.shape == img.shape
        assert np.all(out >= 0.0) and np.all(out <= 1.0)

    def test_matches_reference_evaluator(self):
        img = random_image(RNG, 5, 6)
        p = PixelChainParams(brightness=0.1, contrast=1.4, gamma=0.8,
                             colourise_amount=0.3, colourise_tint=(0.2, 0.9, 0.5),
                             noise_gain=0.4, noise_scale=2, noise_seed=11,
                             salford_mix=0.5)
        out = apply_chain(img, p)
        want = np.array(oracles.reference_chain_image(img, p))
        assert np.max(np.abs(out - want)) < 1e-6


class TestStorageBoundaries:
    def test_uint8_round_trip_error_bound(self):
        img = random_image(RNG, 8, 8)
        back = from_uint8(to_uint8(img))
        assert np.max(np.abs(back - img)) <= 1.0 / 255.0

    def test_png_lossless_at_8bit(self):
        img = from_uint8(RNG.integers(0, 256, size=(16, 16, 3), dtype=np.uint8))
        assert np.array_equal(decode_png(encode_png(img)), img)

    def test_param_validation(self):
        with pytest.raises(ValueError):
            PixelChainParams(brightness=1.5)
        with pytest.raises(ValueError):
            PixelChainParams(gamma=0.1)
        with pytest.raises(ValueError):
            PixelChainParams(noise_scale=0)
        with pytest.raises(ValueError):
            PixelChainParams(salford_tint=(2.0, 0.0, 0.0))
