import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from difficulty_sampler.perturb import (
    LAMBDA_GRID,
    DecodeError,
    MaskSpec,
    derive_trial_seed,
    encode_png,
    load_image,
    mask_count,
    mask_image,
    mask_image_bytes,
    mask_positions,
)
from difficulty_sampler.util import stable_hash


def _noise(rng, w, h, channels=3):
    arr = rng.integers(1, 256, size=(h, w, channels)).astype(np.uint8)
    return Image.fromarray(arr, mode="RGB")


def test_mask_count_exact_fraction():
    assert mask_count(10, 10, 0.5) == 50


def test_mask_count_identity_case():
    assert mask_count(100, 100, 0.0) == 0


def test_mask_count_rounds_to_nearest():
    # oracle: exact rational arithmetic
    assert Fraction(3, 10) * 63 == Fraction(189, 10)
    assert mask_count(7, 9, 0.3) == 19


def test_mask_count_half_rounds_away_from_zero():
    assert Fraction(7, 10) * 5 == Fraction(7, 2)
    assert mask_count(5, 1, 0.7) == 4
    assert mask_count(3, 3, 0.5) == 5  # 4.5 -> 5


def test_mask_count_never_exceeds_pixel_count():
    for w, h in [(1, 1), (3, 7), (640, 480)]:
        for ratio in LAMBDA_GRID:
            assert 0 <= mask_count(w, h, ratio) <= w * h


def test_mask_count_rejects_bad_inputs():
    with pytest.raises(ValueError):
        mask_count(0, 5, 0.1)
    with pytest.raises(ValueError):
        mask_count(5, 5, 1.0)
    with pytest.raises(ValueError):
        mask_count(5, 5, -0.1)


def test_zero_ratio_is_identity():
    rng = np.random.default_rng(0)
    img = _noise(rng, 12, 9)
    out = mask_image(img, MaskSpec(ratio=0.0, seed=5))
    assert out is img
    data = encode_png(img)
    assert mask_image_bytes(data, MaskSpec(ratio=0.0, seed=5)) == data


def test_ninety_percent_mask_is_exact_and_repeatable():
    rng = np.random.default_rng(1)
    img = _noise(rng, 10, 10)
    spec = MaskSpec(ratio=0.9, seed=42)
    out1 = np.array(mask_image(img, spec))
    out2 = np.array(mask_image(img, spec))
    assert (out1 == out2).all()
    assert int(np.all(out1 == 0, axis=-1).sum()) == 90
    # unmasked pixels byte-identical to the input
    original = np.array(img)
    untouched = ~np.all(out1 == 0, axis=-1)
    assert (out1[untouched] == original[untouched]).all()


def test_different_seeds_differ():
    rng = np.random.default_rng(2)
    img = _noise(rng, 16, 16)
    a = np.array(mask_image(img, MaskSpec(ratio=0.5, seed=1)))
    b = np.array(mask_image(img, MaskSpec(ratio=0.5, seed=2)))
    assert not (a == b).all()


def test_seed_pair_overlap_matches_hypergeometric_expectation():
    """Independent draws overlap like uniform subsets: mean |A∩B| = m²/n."""
    w = h = 20
    n, ratio = w * h, 0.3
    m = mask_count(w, h, ratio)
    pairs = 1000
    total = 0
    for i in range(pairs):
        a = set(mask_positions(w, h, m, seed=2 * i).tolist())
        b = set(mask_positions(w, h, m, seed=2 * i + 1).tolist())
        total += len(a & b)
    mean = total / pairs
    expected = m * m / n
    var = m * (m / n) * (1 - m / n) * ((n - m) / (n - 1))
    sigma_mean = math.sqrt(var / pairs)
    assert abs(mean - expected) < 3 * sigma_mean
    # overlap fraction of the mask approximately equals the ratio
    assert abs(mean / m - ratio) < 0.01


@settings(max_examples=60, deadline=None)
@given(
    w=st.integers(1, 20),
    h=st.integers(1, 20),
    ratio_index=st.integers(0, 9),
    seed=st.integers(0, 2**64 - 1),
)
def test_masking_exactness_property(w, h, ratio_index, seed):
    ratio = LAMBDA_GRID[ratio_index]
    rng = np.random.default_rng(seed % 2**32)
    img = _noise(rng, w, h)
    out = np.array(mask_image(img, MaskSpec(ratio=ratio, seed=seed)))
    original = np.array(img)
    changed = (out != original).any(axis=-1)
    filled = np.all(out == 0, axis=-1)
    expected = mask_count(w, h, ratio)
    assert int(filled.sum()) == expected
    assert int(changed.sum()) == expected  # input had no all-zero pixels
    assert (out[~filled] == original[~filled]).all()


def test_grayscale_masking():
    arr = np.full((6, 5), 200, dtype=np.uint8)
    img = Image.fromarray(arr, mode="L")
    out = np.array(mask_image(img, MaskSpec(ratio=0.5, seed=9)))
    assert int((out == 0).sum()) == mask_count(5, 6, 0.5)


def test_patch_mode_masks_whole_tiles():
    rng = np.random.default_rng(3)
    img = _noise(rng, 16, 16)
    out = np.array(mask_image(img, MaskSpec(ratio=0.5, seed=4, patch_size=4)))
    filled = np.all(out == 0, axis=-1)
    # 4x4 tile grid: exactly half the tiles are filled
    tiles = filled.reshape(4, 4, 4, 4).transpose(0, 2, 1, 3).reshape(16, 16)
    per_tile = tiles.reshape(16, -1).all(axis=1) | (~tiles.reshape(16, -1)).all(axis=1)
    assert per_tile.all()
    assert int(filled.sum()) == 8 * 16


def test_decode_error_on_corrupt_bytes():
    with pytest.raises(DecodeError):
        load_image(b"definitely not a png")
    with pytest.raises(DecodeError):
        mask_image_bytes(b"nope", MaskSpec(ratio=0.5, seed=1))


def test_trial_seed_derivation_is_stable_hash():
    assert derive_trial_seed(7, "q1", 3, 2) == stable_hash(7, "q1", 3, 2)
    assert derive_trial_seed(7, "q1", 3, 2) != derive_trial_seed(7, "q1", 2, 3)


def test_lossless_reencode_preserves_unmasked_pixels():
    rng = np.random.default_rng(4)
    img = _noise(rng, 11, 7)
    data = encode_png(img)
    out_bytes = mask_image_bytes(data, MaskSpec(ratio=0.1, seed=8))
    out = np.array(load_image(out_bytes))
    original = np.array(img)
    filled = np.all(out == 0, axis=-1)
    assert (out[~filled] == original[~filled]).all()
