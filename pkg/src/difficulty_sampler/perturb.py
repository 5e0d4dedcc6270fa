"""Seeded random pixel masking applied in pixel space before any model call.

Masking is exact and reproducible: for a ratio r and an H x W image, exactly
round-half-away-from-zero(r * H * W) pixel positions are overwritten with the
fill value. Positions are the first `count` entries of a permutation of all
H*W row-major pixel indices produced by numpy's Philox4x32-10 counter-based
generator keyed with the trial seed, so the masked set depends only on
(image size, ratio, seed), never on scheduling or platform.

Per-trial seeds are derived as stable_hash(run_seed, sample_id, ratio_index,
trial) so resumption and reordering cannot change masks.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from PIL import Image, UnidentifiedImageError

from .types import PipelineError
from .util import stable_hash

# The masking-ratio grid: 0.0 (unmodified) through 0.9 in steps of 0.1.
LAMBDA_GRID: tuple[float, ...] = tuple(i / 10 for i in range(10))

# Image modes kept as-is; anything else is converted to RGB on decode.
_NATIVE_MODES = ("L", "LA", "RGB", "RGBA")


class DecodeError(PipelineError):
    """Raised when image bytes cannot be decoded to a raster."""


@dataclass(frozen=True)
class MaskSpec:
    """Parameters of one masking trial.

    fill is a single channel value applied to every channel of a masked
    pixel (black occlusion by default). patch_size, when set, switches to
    square-patch masking: whole patch_size x patch_size tiles are filled
    instead of scattered pixels; the exact-count guarantee then holds at
    tile granularity only.
    """

    ratio: float
    seed: int
    fill: int = 0
    patch_size: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"ratio must be in [0, 1), got {self.ratio}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if not 0 <= self.fill <= 255:
            raise ValueError("fill must be an 8-bit channel value")
        if self.patch_size is not None and self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")


def ratio_fraction(ratio: float | Fraction) -> Fraction:
    """Exact rational value of a grid ratio.

    Floats are interpreted through their shortest decimal repr (0.7 means
    7/10, not the binary float below it), which is what makes the count
    rule exact on the decimal grid.
    """
    if isinstance(ratio, Fraction):
        return ratio
    return Fraction(repr(float(ratio)))


def mask_count(width: int, height: int, ratio: float | Fraction) -> int:
    """Number of pixels to mask: round-half-away-from-zero(ratio * W * H)."""
    if width < 1 or height < 1:
        raise ValueError("image must be at least 1x1")
    frac = ratio_fraction(ratio)
    if not 0 <= frac < 1:
        raise ValueError(f"ratio must be in [0, 1), got {ratio}")
    # Half-away-from-zero == floor(x + 1/2) for non-negative x.
    return math.floor(frac * width * height + Fraction(1, 2))


def derive_trial_seed(run_seed: int, sample_id: str, ratio_index: int, trial: int) -> int:
    return stable_hash(run_seed, sample_id, ratio_index, trial)


def mask_positions(width: int, height: int, count: int, seed: int) -> np.ndarray:
    """First `count` entries of a seeded Philox shuffle of all pixel indices."""
    n = width * height
    if count > n:
        raise ValueError("count exceeds pixel count")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    return rng.permutation(n)[:count]


def load_image(data: bytes) -> Image.Image:
    """Decode raster bytes; P/CMYK and friends are normalized to RGB."""
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(str(exc)) from None
    if img.mode not in _NATIVE_MODES:
        img = img.convert("RGB")
    return img


def encode_png(img: Image.Image) -> bytes:
    """Lossless re-encode; PNG output is deterministic for a given raster."""
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _tile_positions(width: int, height: int, spec: MaskSpec) -> np.ndarray:
    """Patch mode: pick whole tiles covering ~ratio of the tile grid."""
    side = spec.patch_size
    tiles_x = (width + side - 1) // side
    tiles_y = (height + side - 1) // side
    n_tiles = tiles_x * tiles_y
    n_masked = math.floor(ratio_fraction(spec.ratio) * n_tiles + Fraction(1, 2))
    rng = np.random.Generator(np.random.Philox(key=np.uint64(spec.seed)))
    chosen = rng.permutation(n_tiles)[:n_masked]
    positions = []
    for tile in chosen:
        ty, tx = divmod(int(tile), tiles_x)
        y0, x0 = ty * side, tx * side
        for y in range(y0, min(y0 + side, height)):
            row = y * width
            positions.extend(range(row + x0, row + min(x0 + side, width)))
    return np.asarray(positions, dtype=np.int64)


def mask_image(img: Image.Image, spec: MaskSpec) -> Image.Image:
    """Occlude exactly mask_count(...) pixels; all others stay untouched.

    ratio 0.0 returns the input image object unchanged.
    """
    width, height = img.width, img.height
    if spec.patch_size is None:
        count = mask_count(width, height, spec.ratio)
        if count == 0:
            return img
        positions = mask_positions(width, height, count, spec.seed)
    else:
        positions = _tile_positions(width, height, spec)
        if positions.size == 0:
            return img
    arr = np.array(img)
    flat = arr.reshape(height * width, -1)
    flat[positions] = spec.fill
    return Image.fromarray(arr, mode=img.mode)


def mask_image_bytes(data: bytes, spec: MaskSpec) -> bytes:
    """Decode, mask, re-encode losslessly.

    A zero mask count returns the input bytes verbatim, so unmasked trials
    forward the original file to the backend byte-identically.
    """
    img = load_image(data)
    if spec.patch_size is None and mask_count(img.width, img.height, spec.ratio) == 0:
        return data
    masked = mask_image(img, spec)
    if masked is img:
        return data
    return encode_png(masked)
