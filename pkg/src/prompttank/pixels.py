"""Image adjustment chain applied to input frames before generation.

Images are float64 arrays of shape (height, width, 3), channels in [0, 1].
All arithmetic stays in floating point; quantisation to 8-bit happens only
at file and encoding boundaries (:func:`to_uint8`, :func:`save_png`).
Operations treat arrays as immutable values and may return their input
unchanged when the parameter is the neutral value, which keeps neutral
settings exact identities.

The chain order is fixed: brightness, contrast, gamma, colourise, noise,
then the Salford crossfade, mirroring the left-to-right strip of controls
in the performance UI.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from PIL import Image as PILImage

# Rec. 709 luma coefficients, used for every luma computation in the package.
LUMA_WEIGHTS = (0.2126, 0.7152, 0.0722)

# Inclusive ranges for the scalar chain parameters, shared with the
# automation parameter registry and preset validation.
PARAM_RANGES: dict[str, tuple[float, float]] = {
    "brightness": (-1.0, 1.0),
    "contrast": (0.0, 4.0),
    "gamma": (0.2, 5.0),
    "colourise_amount": (0.0, 1.0),
    "noise_gain": (0.0, 1.0),
    "salford_mix": (0.0, 1.0),
    "salford_contrast": (0.0, 4.0),
    "salford_threshold": (0.0, 1.0),
    "salford_tint_strength": (0.0, 1.0),
}


def _check_range(name: str, value: float) -> None:
    lo, hi = PARAM_RANGES[name]
    if not lo <= value <= hi:
        raise ValueError(f"{name} must lie in [{lo}, {hi}], got {value!r}")


def _check_tint(name: str, tint) -> tuple[float, float, float]:
    tint = tuple(float(c) for c in tint)
    if len(tint) != 3 or not all(0.0 <= c <= 1.0 for c in tint):
        raise ValueError(f"{name} must be an RGB triple in [0,1]^3, got {tint!r}")
    return tint


@dataclass(frozen=True)
class PixelChainParams:
    """Parameter bundle for the full adjustment chain.

    Defaults are the identity configuration: running the chain with an
    untouched instance returns the input image bit-for-bit.
    """

    brightness: float = 0.0
    contrast: float = 1.0
    gamma: float = 1.0
    colourise_amount: float = 0.0
    colourise_tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_gain: float = 0.0
    noise_scale: int = 1
    noise_seed: int = 0
    salford_mix: float = 0.0
    salford_contrast: float = 2.0
    salford_threshold: float = 0.7
    salford_tint: tuple[float, float, float] = (0.0, 0.9, 1.0)
    salford_tint_strength: float = 0.8

    def __post_init__(self):
        for name in ("brightness", "contrast", "gamma", "colourise_amount",
                     "noise_gain", "salford_mix", "salford_contrast",
                     "salford_threshold", "salford_tint_strength"):
            _check_range(name, getattr(self, name))
        if not (isinstance(self.noise_scale, (int, np.integer)) and self.noise_scale >= 1):
            raise ValueError(f"noise_scale must be a positive integer, got {self.noise_scale!r}")
        object.__setattr__(self, "colourise_tint", _check_tint("colourise_tint", self.colourise_tint))
        object.__setattr__(self, "salford_tint", _check_tint("salford_tint", self.salford_tint))


def luma(img: np.ndarray) -> np.ndarray:
    """Per-pixel Rec. 709 luma, shape (height, width)."""
    r, g, b = LUMA_WEIGHTS
    return img[..., 0] * r + img[..., 1] * g + img[..., 2] * b


def apply_brightness(img: np.ndarray, b: float) -> np.ndarray:
    """Additive brightness: v -> clamp(v + b). Neutral at b=0."""
    if b == 0.0:
        return img
    return np.clip(img + b, 0.0, 1.0)


def apply_contrast(img: np.ndarray, c: float) -> np.ndarray:
    """Contrast around the 0.5 pivot: v -> clamp((v - 0.5) * c + 0.5). Neutral at c=1."""
    if c == 1.0:
        return img
    return np.clip((img - 0.5) * c + 0.5, 0.0, 1.0)


def apply_gamma(img: np.ndarray, g: float) -> np.ndarray:
    """Power-curve gamma: v -> v**g. Neutral at g=1; endpoints 0 and 1 are fixed."""
    if g == 1.0:
        return img
    return np.power(img, g)


def apply_colourise(img: np.ndarray, amount: float, tint) -> np.ndarray:
    """Blend toward the luma-scaled tint: out = (1-amount)*in + amount*(L*tint)."""
    if amount == 0.0:
        return img
    tinted = luma(img)[..., None] * np.asarray(tint, dtype=np.float64)
    return np.clip((1.0 - amount) * img + amount * tinted, 0.0, 1.0)


_SPLITMIX_GAMMA = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    # Counter-based integer hash; uint64 wrap-around is the point.
    with np.errstate(over="ignore"):
        z = x + _SPLITMIX_GAMMA
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


@lru_cache(maxsize=16)
def noise_field(seed: int, width: int, height: int, scale: int = 1) -> np.ndarray:
    """Deterministic static noise field in [0,1), shape (height, width).

    The field is value noise on a grid of scale x scale pixel cells; each
    cell's value is a counter-based hash of (seed, cell_x, cell_y), so the
    field is bit-identical for identical arguments on every platform and
    every frame ("static" noise).  The returned array is read-only and
    cached; treat it as a constant.
    """
    if width <= 0 or height <= 0 or scale <= 0:
        raise ValueError("noise field needs positive dimensions and scale")
    cells_x = -(-width // scale)
    cells_y = -(-height // scale)
    cy, cx = np.mgrid[0:cells_y, 0:cells_x].astype(np.uint64)
    base = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    counters = (cy << np.uint64(32)) | cx
    values = _splitmix64(base ^ counters)
    field = values.astype(np.float64) / float(2**64)
    if scale > 1:
        field = np.repeat(np.repeat(field, scale, axis=0), scale, axis=1)
        field = field[:height, :width]
    field.setflags(write=False)
    return field


def apply_noise(img: np.ndarray, gain: float, scale: int = 1, seed: int = 0) -> np.ndarray:
    """Overlay the static noise field: v -> clamp(v + gain * (N - 0.5))."""
    if gain == 0.0:
        return img
    field = noise_field(seed, img.shape[1], img.shape[0], scale)
    return np.clip(img + gain * (field[..., None] - 0.5), 0.0, 1.0)


def apply_salford(img: np.ndarray, mix: float, p: PixelChainParams) -> np.ndarray:
    """Crossfade toward the invert/contrast/tint-brights sub-chain.

    The processed branch inverts the image, boosts contrast, then pulls
    pixels whose luma exceeds the threshold toward the configured tint.
    Because of the inversion, captured shadows end up as the bright,
    artificially coloured regions.  ``mix`` is the crossfader position;
    0 leaves the image untouched, 1 is the fully processed branch.
    """
    if mix == 0.0:
        return img
    branch = apply_contrast(1.0 - img, p.salford_contrast)
    bright = luma(branch) > p.salford_threshold
    tint = np.asarray(p.salford_tint, dtype=np.float64)
    tinted = branch * (1.0 - p.salford_tint_strength) + tint * p.salford_tint_strength
    branch = np.where(bright[..., None], tinted, branch)
    return np.clip((1.0 - mix) * img + mix * np.clip(branch, 0.0, 1.0), 0.0, 1.0)


def apply_chain(img: np.ndarray, p: PixelChainParams) -> np.ndarray:
    """Run the full adjustment chain in its fixed stage order.

    Stages sitting at their neutral parameter are skipped, which makes the
    all-neutral chain an exact identity.  Zero-dimension images are
    rejected; anything else of shape (h, w, 3) passes through with
    dimensions preserved and channels clamped to [0, 1].
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an array of shape (h, w, 3), got {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("cannot process a zero-dimension image")
    out = img
    out = apply_brightness(out, p.brightness)
    out = apply_contrast(out, p.contrast)
    out = apply_gamma(out, p.gamma)
    out = apply_colourise(out, p.colourise_amount, p.colourise_tint)
    out = apply_noise(out, p.noise_gain, p.noise_scale, p.noise_seed)
    out = apply_salford(out, p.salford_mix, p)
    return out


# --- storage and encoding boundaries ---------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantize a float image to 8-bit, rounding to nearest."""
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """Lift an 8-bit image to the float representation (v / 255)."""
    return arr.astype(np.float64) / 255.0


def encode_png(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with PILImage.open(io.BytesIO(data)) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def encode_jpeg(img: np.ndarray, quality: int = 80) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(to_uint8(img), mode="RGB").save(buf, format="JPEG", quality=quality)
    return buf.getvalue()


def save_png(img: np.ndarray, path) -> None:
    PILImage.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))
