"""Generator backends and input frame sources.

A backend turns a :class:`~prompttank.engine.GenerationRequest` into an
output image.  The mock backend stands in for a diffusion model with a
deterministic procedural pattern, which makes the whole loop testable
bit-for-bit; the remote backend speaks a minimal HTTP contract to an
external generation service (one POST per frame).

Frame sources feed the loop with input imagery at the configured
resolution: a still image, a looping directory of PNGs, or a synthetic
generator of moving silhouettes for tests and unattended demos.
"""

from __future__ import annotations

import base64
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import requests

from . import pixels
from .prompts import serialize_weighted_prompts


@dataclass(frozen=True)
class BackendCapabilities:
    max_resolution: int | None
    native_weighted_prompts: bool
    deterministic: bool


class GeneratorBackend(Protocol):
    def generate(self, request) -> np.ndarray: ...

    def capabilities(self) -> BackendCapabilities: ...


class BackendError(Exception):
    """A backend failed to produce a frame; ``kind`` is machine-readable."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# --- mock backend -------------------------------------------------------------


def _pattern(seed: int, prompt_string: str, width: int, height: int) -> np.ndarray:
    """Deterministic multi-band pattern derived from (seed, prompts).

    The digest of the inputs picks band count, orientation and palette;
    band indices are pure integer math, colors are 8-bit values lifted by
    /255, so the pattern is bit-identical across platforms and runs.
    """
    digest = hashlib.blake2b(
        f"{seed}|{prompt_string}".encode("utf-8"), digest_size=32
    ).digest()
    n_bands = 3 + digest[0] % 6
    horizontal = digest[1] % 2 == 0
    palette = np.frombuffer(digest[2:2 + 3 * n_bands], dtype=np.uint8).reshape(n_bands, 3)
    extent = height if horizontal else width
    coords = np.arange(extent, dtype=np.int64)
    band = (coords * n_bands) // max(extent, 1)
    colors = palette[band % n_bands].astype(np.float64) / 255.0
    if horizontal:
        return np.broadcast_to(colors[:, None, :], (height, width, 3)).copy()
    return np.broadcast_to(colors[None, :, :], (height, width, 3)).copy()


def mock_generate(request) -> np.ndarray:
    """Deterministic stand-in for the diffusion model.

    Blends the input toward a procedural pattern keyed on (seed, serialized
    prompts): strength 0 passes the input through untouched, strength 1
    fully displaces it.  Bit-reproducible for identical requests.
    """
    strength = request.strength
    if strength == 0.0:
        return request.image
    pattern = _pattern(
        request.seed,
        serialize_weighted_prompts(request.prompts),
        request.image.shape[1],
        request.image.shape[0],
    )
    if strength == 1.0:
        return pattern
    return (1.0 - strength) * request.image + strength * pattern


class MockBackend:
    """In-process deterministic backend for tests, demos and dry runs."""

    def __init__(self):
        self.call_count = 0

    def generate(self, request) -> np.ndarray:
        self.call_count += 1
        return mock_generate(request)

    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(
            max_resolution=None, native_weighted_prompts=False, deterministic=True
        )


# --- remote backend -----------------------------------------------------------


class RemoteBackend:
    """HTTP adapter for an external image-to-image generation service.

    One POST per frame.  The JSON body carries the input image as a base64
    PNG, the serialized weighted prompt string, strength and seed; the
    response body must be a PNG image.  A request that misses the timeout
    (by default two frame periods, set by the engine) becomes a skipped
    frame, never a stalled loop.
    """

    def __init__(self, endpoint: str, timeout: float | None = None):
        self.endpoint = endpoint
        self.timeout = timeout if timeout is not None else 1.0
        self._auto_timeout = timeout is None
        self._session = requests.Session()

    def configure_for_fps(self, fps: float) -> None:
        if self._auto_timeout:
            self.timeout = 2.0 / fps

    def generate(self, request) -> np.ndarray:
        body = {
            "image": base64.b64encode(pixels.encode_png(request.image)).decode("ascii"),
            "prompt": serialize_weighted_prompts(request.prompts),
            "strength": request.strength,
            "seed": request.seed,
            "width": request.image.shape[1],
            "height": request.image.shape[0],
        }
        try:
            response = self._session.post(self.endpoint, json=body, timeout=self.timeout)
        except requests.Timeout:
            raise BackendError("timeout", f"no response within {self.timeout:.3f}s") from None
        except requests.RequestException as e:
            raise BackendError("connection", str(e)) from None
        if response.status_code != 200:
            raise BackendError("status", f"backend returned HTTP {response.status_code}")
        try:
            image = pixels.decode_png(response.content)
        except Exception as e:
            raise BackendError("decode", f"undecodable image in response: {e}") from None
        return image

    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(
            max_resolution=None, native_weighted_prompts=False, deterministic=False
        )


# --- frame sources ------------------------------------------------------------


class FrameSource(Protocol):
    resolution: tuple[int, int]

    def next_frame(self) -> np.ndarray: ...


class StillImageSource:
    """Loops a single image, e.g. a captured plate or test card."""

    def __init__(self, image_or_path):
        if isinstance(image_or_path, (str, Path)):
            self._image = pixels.load_png(image_or_path)
        else:
            self._image = np.asarray(image_or_path, dtype=np.float64)
        self._image.setflags(write=False)
        self.resolution = (self._image.shape[1], self._image.shape[0])

    def next_frame(self) -> np.ndarray:
        return self._image


class DirectorySource:
    """Loops the PNG files of a directory in sorted order."""

    def __init__(self, directory):
        paths = sorted(Path(directory).glob("*.png"))
        if not paths:
            raise ValueError(f"no .png files in {directory}")
        self._frames = [pixels.load_png(p) for p in paths]
        first = self._frames[0].shape
        for p, frame in zip(paths, self._frames):
            if frame.shape != first:
                raise ValueError(f"{p} has shape {frame.shape}, expected {first}")
            frame.setflags(write=False)
        self.resolution = (first[1], first[0])
        self._index = 0

    def next_frame(self) -> np.ndarray:
        frame = self._frames[self._index]
        self._index = (self._index + 1) % len(self._frames)
        return frame


# Home cells for synthetic blobs: a 3x2 grid of disjoint regions.
_BLOB_CELLS = (
    (1 / 6, 1 / 4), (1 / 2, 1 / 4), (5 / 6, 1 / 4),
    (1 / 6, 3 / 4), (1 / 2, 3 / 4), (5 / 6, 3 / 4),
)


class SyntheticSource:
    """Parametric moving silhouettes: dark elliptical blobs on a light field.

    Deterministic function of (seed, internal frame counter), so scripted
    sessions replay identically.  Each blob oscillates inside its own home
    cell with margins that keep the ellipses strictly apart: a frame with
    ``blob_count`` <= 6 blobs always shows exactly that many separated
    figures, which makes this a trustworthy fixture for the pluraliser.
    """

    def __init__(
        self,
        width: int = 512,
        height: int = 512,
        blob_count: int = 2,
        seed: int = 0,
        background: float = 0.9,
        blob_value: float = 0.05,
        speed: float = 0.01,
    ):
        self.resolution = (width, height)
        self._background = background
        self._blob_value = blob_value
        self._speed = speed
        self._counter = 0
        self._count = blob_count
        ys, xs = np.mgrid[0:height, 0:width]
        self._xs = xs / max(width - 1, 1)
        self._ys = ys / max(height - 1, 1)
        n = max(blob_count, 1)
        rand = pixels.noise_field(seed, n, 4, 1)
        gap = 2.0 / max(min(width, height) - 1, 1)
        self._amp = 0.02 + 0.02 * rand[2]
        self._rx = np.minimum(0.06 + 0.02 * rand[0], np.maximum(1 / 6 - self._amp - gap, 0.01))
        self._ry = np.minimum(0.09 + 0.05 * rand[1], np.maximum(1 / 4 - 0.5 * self._amp - gap, 0.015))
        self._phase = 2.0 * np.pi * rand[3]
        self._cx0 = np.array([_BLOB_CELLS[i % 6][0] for i in range(n)])
        self._cy0 = np.array([_BLOB_CELLS[i % 6][1] for i in range(n)])

    def next_frame(self) -> np.ndarray:
        t = self._counter
        self._counter += 1
        width, height = self.resolution
        frame = np.full((height, width, 3), self._background, dtype=np.float64)
        if self._count == 0:
            return frame
        angle = 2.0 * np.pi * self._speed * t + self._phase[: self._count]
        cx = self._cx0[: self._count] + self._amp[: self._count] * np.sin(angle)
        cy = self._cy0[: self._count] + 0.5 * self._amp[: self._count] * np.cos(angle)
        mask = np.zeros((height, width), dtype=bool)
        for i in range(self._count):
            mask |= (
                ((self._xs - cx[i]) / self._rx[i]) ** 2
                + ((self._ys - cy[i]) / self._ry[i]) ** 2
            ) <= 1.0
        frame[mask] = self._blob_value
        return frame
