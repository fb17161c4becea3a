"""
Image buffers and the per-image operations of the preprocessing
pipeline: bilinear resizing, seeded augmentation, normalization and
the PSNR / Canny quality gates.
"""

import io
import logging
import math
import struct
from dataclasses import dataclass
from os import PathLike
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .export import write_atomic
from .prng import Xoshiro256
from .pydantic_models import AugmentSpec

LOGGER = logging.getLogger("cattle-ensemble")

TENSOR_MAGIC = b"HF01"
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
CANNY_SIGMA = 1.4
CANNY_HIGH = 0.3
CANNY_LOW = 0.1
PSNR_THRESHOLD_DB = 22.0
PSNR_IDENTICAL = math.inf


class ImageError(ValueError):
    """An image could not be decoded or has invalid contents."""


@dataclass(frozen=True)
class ImageBuffer:
    """RGB image, row-major (height, width, 3).

    8-bit buffers hold uint8 samples; normalized buffers hold float64
    samples in [0, 1].
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ImageError("expected an H x W x 3 array, got %s" % (self.data.shape,))
        if self.height < 1 or self.width < 1:
            raise ImageError("empty image")
        if self.normalized:
            if self.data.dtype != np.float64:
                raise ImageError("normalized images hold float64 samples")
            if np.any(self.data < 0.0) or np.any(self.data > 1.0):
                raise ImageError("normalized samples must lie in [0, 1]")
        elif self.data.dtype != np.uint8:
            raise ImageError("8-bit images hold uint8 samples")
        self.data.setflags(write=False)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return 3

    @classmethod
    def filled(cls, width: int, height: int, value=0) -> "ImageBuffer":
        data = np.empty((height, width, 3), dtype=np.uint8)
        data[...] = value
        return cls(data)


def read_image(path: PathLike) -> ImageBuffer:
    """Decode a PNG or binary PPM file to an 8-bit RGB buffer."""
    try:
        with Image.open(path) as img:
            if img.format not in ("PNG", "PPM"):
                raise ImageError("%s: unsupported format %s" % (path, img.format))
            data = np.array(img.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as err:
        raise ImageError("%s: cannot decode image (%s)" % (path, err)) from None
    return ImageBuffer(data)


def encode_png(img: ImageBuffer) -> bytes:
    if img.normalized:
        raise ImageError("PNG output needs an 8-bit image")
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(img.data), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_png(img: ImageBuffer, path: PathLike) -> bytes:
    data = encode_png(img)
    write_atomic(data, path)
    return data


def write_tensor(img: ImageBuffer, path: PathLike) -> None:
    """Write the raw tensor sidecar: magic, width, height, channels
    (little-endian uint32) and row-major little-endian float32 samples."""
    if not img.normalized:
        raise ImageError("tensor output needs a normalized image")
    header = TENSOR_MAGIC + struct.pack("<III", img.width, img.height, img.channels)
    write_atomic(header + img.data.astype("<f4").tobytes(), path)


def read_tensor(path: PathLike) -> ImageBuffer:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise ImageError("%s: not an HF01 tensor" % path)
    width, height, channels = struct.unpack("<III", raw[4:16])
    data = np.frombuffer(raw[16:], dtype="<f4").reshape(height, width, channels)
    return ImageBuffer(data.astype(np.float64), normalized=True)


def _sample_bilinear(src: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear lookup at fractional coordinates, clamping to the edge."""
    h, w = src.shape[:2]
    xs = np.clip(xs, 0.0, w - 1)
    ys = np.clip(ys, 0.0, h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xs - x0)[..., np.newaxis]
    wy = (ys - y0)[..., np.newaxis]
    src = src.astype(np.float64)
    top = src[y0, x0] * (1.0 - wx) + src[y0, x1] * wx
    bottom = src[y1, x0] * (1.0 - wx) + src[y1, x1] * wx
    return top * (1.0 - wy) + bottom * wy


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def resize_bilinear(img: ImageBuffer, out_w: int, out_h: int) -> ImageBuffer:
    """Resize with bilinear interpolation at half-pixel centers."""
    if out_w < 1 or out_h < 1:
        raise ImageError("output size must be positive, got %dx%d" % (out_w, out_h))
    xs = (np.arange(out_w) + 0.5) * (img.width / out_w) - 0.5
    ys = (np.arange(out_h) + 0.5) * (img.height / out_h) - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    out = _sample_bilinear(img.data, grid_y, grid_x)
    if img.normalized:
        return ImageBuffer(np.clip(out, 0.0, 1.0), normalized=True)
    return ImageBuffer(_to_uint8(out))


@dataclass(frozen=True)
class AugmentParams:
    """One draw of augmentation parameters."""

    rotation_deg: float
    width_shift: float
    height_shift: float
    zoom: float
    brightness: float
    channel_shift: tuple[float, float, float]

    @classmethod
    def draw(cls, spec: AugmentSpec, rng: Xoshiro256) -> "AugmentParams":
        # Fixed draw order: rotation, shifts, zoom, brightness, channels
        rotation = rng.uniform(*spec.rotation_deg)
        width_shift = rng.uniform(*spec.width_shift)
        height_shift = rng.uniform(*spec.height_shift)
        zoom = rng.uniform(*spec.zoom)
        brightness = rng.uniform(*spec.brightness)
        channels = tuple(rng.uniform(*spec.channel_shift) for _ in range(3))
        return cls(rotation, width_shift, height_shift, zoom, brightness, channels)  # type: ignore[arg-type]


def apply_augmentation(img: ImageBuffer, params: AugmentParams) -> ImageBuffer:
    """Rotate, translate and zoom as one inverse-mapped affine map, then
    adjust brightness and add per-channel offsets."""
    if img.normalized:
        raise ImageError("augmentation needs an 8-bit image")
    h, w = img.height, img.width
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    theta = math.radians(params.rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    tx, ty = params.width_shift * w, params.height_shift * h
    # forward: p' = c + z * (R (p - c) + t); sample at p = c + R^-1 ((p' - c) / z - t)
    oy, ox = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ux = (ox - cx) / params.zoom - tx
    uy = (oy - cy) / params.zoom - ty
    xs = cx + cos_t * ux + sin_t * uy
    ys = cy - sin_t * ux + cos_t * uy
    out = _sample_bilinear(img.data, ys, xs)
    out = np.clip(out * params.brightness, 0.0, 255.0)
    out = np.clip(out + np.array(params.channel_shift), 0.0, 255.0)
    return ImageBuffer(_to_uint8(out))


def augment(img: ImageBuffer, spec: AugmentSpec, seed: int) -> ImageBuffer:
    """Augment with parameters drawn uniformly from ``spec``."""
    params = AugmentParams.draw(spec, Xoshiro256(seed))
    LOGGER.debug("Augmenting with %s", params)
    return apply_augmentation(img, params)


def normalize(img: ImageBuffer) -> ImageBuffer:
    """Scale 8-bit samples to [0, 1]."""
    if img.normalized:
        raise ImageError("image is already normalized")
    return ImageBuffer(img.data.astype(np.float64) / 255.0, normalized=True)


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    """Peak signal-to-noise ratio in dB; identical images give +inf."""
    if a.data.shape != b.data.shape:
        raise ImageError("size mismatch: %s vs %s" % (a.data.shape, b.data.shape))
    if a.normalized or b.normalized:
        raise ImageError("PSNR is defined on 8-bit images")
    diff = a.data.astype(np.int64) - b.data.astype(np.int64)
    sse = int(np.sum(diff * diff))
    if sse == 0:
        return PSNR_IDENTICAL
    mse = sse / diff.size
    return 10.0 * math.log10(255.0**2 / mse)


def reencode_jpeg(img: ImageBuffer, quality: int = 90) -> ImageBuffer:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(img.data), mode="RGB").save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    with Image.open(buf) as decoded:
        return ImageBuffer(np.array(decoded.convert("RGB"), dtype=np.uint8))


def psnr_gate(img: ImageBuffer, quality: int = 90, threshold: float = PSNR_THRESHOLD_DB) -> tuple[bool, float]:
    """Compare an image with its own lossy re-encode; True means it passes."""
    value = psnr(img, reencode_jpeg(img, quality))
    return value > threshold, value


def gaussian_kernel(size: int = 5, sigma: float = CANNY_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def canny_edges(img: ImageBuffer) -> np.ndarray:
    """Boolean edge map from the Canny detector."""
    if img.width < 5 or img.height < 5:
        raise ImageError("Canny needs at least 5x5 pixels, got %dx%d" % (img.width, img.height))
    data = img.data.astype(np.float64)
    if img.normalized:
        data *= 255.0
    gray = data @ LUMA_WEIGHTS
    smooth = ndimage.convolve(gray, gaussian_kernel(), mode="nearest")
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    # Rounding removes last-bit asymmetries so symmetric edges stay symmetric
    magnitude = np.round(np.hypot(gx, gy), 6)
    peak = magnitude.max()
    if peak <= 0.0:
        return np.zeros(gray.shape, dtype=bool)

    # Non-maximum suppression along the quantized gradient direction
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    padded = np.pad(magnitude, 1, mode="constant")
    h, w = magnitude.shape

    def shifted(dy: int, dx: int) -> np.ndarray:
        return padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    horizontal = (angle < 22.5) | (angle >= 157.5)
    diagonal = (angle >= 22.5) & (angle < 67.5)
    vertical = (angle >= 67.5) & (angle < 112.5)
    anti = (angle >= 112.5) & (angle < 157.5)
    before = np.select(
        [horizontal, diagonal, vertical, anti],
        [shifted(0, -1), shifted(-1, -1), shifted(-1, 0), shifted(-1, 1)],
    )
    after = np.select(
        [horizontal, diagonal, vertical, anti],
        [shifted(0, 1), shifted(1, 1), shifted(1, 0), shifted(1, -1)],
    )
    thin = np.where((magnitude >= before) & (magnitude >= after), magnitude, 0.0)

    # Hysteresis: keep weak pixels 8-connected to a strong one
    strong = thin >= CANNY_HIGH * peak
    candidates = thin >= CANNY_LOW * peak
    labels, n = ndimage.label(candidates, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(gray.shape, dtype=bool)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels]


def canny_edge_density(img: ImageBuffer) -> float:
    """Fraction of pixels marked as edges."""
    edges = canny_edges(img)
    return float(edges.sum()) / edges.size
