"""Color-space aware raster primitives shared by the rest of the package.

Images are ``H x W x 3`` float arrays tagged with the color space they live
in. Stored files are gamma encoded; every blend, residual and network tensor
is linear.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

GAMMA = 2.2


class ColorSpace(str, enum.Enum):
    GAMMA = "gamma"
    LINEAR = "linear"


class ColorSpaceError(ValueError):
    """Raised when an operation receives an image in the wrong color space."""


@dataclass(frozen=True)
class Image:
    pixels: np.ndarray
    space: ColorSpace = ColorSpace.GAMMA

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected an H x W x 3 raster, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1 x 1")
        if not np.issubdtype(px.dtype, np.floating):
            px = px.astype(np.float32)
        if np.isnan(px).any():
            raise ValueError("image contains NaN")
        space = ColorSpace(self.space)
        if space is ColorSpace.GAMMA and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("gamma-encoded pixels must lie in [0, 1]")
        if space is ColorSpace.LINEAR and px.min() < 0.0:
            raise ValueError("linear images are non-negative; use SignedImage")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "space", space)

    @property
    def shape(self):
        return self.pixels.shape

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class SignedImage:
    """Linear-space raster whose values may be negative (residual reflections)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected an H x W x 3 raster, got shape {px.shape}")
        if not np.issubdtype(px.dtype, np.floating):
            px = px.astype(np.float32)
        if not np.isfinite(px).all():
            raise ValueError("signed image must be finite")
        object.__setattr__(self, "pixels", px)

    @property
    def space(self) -> ColorSpace:
        return ColorSpace.LINEAR

    @property
    def shape(self):
        return self.pixels.shape


def _expect(img, space: ColorSpace):
    if img.space is not space:
        raise ColorSpaceError(f"expected a {space.value} image, got {img.space.value}")


def gamma_decode(img: Image) -> Image:
    _expect(img, ColorSpace.GAMMA)
    return Image(np.power(img.pixels, GAMMA), ColorSpace.LINEAR)


def gamma_encode(img: Image) -> Image:
    _expect(img, ColorSpace.LINEAR)
    px = np.asarray(img.pixels)
    if not np.isfinite(px).all():
        raise ValueError("cannot encode non-finite pixels")
    return Image(np.power(np.clip(px, 0.0, 1.0), 1.0 / GAMMA), ColorSpace.GAMMA)


def encode_array(x: np.ndarray) -> np.ndarray:
    """Gamma-encode a raw linear array (any sign) into [0, 1]."""
    if not np.isfinite(x).all():
        raise ValueError("cannot encode non-finite pixels")
    return np.power(np.clip(x, 0.0, 1.0), 1.0 / GAMMA)


def clip01(img):
    """Clamp pixels to [0, 1], keeping the color space tag."""
    if isinstance(img, SignedImage):
        return Image(np.clip(img.pixels, 0.0, 1.0), ColorSpace.LINEAR)
    if isinstance(img, Image):
        return Image(np.clip(img.pixels, 0.0, 1.0), img.space)
    return np.clip(img, 0.0, 1.0)


def load_image(path) -> Image:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    with PILImage.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(f"{path}: expected 8-bit RGB, got mode {im.mode!r}")
        data = np.asarray(im, dtype=np.uint8)
    return Image(data.astype(np.float32) / 255.0, ColorSpace.GAMMA)


def to_bytes(img: Image) -> np.ndarray:
    _expect(img, ColorSpace.GAMMA)
    return np.rint(np.asarray(img.pixels, dtype=np.float64) * 255.0).astype(np.uint8)


def quantize(img: Image) -> Image:
    """Round a gamma-encoded image to the nearest 8-bit level."""
    return Image(to_bytes(img).astype(np.float64) / 255.0, ColorSpace.GAMMA)


def save_image(path, img: Image) -> None:
    path = os.fspath(path)
    PILImage.fromarray(to_bytes(img), mode="RGB").save(path)


def extract_patches(img: Image, size: int, count: int, seed: int) -> list[Image]:
    h, w = img.height, img.width
    if size < 1 or size > min(h, w):
        raise ValueError(f"patch size {size} does not fit a {h}x{w} image")
    return [
        Image(img.pixels[t:t + size, l:l + size].copy(), img.space)
        for t, l in patch_offsets(h, w, size, count, seed)
    ]


def patch_offsets(h: int, w: int, size: int, count: int, seed: int) -> list[tuple[int, int]]:
    rng = np.random.default_rng(seed)
    tops = rng.integers(0, h - size + 1, size=count)
    lefts = rng.integers(0, w - size + 1, size=count)
    return [(int(t), int(l)) for t, l in zip(tops, lefts)]


def _check_factor(factor):
    if factor not in (2, 4):
        raise ValueError(f"downsample factor must be 2 or 4, got {factor}")


def downsample(img: Image, factor: int) -> Image:
    """Box-average downsampling; non-divisible sides are reflect-padded first."""
    _check_factor(factor)
    px = np.asarray(img.pixels)
    h, w = px.shape[:2]
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        mode = "reflect" if min(h, w) > max(ph, pw) else "edge"
        px = np.pad(px, ((0, ph), (0, pw), (0, 0)), mode=mode)
    H, W = px.shape[:2]
    blocks = px.reshape(H // factor, factor, W // factor, factor, 3)
    # offset from the block minimum so constant blocks come back bit-exact
    low = blocks.min(axis=(1, 3), keepdims=True)
    out = (low + (blocks - low).mean(axis=(1, 3), keepdims=True))[:, 0, :, 0]
    return Image(out.astype(px.dtype), img.space)


def downsample_tensor(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Differentiable counterpart of :func:`downsample` for N x C x H x W tensors."""
    _check_factor(factor)
    h, w = x.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        mode = "reflect" if min(h, w) > max(ph, pw) else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return F.avg_pool2d(x, factor)


def to_tensor(img) -> torch.Tensor:
    """H x W x 3 raster -> 1 x 3 x H x W float32 tensor."""
    px = img.pixels if hasattr(img, "pixels") else np.asarray(img)
    return torch.from_numpy(np.ascontiguousarray(px, dtype=np.float32).transpose(2, 0, 1)).unsqueeze(0)


def from_tensor(x: torch.Tensor) -> np.ndarray:
    """1 x 3 x H x W (or 3 x H x W) tensor -> H x W x 3 array."""
    x = x.detach().cpu()
    if x.dim() == 4:
        if x.shape[0] != 1:
            raise ValueError("expected a single-image batch")
        x = x[0]
    return x.numpy().transpose(1, 2, 0)
