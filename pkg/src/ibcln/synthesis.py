"""Synthetic training triples built with the linear blending model.

A reflection photograph is blurred into a reflection layer ``R`` and blended
as ``I = clip(alpha * T + R)``. The network is supervised on the residual
``I - alpha * T``, which is never clipped.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import (
    ColorSpace,
    Image,
    SignedImage,
    clip01,
    gamma_decode,
    gamma_encode,
    load_image,
    quantize,
    save_image,
)

log = logging.getLogger(__name__)

ALPHA_BOUNDS = (0.8, 1.0)
IMAGE_SUFFIXES = (".png", ".bmp", ".ppm", ".tif", ".tiff")
MANIFEST_COLUMNS = ("index", "alpha", "seed", "source_T", "source_R")
RESIDUAL_HEADER = struct.Struct("<II")


@dataclass(frozen=True)
class SynthesisConfig:
    alpha_range: tuple[float, float] = (0.8, 1.0)
    blur_sigma_range: tuple[float, float] = (2.0, 5.0)
    kernel_truncation: float = 3.0
    adaptive_subtract: bool = True
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.alpha_range
        if not (ALPHA_BOUNDS[0] <= lo <= hi <= ALPHA_BOUNDS[1]):
            raise ValueError(f"alpha_range must satisfy 0.8 <= lo <= hi <= 1.0, got {self.alpha_range}")
        slo, shi = self.blur_sigma_range
        if not (0 < slo <= shi):
            raise ValueError(f"blur_sigma_range must satisfy 0 < lo <= hi, got {self.blur_sigma_range}")
        if self.kernel_truncation <= 0:
            raise ValueError("kernel_truncation must be positive")
        object.__setattr__(self, "alpha_range", (float(lo), float(hi)))
        object.__setattr__(self, "blur_sigma_range", (float(slo), float(shi)))


@dataclass(frozen=True)
class TrainTriple:
    input: Image
    transmission: Image
    residual: SignedImage
    alpha: float


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def blur(raw: Image, sigma: float, truncation: float = 3.0) -> Image:
    """Per-channel Gaussian blur with a kernel cut off at ``truncation * sigma``."""
    if sigma <= 0:
        raise ValueError(f"blur sigma must be positive, got {sigma}")
    out = ndimage.gaussian_filter(
        raw.pixels, sigma=(sigma, sigma, 0), truncate=truncation, mode="reflect"
    )
    return Image(np.maximum(out, 0.0), raw.space)


def adaptive_subtract(R: np.ndarray, T: np.ndarray, alpha: float) -> np.ndarray:
    """Pull ``R`` down by the mean overshoot of ``alpha*T + R`` above 1, floored at 0."""
    blend = alpha * T + R
    over = blend > 1.0
    if not over.any():
        return R
    shift = float(np.mean(blend[over] - 1.0))
    return np.maximum(R - shift, 0.0)


def make_reflection_layer(raw: Image, cfg: SynthesisConfig, rng: np.random.Generator,
                          transmission: Image | None = None, alpha: float | None = None,
                          sigma: float | None = None) -> Image:
    """Blur a linear reflection photograph into a reflection layer.

    ``sigma`` defaults to a draw from ``cfg.blur_sigma_range``. Adaptive
    subtraction needs the transmission and alpha it will be blended with and
    is skipped when either is missing.
    """
    if raw.space is not ColorSpace.LINEAR:
        raise ValueError("reflection source must be linear")
    if sigma is None:
        sigma = float(rng.uniform(*cfg.blur_sigma_range))
    R = blur(raw, sigma, cfg.kernel_truncation)
    if cfg.adaptive_subtract and transmission is not None and alpha is not None:
        _check_same_shape(R, transmission)
        R = Image(adaptive_subtract(R.pixels, transmission.pixels, alpha).astype(R.pixels.dtype),
                  ColorSpace.LINEAR)
    return R


def compose(T: Image, R: Image, alpha: float) -> Image:
    _check_same_shape(T, R)
    if not (ALPHA_BOUNDS[0] <= alpha <= ALPHA_BOUNDS[1]):
        raise ValueError(f"alpha must lie in [0.8, 1.0], got {alpha}")
    return clip01(Image(np.maximum(alpha * T.pixels + R.pixels, 0.0), ColorSpace.LINEAR))


def residual_reflection(I: Image, T: Image, alpha: float) -> SignedImage:
    _check_same_shape(I, T)
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    return SignedImage(I.pixels - alpha * T.pixels)


def estimate_alpha(I: Image, T: Image) -> float:
    """Least-squares scale of ``T`` that best explains ``I``, clamped to [0.8, 1]."""
    _check_same_shape(I, T)
    t = np.asarray(T.pixels, dtype=np.float64).ravel()
    denom = float(t @ t)
    if denom == 0.0:
        raise ValueError("transmission is identically zero; alpha is undefined")
    a = float(np.asarray(I.pixels, dtype=np.float64).ravel() @ t) / denom
    return float(np.clip(a, *ALPHA_BOUNDS))


def write_residual(path, residual: SignedImage) -> None:
    px = np.asarray(residual.pixels, dtype="<f4")
    h, w = px.shape[:2]
    with open(path, "wb") as fh:
        fh.write(RESIDUAL_HEADER.pack(h, w))
        fh.write(np.ascontiguousarray(px.transpose(2, 0, 1)).tobytes())


def read_residual(path) -> SignedImage:
    with open(path, "rb") as fh:
        header = fh.read(RESIDUAL_HEADER.size)
        if len(header) != RESIDUAL_HEADER.size:
            raise ValueError(f"{path}: truncated residual header")
        h, w = RESIDUAL_HEADER.unpack(header)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != 3 * h * w:
        raise ValueError(f"{path}: expected {3 * h * w} floats, found {data.size}")
    return SignedImage(data.reshape(3, h, w).transpose(1, 2, 0).astype(np.float32))


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _crop_pair(a: np.ndarray, b: np.ndarray, rng, size):
    h = min(a.shape[0], b.shape[0])
    w = min(a.shape[1], b.shape[1])
    if size is not None:
        if size > min(h, w):
            raise ValueError(f"patch size {size} exceeds source size {h}x{w}")
        h = w = size

    def crop(x):
        top = int(rng.integers(0, x.shape[0] - h + 1))
        left = int(rng.integers(0, x.shape[1] - w + 1))
        return x[top:top + h, left:left + w]

    return crop(a), crop(b)


def synthesize_triple(T_src: Image, R_src: Image, cfg: SynthesisConfig, rng: np.random.Generator,
                      size: int | None = None) -> TrainTriple:
    """One synthetic triple from gamma-encoded source photographs."""
    t_px, r_px = _crop_pair(T_src.pixels, R_src.pixels, rng, size)
    T = gamma_decode(Image(t_px, ColorSpace.GAMMA))
    raw = gamma_decode(Image(r_px, ColorSpace.GAMMA))
    alpha = float(rng.uniform(*cfg.alpha_range))
    R = make_reflection_layer(raw, cfg, rng, transmission=T, alpha=alpha)
    I = compose(T, R, alpha)
    return TrainTriple(I, T, residual_reflection(I, T, alpha), alpha)


def stored_triple(I: Image, T: Image, alpha: float) -> TrainTriple:
    """Quantize a linear pair to 8 bits and rebuild the residual from the stored values.

    The on-disk residual then matches what a reader decodes from the PNGs.
    """
    Iq = gamma_decode(quantize(gamma_encode(I)))
    Tq = gamma_decode(quantize(gamma_encode(T)))
    return TrainTriple(Iq, Tq, residual_reflection(Iq, Tq, alpha), alpha)


def generate_dataset(transmission_dir, reflection_dir, cfg: SynthesisConfig, out_dir, n: int,
                     size: int | None = None) -> Path:
    """Write ``n`` synthetic triples plus ``manifest.csv`` under ``out_dir``.

    Each index draws from its own stream seeded by ``(cfg.seed, index)`` so
    the result does not depend on generation order.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    t_paths = r_paths = []
    if n > 0:
        t_paths = list_images(transmission_dir)
        r_paths = list_images(reflection_dir)
        if not t_paths:
            raise FileNotFoundError(f"no images in {transmission_dir}")
        if not r_paths:
            raise FileNotFoundError(f"no images in {reflection_dir}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if n > 0:
        for sub in ("input", "transmission", "residual"):
            (out / sub).mkdir(exist_ok=True)
    for index in range(n):
        rng = np.random.default_rng([cfg.seed, index])
        t_path = t_paths[int(rng.integers(len(t_paths)))]
        r_path = r_paths[int(rng.integers(len(r_paths)))]
        triple = synthesize_triple(load_image(t_path), load_image(r_path), cfg, rng, size)
        triple = stored_triple(triple.input, triple.transmission, triple.alpha)
        name = f"{index:05d}"
        save_image(out / "input" / f"{name}.png", gamma_encode(triple.input))
        save_image(out / "transmission" / f"{name}.png", gamma_encode(triple.transmission))
        write_residual(out / "residual" / f"{name}.f32", triple.residual)
        rows.append((index, repr(triple.alpha), cfg.seed, t_path.name, r_path.name))

    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    log.info("wrote %d triples to %s", n, out)
    return manifest


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: unexpected manifest columns {reader.fieldnames}")
        return [
            {**row, "index": int(row["index"]), "alpha": float(row["alpha"]), "seed": int(row["seed"])}
            for row in reader
        ]


def load_triple(dataset_dir, index: int, alpha: float) -> TrainTriple:
    root = Path(dataset_dir)
    name = f"{index:05d}"
    I = gamma_decode(load_image(root / "input" / f"{name}.png"))
    T = gamma_decode(load_image(root / "transmission" / f"{name}.png"))
    residual = read_residual(root / "residual" / f"{name}.f32")
    _check_same_shape(I, residual)
    return TrainTriple(I, T, residual, alpha)


def real_triple(I: Image, T: Image) -> TrainTriple:
    """Triple for a captured pair whose blend factor is unknown."""
    if I.space is ColorSpace.GAMMA:
        I, T = gamma_decode(I), gamma_decode(T)
    alpha = estimate_alpha(I, T)
    return TrainTriple(I, T, residual_reflection(I, T, alpha), alpha)


def random_scene(size: int, rng: np.random.Generator, smoothness: float = 3.0) -> Image:
    """Procedural gamma-encoded test scene: smooth color fields plus a few rectangles."""
    h = w = size
    base = rng.random((h, w, 3))
    base = ndimage.gaussian_filter(base, sigma=(smoothness, smoothness, 0), mode="wrap")
    base = (base - base.min()) / max(float(np.ptp(base)), 1e-12)
    for _ in range(int(rng.integers(2, 6))):
        y0, x0 = rng.integers(0, h - 2), rng.integers(0, w - 2)
        y1 = int(rng.integers(y0 + 1, h))
        x1 = int(rng.integers(x0 + 1, w))
        base[y0:y1, x0:x1] = 0.5 * base[y0:y1, x0:x1] + 0.5 * rng.random(3)
    return Image(np.clip(base, 0.0, 1.0).astype(np.float32), ColorSpace.GAMMA)


def write_random_sources(out_dir, count: int, size: int, seed: int) -> list[Path]:
    """Populate ``out_dir`` with procedural source photographs (for demos and tests)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        p = out / f"scene_{i:04d}.png"
        save_image(p, random_scene(size, rng))
        paths.append(p)
    return paths

