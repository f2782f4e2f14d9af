"""PSNR / SSIM and the benchmark and time-step sweep harnesses."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .imaging import (
    ColorSpace,
    Image,
    gamma_decode,
    gamma_encode,
    load_image,
    quantize,
    save_image,
    to_tensor,
)
from .model import CascadeTrace
from .synthesis import list_images

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class MetricRow:
    dataset: str
    image_id: str
    psnr: float
    ssim: float


def _pixels64(x) -> np.ndarray:
    px = x.pixels if hasattr(x, "pixels") else x
    return np.asarray(px, dtype=np.float64)


def psnr(a, b) -> float:
    a, b = _pixels64(a), _pixels64(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / err))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation, keeping only windows fully inside the image
    y = ndimage.correlate1d(x, g, axis=0, mode="constant")
    y = ndimage.correlate1d(y, g, axis=1, mode="constant")
    r = len(g) // 2
    return y[r:x.shape[0] - r, r:x.shape[1] - r]


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Single-channel SSIM map over every valid 11x11 Gaussian window."""
    g = gaussian_window()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b) -> float:
    a, b = _pixels64(a), _pixels64(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    if a.ndim == 2:
        return float(ssim_map(a, b).mean())
    return float(np.mean([ssim_map(a[..., c], b[..., c]).mean() for c in range(a.shape[2])]))


def display_image(linear: torch.Tensor | np.ndarray) -> Image:
    """Network output (linear, unclamped) -> 8-bit-quantized gamma-encoded image."""
    if isinstance(linear, torch.Tensor):
        x = linear.detach().cpu().double()
        if x.dim() == 4:
            x = x[0]
        linear = x.numpy().transpose(1, 2, 0)
    arr = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return quantize(gamma_encode(Image(arr, ColorSpace.LINEAR)))


def score(pred_linear, target: Image) -> tuple[float, float]:
    """PSNR and SSIM of a linear prediction against a gamma-encoded target."""
    p = display_image(pred_linear)
    t = quantize(target) if target.space is ColorSpace.GAMMA else display_image(target.pixels)
    return psnr(p, t), ssim(p, t)


class IdentityModel:
    """Baseline that returns the input as the transmission at every step."""

    n_steps = 1
    use_reflection_net = True

    def __call__(self, I, n_steps=None):
        n = n_steps or self.n_steps
        return CascadeTrace([I] * n, [torch.zeros_like(I)] * n, ())

    def eval(self):
        return self


@torch.no_grad()
def run_cascade(model, image: Image, n_steps: int) -> CascadeTrace:
    if hasattr(model, "eval"):
        model.eval()
    if image.space is ColorSpace.GAMMA:
        image = gamma_decode(image)
    return model(to_tensor(image), n_steps)


def find_pairs(dataset_dir):
    """Match ``input/X`` with ``transmission/X``; returns (pairs, unpaired names)."""
    root = Path(dataset_dir)
    if not (root / "input").is_dir() or not (root / "transmission").is_dir():
        raise FileNotFoundError(f"{root}: expected input/ and transmission/ subdirectories")
    inputs = {p.name: p for p in list_images(root / "input")}
    gts = {p.name: p for p in list_images(root / "transmission")}
    pairs = [(name, inputs[name], gts[name]) for name in sorted(inputs.keys() & gts.keys())]
    unpaired = sorted(inputs.keys() ^ gts.keys())
    return pairs, unpaired


def _contact_sheet(images) -> Image:
    h = max(im.height for im in images)
    cols = []
    for im in images:
        px = im.pixels
        if px.shape[0] < h:
            px = np.pad(px, ((0, h - px.shape[0]), (0, 0), (0, 0)))
        cols.append(px)
    return Image(np.concatenate(cols, axis=1), ColorSpace.GAMMA)


def _mean(values):
    return float(np.mean(values)) if values else float("nan")


def summarize(rows: list[MetricRow]) -> list[dict]:
    """Per-dataset means followed by the image-weighted overall mean."""
    out = []
    for name in dict.fromkeys(r.dataset for r in rows):
        sel = [r for r in rows if r.dataset == name]
        out.append({"dataset": name, "count": len(sel),
                    "psnr": _mean([r.psnr for r in sel]), "ssim": _mean([r.ssim for r in sel])})
    out.append({"dataset": "overall", "count": len(rows),
                "psnr": _mean([r.psnr for r in rows]), "ssim": _mean([r.ssim for r in rows])})
    return out


def write_results(rows: list[MetricRow], summary: list[dict], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "image_id", "psnr", "ssim"])
        for r in rows:
            w.writerow([r.dataset, r.image_id, repr(r.psnr), repr(r.ssim)])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "count", "psnr", "ssim"])
        for s in summary:
            w.writerow([s["dataset"], s["count"], repr(s["psnr"]), repr(s["ssim"])])


def benchmark(model, dataset_dirs, n_steps: int, out_dir=None, contact_sheets: bool = True):
    """Evaluate ``T_hat_N`` against ground truth on every pair of every dataset.

    Returns ``(rows, summary)``; with ``out_dir`` also writes results.csv,
    summary.csv and one contact sheet (input | prediction | truth) per image.
    """
    rows = []
    for d in dataset_dirs:
        d = Path(d)
        pairs, unpaired = find_pairs(d)
        for name in unpaired:
            log.warning("%s: %s has no counterpart, skipped", d.name, name)
        for name, inp_path, gt_path in pairs:
            inp, gt = load_image(inp_path), load_image(gt_path)
            if inp.shape != gt.shape:
                log.warning("%s: %s input/truth sizes differ, skipped", d.name, name)
                continue
            trace = run_cascade(model, inp, n_steps)
            pred = display_image(trace.final)
            row = MetricRow(d.name, Path(name).stem, psnr(pred, gt), ssim(pred, gt))
            rows.append(row)
            if out_dir is not None and contact_sheets:
                sheet_dir = Path(out_dir) / "contact" / d.name
                sheet_dir.mkdir(parents=True, exist_ok=True)
                save_image(sheet_dir / f"{row.image_id}.png", _contact_sheet([inp, pred, gt]))
    summary = summarize(rows)
    if out_dir is not None:
        write_results(rows, summary, out_dir)
    return rows, summary


def timestep_sweep(model_or_checkpoints, dataset_dirs, n_list, out_csv=None, retrain_mode=False):
    """Metric-vs-N curve.

    In trace mode a single model is unrolled to ``max(n_list)`` and each
    requested step is scored from the same trace. With ``retrain_mode`` the
    first argument maps each N to a model trained at that N.
    """
    n_list = sorted(set(int(n) for n in n_list))
    if not n_list or n_list[0] < 1:
        raise ValueError("n_list must hold positive step counts")
    images = []
    for d in dataset_dirs:
        pairs, unpaired = find_pairs(d)
        for name in unpaired:
            log.warning("%s: %s has no counterpart, skipped", Path(d).name, name)
        images += [(load_image(i), load_image(g)) for _, i, g in pairs]
    per_n = {n: ([], []) for n in n_list}
    for inp, gt in images:
        if retrain_mode:
            for n in n_list:
                p, s = score(run_cascade(model_or_checkpoints[n], inp, n).final, gt)
                per_n[n][0].append(p)
                per_n[n][1].append(s)
        else:
            trace = run_cascade(model_or_checkpoints, inp, n_list[-1])
            for n in n_list:
                p, s = score(trace.transmissions[n - 1], gt)
                per_n[n][0].append(p)
                per_n[n][1].append(s)
    curve = [{"n": n, "count": len(per_n[n][0]), "psnr": _mean(per_n[n][0]), "ssim": _mean(per_n[n][1])}
             for n in n_list]
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "count", "psnr", "ssim"])
            for c in curve:
                w.writerow([c["n"], c["count"], repr(c["psnr"]), repr(c["ssim"])])
    return curve
