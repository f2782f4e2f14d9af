"""Training objective: residual reconstruction, multi-scale perceptual, pixel and adversarial terms."""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import downsample_tensor
from .model import CascadeTrace

log = logging.getLogger(__name__)

EPS = 1e-8
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class LossWeights:
    lambda_residual: float = 2.0
    lambda_mp: float = 1.0
    lambda_pixel: float = 2.0
    lambda_adv: float = 0.01
    gamma3: float = 0.8
    gamma5: float = 0.6

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    residual: torch.Tensor
    mp: torch.Tensor
    pixel: torch.Tensor
    adv: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in ("residual", "mp", "pixel", "adv", "total")}


def mse(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.mean((a - b) ** 2)


def _alpha_like(alpha, ref):
    alpha = torch.as_tensor(alpha, dtype=ref.dtype, device=ref.device)
    if alpha.dim() == 1:
        alpha = alpha.view(-1, 1, 1, 1)
    return alpha


def residual_reconstruction_loss(trace: CascadeTrace, I, alpha):
    """Sum over steps of MSE between ``I`` and ``alpha * T_hat_t + R_hat_t``."""
    if not trace.transmissions or len(trace.residuals) != len(trace.transmissions):
        raise ValueError("trace must hold one transmission and one residual per step")
    a = _alpha_like(alpha, I)
    return sum(mse(I, a * T_hat + R_hat) for T_hat, R_hat in zip(trace.transmissions, trace.residuals))


def pixel_loss(trace: CascadeTrace, T, R_tilde=None):
    """Sum over steps of the transmission MSE plus, when residuals exist, the residual MSE."""
    if not trace.transmissions:
        raise ValueError("empty trace")
    total = sum(mse(T, T_hat) for T_hat in trace.transmissions)
    if trace.residuals and R_tilde is not None:
        total = total + sum(mse(R_tilde, R_hat) for R_hat in trace.residuals)
    return total


class FeatureExtractor(nn.Module):
    """The first two stages of VGG19, returning ``conv1_2`` and ``conv2_2`` activations.

    Weights are frozen. ``pretrained=True`` loads ImageNet weights through
    torchvision (cached under ``$IBCLN_CACHE`` when set); otherwise the
    layers are initialized from ``seed``.
    """

    def __init__(self, pretrained: bool = False, seed: int = 0):
        super().__init__()
        self.stage1 = nn.Sequential(
            nn.Conv2d(3, 64, 3, padding=1), nn.ReLU(),
            nn.Conv2d(64, 64, 3, padding=1), nn.ReLU(),
        )
        self.stage2 = nn.Sequential(
            nn.MaxPool2d(2, 2),
            nn.Conv2d(64, 128, 3, padding=1), nn.ReLU(),
            nn.Conv2d(128, 128, 3, padding=1), nn.ReLU(),
        )
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.pretrained = False
        if pretrained:
            self.pretrained = self._load_vgg19()
        if not self.pretrained:
            self._seeded_init(seed)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _seeded_init(self, seed):
        gen = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                bound = (6.0 / fan_in) ** 0.5
                with torch.no_grad():
                    m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
                    m.bias.zero_()

    def _load_vgg19(self) -> bool:
        cache = os.environ.get("IBCLN_CACHE")
        if cache:
            torch.hub.set_dir(cache)
        try:
            from torchvision.models import VGG19_Weights, vgg19

            feats = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
        except Exception as exc:  # offline or missing cache
            log.warning("could not load pretrained VGG19 (%s); using seeded random features", exc)
            return False
        src = [feats[i] for i in (0, 2, 5, 7)]
        dst = [self.stage1[0], self.stage1[2], self.stage2[1], self.stage2[3]]
        for s, d in zip(src, dst):
            d.load_state_dict(s.state_dict())
        return True

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x):
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        return f1, f2


def perceptual_distance(extractor, a, b):
    """Mean absolute feature difference, summed over the two extractor stages."""
    if a.shape != b.shape:
        raise ValueError(f"scale mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return sum(F.l1_loss(fa, fb) for fa, fb in zip(extractor(a), extractor(b)))


def multiscale_perceptual_loss(ms_outputs, T, extractor, gamma3=0.8, gamma5=0.6):
    full, half, quarter = ms_outputs
    T3 = downsample_tensor(T, 2)
    T5 = downsample_tensor(T, 4)
    if full.shape != T.shape or half.shape != T3.shape or quarter.shape != T5.shape:
        raise ValueError("multi-scale outputs must be at full, half and quarter resolution of T")
    loss = perceptual_distance(extractor, full, T)
    if gamma3:
        loss = loss + gamma3 * perceptual_distance(extractor, half, T3)
    if gamma5:
        loss = loss + gamma5 * perceptual_distance(extractor, quarter, T5)
    return loss


def adversarial_loss_g(D, condition, T_hat):
    return torch.mean(-torch.log(torch.clamp(D(condition, T_hat), min=EPS)))


def adversarial_loss_d(D, condition, T, T_hat):
    """Real/fake binary cross-entropy; ``T_hat`` is detached from the generator graph."""
    real = D(condition, T)
    fake = D(condition, T_hat.detach())
    return (torch.mean(-torch.log(torch.clamp(real, min=EPS)))
            + torch.mean(-torch.log(torch.clamp(1.0 - fake, min=EPS))))


def total_loss(residual, mp, pixel, adv, weights: LossWeights = LossWeights()) -> LossReport:
    total = (weights.lambda_residual * residual + weights.lambda_mp * mp
             + weights.lambda_pixel * pixel + weights.lambda_adv * adv)
    return LossReport(residual, mp, pixel, adv, total)


def compute_losses(trace: CascadeTrace, I, T, R_tilde, alpha, weights: LossWeights,
                   extractor=None, D=None, condition=None) -> LossReport:
    """Evaluate every term with a non-zero weight; disabled terms are reported as 0."""
    zero = I.new_zeros(())
    if weights.lambda_residual and trace.residuals:
        residual = residual_reconstruction_loss(trace, I, alpha)
    else:
        residual = zero
    if weights.lambda_mp and extractor is not None and trace.multiscale:
        mp = multiscale_perceptual_loss(trace.multiscale, T, extractor, weights.gamma3, weights.gamma5)
    else:
        mp = zero
    pixel = pixel_loss(trace, T, R_tilde) if weights.lambda_pixel else zero
    if weights.lambda_adv and D is not None:
        adv = adversarial_loss_g(D, T if condition is None else condition, trace.final)
    else:
        adv = zero
    return total_loss(residual, mp, pixel, adv, weights)
