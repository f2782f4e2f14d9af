"""Cascaded ConvLSTM encoder-decoder pair and the patch discriminator.

Two sub-networks with identical architecture and separate weights predict
the transmission and the residual reflection. Both are unrolled for ``N``
steps; at every step each consumes the input image together with the
previous step's two predictions, and carries its own LSTM state forward.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

R0_FILL = 0.1
STRIDE_BLOCKS = (4, 8)  # 1-based encoder blocks that halve resolution


@dataclass(frozen=True)
class SubnetConfig:
    encoder_blocks: int = 11
    decoder_layers: int = 8
    base_channels: int = 64
    lstm_channels: int = 256
    skip_levels: int = 2
    multiscale_heads: bool = True

    def __post_init__(self):
        if (self.encoder_blocks, self.decoder_layers, self.skip_levels) != (11, 8, 2):
            raise ValueError(
                "only the 11-block encoder / 8-layer decoder / 2-skip layout is supported, "
                f"got ({self.encoder_blocks}, {self.decoder_layers}, {self.skip_levels})"
            )
        if self.base_channels < 1 or self.lstm_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def encoder_widths(self) -> list[int]:
        b = self.base_channels
        return [b] * 3 + [2 * b] * 4 + [4 * b] * 4

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CascadeState:
    hidden: torch.Tensor
    cell: torch.Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ValueError("hidden and cell state must have identical shapes")


@dataclass
class CascadeTrace:
    transmissions: list[torch.Tensor] = field(default_factory=list)
    residuals: list[torch.Tensor] = field(default_factory=list)
    multiscale: tuple[torch.Tensor, ...] = ()

    @property
    def final(self) -> torch.Tensor:
        return self.transmissions[-1]

    def __len__(self):
        return len(self.transmissions)


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="reflect")


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, stride=1):
        super().__init__(conv3x3(cin, cout, stride), nn.ReLU(inplace=True))


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM with input, forget and output gates plus a cell state."""

    def __init__(self, in_channels, hidden_channels):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.gates = conv3x3(in_channels + hidden_channels, 4 * hidden_channels)

    def zero_state(self, x: torch.Tensor) -> CascadeState:
        n, _, h, w = x.shape
        z = x.new_zeros(n, self.hidden_channels, h, w)
        return CascadeState(z, z.clone())

    def gate_values(self, x, state: CascadeState):
        z = self.gates(torch.cat([x, state.hidden], dim=1))
        i, f, o, g = torch.chunk(z, 4, dim=1)
        return torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o), torch.tanh(g)

    def forward(self, x, state: CascadeState | None = None):
        if state is None:
            state = self.zero_state(x)
        i, f, o, g = self.gate_values(x, state)
        cell = f * state.cell + i * g
        hidden = o * torch.tanh(cell)
        return hidden, CascadeState(hidden, cell)


class Subnet(nn.Module):
    """Encoder (11 conv-ReLU blocks) -> ConvLSTM -> decoder (8 convs) with two skips.

    Resolution halves at encoder blocks 4 and 8; the skips carry the
    full-resolution features from block 3 and the half-resolution features
    from block 7. Multi-scale heads sit on the 5th-last (quarter scale) and
    3rd-last (half scale) decoder layers.
    """

    in_channels = 9
    out_channels = 3

    def __init__(self, cfg: SubnetConfig = SubnetConfig()):
        super().__init__()
        self.cfg = cfg
        widths = cfg.encoder_widths
        b = cfg.base_channels
        enc = []
        cin = self.in_channels
        for k, cout in enumerate(widths, start=1):
            enc.append(ConvBlock(cin, cout, stride=2 if k in STRIDE_BLOCKS else 1))
            cin = cout
        self.encoder = nn.ModuleList(enc)
        self.lstm = ConvLSTMCell(4 * b, cfg.lstm_channels)

        self.dec1 = ConvBlock(cfg.lstm_channels, 4 * b)
        self.dec2 = ConvBlock(4 * b, 4 * b)
        self.dec3 = ConvBlock(4 * b, 4 * b)
        self.dec4 = ConvBlock(4 * b, 4 * b)
        self.dec5 = ConvBlock(4 * b + 2 * b, 2 * b)
        self.dec6 = ConvBlock(2 * b, 2 * b)
        self.dec7 = ConvBlock(2 * b + b, b)
        # final layer is linear: residual reflections can be negative
        self.dec8 = conv3x3(b, self.out_channels)
        if cfg.multiscale_heads:
            self.head_quarter = nn.Conv2d(4 * b, 3, 1)
            self.head_half = nn.Conv2d(2 * b, 3, 1)

    def encode(self, x):
        skips = []
        for k, block in enumerate(self.encoder, start=1):
            if k in STRIDE_BLOCKS:
                skips.append(x)
            x = block(x)
        return x, skips

    def forward(self, x, state: CascadeState | None = None):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"subnet expects {self.in_channels} input channels, got {x.shape[1]}")
        feat, (skip_full, skip_half) = self.encode(x)
        hidden, state = self.lstm(feat, state)
        y = self.dec4(self.dec3(self.dec2(self.dec1(hidden))))
        quarter = self.head_quarter(y) if self.cfg.multiscale_heads else None
        y = F.interpolate(y, size=skip_half.shape[-2:], mode="nearest")
        y = self.dec6(self.dec5(torch.cat([y, skip_half], dim=1)))
        half = self.head_half(y) if self.cfg.multiscale_heads else None
        y = F.interpolate(y, size=skip_full.shape[-2:], mode="nearest")
        y = self.dec7(torch.cat([y, skip_full], dim=1))
        out = self.dec8(y)
        return out, state, (half, quarter)


def build_subnet(cfg: SubnetConfig = SubnetConfig()) -> Subnet:
    return Subnet(cfg)


def count_parameters(*modules) -> int:
    return sum(p.numel() for m in modules if m is not None for p in m.parameters() if p.requires_grad)


def subnet_step(net: Subnet, I, T_prev, R_prev, state: CascadeState | None = None):
    """One cascade step: returns ``(prediction, new_state, (half, quarter))``."""
    if not (I.shape[-2:] == T_prev.shape[-2:] == R_prev.shape[-2:]):
        raise ValueError(
            f"spatial mismatch: I {tuple(I.shape)}, T_prev {tuple(T_prev.shape)}, R_prev {tuple(R_prev.shape)}"
        )
    return net(torch.cat([I, T_prev, R_prev], dim=1), state)


def _pad_to_multiple(x, m=4):
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if not (ph or pw):
        return x, (h, w)
    mode = "reflect" if min(h, w) > max(ph, pw) else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)


def cascade_forward(G_T: Subnet, G_R: Subnet | None, I: torch.Tensor, N: int) -> CascadeTrace:
    """Unroll both sub-networks for ``N`` steps starting from ``T_0 = I``, ``R_0 = 0.1``.

    With ``G_R=None`` (the single-network ablation) the reflection input
    stays at the constant fill every step and no residuals are recorded.
    Inputs whose sides are not multiples of 4 are reflect-padded and the
    outputs cropped back.
    """
    if N < 1:
        raise ValueError(f"number of cascade steps must be >= 1, got {N}")
    x, (h, w) = _pad_to_multiple(I)
    hq, wq = -(-h // 4), -(-w // 4)
    hh, wh = -(-h // 2), -(-w // 2)
    T_prev = x
    R_prev = torch.full_like(x, R0_FILL)
    state_t = state_r = None
    trace = CascadeTrace()
    for _ in range(N):
        T_hat, state_t, (half, quarter) = subnet_step(G_T, x, T_prev, R_prev, state_t)
        if G_R is not None:
            R_hat, state_r, _ = subnet_step(G_R, x, T_prev, R_prev, state_r)
            trace.residuals.append(R_hat[..., :h, :w])
            R_prev = R_hat
        trace.transmissions.append(T_hat[..., :h, :w])
        T_prev = T_hat
    if half is not None:
        trace.multiscale = (T_hat[..., :h, :w], half[..., :hh, :wh], quarter[..., :hq, :wq])
    return trace


class IBCLN(nn.Module):
    """Transmission and reflection sub-networks bundled with a step count."""

    def __init__(self, cfg: SubnetConfig = SubnetConfig(), n_steps: int = 3, use_reflection_net: bool = True):
        super().__init__()
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        self.cfg = cfg
        self.n_steps = n_steps
        self.G_T = build_subnet(cfg)
        self.G_R = build_subnet(cfg) if use_reflection_net else None

    @property
    def use_reflection_net(self) -> bool:
        return self.G_R is not None

    def forward(self, I, n_steps: int | None = None) -> CascadeTrace:
        return cascade_forward(self.G_T, self.G_R, I, n_steps or self.n_steps)


class Discriminator(nn.Module):
    """Conditional patch discriminator over a 6-channel (condition, candidate) stack."""

    def __init__(self, widths=(64, 128, 256, 512)):
        super().__init__()
        layers = []
        cin = 6
        for w in widths:
            layers += [nn.Conv2d(cin, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            cin = w
        layers.append(nn.Conv2d(cin, 1, 1))
        self.net = nn.Sequential(*layers)
        self.stride = 2 ** len(widths)

    def forward(self, condition, candidate):
        if condition.shape != candidate.shape:
            raise ValueError(f"shape mismatch: {tuple(condition.shape)} vs {tuple(candidate.shape)}")
        return torch.sigmoid(self.net(torch.cat([condition, candidate], dim=1)))


def build_discriminator(widths=(64, 128, 256, 512)) -> Discriminator:
    return Discriminator(widths)


def discriminate(D: Discriminator, condition, candidate):
    return D(condition, candidate)
