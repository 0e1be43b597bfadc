"""Network definitions: attention U-Net segmenters and patch critics.

The segmenter is a 4-level attention U-Net: 9 convolution blocks (5 encoder,
4 decoder), 4 max-poolings, 4 upsampling operations, and 4 attention blocks
on the skip connections. Its forward pass also exposes the output of the
first convolution block ("stem features", full resolution, pre-pooling) so a
critic can be attached there and so weight sharing can stop at the stem.

The critic is a DCGAN-style convolutional net: 7 convolution layers, the
first 6 with stride 2, each but the last followed by BatchNorm and
LeakyReLU(0.2); the last is a valid convolution collapsing to one scalar
score per sample, with no output nonlinearity.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class SegNetConfig:
    base_filters: int
    in_channels: int = 1
    out_channels: int = 1
    depth: int = 4

    def __post_init__(self):
        if self.base_filters < 1:
            raise ConfigError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")

    def encoder_channels(self):
        return [self.base_filters * (2 ** k) for k in range(self.depth + 1)]


@dataclass(frozen=True)
class CriticConfig:
    in_channels: int = 1
    input_size: int = 256
    base_channels: int = 64
    n_conv_layers: int = 7
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.n_conv_layers != 7:
            raise ConfigError("critic uses exactly 7 convolution layers")
        if self.input_size < 64:
            raise ConfigError(
                "critic input too small to survive its stride reductions: "
                f"got {self.input_size}, minimum supported input size is 64"
            )
        if self.in_channels < 1 or self.base_channels < 1:
            raise ConfigError("channel counts must be >= 1")


class SegNetOutput(NamedTuple):
    stem_features: torch.Tensor
    logits: torch.Tensor


class ConvBlock(nn.Module):
    """Two stacked 3x3 convolutions, each with BatchNorm and ReLU."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UpBlock(nn.Module):
    """Nearest-neighbor x2 upsampling followed by a 3x3 smoothing convolution."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(self.up(x))


class AttentionGate(nn.Module):
    """Additive attention over a skip connection.

    Gate and skip features (same shape) are projected to channels//2,
    summed, passed through ReLU and a 1x1 sigmoid head to produce gating
    coefficients in [0, 1] that multiply the skip features. The most recent
    coefficients are kept (detached) in `last_gate` for inspection.
    """

    def __init__(self, channels):
        super().__init__()
        inter = max(channels // 2, 1)
        self.project_gate = nn.Sequential(
            nn.Conv2d(channels, inter, 1), nn.BatchNorm2d(inter)
        )
        self.project_skip = nn.Sequential(
            nn.Conv2d(channels, inter, 1), nn.BatchNorm2d(inter)
        )
        self.head = nn.Sequential(
            nn.Conv2d(inter, 1, 1), nn.BatchNorm2d(1), nn.Sigmoid()
        )
        self.last_gate = None

    def forward(self, gate, skip):
        alpha = self.head(F.relu(self.project_gate(gate) + self.project_skip(skip)))
        self.last_gate = alpha.detach()
        return skip * alpha


class AttentionUNet(nn.Module):
    def __init__(self, cfg: SegNetConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.encoder_channels()
        self.enc_blocks = nn.ModuleList()
        prev = cfg.in_channels
        for ch in chans:
            self.enc_blocks.append(ConvBlock(prev, ch))
            prev = ch
        self.pool = nn.MaxPool2d(2)
        self.up_blocks = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for level in range(cfg.depth - 1, -1, -1):
            ch = chans[level]
            self.up_blocks.append(UpBlock(chans[level + 1], ch))
            self.gates.append(AttentionGate(ch))
            self.dec_blocks.append(ConvBlock(ch * 2, ch))
        self.out_conv = nn.Conv2d(chans[0], cfg.out_channels, 1)

    def _check_input(self, x):
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise DimensionError(
                f"expected input (N, {self.cfg.in_channels}, H, W), got "
                f"{tuple(x.shape)}"
            )
        factor = 2 ** self.cfg.depth
        if x.shape[2] % factor or x.shape[3] % factor:
            raise DimensionError(
                f"input size {tuple(x.shape[2:])} not divisible by {factor} "
                f"(depth {self.cfg.depth})"
            )

    def stem_forward(self, x):
        """First convolution block only (full-resolution stem features)."""
        self._check_input(x)
        return self.enc_blocks[0](x)

    def rest_forward(self, stem):
        """Everything after the stem; stem_forward . rest_forward == forward."""
        skips = [stem]
        h = stem
        for i, block in enumerate(self.enc_blocks[1:], start=1):
            h = block(self.pool(h))
            if i < self.cfg.depth:
                skips.append(h)
        for up, gate, dec in zip(self.up_blocks, self.gates, self.dec_blocks):
            h = up(h)
            skip = gate(h, skips.pop())
            h = dec(torch.cat([h, skip], dim=1))
        return self.out_conv(h)

    def forward(self, x) -> SegNetOutput:
        stem = self.stem_forward(x)
        return SegNetOutput(stem_features=stem, logits=self.rest_forward(stem))

    def stem_parameter_names(self):
        return [n for n, _ in self.named_parameters() if n.startswith("enc_blocks.0.")]

    def conv_weight_count(self):
        return sum(
            m.weight.numel() for m in self.modules() if isinstance(m, nn.Conv2d)
        )


class Critic(nn.Module):
    def __init__(self, cfg: CriticConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        chans = [b, 2 * b, 4 * b, 8 * b, 8 * b, 8 * b]
        layers = []
        prev = cfg.in_channels
        size = cfg.input_size
        for ch in chans:
            # Parameter-free layer normalization: the critic's weights are
            # clipped to a small bound after every update, and a learnable
            # norm gain would be clipped with them, collapsing the score
            # scale layer by layer until the critic stops influencing the
            # aligner. Normalizing over (C, H, W) also stays well defined
            # when the spatial map shrinks to 1x1.
            layers += [
                nn.Conv2d(prev, ch, 4, stride=2, padding=1),
                nn.GroupNorm(1, ch, affine=False),
                nn.LeakyReLU(cfg.leaky_slope, inplace=True),
            ]
            prev = ch
            size = (size + 2 - 4) // 2 + 1
        self.features = nn.Sequential(*layers)
        self.final = nn.Conv2d(prev, 1, kernel_size=size)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise DimensionError(
                f"expected input (N, {self.cfg.in_channels}, H, W), got "
                f"{tuple(x.shape)}"
            )
        if x.shape[2] != self.cfg.input_size or x.shape[3] != self.cfg.input_size:
            raise DimensionError(
                f"critic built for {self.cfg.input_size}x{self.cfg.input_size} "
                f"inputs, got {tuple(x.shape[2:])}"
            )
        return self.final(self.features(x)).flatten(1)


def _kaiming_normal_(tensor, generator, gain):
    fan_in = tensor.shape[1] * tensor.shape[2] * tensor.shape[3]
    std = gain / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.copy_(torch.randn(tensor.shape, generator=generator) * std)


def _init_weights(model, seed, leaky_slope=None):
    """Kaiming-normal conv init from a dedicated generator; BN to identity."""
    gen = torch.Generator().manual_seed(seed)
    if leaky_slope is None:
        gain = math.sqrt(2.0)
    else:
        gain = math.sqrt(2.0 / (1.0 + leaky_slope ** 2))
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            _kaiming_normal_(module.weight, gen, gain)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.BatchNorm2d):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)


def build_segnet(cfg: SegNetConfig, seed: int) -> AttentionUNet:
    # fork_rng: layer constructors draw default inits from the global RNG;
    # building a model must not shift it
    with torch.random.fork_rng(devices=[]):
        model = AttentionUNet(cfg)
        _init_weights(model, seed)
    return model


def build_critic(cfg: CriticConfig, seed: int) -> Critic:
    with torch.random.fork_rng(devices=[]):
        model = Critic(cfg)
        _init_weights(model, seed, leaky_slope=cfg.leaky_slope)
    return model
