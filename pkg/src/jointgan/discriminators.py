"""Per-scale discriminators.

One independent network per stage scale. Each downsamples its input through
stride-2 conv + batchnorm + leaky-relu blocks to a 4x4 map (block count is
log2(scale) - 2 by construction) and produces two probabilities: realism
alone, and realism given the sentence vector, which is projected to a few
channels and replicated over the 4x4 grid for the conditional head.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .ckpt import load_payload, save_payload
from .errors import CheckpointMismatchError

SCORE_EPS = 1e-7  # keeps both probabilities strictly inside (0, 1) for the log losses


@dataclass
class DiscriminatorConfig:
    scale: int
    text_dim: int = 256
    base_channels: int = 32
    cond_channels: int = 16
    spectral_norm: bool = False  # optional stabilizer, off by default

    def __post_init__(self):
        if self.scale < 8 or (self.scale & (self.scale - 1)) != 0:
            raise ValueError(f"scale must be a power of two >= 8, got {self.scale}")
        if min(self.text_dim, self.base_channels, self.cond_channels) <= 0:
            raise ValueError("text_dim, base_channels and cond_channels must be positive")

    @property
    def n_blocks(self) -> int:
        return int(math.log2(self.scale)) - 2


@dataclass
class DiscriminatorOutput:
    uncond_score: torch.Tensor  # [batch], in (eps, 1-eps)
    cond_score: torch.Tensor    # [batch], in (eps, 1-eps)


class StageDiscriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        blocks = []
        in_ch = 3
        ch = config.base_channels
        for _ in range(config.n_blocks):
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, ch, 4, 2, 1, bias=False),
                    nn.BatchNorm2d(ch),
                    nn.LeakyReLU(0.2, inplace=True),
                )
            )
            in_ch, ch = ch, ch * 2
        self.blocks = nn.Sequential(*blocks)
        feat_ch = in_ch
        self.uncond_head = nn.Conv2d(feat_ch, 1, 4, 4, 0)
        self.cond_proj = nn.Linear(config.text_dim, config.cond_channels)
        self.cond_head = nn.Sequential(
            nn.Conv2d(feat_ch + config.cond_channels, feat_ch, 3, 1, 1, bias=False),
            nn.BatchNorm2d(feat_ch),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(feat_ch, 1, 4, 4, 0),
        )
        if config.spectral_norm:
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    nn.utils.parametrizations.spectral_norm(m)

    def features(self, image: torch.Tensor) -> torch.Tensor:
        """Downsample to the 4x4 map shared by both heads."""
        size = self.config.scale
        if image.shape[-2:] != (size, size):
            raise ValueError(
                f"discriminator for scale {size} got image {tuple(image.shape[-2:])}"
            )
        return self.blocks(image)

    def forward(self, image: torch.Tensor, sentence: torch.Tensor) -> DiscriminatorOutput:
        h = self.features(image)
        uncond = torch.sigmoid(self.uncond_head(h)).flatten()
        c = self.cond_proj(sentence)
        c = c[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
        cond = torch.sigmoid(self.cond_head(torch.cat([h, c], dim=1))).flatten()
        return DiscriminatorOutput(
            uncond.clamp(SCORE_EPS, 1 - SCORE_EPS), cond.clamp(SCORE_EPS, 1 - SCORE_EPS)
        )

    discriminate = forward


def build_discriminators(
    stage_scales,
    text_dim: int,
    base_channels: int = 32,
    cond_channels: int = 16,
    spectral_norm: bool = False,
) -> nn.ModuleList:
    return nn.ModuleList(
        StageDiscriminator(
            DiscriminatorConfig(s, text_dim, base_channels, cond_channels, spectral_norm)
        )
        for s in stage_scales
    )


def save_discriminator(disc: StageDiscriminator, path) -> None:
    save_payload(path, "discriminator", disc.config, disc.state_dict())


def load_discriminator(path, expected: DiscriminatorConfig | None = None) -> StageDiscriminator:
    payload = load_payload(path, "discriminator")
    config = DiscriminatorConfig(**payload["config"])
    if expected is not None and config != expected:
        raise CheckpointMismatchError(
            f"{path}: stored discriminator config {payload['config']} does not match "
            f"expected {expected}"
        )
    disc = StageDiscriminator(config)
    disc.load_state_dict(payload["state"])
    return disc
