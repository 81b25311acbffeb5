"""Multi-stage image decoder.

Stage 1 maps the sentence vector concatenated with a noise vector through a
fully connected layer to a 4x4 feature map, upsamples to the first output
scale with learned noise injection at configured intermediate scales, and
emits an image. Later stages attend over word features, refine, double the
resolution, and emit images, so the decoder returns an image pyramid plus
per-stage word attention maps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .ckpt import load_payload, save_payload
from .errors import CheckpointMismatchError
from .text_encoder import SentenceVector, WordFeatures


@dataclass
class GeneratorConfig:
    stage_scales: tuple[int, ...] = (16, 32, 64)
    base_channels: int = 32
    text_dim: int = 256
    z_dim: int = 100
    noise_injection_scales: tuple[int, ...] = (4, 8, 16)
    per_channel_noise: bool = False
    upsample_mode: str = "resize"          # "resize" (default) or "deconv"
    use_conditioning_augmentation: bool = False
    ca_dim: int = 100

    def __post_init__(self):
        self.stage_scales = tuple(int(s) for s in self.stage_scales)
        self.noise_injection_scales = tuple(int(s) for s in self.noise_injection_scales)
        if not self.stage_scales:
            raise ValueError("need at least one stage")
        s0 = self.stage_scales[0]
        if s0 < 8 or (s0 & (s0 - 1)) != 0:
            raise ValueError(f"first stage scale must be a power of two >= 8, got {s0}")
        for prev, cur in zip(self.stage_scales, self.stage_scales[1:]):
            if cur != prev * 2:
                raise ValueError(f"stage scales must double: {self.stage_scales}")
        trunk = self.stage1_trunk_scales
        bad = [s for s in self.noise_injection_scales if s not in trunk]
        if bad:
            raise ValueError(
                f"noise injection scales {bad} not among stage-1 feature scales {trunk}"
            )
        if self.upsample_mode not in ("resize", "deconv"):
            raise ValueError(f"unknown upsample_mode {self.upsample_mode!r}")
        if min(self.base_channels, self.text_dim, self.z_dim) <= 0:
            raise ValueError("base_channels, text_dim and z_dim must be positive")
        if self.use_conditioning_augmentation and self.ca_dim > self.z_dim:
            raise ValueError("ca_dim must be <= z_dim (resampling noise is taken from z)")

    @property
    def n_stages(self) -> int:
        return len(self.stage_scales)

    @property
    def stage1_trunk_scales(self) -> tuple[int, ...]:
        """Feature-map scales stage 1 passes through: 4, 8, ..., first output scale."""
        scales = []
        s = 4
        while s <= self.stage_scales[0]:
            scales.append(s)
            s *= 2
        return tuple(scales)

    def stage1_channels(self, scale: int) -> int:
        """Channel width of the stage-1 trunk at a given scale (halves per upsample)."""
        return self.base_channels * (self.stage_scales[0] // scale)


@dataclass
class NoiseVector:
    z: torch.Tensor  # [batch, z_dim], standard normal

    def __post_init__(self):
        if self.z.dim() != 2:
            raise ValueError(f"noise must be [batch, z_dim], got {tuple(self.z.shape)}")


def sample_noise(batch: int, z_dim: int, generator: torch.Generator | None = None) -> NoiseVector:
    return NoiseVector(torch.randn(batch, z_dim, generator=generator))


@dataclass
class ImagePyramid:
    images: list[torch.Tensor]  # one [B, 3, s, s] per stage, values in [-1, 1]

    @property
    def largest(self) -> torch.Tensor:
        return self.images[-1]


@dataclass
class AttentionStack:
    """Word attention maps for the attended stages (2..m), each [B, T, H, W]."""

    maps: list[torch.Tensor] = field(default_factory=list)


def _conv3x3(in_ch: int, out_ch: int) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, 3, 1, 1, bias=False)


class _UpBlock(nn.Module):
    """Doubles spatial size. Resize+conv by default; transposed conv optional."""

    def __init__(self, in_ch: int, out_ch: int, mode: str):
        super().__init__()
        if mode == "deconv":
            self.stack = nn.Sequential(
                nn.ConvTranspose2d(in_ch, out_ch * 2, 4, 2, 1, bias=False),
                nn.BatchNorm2d(out_ch * 2),
                nn.GLU(dim=1),
            )
        else:
            self.stack = nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                _conv3x3(in_ch, out_ch * 2),
                nn.BatchNorm2d(out_ch * 2),
                nn.GLU(dim=1),
            )

    def forward(self, x):
        return self.stack(x)


class _FinetuneBlock(nn.Module):
    """One 3x3 convolution with normalization and a gated nonlinearity."""

    def __init__(self, ch: int):
        super().__init__()
        self.stack = nn.Sequential(_conv3x3(ch, ch * 2), nn.BatchNorm2d(ch * 2), nn.GLU(dim=1))

    def forward(self, x):
        return self.stack(x)


class NoiseInjection(nn.Module):
    """Adds a learned-weight transform of z to a feature map: h + W * fc(z).

    The projection has no bias and W starts at zero, so a fresh module is an
    exact identity and z=0 stays an identity for any W.
    """

    def __init__(self, z_dim: int, channels: int, scale: int, per_channel: bool = False):
        super().__init__()
        self.channels = channels
        self.scale = scale
        self.fc = nn.Linear(z_dim, channels * scale * scale, bias=False)
        shape = (1, channels, 1, 1) if per_channel else (1,)
        self.weight = nn.Parameter(torch.zeros(shape))

    def forward(self, h: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if h.shape[1] != self.channels or h.shape[-1] != self.scale:
            raise ValueError(
                f"feature map {tuple(h.shape)} does not match injection "
                f"({self.channels} ch at {self.scale}x{self.scale})"
            )
        delta = self.fc(z).view(-1, self.channels, self.scale, self.scale)
        return h + self.weight * delta


class WordAttention(nn.Module):
    """Per-location softmax attention over valid words.

    Word features are projected to the feature-map channel width; each
    spatial location scores every word, pad words are masked out before the
    softmax, and the context is the attention-weighted sum of projected word
    features. Rows with no valid words get an all-zero context.
    """

    def __init__(self, text_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Conv1d(text_dim, channels, 1, bias=False)

    def forward(self, words: WordFeatures, h: torch.Tensor):
        batch, ch, height, width = h.shape
        word = self.proj(words.features)                      # [B, ch, T]
        scores = torch.bmm(h.flatten(2).transpose(1, 2), word)  # [B, HW, T]
        mask = words.mask.unsqueeze(1)                        # [B, 1, T]
        scores = scores.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(scores, dim=2)
        attn = torch.nan_to_num(attn, nan=0.0)                # caption with zero valid words
        context = torch.bmm(word, attn.transpose(1, 2))       # [B, ch, HW]
        context = context.view(batch, ch, height, width)
        attn_map = attn.transpose(1, 2).reshape(batch, -1, height, width)
        return context, attn_map


class _CondAugment(nn.Module):
    """Optional resampled conditioning: c_hat = mu(C) + sigma(C) * eps.

    eps reuses the leading entries of z so synthesis stays a deterministic
    function of (C, z).
    """

    def __init__(self, text_dim: int, ca_dim: int):
        super().__init__()
        self.ca_dim = ca_dim
        self.fc = nn.Linear(text_dim, ca_dim * 2)

    def forward(self, c: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        mu, logvar = self.fc(c).chunk(2, dim=1)
        return mu + torch.exp(0.5 * logvar) * z[:, : self.ca_dim]


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        cond_dim = config.ca_dim if config.use_conditioning_augmentation else config.text_dim
        self.cond_augment = (
            _CondAugment(config.text_dim, config.ca_dim)
            if config.use_conditioning_augmentation
            else None
        )

        c0 = config.stage1_channels(4)
        self.fc = nn.Linear(cond_dim + config.z_dim, c0 * 2 * 4 * 4, bias=False)
        self.fc_norm = nn.Sequential(nn.BatchNorm2d(c0 * 2), nn.GLU(dim=1))

        ups = []
        injections = {}
        if 4 in config.noise_injection_scales:
            injections["4"] = NoiseInjection(config.z_dim, c0, 4, config.per_channel_noise)
        scale, ch = 4, c0
        while scale < config.stage_scales[0]:
            ups.append(_UpBlock(ch, ch // 2, config.upsample_mode))
            scale, ch = scale * 2, ch // 2
            if scale in config.noise_injection_scales:
                injections[str(scale)] = NoiseInjection(
                    config.z_dim, ch, scale, config.per_channel_noise
                )
        self.stage1_ups = nn.ModuleList(ups)
        self.injections = nn.ModuleDict(injections)

        base = config.base_channels
        self.attentions = nn.ModuleList(
            WordAttention(config.text_dim, base) for _ in config.stage_scales[1:]
        )
        self.refine_ups = nn.ModuleList(
            _UpBlock(base * 2, base, config.upsample_mode) for _ in config.stage_scales[1:]
        )
        self.refine_tunes = nn.ModuleList(
            _FinetuneBlock(base) for _ in config.stage_scales[1:]
        )
        self.to_image = nn.ModuleList(
            nn.Sequential(_conv3x3(base, 3), nn.Tanh()) for _ in config.stage_scales
        )

    def synthesize(
        self, sentence: SentenceVector, noise: NoiseVector, words: WordFeatures
    ) -> tuple[ImagePyramid, AttentionStack]:
        cfg = self.config
        c, z = sentence.vector, noise.z
        if c.shape[1] != cfg.text_dim:
            raise ValueError(f"sentence dim {c.shape[1]} != configured text_dim {cfg.text_dim}")
        if z.shape[1] != cfg.z_dim:
            raise ValueError(f"noise dim {z.shape[1]} != configured z_dim {cfg.z_dim}")
        if words.features.shape[1] != cfg.text_dim:
            raise ValueError(
                f"word feature dim {words.features.shape[1]} != text_dim {cfg.text_dim}"
            )
        if self.cond_augment is not None:
            c = self.cond_augment(c, z)

        h = self.fc(torch.cat([c, z], dim=1)).view(-1, cfg.stage1_channels(4) * 2, 4, 4)
        h = self.fc_norm(h)
        if "4" in self.injections:
            h = self.injections["4"](h, z)
        scale = 4
        for up in self.stage1_ups:
            h = up(h)
            scale *= 2
            if str(scale) in self.injections:
                h = self.injections[str(scale)](h, z)

        images = [self.to_image[0](h)]
        attn_maps = []
        for i, (attend, up, tune) in enumerate(
            zip(self.attentions, self.refine_ups, self.refine_tunes)
        ):
            context, attn = attend(words, h)
            h = tune(up(torch.cat([h, context], dim=1)))
            attn_maps.append(attn)
            images.append(self.to_image[i + 1](h))
        return ImagePyramid(images), AttentionStack(attn_maps)

    forward = synthesize


def save_generator(generator: Generator, path) -> None:
    save_payload(path, "generator", generator.config, generator.state_dict())


def load_generator(path, expected: GeneratorConfig | None = None) -> Generator:
    payload = load_payload(path, "generator")
    stored = payload["config"]
    config = GeneratorConfig(**stored)
    if expected is not None and config != expected:
        raise CheckpointMismatchError(
            f"{path}: stored generator config {stored} does not match expected {expected}"
        )
    generator = Generator(config)
    generator.load_state_dict(payload["state"])
    return generator
