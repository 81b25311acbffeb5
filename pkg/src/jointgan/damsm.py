"""Image-text matching network and loss.

A convolutional image encoder produces region features and a global feature
in the text feature dimension. Word/region attention turns each word into a
region context; cosine relevances are aggregated by a smooth maximum into an
image-caption score, and a batch softmax over matched/mismatched pairs gives
the matching loss (word-level and sentence-level, both directions).

Also the pretraining stage that produces the initial text-encoder checkpoint.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .ckpt import load_payload, save_payload
from .corpus import DatasetManifest, Vocabulary, make_batch
from .errors import CheckpointMismatchError
from .text_encoder import (
    SentenceVector,
    TextEncoder,
    TextEncoderConfig,
    WordFeatures,
    save_encoder,
)

COS_EPS = 1e-8


@dataclass
class DamsmConfig:
    gamma1: float = 5.0    # attention sharpening over regions
    gamma2: float = 5.0    # smooth-max sharpening over words
    gamma3: float = 10.0   # batch softmax scaling
    word_weight: float = 1.0
    sentence_weight: float = 1.0

    def __post_init__(self):
        if min(self.gamma1, self.gamma2, self.gamma3) <= 0:
            raise ValueError("all gammas must be > 0")


@dataclass
class ImageEncoderConfig:
    feature_dim: int = 256
    input_size: int = 64
    base_channels: int = 32

    def __post_init__(self):
        if self.input_size < 16 or self.input_size % 16 != 0:
            raise ValueError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if self.feature_dim <= 0 or self.base_channels <= 0:
            raise ValueError("feature_dim and base_channels must be positive")

    @property
    def grid_size(self) -> int:
        return self.input_size // 16

    @property
    def region_count(self) -> int:
        return self.grid_size ** 2


@dataclass
class ImageTextFeatures:
    region_features: torch.Tensor       # [batch, D, R]
    global_image_feature: torch.Tensor  # [batch, D]
    words: WordFeatures
    sentence: SentenceVector


def _down(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 4, 2, 1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class ImageEncoder(nn.Module):
    """Four stride-2 conv blocks to a (size/16)^2 region grid, projected to D."""

    def __init__(self, config: ImageEncoderConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        self.blocks = nn.Sequential(
            _down(3, c), _down(c, c * 2), _down(c * 2, c * 4), _down(c * 4, c * 8)
        )
        self.region_proj = nn.Conv2d(c * 8, config.feature_dim, 1, bias=False)
        self.global_proj = nn.Linear(c * 8, config.feature_dim)

    def forward(self, images: torch.Tensor):
        """images [B, 3, S, S] -> (regions [B, D, R], global [B, D])."""
        size = self.config.input_size
        if images.shape[-2:] != (size, size):
            raise ValueError(
                f"expected {size}x{size} input, got {tuple(images.shape[-2:])}"
            )
        h = self.blocks(images)                         # [B, 8c, g, g]
        regions = self.region_proj(h).flatten(2)        # [B, D, g*g]
        pooled = h.mean(dim=(2, 3))                     # [B, 8c]
        return regions, self.global_proj(pooled)


def image_encode(images: torch.Tensor, encoder: ImageEncoder) -> tuple[torch.Tensor, torch.Tensor]:
    return encoder(images)


def matching_score(
    words: WordFeatures,
    region_features: torch.Tensor,
    gamma1: float,
    gamma2: float,
) -> torch.Tensor:
    """Pairwise image-caption scores [batch, batch]; entry (i, j) pairs image i with caption j.

    Per caption: word-region dot products are normalized over words per
    region, sharpened by gamma1 into attention over regions per word, and the
    attention-weighted region context of each word is compared to the word by
    cosine similarity. Per-word relevances are aggregated by the gamma2
    smooth maximum (1/g2 * log sum exp(g2 * r)), so large gamma2 approaches
    the best per-word similarity. Pad words are excluded entirely.
    """
    e = words.features                                   # [B, D, T]
    batch = e.shape[0]
    lengths = words.mask.sum(dim=1).clamp(min=1)
    columns = []
    for j in range(batch):
        n_words = int(lengths[j])
        word = e[j, :, :n_words].unsqueeze(0).expand(batch, -1, -1)   # [B, D, L]
        context = region_features                                     # [B, D, R]

        attn = torch.bmm(word.transpose(1, 2), context)               # [B, L, R]
        attn = F.softmax(attn, dim=1)                                 # over words, per region
        attn = F.softmax(gamma1 * attn, dim=2)                        # over regions, per word
        weighted = torch.bmm(context, attn.transpose(1, 2))           # [B, D, L]

        rel = F.cosine_similarity(word, weighted, dim=1, eps=COS_EPS)  # [B, L]
        score = torch.logsumexp(gamma2 * rel, dim=1) / gamma2          # [B]
        columns.append(score)
    return torch.stack(columns, dim=1)


def damsm_loss_terms(features: ImageTextFeatures, config: DamsmConfig) -> dict[str, torch.Tensor]:
    """The four posterior cross-entropy terms over the batch pairing.

    Rows of each score matrix index images, columns captions; the diagonal is
    the true pairing. Needs at least 2 pairs to have negatives.
    """
    batch = features.region_features.shape[0]
    if batch < 2:
        raise ValueError(
            f"matching loss needs a batch of >= 2 image-caption pairs to form "
            f"mismatched negatives, got {batch}"
        )
    labels = torch.arange(batch)

    s_word = matching_score(
        features.words, features.region_features, config.gamma1, config.gamma2
    )
    logits_w = config.gamma3 * s_word
    g = features.global_image_feature                     # [B, D]
    s = features.sentence.vector                          # [B, D]
    s_sent = F.cosine_similarity(g.unsqueeze(1), s.unsqueeze(0), dim=2, eps=COS_EPS)
    logits_s = config.gamma3 * s_sent

    return {
        "word_caption_given_image": F.cross_entropy(logits_w, labels),
        "word_image_given_caption": F.cross_entropy(logits_w.t(), labels),
        "sent_caption_given_image": F.cross_entropy(logits_s, labels),
        "sent_image_given_caption": F.cross_entropy(logits_s.t(), labels),
    }


def damsm_loss(features: ImageTextFeatures, config: DamsmConfig) -> torch.Tensor:
    terms = damsm_loss_terms(features, config)
    word = terms["word_caption_given_image"] + terms["word_image_given_caption"]
    sent = terms["sent_caption_given_image"] + terms["sent_image_given_caption"]
    return config.word_weight * word + config.sentence_weight * sent


def save_image_encoder(encoder: ImageEncoder, path) -> None:
    save_payload(path, "damsm_image_encoder", encoder.config, encoder.state_dict())


def load_image_encoder(path, expected: ImageEncoderConfig | None = None) -> ImageEncoder:
    payload = load_payload(path, "damsm_image_encoder")
    config = ImageEncoderConfig(**payload["config"])
    if expected is not None and config != expected:
        raise CheckpointMismatchError(
            f"{path}: stored image-encoder config {payload['config']} does not "
            f"match expected {expected}"
        )
    encoder = ImageEncoder(config)
    encoder.load_state_dict(payload["state"])
    return encoder


def pretrain_damsm(
    manifest: DatasetManifest,
    vocab: Vocabulary,
    text_config: TextEncoderConfig,
    image_config: ImageEncoderConfig,
    damsm_config: DamsmConfig,
    epochs: int,
    out_dir: str | Path,
    batch_size: int = 8,
    lr: float = 2e-4,
    t_max: int = 18,
    seed: int = 0,
    init_from: str | Path | None = None,
) -> tuple[Path, Path]:
    """Train text and image encoders jointly on the matching loss.

    Writes ``text_encoder.pt``, ``image_encoder.pt`` and ``damsm_log.jsonl``
    into out_dir and returns the two checkpoint paths. ``init_from`` resumes
    from a previous pretraining directory. Zero epochs saves the untouched
    initialization.
    """
    if text_config.feature_dim != image_config.feature_dim:
        raise ValueError(
            f"text feature_dim {text_config.feature_dim} != image feature_dim "
            f"{image_config.feature_dim}"
        )
    train = manifest.split_records("train")
    if epochs > 0 and not train:
        raise ValueError("train split is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(seed)
    if init_from is not None:
        text_encoder = load_encoder_from_dir(Path(init_from), text_config)
        image_encoder = load_image_encoder(Path(init_from) / "image_encoder.pt", image_config)
    else:
        text_encoder = TextEncoder(text_config)
        image_encoder = ImageEncoder(image_config)

    params = list(text_encoder.parameters()) + list(image_encoder.parameters())
    opt = torch.optim.Adam(params, lr=lr, betas=(0.5, 0.999))
    train_indices = [i for i, r in enumerate(manifest.records) if r.split == "train"]
    batch = min(batch_size, len(train_indices)) if train_indices else 0

    log_path = out / "damsm_log.jsonl"
    with log_path.open("w") as log:
        for epoch in range(epochs):
            rng = random.Random(seed * 1_000_003 + epoch)
            order = train_indices[:]
            rng.shuffle(order)
            epoch_terms: dict[str, float] = {}
            n_steps = 0
            for start in range(0, len(order) - batch + 1, batch):
                indices = order[start : start + batch]
                if len(indices) < 2:
                    continue
                caps, imgs = make_batch(
                    manifest, vocab, indices, rng, [image_config.input_size], t_max
                )
                words, sentence = text_encoder.encode(caps)
                regions, global_feat = image_encoder(imgs.images[0])
                feats = ImageTextFeatures(regions, global_feat, words, sentence)
                terms = damsm_loss_terms(feats, damsm_config)
                word = terms["word_caption_given_image"] + terms["word_image_given_caption"]
                sent = terms["sent_caption_given_image"] + terms["sent_image_given_caption"]
                loss = damsm_config.word_weight * word + damsm_config.sentence_weight * sent
                opt.zero_grad()
                loss.backward()
                opt.step()
                n_steps += 1
                for key, val in [("loss", loss), ("word", word), ("sentence", sent)]:
                    epoch_terms[key] = epoch_terms.get(key, 0.0) + float(val.detach())
            if n_steps:
                record = {k: v / n_steps for k, v in epoch_terms.items()}
                record["epoch"] = epoch
                log.write(json.dumps(record) + "\n")

    text_path = out / "text_encoder.pt"
    image_path = out / "image_encoder.pt"
    save_encoder(text_encoder, text_path)
    save_image_encoder(image_encoder, image_path)
    return text_path, image_path


def load_encoder_from_dir(run_dir: Path, expected: TextEncoderConfig | None = None) -> TextEncoder:
    from .text_encoder import load_encoder

    return load_encoder(run_dir / "text_encoder.pt", expected)
