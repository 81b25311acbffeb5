"""Bidirectional LSTM caption encoder.

Maps a token-id batch to per-word features (both directions' hidden states
concatenated, one column per word) and a global sentence vector (the two
final hidden states concatenated). Trainable jointly with the image decoder
or frozen, depending on the training mode.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .ckpt import load_payload, save_payload
from .corpus import CaptionBatch
from .errors import CheckpointMismatchError


@dataclass
class TextEncoderConfig:
    vocab_size: int
    embed_dim: int = 128
    hidden_dim: int = 128   # per direction
    dropout: float = 0.0

    def __post_init__(self):
        if min(self.vocab_size, self.embed_dim, self.hidden_dim) <= 0:
            raise ValueError("vocab_size, embed_dim and hidden_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def feature_dim(self) -> int:
        # two directions concatenated
        return 2 * self.hidden_dim


@dataclass
class WordFeatures:
    features: torch.Tensor  # [batch, feature_dim, t_max]; column i = word i
    mask: torch.Tensor      # bool [batch, t_max]; True at real (non-pad) positions


@dataclass
class SentenceVector:
    vector: torch.Tensor    # [batch, feature_dim]


class TextEncoder(nn.Module):
    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.embed_dim)
        self.dropout = nn.Dropout(config.dropout)
        self.lstm = nn.LSTM(
            config.embed_dim,
            config.hidden_dim,
            num_layers=1,
            batch_first=True,
            bidirectional=True,
        )

    def forward(self, token_ids: torch.Tensor, lengths: torch.Tensor):
        """token_ids [B, T] int64, lengths [B] -> (features [B, D, T], sentence [B, D], mask [B, T]).

        Sequences are packed so pad positions never enter the recurrence;
        their feature columns are zero. Zero-length rows are encoded from the
        single leading pad token (degenerate but well-defined).
        """
        if token_ids.numel() and int(token_ids.max()) >= self.config.vocab_size:
            raise ValueError(
                f"token id {int(token_ids.max())} out of range for vocab_size "
                f"{self.config.vocab_size}"
            )
        if token_ids.numel() and int(token_ids.min()) < 0:
            raise ValueError("negative token id")
        t_max = token_ids.shape[1]
        emb = self.dropout(self.embedding(token_ids))            # [B, T, E]
        packed = pack_padded_sequence(
            emb, lengths.clamp(min=1).cpu(), batch_first=True, enforce_sorted=False
        )
        out, (h_n, _) = self.lstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=t_max)
        features = out.transpose(1, 2)                           # [B, 2H, T]
        sentence = torch.cat([h_n[0], h_n[1]], dim=1)            # [B, 2H]
        mask = torch.arange(t_max, device=token_ids.device).unsqueeze(0) < lengths.unsqueeze(1)
        return features, sentence, mask

    def encode(self, batch: CaptionBatch) -> tuple[WordFeatures, SentenceVector]:
        features, sentence, mask = self(batch.token_ids, batch.lengths)
        return WordFeatures(features, mask), SentenceVector(sentence)


def save_encoder(encoder: TextEncoder, path) -> None:
    save_payload(path, "text_encoder", encoder.config, encoder.state_dict())


def load_encoder(path, expected: TextEncoderConfig | None = None) -> TextEncoder:
    """Load an encoder checkpoint, verifying dims against ``expected`` if given.

    Only the shape-determining fields must match; dropout is a training-mode
    setting and the caller's value wins (pretraining uses dropout, joint
    training usually runs with 0).
    """
    payload = load_payload(path, "text_encoder")
    config = TextEncoderConfig(**payload["config"])
    if expected is not None:
        stored_dims = (config.vocab_size, config.embed_dim, config.hidden_dim)
        wanted_dims = (expected.vocab_size, expected.embed_dim, expected.hidden_dim)
        if stored_dims != wanted_dims:
            raise CheckpointMismatchError(
                f"{path}: stored config {payload['config']} does not match expected "
                f"{expected}; embedding shape is ({config.vocab_size}, {config.embed_dim}), "
                f"expected ({expected.vocab_size}, {expected.embed_dim})"
            )
        config = expected
    encoder = TextEncoder(config)
    encoder.load_state_dict(payload["state"])
    return encoder
