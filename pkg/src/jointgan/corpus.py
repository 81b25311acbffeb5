"""Caption-image datasets: manifests, vocabulary, tokenization and batching.

A dataset lives in one directory: a ``manifest.jsonl`` with one record per
image (``{"image": relpath, "captions": [...], "split": "train"|"test"}``),
the image files, and an optional ``dataset.meta`` JSON carrying
``image_size``, ``captions_per_image`` and vocabulary parameters.

Pixel convention: 8-bit RGB files, normalized to [-1, 1] floats in batches.
"""
from __future__ import annotations

import json
import random
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import torch
from PIL import Image

from .errors import DatasetError

META_FILENAME = "dataset.meta"
VOCAB_FILENAME = "vocab.json"

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
END_TOKEN = "<end>"

DEFAULT_T_MAX = 18
DEFAULT_MIN_FREQ = 1

_WORD_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation; keeps [a-z0-9] runs."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class ManifestRecord:
    image_path: Path
    captions: tuple[str, ...]
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    image_size: int
    captions_per_image: int
    root: Path

    def split_records(self, split: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == split]

    def __len__(self) -> int:
        return len(self.records)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a JSON-lines manifest.

    Caption counts must be uniform across records, image paths unique and
    existing, splits "train" or "test". ``dataset.meta`` next to the manifest
    supplies image_size; without it the first image is inspected.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    root = path.parent

    records: list[ManifestRecord] = []
    seen: set[str] = set()
    k: int | None = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        try:
            rel, captions, split = raw["image"], raw["captions"], raw["split"]
        except KeyError as exc:
            raise DatasetError(f"{path}:{lineno}: missing field {exc}") from exc
        if split not in ("train", "test"):
            raise DatasetError(f"{path}:{lineno}: bad split {split!r}")
        if not captions:
            raise DatasetError(f"{path}:{lineno}: record {rel!r} has no captions")
        if k is None:
            k = len(captions)
        elif len(captions) != k:
            raise DatasetError(
                f"{path}:{lineno}: record {rel!r} has {len(captions)} captions, "
                f"expected {k} (caption count must be uniform)"
            )
        if rel in seen:
            raise DatasetError(f"{path}:{lineno}: duplicate image path {rel!r}")
        seen.add(rel)
        image_path = root / rel
        if not image_path.is_file():
            raise DatasetError(f"{path}:{lineno}: image file missing for record {rel!r}")
        records.append(ManifestRecord(image_path, tuple(captions), split))

    meta_path = root / META_FILENAME
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text())
        image_size = int(meta["image_size"])
        meta_k = meta.get("captions_per_image")
        if records and meta_k is not None and meta_k != k:
            raise DatasetError(
                f"{meta_path}: captions_per_image={meta_k} but manifest records have {k}"
            )
    elif records:
        with Image.open(records[0].image_path) as im:
            if im.width != im.height:
                raise DatasetError(
                    f"{records[0].image_path}: images must be square, got {im.size}"
                )
            image_size = im.width
    else:
        image_size = 0

    if records and image_size <= 0:
        raise DatasetError(f"{path}: image_size must be positive, got {image_size}")
    return DatasetManifest(records, image_size, k or 0, root)


class Vocabulary:
    """Token/id bijection with reserved pad, unknown and end ids.

    Content ids are assigned deterministically: by descending corpus
    frequency, ties broken lexicographically. Out-of-vocabulary lookups
    return the unknown id.
    """

    pad_id = 0
    unk_id = 1
    end_id = 2

    def __init__(self, token_to_id: dict[str, int]):
        specials = {PAD_TOKEN: self.pad_id, UNK_TOKEN: self.unk_id, END_TOKEN: self.end_id}
        for tok, i in specials.items():
            if token_to_id.get(tok) != i:
                raise ValueError(f"special token {tok!r} must map to id {i}")
        self.token_to_id = dict(token_to_id)
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}
        if len(self.id_to_token) != len(self.token_to_id):
            raise ValueError("token_to_id is not a bijection")

    def __len__(self) -> int:
        return len(self.token_to_id)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if i == self.pad_id:
                continue
            out.append(self.id_to_token.get(int(i), UNK_TOKEN))
        return out

    @classmethod
    def from_captions(cls, captions: Iterable[str], min_freq: int = DEFAULT_MIN_FREQ) -> "Vocabulary":
        if min_freq < 1:
            raise ValueError(f"min_freq must be >= 1, got {min_freq}")
        freq = Counter()
        for caption in captions:
            freq.update(tokenize(caption))
        mapping = {PAD_TOKEN: cls.pad_id, UNK_TOKEN: cls.unk_id, END_TOKEN: cls.end_id}
        kept = sorted(
            (t for t, n in freq.items() if n >= min_freq),
            key=lambda t: (-freq[t], t),
        )
        for offset, token in enumerate(kept):
            mapping[token] = 3 + offset
        return cls(mapping)

    def save(self, path: str | Path) -> None:
        payload = {"tokens": self.token_to_id}
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=0) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        payload = json.loads(Path(path).read_text())
        return cls(payload["tokens"])


def build_vocabulary(manifest: DatasetManifest, min_freq: int = DEFAULT_MIN_FREQ) -> Vocabulary:
    """Vocabulary over every caption in the manifest (all splits)."""
    return Vocabulary.from_captions(
        (c for r in manifest.records for c in r.captions), min_freq=min_freq
    )


def encode_caption(vocab: Vocabulary, text: str, t_max: int = DEFAULT_T_MAX) -> tuple[list[int], int]:
    """Tokenize, map to ids, truncate to t_max and pad. Returns (ids, length)."""
    if t_max < 1:
        raise ValueError(f"t_max must be >= 1, got {t_max}")
    tokens = tokenize(text)[:t_max]
    ids = [vocab.lookup(t) for t in tokens]
    ids.extend([vocab.pad_id] * (t_max - len(ids)))
    return ids, len(tokens)


@dataclass
class CaptionBatch:
    token_ids: torch.Tensor  # int64 [batch, t_max]
    lengths: torch.Tensor    # int64 [batch]
    t_max: int


@dataclass
class ImageBatch:
    scales: tuple[int, ...]
    images: list[torch.Tensor]  # one [batch, 3, s, s] float tensor per scale, in [-1, 1]

    def at_scale(self, scale: int) -> torch.Tensor:
        return self.images[self.scales.index(scale)]


def load_image_tensor(path: Path, scales: Sequence[int]) -> list[torch.Tensor]:
    """Load one RGB image and resize it to each scale, normalized to [-1, 1].

    Downscaling uses area averaging so that resizing a larger pyramid level
    again reproduces the smaller one up to 8-bit rounding.
    """
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            out = []
            for s in scales:
                filt = Image.Resampling.BOX if s <= im.width else Image.Resampling.BILINEAR
                resized = im.resize((s, s), filt)
                t = torch.frombuffer(bytearray(resized.tobytes()), dtype=torch.uint8)
                t = t.view(s, s, 3).permute(2, 0, 1).contiguous().float()
                out.append(t / 127.5 - 1.0)
            return out
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"cannot load image {path}: {exc}") from exc


def tensor_to_pil(t: torch.Tensor) -> Image.Image:
    """One [3, H, W] tensor in [-1, 1] back to an 8-bit RGB image."""
    arr = ((t.detach().clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch.uint8)
    return Image.fromarray(arr.permute(1, 2, 0).contiguous().numpy())


def make_batch(
    manifest: DatasetManifest,
    vocab: Vocabulary,
    indices: Sequence[int],
    caption_choice: int | random.Random,
    scales: Sequence[int],
    t_max: int = DEFAULT_T_MAX,
) -> tuple[CaptionBatch, ImageBatch]:
    """Assemble one batch: a caption per image plus the image at each scale.

    ``caption_choice`` is either a fixed caption index (evaluation) or a
    seeded ``random.Random`` drawing uniformly per record (training).
    """
    if list(scales) != sorted(set(scales)):
        raise ValueError(f"scales must be strictly ascending, got {list(scales)}")
    n = len(manifest.records)
    ids_rows, lengths = [], []
    per_scale: list[list[torch.Tensor]] = [[] for _ in scales]
    for idx in indices:
        if not 0 <= idx < n:
            raise IndexError(f"record index {idx} out of range [0, {n})")
        record = manifest.records[idx]
        if isinstance(caption_choice, random.Random):
            c = caption_choice.randrange(len(record.captions))
        else:
            c = caption_choice
            if not 0 <= c < len(record.captions):
                raise IndexError(
                    f"caption index {c} out of range for record {record.image_path.name}"
                )
        ids, length = encode_caption(vocab, record.captions[c], t_max)
        ids_rows.append(ids)
        lengths.append(length)
        for level, tensor in enumerate(load_image_tensor(record.image_path, scales)):
            per_scale[level].append(tensor)

    caption_batch = CaptionBatch(
        token_ids=torch.tensor(ids_rows, dtype=torch.int64).reshape(len(indices), t_max),
        lengths=torch.tensor(lengths, dtype=torch.int64),
        t_max=t_max,
    )
    image_batch = ImageBatch(
        scales=tuple(scales),
        images=[torch.stack(level) if level else torch.empty(0, 3, s, s)
                for level, s in zip(per_scale, scales)],
    )
    return caption_batch, image_batch


def iter_batches(
    manifest: DatasetManifest,
    vocab: Vocabulary,
    batches_of_indices: Sequence[Sequence[int]],
    scales: Sequence[int],
    t_max: int = DEFAULT_T_MAX,
    caption_seed: int | None = None,
    caption_index: int = 0,
    workers: int = 0,
) -> Iterator[tuple[CaptionBatch, ImageBatch]]:
    """Produce batches, optionally with concurrent workers.

    Output order follows ``batches_of_indices`` regardless of worker count,
    and the per-batch caption draws are seeded by batch position, so a fixed
    ``caption_seed`` gives reproducible batches for any ``workers`` value.
    """

    def build(item: tuple[int, Sequence[int]]) -> tuple[CaptionBatch, ImageBatch]:
        pos, indices = item
        if caption_seed is None:
            choice: int | random.Random = caption_index
        else:
            choice = random.Random(caption_seed * 1_000_003 + pos)
        return make_batch(manifest, vocab, indices, choice, scales, t_max)

    items = list(enumerate(batches_of_indices))
    if workers <= 1:
        for item in items:
            yield build(item)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            yield from pool.map(build, items)


def write_meta(
    out_dir: str | Path,
    image_size: int,
    captions_per_image: int,
    min_freq: int = DEFAULT_MIN_FREQ,
    t_max: int = DEFAULT_T_MAX,
) -> Path:
    out = Path(out_dir) / META_FILENAME
    payload = {
        "image_size": image_size,
        "captions_per_image": captions_per_image,
        "vocab": {"min_freq": min_freq, "t_max": t_max},
    }
    out.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return out
