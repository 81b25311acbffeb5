"""Deterministic synthetic corpus of colored shapes with template captions.

Stands in for real caption-image data in tests and demos: tiny, seeded,
and self-describing (the shape/color class of every image can be recovered
from its captions, which the toy metric backend uses as labels).
"""
from __future__ import annotations

import json
import random
from pathlib import Path

from PIL import Image, ImageDraw

from .corpus import write_meta

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (214, 45, 45),
    "green": (60, 174, 60),
    "blue": (55, 90, 212),
    "yellow": (224, 198, 40),
}
BACKGROUNDS = {
    "white": (243, 243, 243),
    "black": (24, 24, 24),
    "gray": (128, 128, 128),
}

CAPTION_TEMPLATES = (
    "a {color} {shape} on a {bg} background",
    "the image shows a {color} {shape}",
    "there is a single {color} {shape} in the picture",
    "a plain {bg} scene containing one {color} {shape}",
    "one {color} {shape} drawn over a {bg} backdrop",
)

N_CLASSES = len(SHAPES) * len(COLORS)


def class_of_caption(text: str) -> int:
    """Recover the shape/color class id from any template caption."""
    words = text.lower().split()
    shape = next((i for i, s in enumerate(SHAPES) if s in words), None)
    color = next((i for i, c in enumerate(COLORS) if c in words), None)
    if shape is None or color is None:
        raise ValueError(f"caption {text!r} names no known color/shape pair")
    return color * len(SHAPES) + shape


def _draw(shape: str, color: tuple, bg: tuple, size: int, rng: random.Random) -> Image.Image:
    im = Image.new("RGB", (size, size), bg)
    d = ImageDraw.Draw(im)
    margin = size // 8 + rng.randrange(size // 8)
    jitter = lambda: rng.randrange(-size // 16, size // 16 + 1)
    x0, y0 = margin + jitter(), margin + jitter()
    x1, y1 = size - margin + jitter(), size - margin + jitter()
    if shape == "circle":
        d.ellipse([x0, y0, x1, y1], fill=color)
    elif shape == "square":
        d.rectangle([x0, y0, x1, y1], fill=color)
    else:
        d.polygon([((x0 + x1) // 2, y0), (x0, y1), (x1, y1)], fill=color)
    return im


def build_corpus(
    out_dir: str | Path,
    n_train: int = 8,
    n_test: int = 4,
    image_size: int = 64,
    captions_per_image: int = 5,
    seed: int = 0,
) -> Path:
    """Write images + manifest.jsonl + dataset.meta; returns the manifest path.

    Deterministic for a fixed seed. Shape/color/background combinations cycle
    so small corpora still cover several classes.
    """
    if not 1 <= captions_per_image <= len(CAPTION_TEMPLATES):
        raise ValueError(
            f"captions_per_image must be in [1, {len(CAPTION_TEMPLATES)}]"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    color_names = list(COLORS)
    bg_names = list(BACKGROUNDS)

    lines = []
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        shape = SHAPES[i % len(SHAPES)]
        color = color_names[(i // len(SHAPES)) % len(color_names)]
        bg = bg_names[i % len(bg_names)]
        im = _draw(shape, COLORS[color], BACKGROUNDS[bg], image_size, rng)
        name = f"{split}_{i:04d}.png"
        im.save(out / name)
        captions = [
            CAPTION_TEMPLATES[t].format(color=color, shape=shape, bg=bg)
            for t in range(captions_per_image)
        ]
        lines.append(json.dumps({"image": name, "captions": captions, "split": split}))

    manifest_path = out / "manifest.jsonl"
    manifest_path.write_text("\n".join(lines) + ("\n" if lines else ""))
    write_meta(out, image_size, captions_per_image)
    return manifest_path
