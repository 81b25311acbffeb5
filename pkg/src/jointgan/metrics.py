"""Evaluation metrics over pluggable embedding backends.

Inception score (exp of mean KL between per-image class posteriors and the
marginal, over splits), Frechet distance between Gaussian fits of feature
distributions, and the paired embedding metrics: mean embedding distance
(semantic distance) and mean cosine similarity in percent (semantic
similarity).

Two desk-scale backends ship with the package: an analytic color-statistics
embedder that needs no training, and a small convolutional classifier
trained on the synthetic fixture's caption-derived classes. Real face or
ImageNet embedders can be plugged in through the same interface.
"""
from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .ckpt import load_payload, save_payload
from .corpus import DatasetManifest, load_image_tensor, tensor_to_pil
from .synthetic import N_CLASSES, class_of_caption

log = logging.getLogger(__name__)

COS_EPS = 1e-8


# ---- backends ----


class EmbeddingBackend:
    """Maps image batches to fixed-length features; optionally classifies.

    Images arrive as [B, 3, S, S] tensors in [-1, 1]. ``embed`` returns a
    float64 array [B, feature_dim]; ``classify`` returns [B, n_classes]
    rows summing to 1, or raises NotImplementedError for pure embedders.
    """

    name: str = "base"
    feature_dim: int = 0
    n_classes: int = 0

    def embed(self, images: torch.Tensor) -> np.ndarray:
        raise NotImplementedError

    def classify(self, images: torch.Tensor) -> np.ndarray:
        raise NotImplementedError(f"backend {self.name!r} has no classifier head")


class ColorStatBackend(EmbeddingBackend):
    """Training-free embedder: channel means/stds plus a 4x4 thumbnail."""

    name = "colorstat"
    feature_dim = 3 + 3 + 48

    def embed(self, images: torch.Tensor) -> np.ndarray:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected [B, 3, S, S] images, got {tuple(images.shape)}")
        mean = images.mean(dim=(2, 3))
        std = images.std(dim=(2, 3), unbiased=False)
        thumb = F.adaptive_avg_pool2d(images, 4).flatten(1)
        return torch.cat([mean, std, thumb], dim=1).detach().double().numpy()


class _ToyCnn(nn.Module):
    def __init__(self, n_classes: int, width: int = 16):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Conv2d(3, width, 4, 2, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width * 2, 4, 2, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width * 2, width * 4, 4, 2, 1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(width * 4, n_classes)

    def forward(self, images: torch.Tensor):
        feats = self.trunk(images).flatten(1)
        return feats, self.head(feats)


@dataclass
class ToyBackendConfig:
    n_classes: int = N_CLASSES
    width: int = 16


class ToyCnnBackend(EmbeddingBackend):
    """Small classifier trained on the fixture's caption-derived classes."""

    name = "toycnn"

    def __init__(self, net: _ToyCnn, config: ToyBackendConfig):
        self.net = net.eval()
        self.config = config
        self.feature_dim = net.head.in_features
        self.n_classes = config.n_classes

    @torch.no_grad()
    def embed(self, images: torch.Tensor) -> np.ndarray:
        feats, _ = self.net(images)
        return feats.double().numpy()

    @torch.no_grad()
    def classify(self, images: torch.Tensor) -> np.ndarray:
        _, logits = self.net(images)
        return torch.softmax(logits.double(), dim=1).numpy()


def train_toy_backend(
    manifest: DatasetManifest,
    image_size: int,
    epochs: int = 40,
    batch_size: int = 8,
    lr: float = 2e-3,
    seed: int = 0,
    width: int = 16,
) -> ToyCnnBackend:
    """Fit the toy classifier on train-split images labeled by their captions."""
    records = manifest.split_records("train")
    if not records:
        raise ValueError("train split is empty")
    labels = [class_of_caption(r.captions[0]) for r in records]
    images = torch.stack([load_image_tensor(r.image_path, [image_size])[0] for r in records])
    targets = torch.tensor(labels, dtype=torch.int64)

    torch.manual_seed(seed)
    config = ToyBackendConfig(n_classes=N_CLASSES, width=width)
    net = _ToyCnn(config.n_classes, config.width)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    n = len(records)
    rng = random.Random(seed)
    net.train()
    for _ in range(epochs):
        order = list(range(n))
        rng.shuffle(order)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, logits = net(images[idx])
            loss = F.cross_entropy(logits, targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return ToyCnnBackend(net, config)


def save_toy_backend(backend: ToyCnnBackend, path) -> None:
    save_payload(path, "toy_backend", backend.config, backend.net.state_dict())


def load_toy_backend(path) -> ToyCnnBackend:
    payload = load_payload(path, "toy_backend")
    config = ToyBackendConfig(**payload["config"])
    net = _ToyCnn(config.n_classes, config.width)
    net.load_state_dict(payload["state"])
    return ToyCnnBackend(net, config)


# ---- feature cache ----


class FeatureCache:
    """On-disk feature store keyed by (backend name, image content hash)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, backend_name: str, image: torch.Tensor) -> Path:
        digest = hashlib.sha256(image.detach().float().numpy().tobytes()).hexdigest()
        return self.root / backend_name / f"{digest}.npy"

    def embed(self, backend: EmbeddingBackend, images: torch.Tensor) -> np.ndarray:
        rows = []
        for image in images:
            path = self._path(backend.name, image)
            if path.exists():
                rows.append(np.load(path))
                continue
            feat = backend.embed(image.unsqueeze(0))[0]
            path.parent.mkdir(parents=True, exist_ok=True)
            np.save(path, feat)
            rows.append(feat)
        return np.stack(rows)


def embed_images(
    backend: EmbeddingBackend, images: torch.Tensor, cache: FeatureCache | None = None
) -> np.ndarray:
    if cache is not None:
        return cache.embed(backend, images)
    return backend.embed(images)


# ---- the metrics ----


def inception_score_from_probs(probs: np.ndarray, n_splits: int = 10) -> tuple[float, float]:
    """exp(mean KL(p(y|x) || p(y))) per contiguous split; returns (mean, std)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"expected [N, classes] probabilities, got shape {probs.shape}")
    n = probs.shape[0]
    if n < n_splits or n_splits < 1:
        raise ValueError(f"need at least n_splits={n_splits} images, got {n}")
    sums = probs.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ValueError("classifier rows must sum to 1 within 1e-6")
    scores = []
    for part in np.array_split(probs, n_splits):
        marginal = part.mean(axis=0, keepdims=True)
        kl = part * (np.log(part + 1e-12) - np.log(marginal + 1e-12))
        scores.append(float(np.exp(kl.sum(axis=1).mean())))
    return float(np.mean(scores)), float(np.std(scores))


def inception_score(
    images: torch.Tensor, backend: EmbeddingBackend, n_splits: int = 10, batch_size: int = 64
) -> tuple[float, float]:
    probs = np.concatenate(
        [backend.classify(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    )
    return inception_score_from_probs(probs, n_splits)


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD matrix square root; tiny negative eigenvalues clamped."""
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(real_features: np.ndarray, fake_features: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of the two feature sets."""
    real = np.atleast_2d(np.asarray(real_features, dtype=np.float64))
    fake = np.atleast_2d(np.asarray(fake_features, dtype=np.float64))
    if real.shape[1] != fake.shape[1]:
        raise ValueError(f"feature dims differ: {real.shape[1]} vs {fake.shape[1]}")
    if real.shape[0] < 2 or fake.shape[0] < 2:
        raise ValueError("need at least 2 samples per side to fit a covariance")
    mu_r, mu_f = real.mean(axis=0), fake.mean(axis=0)
    sigma_r = np.atleast_2d(np.cov(real, rowvar=False))
    sigma_f = np.atleast_2d(np.cov(fake, rowvar=False))

    a = _sqrtm_psd(sigma_r)
    cross = _sqrtm_psd(a @ sigma_f @ a)
    diff = mu_r - mu_f
    value = float(diff @ diff + np.trace(sigma_r) + np.trace(sigma_f) - 2.0 * np.trace(cross))
    if value < 0:
        log.warning("clamping small negative Frechet distance %.3e to 0", value)
        value = 0.0
    return value


def _paired_embeddings(generated, ground_truth, backend, cache):
    if len(generated) != len(ground_truth):
        raise ValueError(
            f"paired metrics need equal counts, got {len(generated)} vs {len(ground_truth)}"
        )
    if len(generated) == 0:
        raise ValueError("no image pairs to evaluate")
    return (
        embed_images(backend, generated, cache),
        embed_images(backend, ground_truth, cache),
    )


def fsd(
    generated: torch.Tensor,
    ground_truth: torch.Tensor,
    backend: EmbeddingBackend,
    norm: str = "l2",
    cache: FeatureCache | None = None,
) -> float:
    """Mean embedding distance between index-paired images (lower is better)."""
    if norm not in ("l2", "l1"):
        raise ValueError(f"norm must be 'l2' or 'l1', got {norm!r}")
    fg, ft = _paired_embeddings(generated, ground_truth, backend, cache)
    order = 2 if norm == "l2" else 1
    return float(np.linalg.norm(fg - ft, ord=order, axis=1).mean())


def fss(
    generated: torch.Tensor,
    ground_truth: torch.Tensor,
    backend: EmbeddingBackend,
    cache: FeatureCache | None = None,
) -> float:
    """Mean cosine similarity between index-paired embeddings, in percent."""
    fg, ft = _paired_embeddings(generated, ground_truth, backend, cache)
    norms = np.linalg.norm(fg, axis=1) * np.linalg.norm(ft, axis=1)
    zero = norms < COS_EPS
    if zero.any():
        log.warning("%d zero-norm embeddings in similarity metric", int(zero.sum()))
    cos = (fg * ft).sum(axis=1) / np.maximum(norms, COS_EPS)
    return float(cos.mean() * 100.0)


@dataclass
class MetricReport:
    backend: str
    n: int
    fid: float
    fsd: float
    fss: float
    inception_mean: float | None = None
    inception_std: float | None = None

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "n": self.n,
            "inception_score": {"mean": self.inception_mean, "std": self.inception_std},
            "fid": self.fid,
            "fsd": self.fsd,
            "fss_percent": self.fss,
        }

    def to_table(self) -> str:
        is_str = (
            f"{self.inception_mean:.4f} +/- {self.inception_std:.4f}"
            if self.inception_mean is not None
            else "n/a (backend has no classifier)"
        )
        rows = [
            ("backend", self.backend),
            ("evaluated pairs", str(self.n)),
            ("inception score", is_str),
            ("fid", f"{self.fid:.4f}"),
            ("fsd", f"{self.fsd:.4f}"),
            ("fss", f"{self.fss:.2f}%"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def compute_metrics(
    generated: torch.Tensor,
    real_reference: torch.Tensor,
    paired_ground_truth: torch.Tensor,
    backend: EmbeddingBackend,
    n_splits: int = 10,
    cache: FeatureCache | None = None,
) -> MetricReport:
    """Full report: IS on generated, FID vs the reference set, FSD/FSS on pairs."""
    fid_value = fid(
        embed_images(backend, real_reference, cache), embed_images(backend, generated, cache)
    )
    fsd_value = fsd(generated, paired_ground_truth, backend, cache=cache)
    fss_value = fss(generated, paired_ground_truth, backend, cache=cache)
    try:
        is_mean, is_std = inception_score(generated, backend, n_splits)
    except NotImplementedError:
        is_mean = is_std = None
    return MetricReport(
        backend=backend.name,
        n=len(generated),
        fid=fid_value,
        fsd=fsd_value,
        fss=fss_value,
        inception_mean=is_mean,
        inception_std=is_std,
    )


# ---- checkpoint evaluation protocol ----


def evaluate_checkpoint(
    checkpoint_path: str | Path,
    manifest: DatasetManifest,
    out_dir: str | Path,
    backend: EmbeddingBackend,
    n_per_caption: int = 10,
    seed: int = 0,
    n_splits: int = 10,
    save_images: bool = True,
    use_cache: bool = True,
) -> MetricReport:
    """Generate n images for every test-split caption and score them.

    Writes the generated images (optional), metrics.json and metrics.txt
    into out_dir and returns the report. Pairs every generated image with
    its caption's ground-truth image for the semantic distance/similarity
    metrics; the Frechet reference set is one copy of each test image.
    """
    from .trainer import load_bundle, step_seed, synthesize_for_caption

    records = manifest.split_records("test")
    if not records:
        raise ValueError("test split is empty; nothing to evaluate")
    if n_per_caption < 1:
        raise ValueError("n_per_caption must be >= 1")
    bundle = load_bundle(checkpoint_path)
    scale = bundle.config.generator.stage_scales[-1]
    out = Path(out_dir)
    images_dir = out / "images"
    out.mkdir(parents=True, exist_ok=True)
    if save_images:
        images_dir.mkdir(exist_ok=True)
    cache = FeatureCache(out / "feature_cache") if use_cache else None

    generated, paired_gt, reference = [], [], []
    caption_counter = 0
    for r_idx, record in enumerate(records):
        gt = load_image_tensor(record.image_path, [scale])[0]
        reference.append(gt)
        for c_idx, caption in enumerate(record.captions):
            pyramid, _, _ = synthesize_for_caption(
                bundle, caption, n_per_caption, step_seed(seed, caption_counter)
            )
            caption_counter += 1
            fakes = pyramid.largest
            generated.append(fakes)
            paired_gt.append(gt.unsqueeze(0).expand(n_per_caption, -1, -1, -1))
            if save_images:
                for k in range(n_per_caption):
                    tensor_to_pil(fakes[k]).save(
                        images_dir / f"record_{r_idx:04d}_cap_{c_idx}_sample_{k:02d}.png"
                    )

    generated = torch.cat(generated)
    paired_gt = torch.cat(paired_gt).contiguous()
    reference = torch.stack(reference)
    report = compute_metrics(generated, reference, paired_gt, backend, n_splits, cache)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    (out / "metrics.txt").write_text(report.to_table() + "\n")
    return report
