"""Joint training loop, checkpointing and sampling.

One step: encode the captions, synthesize the image pyramid, update each
scale's discriminator on real and detached fake images, then recompute the
fake scores and update the generator side. In fully_trained mode the text
encoder belongs to the generator-side optimizer and learns through the
adversarial and matching losses; in split mode it stays frozen and captions
are encoded without gradients. The image side of the matching network is
frozen either way unless explicitly unfrozen.

All per-step randomness (batch choice, caption choice, z) derives from
seed * 1000003 + step, so a resumed run replays the exact trajectory of an
uninterrupted one.
"""
from __future__ import annotations

import json
import math
import random
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch
from PIL import Image

from .ckpt import load_payload, save_payload
from .corpus import (
    DEFAULT_T_MAX,
    CaptionBatch,
    DatasetManifest,
    ImageBatch,
    Vocabulary,
    encode_caption,
    make_batch,
    tensor_to_pil,
)
from .damsm import (
    DamsmConfig,
    ImageEncoder,
    ImageEncoderConfig,
    ImageTextFeatures,
    damsm_loss,
    load_image_encoder,
)
from .discriminators import build_discriminators
from .errors import CheckpointMismatchError, TrainingDivergedError
from .generator import (
    AttentionStack,
    Generator,
    GeneratorConfig,
    ImagePyramid,
    NoiseVector,
)
from .losses import (
    DEFAULT_LAMBDA,
    LossReport,
    discriminator_loss,
    generator_stage_loss,
    total_generator_loss,
)
from .text_encoder import TextEncoder, TextEncoderConfig, load_encoder

MODE_FULLY_TRAINED = "fully_trained"
MODE_SPLIT = "split"

STEP_SEED_STRIDE = 1_000_003

LOG_FILENAME = "train_log.jsonl"
CHECKPOINT_DIRNAME = "checkpoints"


def step_seed(seed: int, step: int) -> int:
    return seed * STEP_SEED_STRIDE + step


@dataclass
class TrainConfig:
    mode: str = MODE_FULLY_TRAINED
    lam: float = DEFAULT_LAMBDA
    g_lr: float = 2e-4
    d_lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 4
    max_steps: int = 1000
    seed: int = 0
    checkpoint_interval: int = 500
    t_max: int = DEFAULT_T_MAX
    text_lr_scale: float = 1.0
    unfreeze_matching_image_encoder: bool = False
    wrong_caption_term: bool = False
    r1_penalty: float = 0.0
    disc_base_channels: int = 32
    disc_cond_channels: int = 16
    disc_spectral_norm: bool = False
    text: TextEncoderConfig | None = None
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    image_encoder: ImageEncoderConfig | None = None
    matching: DamsmConfig = field(default_factory=DamsmConfig)

    def __post_init__(self):
        if self.mode not in (MODE_FULLY_TRAINED, MODE_SPLIT):
            raise ValueError(f"mode must be {MODE_FULLY_TRAINED!r} or {MODE_SPLIT!r}, got {self.mode!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (the matching loss needs negatives)")
        if self.max_steps < 0 or self.checkpoint_interval < 1 or self.t_max < 1:
            raise ValueError("max_steps >= 0, checkpoint_interval >= 1, t_max >= 1 required")
        if min(self.g_lr, self.d_lr) <= 0 or self.text_lr_scale <= 0:
            raise ValueError("learning rates must be positive")
        if self.lam < 0 or self.r1_penalty < 0:
            raise ValueError("lam and r1_penalty must be >= 0")
        if self.image_encoder is None:
            self.image_encoder = ImageEncoderConfig(
                feature_dim=self.generator.text_dim,
                input_size=self.generator.stage_scales[-1],
            )


def train_config_from_dict(raw: dict) -> TrainConfig:
    raw = dict(raw)
    for key, cls in (
        ("text", TextEncoderConfig),
        ("generator", GeneratorConfig),
        ("image_encoder", ImageEncoderConfig),
        ("matching", DamsmConfig),
    ):
        if raw.get(key) is not None and not isinstance(raw[key], cls):
            raw[key] = cls(**raw[key])
    return TrainConfig(**raw)


def _config_key(config: TrainConfig) -> dict:
    """Config identity for resume checks; max_steps may legitimately change."""
    d = asdict(config)
    d.pop("max_steps")
    return d


class Trainer:
    def __init__(
        self,
        config: TrainConfig,
        manifest: DatasetManifest,
        vocab: Vocabulary,
        out_dir: str | Path,
        damsm_dir: str | Path | None = None,
    ):
        if config.text is None:
            if config.generator.text_dim % 2:
                raise ValueError("generator text_dim must be even (bidirectional encoder)")
            config.text = TextEncoderConfig(
                vocab_size=len(vocab), hidden_dim=config.generator.text_dim // 2
            )
        if config.text.vocab_size != len(vocab):
            raise ValueError(
                f"text encoder vocab_size {config.text.vocab_size} != vocabulary size {len(vocab)}"
            )
        if config.text.feature_dim != config.generator.text_dim:
            raise ValueError(
                f"text feature dim {config.text.feature_dim} != generator text_dim "
                f"{config.generator.text_dim}"
            )
        if config.image_encoder.feature_dim != config.generator.text_dim:
            raise ValueError("matching image encoder feature_dim must equal generator text_dim")
        if config.image_encoder.input_size != config.generator.stage_scales[-1]:
            raise ValueError(
                f"matching image encoder expects {config.image_encoder.input_size}px but the "
                f"largest stage emits {config.generator.stage_scales[-1]}px"
            )
        self.train_indices = [
            i for i, r in enumerate(manifest.records) if r.split == "train"
        ]
        if config.max_steps > 0 and not self.train_indices:
            raise ValueError("train split is empty")

        self.config = config
        self.manifest = manifest
        self.vocab = vocab
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / CHECKPOINT_DIRNAME).mkdir(exist_ok=True)
        self.step_count = 0

        torch.manual_seed(config.seed)
        self.text_encoder = TextEncoder(config.text)
        self.generator = Generator(config.generator)
        self.discriminators = build_discriminators(
            config.generator.stage_scales,
            config.generator.text_dim,
            config.disc_base_channels,
            config.disc_cond_channels,
            config.disc_spectral_norm,
        )
        self.image_encoder = ImageEncoder(config.image_encoder)
        if damsm_dir is not None:
            damsm_dir = Path(damsm_dir)
            self.text_encoder = load_encoder(damsm_dir / "text_encoder.pt", config.text)
            self.image_encoder = load_image_encoder(
                damsm_dir / "image_encoder.pt", config.image_encoder
            )
        if not config.unfreeze_matching_image_encoder:
            self.image_encoder.requires_grad_(False)

        groups = [{"params": list(self.generator.parameters())}]
        if config.mode == MODE_FULLY_TRAINED:
            groups.append(
                {
                    "params": list(self.text_encoder.parameters()),
                    "lr": config.g_lr * config.text_lr_scale,
                }
            )
        if config.unfreeze_matching_image_encoder:
            groups.append({"params": list(self.image_encoder.parameters())})
        self.g_optimizer = torch.optim.Adam(
            groups, lr=config.g_lr, betas=(config.beta1, config.beta2)
        )
        self.d_optimizers = [
            torch.optim.Adam(d.parameters(), lr=config.d_lr, betas=(config.beta1, config.beta2))
            for d in self.discriminators
        ]

    # ---- persistence ----

    def save_checkpoint(self, path: str | Path) -> Path:
        state = {
            "text_encoder": self.text_encoder.state_dict(),
            "generator": self.generator.state_dict(),
            "discriminators": [d.state_dict() for d in self.discriminators],
            "image_encoder": self.image_encoder.state_dict(),
            "g_optimizer": self.g_optimizer.state_dict(),
            "d_optimizers": [opt.state_dict() for opt in self.d_optimizers],
        }
        return save_payload(
            path,
            "train_checkpoint",
            self.config,
            state,
            step=self.step_count,
            vocab=self.vocab.token_to_id,
        )

    def _load_state(self, payload: dict) -> None:
        state = payload["state"]
        self.text_encoder.load_state_dict(state["text_encoder"])
        self.generator.load_state_dict(state["generator"])
        for disc, sd in zip(self.discriminators, state["discriminators"]):
            disc.load_state_dict(sd)
        self.image_encoder.load_state_dict(state["image_encoder"])
        self.g_optimizer.load_state_dict(state["g_optimizer"])
        for opt, sd in zip(self.d_optimizers, state["d_optimizers"]):
            opt.load_state_dict(sd)
        self.step_count = int(payload["step"])

    @classmethod
    def from_checkpoint(
        cls,
        path: str | Path,
        manifest: DatasetManifest,
        out_dir: str | Path,
        max_steps: int | None = None,
    ) -> "Trainer":
        payload = load_payload(path, "train_checkpoint")
        config = train_config_from_dict(payload["config"])
        if max_steps is not None:
            config.max_steps = max_steps
        vocab = Vocabulary(payload["vocab"])
        trainer = cls(config, manifest, vocab, out_dir)
        trainer._load_state(payload)
        return trainer

    # ---- the step ----

    def _check_finite(self, name: str, value: torch.Tensor) -> None:
        if not bool(torch.isfinite(value)):
            raise TrainingDivergedError(
                f"non-finite {name} at step {self.step_count}: {float(value.detach())}"
            )

    def make_train_batch(self, step: int) -> tuple[CaptionBatch, ImageBatch]:
        rng = random.Random(step_seed(self.config.seed, step))
        n = self.config.batch_size
        if n <= len(self.train_indices):
            indices = rng.sample(self.train_indices, n)
        else:
            indices = rng.choices(self.train_indices, k=n)
        return make_batch(
            self.manifest,
            self.vocab,
            indices,
            rng,
            self.config.generator.stage_scales,
            self.config.t_max,
        )

    def train_step(self, caps: CaptionBatch, imgs: ImageBatch) -> LossReport:
        cfg = self.config
        batch = caps.token_ids.shape[0]
        gen = torch.Generator().manual_seed(step_seed(cfg.seed, self.step_count))
        noise = NoiseVector(torch.randn(batch, cfg.generator.z_dim, generator=gen))

        if cfg.mode == MODE_FULLY_TRAINED:
            words, sentence = self.text_encoder.encode(caps)
        else:
            with torch.no_grad():
                words, sentence = self.text_encoder.encode(caps)

        pyramid, _ = self.generator.synthesize(sentence, noise, words)

        c_detached = sentence.vector.detach()
        d_losses = []
        for i, (disc, opt) in enumerate(zip(self.discriminators, self.d_optimizers)):
            real = imgs.at_scale(cfg.generator.stage_scales[i])
            fake = pyramid.images[i].detach()
            if cfg.r1_penalty > 0:
                real = real.clone().requires_grad_(True)
            real_out = disc(real, c_detached)
            fake_out = disc(fake, c_detached)
            wrong_out = None
            if cfg.wrong_caption_term and batch >= 2:
                wrong_out = disc(real, c_detached.roll(1, dims=0))
            d_loss = discriminator_loss(real_out, fake_out, wrong_out)
            if cfg.r1_penalty > 0:
                grads = torch.autograd.grad(
                    real_out.uncond_score.sum(), real, create_graph=True
                )[0]
                d_loss = d_loss + 0.5 * cfg.r1_penalty * grads.pow(2).flatten(1).sum(1).mean()
            self._check_finite(f"stage {i} discriminator loss", d_loss)
            opt.zero_grad()
            d_loss.backward()
            opt.step()
            d_losses.append(d_loss.detach())

        stage_losses = []
        for i, disc in enumerate(self.discriminators):
            fake_out = disc(pyramid.images[i], sentence.vector)
            stage_loss = generator_stage_loss(fake_out)
            self._check_finite(f"stage {i} generator loss", stage_loss)
            stage_losses.append(stage_loss)
        regions, global_feat = self.image_encoder(pyramid.largest)
        matching = damsm_loss(
            ImageTextFeatures(regions, global_feat, words, sentence), cfg.matching
        )
        self._check_finite("matching loss", matching)
        g_loss = total_generator_loss(
            stage_losses, matching, cfg.lam, cfg.generator.n_stages
        )
        self._check_finite("total generator loss", g_loss)

        self.g_optimizer.zero_grad()
        g_loss.backward()
        text_grad_sq = 0.0
        if cfg.mode == MODE_FULLY_TRAINED:
            for p in self.text_encoder.parameters():
                if p.grad is not None:
                    text_grad_sq += float(p.grad.detach().pow(2).sum())
        self.g_optimizer.step()

        return LossReport.from_terms(
            stage_losses, matching, cfg.lam, d_losses, math.sqrt(text_grad_sq)
        )

    # ---- the loop ----

    def run(self, log_every: int | None = None) -> Path:
        cfg = self.config
        ckpt_dir = self.out_dir / CHECKPOINT_DIRNAME
        log_path = self.out_dir / LOG_FILENAME
        mode = "a" if self.step_count > 0 and log_path.exists() else "w"
        final = ckpt_dir / f"step_{cfg.max_steps:07d}.pt"
        with log_path.open(mode) as log:
            while self.step_count < cfg.max_steps:
                caps, imgs = self.make_train_batch(self.step_count)
                report = self.train_step(caps, imgs)
                record = report.as_dict(step=self.step_count)
                log.write(json.dumps(record) + "\n")
                if log_every and (self.step_count % log_every == 0):
                    print(
                        f"step {self.step_count}: L_G={report.total:.4f} "
                        f"L_D={[round(v, 4) for v in report.d_losses]}",
                        flush=True,
                    )
                self.step_count += 1
                if self.step_count % cfg.checkpoint_interval == 0 and self.step_count < cfg.max_steps:
                    self.save_checkpoint(ckpt_dir / f"step_{self.step_count:07d}.pt")
        self.save_checkpoint(final)
        return final


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    vocab: Vocabulary,
    out_dir: str | Path,
    damsm_dir: str | Path | None = None,
    resume: str | Path | None = None,
    log_every: int | None = None,
) -> Path:
    """Run (or resume) a training job and return the final checkpoint path."""
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, manifest, out_dir, config.max_steps)
        stored = train_config_from_dict(load_payload(resume, "train_checkpoint")["config"])
        stored_key, requested_key = _config_key(stored), _config_key(config)
        if config.text is None:  # encoder config not pinned by the caller
            stored_key.pop("text")
            requested_key.pop("text")
        if stored_key != requested_key:
            raise CheckpointMismatchError(
                f"{resume}: stored training config differs from the requested one; "
                f"resume with the original settings or start a fresh run"
            )
    else:
        trainer = Trainer(config, manifest, vocab, out_dir, damsm_dir=damsm_dir)
    return trainer.run(log_every=log_every)


# ---- sampling from a checkpoint ----


@dataclass
class SampleBundle:
    config: TrainConfig
    vocab: Vocabulary
    text_encoder: TextEncoder
    generator: Generator


def load_bundle(checkpoint_path: str | Path) -> SampleBundle:
    payload = load_payload(checkpoint_path, "train_checkpoint")
    config = train_config_from_dict(payload["config"])
    vocab = Vocabulary(payload["vocab"])
    text_encoder = TextEncoder(config.text)
    text_encoder.load_state_dict(payload["state"]["text_encoder"])
    generator = Generator(config.generator)
    generator.load_state_dict(payload["state"]["generator"])
    text_encoder.eval()
    generator.eval()
    return SampleBundle(config, vocab, text_encoder, generator)


def encode_free_caption(bundle: SampleBundle, text: str) -> CaptionBatch:
    """Encode raw text against the bundle's vocabulary (1-row batch)."""
    ids, length = encode_caption(bundle.vocab, text, bundle.config.t_max)
    known = [i for i in ids[:length] if i != bundle.vocab.unk_id]
    if length == 0 or not known:
        warnings.warn(
            f"caption {text!r} has no in-vocabulary words; sampling from the "
            f"unknown-token encoding"
        )
    return CaptionBatch(
        token_ids=torch.tensor([ids], dtype=torch.int64),
        lengths=torch.tensor([length], dtype=torch.int64),
        t_max=bundle.config.t_max,
    )


@torch.no_grad()
def synthesize_for_caption(
    bundle: SampleBundle, text: str, n: int, seed: int
) -> tuple[ImagePyramid, AttentionStack, CaptionBatch]:
    caps = encode_free_caption(bundle, text)
    caps = CaptionBatch(
        token_ids=caps.token_ids.expand(n, -1).clone(),
        lengths=caps.lengths.expand(n).clone(),
        t_max=caps.t_max,
    )
    words, sentence = bundle.text_encoder.encode(caps)
    gen = torch.Generator().manual_seed(seed)
    noise = NoiseVector(torch.randn(n, bundle.config.generator.z_dim, generator=gen))
    pyramid, attn = bundle.generator.synthesize(sentence, noise, words)
    return pyramid, attn, caps


def _tile(rows: list[list]) -> Image.Image:
    cell_w = max(im.width for row in rows for im in row)
    cell_h = max(im.height for row in rows for im in row)
    cols = max(len(row) for row in rows)
    grid = Image.new("RGB", (cols * cell_w, len(rows) * cell_h), (0, 0, 0))
    for r, row in enumerate(rows):
        for c, im in enumerate(row):
            grid.paste(im, (c * cell_w, r * cell_h))
    return grid


def sample(
    checkpoint_path: str | Path,
    captions: list[str],
    n_per_caption: int,
    seed: int,
    out_dir: str | Path,
    write_grid: bool = True,
) -> list[Path]:
    """Generate n images per caption at the largest scale; returns written paths."""
    bundle = load_bundle(checkpoint_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for ci, text in enumerate(captions):
        pyramid, _, _ = synthesize_for_caption(
            bundle, text, n_per_caption, step_seed(seed, ci)
        )
        pils = [tensor_to_pil(img) for img in pyramid.largest]
        for k, pil in enumerate(pils):
            path = out / f"caption_{ci:03d}_sample_{k:02d}.png"
            pil.save(path)
            written.append(path)
        if write_grid:
            grid_path = out / f"caption_{ci:03d}_grid.png"
            _tile([pils]).save(grid_path)
            written.append(grid_path)
    return written


def export_attention(
    checkpoint_path: str | Path, caption: str, out_path: str | Path, seed: int = 0
) -> Path:
    """One row per valid word: that word's attention map at each attended stage.

    The first row shows the generated image pyramid for reference. Maps are
    min-max normalized per word and stage and upscaled to the largest scale.
    """
    bundle = load_bundle(checkpoint_path)
    pyramid, attn, caps = synthesize_for_caption(bundle, caption, 1, step_seed(seed, 0))
    big = bundle.config.generator.stage_scales[-1]
    rows = [[tensor_to_pil(img[0]).resize((big, big), Image.Resampling.NEAREST)
             for img in pyramid.images]]
    n_words = max(int(caps.lengths[0]), 1)
    tokens = bundle.vocab.decode(caps.token_ids[0, :n_words].tolist())
    for w in range(n_words):
        row = []
        for stage_maps in attn.maps:
            m = stage_maps[0, w]
            lo, hi = float(m.min()), float(m.max())
            norm = (m - lo) / (hi - lo) if hi > lo else torch.zeros_like(m)
            arr = (norm * 255).round().to(torch.uint8).numpy()
            row.append(
                Image.fromarray(arr, mode="L")
                .convert("RGB")
                .resize((big, big), Image.Resampling.NEAREST)
            )
        rows.append(row)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _tile(rows).save(out_path)
    if tokens:
        out_path.with_suffix(".words.txt").write_text("\n".join(tokens) + "\n")
    return out_path
