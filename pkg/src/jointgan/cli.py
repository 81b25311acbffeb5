"""Command-line surface for the whole pipeline.

Subcommands: prepare-data, pretrain-damsm, train, sample, evaluate,
export-attn, plus make-fixture for the bundled synthetic corpus. Every run
directory gets a JSON snapshot of its fully resolved configuration, which can
be fed back through --config to reproduce the run. Exit codes: 0 success,
1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import corpus, metrics, synthetic, trainer
from .corpus import DEFAULT_MIN_FREQ, DEFAULT_T_MAX, META_FILENAME, VOCAB_FILENAME
from .damsm import DamsmConfig, ImageEncoderConfig, pretrain_damsm
from .errors import CheckpointMismatchError, DatasetError, TrainingDivergedError
from .generator import GeneratorConfig
from .losses import DEFAULT_LAMBDA
from .text_encoder import TextEncoderConfig
from .trainer import TrainConfig

OUT_ROOT_ENV = "JOINTGAN_OUT_ROOT"
SNAPSHOT_FILENAME = "run_config.json"


class UsageError(Exception):
    pass


# ---- config plumbing ----


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    if p.suffix == ".json":
        return json.loads(p.read_text())
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with p.open("rb") as f:
        return tomllib.load(f)


def parse_scales(text: str) -> tuple[int, ...]:
    try:
        scales = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise UsageError(f"--scales expects comma-separated integers, got {text!r}")
    if not scales:
        raise UsageError("--scales needs at least one value")
    return scales


def default_injection_scales(first_stage_scale: int) -> tuple[int, ...]:
    """Three injection points along the stage-1 trunk (all of it when short)."""
    trunk = []
    s = 4
    while s <= first_stage_scale:
        trunk.append(s)
        s *= 2
    return tuple(trunk[1:4]) if len(trunk) > 3 else tuple(trunk)


def build_train_config(file_cfg: dict, overrides: dict, vocab_size: int | None) -> TrainConfig:
    kwargs = dict(file_cfg.get("train", {}))
    disc = file_cfg.get("discriminator", {})
    for src, dst in (
        ("base_channels", "disc_base_channels"),
        ("cond_channels", "disc_cond_channels"),
        ("spectral_norm", "disc_spectral_norm"),
    ):
        if src in disc:
            kwargs[dst] = disc[src]
    gen_kwargs = dict(file_cfg.get("generator", {}))
    if overrides.get("scales") is not None:
        gen_kwargs["stage_scales"] = overrides["scales"]
        gen_kwargs.setdefault(
            "noise_injection_scales", default_injection_scales(overrides["scales"][0])
        )
    kwargs["generator"] = GeneratorConfig(**gen_kwargs)
    if "text" in file_cfg:
        kwargs["text"] = TextEncoderConfig(**file_cfg["text"])
    elif vocab_size is not None:
        kwargs["text"] = TextEncoderConfig(
            vocab_size=vocab_size, hidden_dim=kwargs["generator"].text_dim // 2
        )
    if "image_encoder" in file_cfg:
        kwargs["image_encoder"] = ImageEncoderConfig(**file_cfg["image_encoder"])
    if "matching" in file_cfg:
        kwargs["matching"] = DamsmConfig(**file_cfg["matching"])
    for key in (
        "mode",
        "lam",
        "seed",
        "max_steps",
        "batch_size",
        "checkpoint_interval",
        "t_max",
        "g_lr",
        "d_lr",
    ):
        if overrides.get(key) is not None:
            kwargs[key] = overrides[key]
    return TrainConfig(**kwargs)


def config_to_sections(config: TrainConfig) -> dict:
    d = asdict(config)
    sections = {
        "generator": d.pop("generator"),
        "text": d.pop("text"),
        "image_encoder": d.pop("image_encoder"),
        "matching": d.pop("matching"),
    }
    sections["train"] = d
    return sections


def write_snapshot(out_dir: Path, command: str, payload: dict) -> None:
    snapshot = {"command": command}
    snapshot.update(payload)
    (out_dir / SNAPSHOT_FILENAME).write_text(
        json.dumps(snapshot, sort_keys=True, indent=2, default=str) + "\n"
    )


def resolve_out_dir(explicit: str | None, command: str) -> Path:
    if explicit is not None:
        out = Path(explicit)
    else:
        root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
        out = root / f"{command}_{time.strftime('%Y%m%d_%H%M%S')}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_prepared(manifest_path: str, prepared: str | None):
    """Manifest + vocabulary + meta, directing the user to prepare-data if absent."""
    manifest = corpus.load_manifest(manifest_path)
    prepared_dir = Path(prepared) if prepared else Path(manifest_path).parent
    vocab_path = prepared_dir / VOCAB_FILENAME
    if not vocab_path.exists():
        raise UsageError(
            f"no {VOCAB_FILENAME} in {prepared_dir}; run `jointgan prepare-data "
            f"--manifest {manifest_path} --out {prepared_dir}` first"
        )
    vocab = corpus.Vocabulary.load(vocab_path)
    meta_path = prepared_dir / META_FILENAME
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return manifest, vocab, meta


def _meta_t_max(meta: dict) -> int | None:
    return meta.get("vocab", {}).get("t_max")


# ---- subcommands ----


def cmd_make_fixture(args) -> int:
    out = resolve_out_dir(args.out, "fixture")
    manifest_path = synthetic.build_corpus(
        out,
        n_train=args.n_train,
        n_test=args.n_test,
        image_size=args.image_size,
        captions_per_image=args.captions_per_image,
        seed=args.seed,
    )
    print(manifest_path)
    return 0


def cmd_prepare_data(args) -> int:
    manifest = corpus.load_manifest(args.manifest)
    out = resolve_out_dir(args.out, "prepared")
    vocab = corpus.build_vocabulary(manifest, min_freq=args.min_freq)
    vocab.save(out / VOCAB_FILENAME)
    corpus.write_meta(
        out,
        manifest.image_size,
        manifest.captions_per_image,
        min_freq=args.min_freq,
        t_max=args.t_max,
    )
    write_snapshot(
        out,
        "prepare-data",
        {"manifest": str(args.manifest), "min_freq": args.min_freq, "t_max": args.t_max},
    )
    print(f"prepared {len(manifest)} records, vocabulary of {len(vocab)} tokens -> {out}")
    return 0


def cmd_pretrain_damsm(args) -> int:
    manifest, vocab, meta = _load_prepared(args.manifest, args.prepared)
    out = resolve_out_dir(args.out, "damsm")
    t_max = args.t_max or _meta_t_max(meta) or DEFAULT_T_MAX
    file_cfg = _load_config_file(args.config)
    if "text" in file_cfg:
        text_config = TextEncoderConfig(**file_cfg["text"])
    else:
        text_config = TextEncoderConfig(
            vocab_size=len(vocab),
            hidden_dim=args.feature_dim // 2,
            dropout=args.dropout,
        )
    if "image_encoder" in file_cfg:
        image_config = ImageEncoderConfig(**file_cfg["image_encoder"])
    else:
        image_config = ImageEncoderConfig(
            feature_dim=text_config.feature_dim, input_size=args.image_size
        )
    matching = DamsmConfig(**file_cfg.get("matching", {}))
    write_snapshot(
        out,
        "pretrain-damsm",
        {
            "manifest": str(args.manifest),
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "lr": args.lr,
            "seed": args.seed,
            "t_max": t_max,
            "text": asdict(text_config),
            "image_encoder": asdict(image_config),
            "matching": asdict(matching),
        },
    )
    text_path, image_path = pretrain_damsm(
        manifest,
        vocab,
        text_config,
        image_config,
        matching,
        epochs=args.epochs,
        out_dir=out,
        batch_size=args.batch_size,
        lr=args.lr,
        t_max=t_max,
        seed=args.seed,
        init_from=args.init_from,
    )
    print(f"wrote {text_path} and {image_path}")
    return 0


def cmd_train(args) -> int:
    manifest, vocab, meta = _load_prepared(args.manifest, args.prepared)
    if args.damsm is None and not args.from_scratch and args.resume is None:
        raise UsageError(
            "no matching-network checkpoint: pass --damsm DIR (from `jointgan "
            "pretrain-damsm`) or opt out with --from-scratch"
        )
    out = resolve_out_dir(args.out, "train")
    file_cfg = _load_config_file(args.config)
    if args.damsm is not None:
        # inherit encoder geometry from the pretrained matching network
        from .ckpt import load_payload

        text_cfg = load_payload(Path(args.damsm) / "text_encoder.pt", "text_encoder")["config"]
        image_cfg = load_payload(
            Path(args.damsm) / "image_encoder.pt", "damsm_image_encoder"
        )["config"]
        # dropout only regularizes pretraining; joint training runs without it
        text_cfg = dict(text_cfg, dropout=0.0)
        file_cfg.setdefault("text", text_cfg)
        file_cfg.setdefault("image_encoder", image_cfg)
        file_cfg.setdefault("generator", {}).setdefault(
            "text_dim", TextEncoderConfig(**text_cfg).feature_dim
        )
    overrides = {
        "mode": args.mode.replace("-", "_") if args.mode else None,
        "lam": args.lam,
        "seed": args.seed,
        "max_steps": args.steps,
        "batch_size": args.batch_size,
        "checkpoint_interval": args.checkpoint_interval,
        "t_max": args.t_max or _meta_t_max(meta),
        "scales": parse_scales(args.scales) if args.scales else None,
        "g_lr": args.g_lr,
        "d_lr": args.d_lr,
    }
    config = build_train_config(file_cfg, overrides, len(vocab))
    write_snapshot(
        out,
        "train",
        {
            "manifest": str(args.manifest),
            "damsm": str(args.damsm) if args.damsm else None,
            "resume": str(args.resume) if args.resume else None,
            **config_to_sections(config),
        },
    )
    final = trainer.train(
        config,
        manifest,
        vocab,
        out,
        damsm_dir=args.damsm,
        resume=args.resume,
        log_every=args.log_every,
    )
    print(final)
    return 0


def _read_captions(args) -> list[str]:
    captions = list(args.caption or [])
    if args.captions_file:
        path = Path(args.captions_file)
        if not path.exists():
            raise UsageError(f"captions file not found: {path}")
        captions.extend(
            line.strip() for line in path.read_text().splitlines() if line.strip()
        )
    if not captions:
        raise UsageError("no captions given; use --caption or --captions-file")
    return captions


def cmd_sample(args) -> int:
    captions = _read_captions(args)
    out = resolve_out_dir(args.out, "sample")
    write_snapshot(
        out,
        "sample",
        {
            "checkpoint": str(args.checkpoint),
            "captions": captions,
            "n_per_caption": args.n_per_caption,
            "seed": args.seed,
        },
    )
    written = trainer.sample(
        args.checkpoint,
        captions,
        n_per_caption=args.n_per_caption,
        seed=args.seed,
        out_dir=out,
        write_grid=not args.no_grid,
    )
    print(f"wrote {len(written)} files to {out}")
    return 0


def _build_backend(args, manifest, scale: int, out: Path) -> metrics.EmbeddingBackend:
    if args.backend == "colorstat":
        return metrics.ColorStatBackend()
    if args.backend_path:
        return metrics.load_toy_backend(args.backend_path)
    backend = metrics.train_toy_backend(
        manifest, scale, epochs=args.backend_epochs, seed=args.seed
    )
    metrics.save_toy_backend(backend, out / "toy_backend.pt")
    return backend


def cmd_evaluate(args) -> int:
    manifest = corpus.load_manifest(args.manifest)
    out = resolve_out_dir(args.out, "evaluate")
    bundle = trainer.load_bundle(args.checkpoint)
    scale = bundle.config.generator.stage_scales[-1]
    backend = _build_backend(args, manifest, scale, out)
    write_snapshot(
        out,
        "evaluate",
        {
            "checkpoint": str(args.checkpoint),
            "manifest": str(args.manifest),
            "backend": backend.name,
            "n_per_caption": args.n_per_caption,
            "n_splits": args.n_splits,
            "seed": args.seed,
        },
    )
    report = metrics.evaluate_checkpoint(
        args.checkpoint,
        manifest,
        out,
        backend,
        n_per_caption=args.n_per_caption,
        seed=args.seed,
        n_splits=args.n_splits,
        save_images=not args.no_save_images,
    )
    print(report.to_table())
    return 0


def cmd_export_attn(args) -> int:
    if args.out:
        out_path = Path(args.out)
    else:
        out_path = resolve_out_dir(None, "attn") / "attention.png"
    written = trainer.export_attention(
        args.checkpoint, args.caption, out_path, seed=args.seed
    )
    print(written)
    return 0


# ---- parser ----


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jointgan",
        description="Jointly trained text encoder and multi-stage text-to-image GAN.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-fixture", help="generate the synthetic shape corpus")
    p.add_argument("--out", help="output directory (default: $JOINTGAN_OUT_ROOT/fixture_<ts>)")
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-test", type=int, default=4)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--captions-per-image", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_fixture)

    p = sub.add_parser("prepare-data", help="validate a manifest and build the vocabulary")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="directory for vocab.json and dataset.meta")
    p.add_argument("--min-freq", type=int, default=DEFAULT_MIN_FREQ)
    p.add_argument("--t-max", type=int, default=DEFAULT_T_MAX)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("pretrain-damsm", help="pretrain the matching network encoders")
    p.add_argument("--manifest", required=True)
    p.add_argument("--prepared", help="directory from prepare-data (default: manifest dir)")
    p.add_argument("--out")
    p.add_argument("--config", help="TOML/JSON config with text/image_encoder/matching sections")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-max", type=int)
    p.add_argument("--feature-dim", type=int, default=256, help="joint text/image feature size")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--dropout", type=float, default=0.5, help="text embedding dropout")
    p.add_argument("--init-from", help="resume from a previous pretraining directory")
    p.set_defaults(func=cmd_pretrain_damsm)

    p = sub.add_parser("train", help="adversarial training of encoder and decoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--prepared")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--damsm", help="pretrain-damsm output directory")
    p.add_argument("--from-scratch", action="store_true", help="train without pretrained encoders")
    p.add_argument("--resume", help="checkpoint file to continue from")
    p.add_argument(
        "--mode", choices=["fully_trained", "fully-trained", "split"],
        help="fully_trained: text encoder learns with the decoder; split: frozen",
    )
    p.add_argument("--lambda", dest="lam", type=float, help=f"matching loss weight (default {DEFAULT_LAMBDA})")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--scales", help="comma-separated stage resolutions, e.g. 16,32,64")
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--t-max", type=int)
    p.add_argument("--g-lr", type=float)
    p.add_argument("--d-lr", type=float)
    p.add_argument("--log-every", type=int, help="print progress every N steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate images for captions from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--caption", action="append", help="repeatable")
    p.add_argument("--captions-file")
    p.add_argument("--n-per-caption", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--no-grid", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--n-per-caption", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backend", choices=["toycnn", "colorstat"], default="toycnn")
    p.add_argument("--backend-path", help="load a saved toy backend instead of training one")
    p.add_argument("--backend-epochs", type=int, default=40)
    p.add_argument("--n-splits", type=int, default=10)
    p.add_argument("--no-save-images", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-attn", help="render per-word attention maps for a caption")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--out", help="output PNG path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_export_attn)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, DatasetError, CheckpointMismatchError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 1 by contract
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
