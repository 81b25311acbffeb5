import json
import math

import pytest
import torch

from jointgan.damsm import (
    DamsmConfig,
    ImageEncoder,
    ImageEncoderConfig,
    ImageTextFeatures,
    damsm_loss,
    damsm_loss_terms,
    load_image_encoder,
    matching_score,
    pretrain_damsm,
    save_image_encoder,
)
from jointgan.errors import CheckpointMismatchError
from jointgan.text_encoder import SentenceVector, TextEncoder, TextEncoderConfig, WordFeatures

LN2 = 0.6931471805599453


def _words(features, lengths):
    t = features.shape[2]
    mask = torch.zeros(features.shape[0], t, dtype=torch.bool)
    for i, n in enumerate(lengths):
        mask[i, :n] = True
    return WordFeatures(features=features, mask=mask)


def _aligned_features(batch=4, dim=8, t=3, regions=2, noise=0.0, seed=0):
    """Per-pair distinctive directions; words/sentence copy the image features."""
    g = torch.Generator().manual_seed(seed)
    directions = torch.eye(dim)[:batch]
    region = directions.unsqueeze(2).expand(batch, dim, regions).clone()
    words = directions.unsqueeze(2).expand(batch, dim, t).clone()
    if noise:
        region = region + noise * torch.randn(region.shape, generator=g)
        words = words + noise * torch.randn(words.shape, generator=g)
    return ImageTextFeatures(
        region_features=region,
        global_image_feature=directions.clone(),
        words=_words(words, [t] * batch),
        sentence=SentenceVector(directions.clone()),
    )


# ---- image encoder ----


def test_image_encoder_region_grid_shapes():
    enc = ImageEncoder(ImageEncoderConfig(feature_dim=32, input_size=64, base_channels=8))
    regions, global_feat = enc(torch.randn(2, 3, 64, 64))
    assert regions.shape == (2, 32, 16)  # (64/16)^2 regions
    assert global_feat.shape == (2, 32)


def test_image_encoder_full_scale_grid():
    cfg = ImageEncoderConfig(feature_dim=16, input_size=256, base_channels=4)
    assert cfg.grid_size == 16
    assert cfg.region_count == 256
    enc = ImageEncoder(cfg)
    regions, _ = enc(torch.randn(4, 3, 256, 256))
    assert regions.shape == (4, 16, 256)


def test_image_encoder_zero_image_finite():
    enc = ImageEncoder(ImageEncoderConfig(feature_dim=16, input_size=32, base_channels=4))
    enc.eval()
    regions, global_feat = enc(torch.zeros(1, 3, 32, 32))
    assert torch.isfinite(regions).all()
    assert torch.isfinite(global_feat).all()


def test_image_encoder_duplicated_rows_duplicate_features():
    enc = ImageEncoder(ImageEncoderConfig(feature_dim=16, input_size=32, base_channels=4))
    enc.eval()
    img = torch.randn(1, 3, 32, 32)
    regions, global_feat = enc(torch.cat([img, img]))
    assert torch.allclose(regions[0], regions[1], atol=1e-6)
    assert torch.allclose(global_feat[0], global_feat[1], atol=1e-6)


def test_image_encoder_rejects_wrong_input_size():
    enc = ImageEncoder(ImageEncoderConfig(input_size=64))
    with pytest.raises(ValueError, match="64x64"):
        enc(torch.randn(1, 3, 32, 32))


def test_image_encoder_config_validation():
    with pytest.raises(ValueError):
        ImageEncoderConfig(input_size=24)
    with pytest.raises(ValueError):
        ImageEncoderConfig(input_size=0)
    with pytest.raises(ValueError):
        ImageEncoderConfig(feature_dim=-1)


def test_image_encoder_save_load(tmp_path):
    enc = ImageEncoder(ImageEncoderConfig(feature_dim=16, input_size=32, base_channels=4))
    save_image_encoder(enc, tmp_path / "img.pt")
    again = load_image_encoder(tmp_path / "img.pt", expected=enc.config)
    for a, b in zip(enc.state_dict().values(), again.state_dict().values()):
        assert torch.equal(a, b)
    with pytest.raises(CheckpointMismatchError):
        load_image_encoder(tmp_path / "img.pt", expected=ImageEncoderConfig(feature_dim=8, input_size=32))


# ---- matching score ----


def test_matching_score_shape_and_pairing_convention():
    feats = _aligned_features(batch=3, dim=4, t=2, regions=1)
    s = matching_score(feats.words, feats.region_features, gamma1=5.0, gamma2=5.0)
    assert s.shape == (3, 3)


def test_matched_pairs_beat_mismatched():
    feats = _aligned_features(batch=3, dim=4, t=2, regions=1)
    s = matching_score(feats.words, feats.region_features, gamma1=5.0, gamma2=5.0)
    for i in range(3):
        for j in range(3):
            if i != j:
                assert s[i, i] > s[i, j]
                assert s[j, j] > s[i, j]


def test_smooth_max_approaches_best_word_similarity():
    # single region: attention is trivial, relevance = cos(word, region)
    torch.manual_seed(3)
    region = torch.randn(1, 4, 1)
    words = _words(torch.randn(1, 4, 3), [3])
    rel = torch.cosine_similarity(words.features, region.expand(1, 4, 3), dim=1)
    best = rel.max().item()
    g2 = 1e4
    score = matching_score(words, region, gamma1=5.0, gamma2=g2)[0, 0].item()
    assert score >= best - 1e-9
    assert score <= best + math.log(3) / g2 + 1e-9


def test_moderate_gamma2_is_log_sum_exp_average():
    # same single-region setup, hand-computed LSE aggregation
    torch.manual_seed(4)
    region = torch.randn(1, 4, 1)
    words = _words(torch.randn(1, 4, 3), [3])
    rel = torch.cosine_similarity(words.features, region.expand(1, 4, 3), dim=1)
    expected = torch.logsumexp(5.0 * rel, dim=1) / 5.0
    score = matching_score(words, region, gamma1=5.0, gamma2=5.0)
    assert torch.allclose(score[0, 0], expected[0], atol=1e-6)


def test_all_zero_words_give_finite_scores():
    words = _words(torch.zeros(2, 4, 3), [3, 3])
    region = torch.zeros(2, 4, 2)
    s = matching_score(words, region, gamma1=5.0, gamma2=5.0)
    assert torch.isfinite(s).all()


def test_matching_score_ignores_extra_padding():
    torch.manual_seed(5)
    real = torch.randn(2, 4, 2)
    region = torch.randn(2, 4, 3)
    short = _words(real, [2, 2])
    padded = _words(torch.cat([real, torch.zeros(2, 4, 3)], dim=2), [2, 2])
    a = matching_score(short, region, gamma1=5.0, gamma2=5.0)
    b = matching_score(padded, region, gamma1=5.0, gamma2=5.0)
    assert torch.equal(a, b)


# ---- loss ----


def test_loss_requires_two_pairs():
    feats = _aligned_features(batch=1, dim=4, t=2, regions=1)
    with pytest.raises(ValueError, match="got 1"):
        damsm_loss_terms(feats, DamsmConfig())


def test_two_identical_pairs_give_ln2_per_term():
    # indistinguishable negatives: softmax over two equal scores
    one = torch.randn(1, 6, 3, generator=torch.Generator().manual_seed(6))
    region = torch.randn(1, 6, 2, generator=torch.Generator().manual_seed(7))
    glob = torch.randn(1, 6, generator=torch.Generator().manual_seed(8))
    feats = ImageTextFeatures(
        region_features=region.expand(2, -1, -1).clone(),
        global_image_feature=glob.expand(2, -1).clone(),
        words=_words(one.expand(2, -1, -1).clone(), [3, 3]),
        sentence=SentenceVector(glob.expand(2, -1).clone()),
    )
    terms = damsm_loss_terms(feats, DamsmConfig())
    assert len(terms) == 4
    for value in terms.values():
        assert abs(float(value) - LN2) <= 1e-6


def test_perfect_alignment_beats_shuffled_pairing():
    feats = _aligned_features(batch=4, dim=8, t=3, regions=2, noise=0.05)
    aligned = float(damsm_loss(feats, DamsmConfig()))
    rolled = ImageTextFeatures(
        region_features=feats.region_features.roll(1, dims=0),
        global_image_feature=feats.global_image_feature.roll(1, dims=0),
        words=feats.words,
        sentence=feats.sentence,
    )
    shuffled = float(damsm_loss(rolled, DamsmConfig()))
    assert aligned < shuffled


def test_loss_weights_scale_terms():
    feats = _aligned_features(batch=3, dim=8, t=2, regions=2, noise=0.1)
    terms = damsm_loss_terms(feats, DamsmConfig())
    word = float(terms["word_caption_given_image"] + terms["word_image_given_caption"])
    sent = float(terms["sent_caption_given_image"] + terms["sent_image_given_caption"])
    total = float(damsm_loss(feats, DamsmConfig(word_weight=2.0, sentence_weight=0.5)))
    assert abs(total - (2.0 * word + 0.5 * sent)) <= 1e-6


def test_config_rejects_nonpositive_gammas():
    with pytest.raises(ValueError):
        DamsmConfig(gamma1=0.0)
    with pytest.raises(ValueError):
        DamsmConfig(gamma3=-1.0)


def test_loss_gradients_match_central_differences():
    # leaf tensors in double precision; a handful of entries per input
    torch.manual_seed(9)
    dim, t, batch, regions = 8, 3, 2, 4
    leaves = {
        "words": torch.randn(batch, dim, t, dtype=torch.float64, requires_grad=True),
        "regions": torch.randn(batch, dim, regions, dtype=torch.float64, requires_grad=True),
        "global": torch.randn(batch, dim, dtype=torch.float64, requires_grad=True),
        "sentence": torch.randn(batch, dim, dtype=torch.float64, requires_grad=True),
    }
    config = DamsmConfig()

    def loss_value():
        feats = ImageTextFeatures(
            region_features=leaves["regions"],
            global_image_feature=leaves["global"],
            words=_words(leaves["words"], [t] * batch),
            sentence=SentenceVector(leaves["sentence"]),
        )
        return damsm_loss(feats, config)

    loss = loss_value()
    loss.backward()

    h = 1e-5
    for name, leaf in leaves.items():
        flat = leaf.detach().view(-1)
        grad = leaf.grad.view(-1)
        for k in range(0, flat.numel(), max(1, flat.numel() // 4)):
            orig = flat[k].item()
            with torch.no_grad():
                flat[k] = orig + h
                up = float(loss_value())
                flat[k] = orig - h
                down = float(loss_value())
                flat[k] = orig
            fd = (up - down) / (2 * h)
            rel = abs(grad[k].item() - fd) / max(abs(fd), 1e-8)
            assert rel <= 1e-2, f"{name}[{k}]: analytic {grad[k].item():.3e} vs fd {fd:.3e}"


# ---- pretraining ----


def _pretrain_configs(vocab):
    text = TextEncoderConfig(vocab_size=len(vocab), embed_dim=16, hidden_dim=16, dropout=0.0)
    image = ImageEncoderConfig(feature_dim=32, input_size=16, base_channels=8)
    return text, image


def test_pretrain_zero_epochs_saves_initialization(corpus16, tmp_path):
    manifest, vocab, _ = corpus16
    text_cfg, image_cfg = _pretrain_configs(vocab)
    pretrain_damsm(
        manifest, vocab, text_cfg, image_cfg, DamsmConfig(),
        epochs=0, out_dir=tmp_path, seed=3,
    )
    torch.manual_seed(3)
    ref_text = TextEncoder(text_cfg)
    ref_image = ImageEncoder(image_cfg)
    from jointgan.text_encoder import load_encoder

    saved_text = load_encoder(tmp_path / "text_encoder.pt")
    saved_image = load_image_encoder(tmp_path / "image_encoder.pt")
    for a, b in zip(ref_text.state_dict().values(), saved_text.state_dict().values()):
        assert torch.equal(a, b)
    for a, b in zip(ref_image.state_dict().values(), saved_image.state_dict().values()):
        assert torch.equal(a, b)


def test_pretrain_loss_decreases_over_200_epochs(corpus16, tmp_path):
    manifest, vocab, _ = corpus16
    text_cfg, image_cfg = _pretrain_configs(vocab)
    pretrain_damsm(
        manifest, vocab, text_cfg, image_cfg, DamsmConfig(),
        epochs=200, out_dir=tmp_path, batch_size=4, seed=0,
    )
    lines = [json.loads(l) for l in (tmp_path / "damsm_log.jsonl").read_text().splitlines()]
    assert len(lines) == 200
    assert all(math.isfinite(rec["loss"]) for rec in lines)
    assert lines[-1]["loss"] < lines[0]["loss"]


def test_pretrain_resume_continues_without_spike(corpus16, tmp_path):
    manifest, vocab, _ = corpus16
    text_cfg, image_cfg = _pretrain_configs(vocab)
    first = tmp_path / "first"
    pretrain_damsm(
        manifest, vocab, text_cfg, image_cfg, DamsmConfig(),
        epochs=60, out_dir=first, batch_size=4, seed=0,
    )
    first_log = [json.loads(l) for l in (first / "damsm_log.jsonl").read_text().splitlines()]

    resumed = tmp_path / "resumed"
    pretrain_damsm(
        manifest, vocab, text_cfg, image_cfg, DamsmConfig(),
        epochs=5, out_dir=resumed, batch_size=4, seed=1, init_from=first,
    )
    resumed_log = [json.loads(l) for l in (resumed / "damsm_log.jsonl").read_text().splitlines()]
    # picks up near the saved level, far below a fresh start
    assert resumed_log[0]["loss"] < first_log[0]["loss"]


def test_pretrain_rejects_mismatched_feature_dims(corpus16, tmp_path):
    manifest, vocab, _ = corpus16
    text_cfg, _ = _pretrain_configs(vocab)
    bad_image = ImageEncoderConfig(feature_dim=64, input_size=16, base_channels=8)
    with pytest.raises(ValueError, match="feature_dim"):
        pretrain_damsm(
            manifest, vocab, text_cfg, bad_image, DamsmConfig(),
            epochs=1, out_dir=tmp_path,
        )
