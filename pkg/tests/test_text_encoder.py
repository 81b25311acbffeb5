import pytest
import torch

from jointgan.corpus import CaptionBatch, Vocabulary, encode_caption
from jointgan.errors import CheckpointMismatchError
from jointgan.text_encoder import (
    TextEncoder,
    TextEncoderConfig,
    load_encoder,
    save_encoder,
)

VOCAB = Vocabulary.from_captions(
    ["the woman has blond hair", "a man with black hair and glasses", "red circle"]
)


def _batch(texts, t_max=18):
    rows, lengths = [], []
    for text in texts:
        ids, n = encode_caption(VOCAB, text, t_max)
        rows.append(ids)
        lengths.append(n)
    return CaptionBatch(
        token_ids=torch.tensor(rows, dtype=torch.int64),
        lengths=torch.tensor(lengths, dtype=torch.int64),
        t_max=t_max,
    )


def _encoder(**kw):
    kw.setdefault("vocab_size", len(VOCAB))
    torch.manual_seed(0)
    return TextEncoder(TextEncoderConfig(**kw))


def test_config_validation():
    with pytest.raises(ValueError):
        TextEncoderConfig(vocab_size=0)
    with pytest.raises(ValueError):
        TextEncoderConfig(vocab_size=10, embed_dim=-1)
    with pytest.raises(ValueError):
        TextEncoderConfig(vocab_size=10, dropout=1.0)
    assert TextEncoderConfig(vocab_size=10, hidden_dim=128).feature_dim == 256


def test_output_shapes():
    enc = _encoder(hidden_dim=128)
    words, sentence = enc.encode(_batch(["the woman has blond hair", "red circle"]))
    assert words.features.shape == (2, 256, 18)
    assert words.mask.shape == (2, 18)
    assert words.mask.dtype == torch.bool
    assert sentence.vector.shape == (2, 256)


def test_mask_marks_real_positions():
    enc = _encoder()
    words, _ = enc.encode(_batch(["red circle", "the woman has blond hair"]))
    assert words.mask[0, :2].all() and not words.mask[0, 2:].any()
    assert words.mask[1, :5].all() and not words.mask[1, 5:].any()


def test_duplicated_caption_gives_identical_rows():
    enc = _encoder()
    enc.eval()
    words, sentence = enc.encode(_batch(["red circle", "red circle"]))
    assert torch.equal(words.features[0], words.features[1])
    assert torch.equal(sentence.vector[0], sentence.vector[1])


def test_batching_does_not_leak_across_samples():
    # each row must encode as if it were alone in the batch
    enc = _encoder()
    enc.eval()
    texts = ["red circle", "the woman has blond hair", "a man with black hair and glasses"]
    together_w, together_s = enc.encode(_batch(texts))
    for i, text in enumerate(texts):
        alone_w, alone_s = enc.encode(_batch([text]))
        assert torch.allclose(together_w.features[i], alone_w.features[0], atol=1e-6)
        assert torch.allclose(together_s.vector[i], alone_s.vector[0], atol=1e-6)


def test_pad_columns_are_zero():
    enc = _encoder()
    enc.eval()
    words, _ = enc.encode(_batch(["red circle"]))
    assert torch.equal(words.features[0, :, 2:], torch.zeros_like(words.features[0, :, 2:]))


def test_sentence_vector_ignores_extra_padding():
    enc = _encoder()
    enc.eval()
    _, short = enc.encode(_batch(["red circle"], t_max=4))
    _, long = enc.encode(_batch(["red circle"], t_max=18))
    assert torch.allclose(short.vector, long.vector, atol=1e-6)


def test_empty_caption_encodes_without_error():
    enc = _encoder()
    enc.eval()
    words, sentence = enc.encode(_batch(["", "red circle"]))
    assert torch.isfinite(sentence.vector).all()
    assert not words.mask[0].any()


def test_dropout_zero_is_deterministic_in_train_mode():
    enc = _encoder(dropout=0.0)
    enc.train()
    a, _ = enc.encode(_batch(["red circle"]))
    b, _ = enc.encode(_batch(["red circle"]))
    assert torch.equal(a.features, b.features)


def test_dropout_active_in_train_frozen_in_eval():
    enc = _encoder(dropout=0.5)
    enc.train()
    torch.manual_seed(1)
    a, _ = enc.encode(_batch(["the woman has blond hair"]))
    torch.manual_seed(2)
    b, _ = enc.encode(_batch(["the woman has blond hair"]))
    assert not torch.equal(a.features, b.features)
    enc.eval()
    c, _ = enc.encode(_batch(["the woman has blond hair"]))
    d, _ = enc.encode(_batch(["the woman has blond hair"]))
    assert torch.equal(c.features, d.features)


def test_gradients_reach_embedding_and_lstm():
    enc = _encoder()
    words, sentence = enc.encode(_batch(["red circle", "blond hair"]))
    loss = words.features.square().sum() + sentence.vector.square().sum()
    loss.backward()
    assert enc.embedding.weight.grad is not None
    assert enc.embedding.weight.grad.abs().sum() > 0
    assert enc.lstm.weight_ih_l0.grad.abs().sum() > 0


def test_embedding_finite_difference():
    # perturb one embedding entry; scalar loss must move by ~grad * eps
    enc = _encoder(embed_dim=16, hidden_dim=8)
    enc.double()
    enc.eval()
    batch = _batch(["red circle"])
    tgt_row = VOCAB.lookup("red")

    def scalar_loss():
        words, sentence = enc.encode(batch)
        return words.features.sum() + 0.5 * sentence.vector.sum()

    loss = scalar_loss()
    loss.backward()
    grad = enc.embedding.weight.grad[tgt_row, 0].item()

    eps = 1e-3
    with torch.no_grad():
        enc.embedding.weight[tgt_row, 0] += eps
        up = scalar_loss().item()
        enc.embedding.weight[tgt_row, 0] -= 2 * eps
        down = scalar_loss().item()
    fd = (up - down) / (2 * eps)
    assert abs(grad - fd) <= 1e-2 * max(abs(fd), 1e-8)


def test_save_load_roundtrip(tmp_path):
    enc = _encoder()
    save_encoder(enc, tmp_path / "enc.pt")
    again = load_encoder(tmp_path / "enc.pt")
    for a, b in zip(enc.state_dict().values(), again.state_dict().values()):
        assert torch.equal(a, b)


def test_load_rejects_mismatched_vocab_size(tmp_path):
    enc = _encoder()
    save_encoder(enc, tmp_path / "enc.pt")
    wrong = TextEncoderConfig(vocab_size=len(VOCAB) + 5)
    with pytest.raises(CheckpointMismatchError) as err:
        load_encoder(tmp_path / "enc.pt", expected=wrong)
    # message names both embedding shapes
    assert str(len(VOCAB)) in str(err.value)
    assert str(len(VOCAB) + 5) in str(err.value)


def test_load_adopts_callers_dropout(tmp_path):
    # dropout is a training-mode property, not part of the stored geometry
    enc = _encoder(dropout=0.5)
    save_encoder(enc, tmp_path / "enc.pt")
    wanted = TextEncoderConfig(vocab_size=len(VOCAB), dropout=0.0)
    again = load_encoder(tmp_path / "enc.pt", expected=wanted)
    assert again.config.dropout == 0.0
    for a, b in zip(enc.state_dict().values(), again.state_dict().values()):
        assert torch.equal(a, b)
