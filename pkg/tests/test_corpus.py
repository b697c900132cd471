import dataclasses
import json

import numpy as np
import pytest

from moe_route import autodiff as ad
from moe_route.autodiff import Tensor
from moe_route.corpus import (CorpusConfig, DYSARTHRIC, SEVERITIES, class_space,
                              generate_corpus, group_label, load_corpus)
from moe_route.losses import ctc_min_frames
from moe_route.optim import Adam

SMALL = CorpusConfig(speakers_per_cell=1, vocab_size=10, alphabet_size=6,
                     train_per_speaker=4, adapt_per_speaker=2, test_per_speaker=2,
                     feature_dim=12)


def test_same_seed_is_byte_identical(tmp_path):
    a = generate_corpus(SMALL, 7, tmp_path / "a")
    b = generate_corpus(SMALL, 7, tmp_path / "b")
    assert (tmp_path / "a" / "manifest.txt").read_bytes() == \
           (tmp_path / "b" / "manifest.txt").read_bytes()
    for u, v in zip(a.utterances, b.utterances):
        assert u.utt_id == v.utt_id
        assert np.array_equal(u.features, v.features)
    c = generate_corpus(SMALL, 8, tmp_path / "c")
    assert not np.array_equal(a.utterances[0].features, c.utterances[0].features)


def test_zero_distortion_features_equal_prototypes(tmp_path):
    cfg = dataclasses.replace(
        SMALL,
        noise_scales={s: 0.0 for s in SEVERITIES},
        blur_widths={s: 1 for s in SEVERITIES},
        stretch_factors={s: 1.0 for s in SEVERITIES},
        gender_shift_scale=0.0, speaker_offset_scale=0.0, stretch_jitter=0.0)
    corpus = generate_corpus(cfg, 3, tmp_path / "clean")
    prototypes = np.random.default_rng([3, 0]).standard_normal(
        (cfg.alphabet_size, cfg.symbol_frames, cfg.feature_dim))
    # rebuild the vocab the generator derives from the seed
    from moe_route.corpus import _build_vocab
    vocab = _build_vocab(cfg, np.random.default_rng([3, 1]))
    for u in corpus.utterances[:10]:
        expected = np.concatenate(
            [prototypes[list(vocab[t])].reshape(-1, cfg.feature_dim)
             for t in u.tokens], axis=0)
        assert np.array_equal(u.features, expected)


def test_control_speakers_train_only_and_blocks_disjoint(tmp_path):
    corpus = generate_corpus(SMALL, 1, tmp_path / "c")
    seen = {}
    for u in corpus.utterances:
        assert u.utt_id not in seen
        seen[u.utt_id] = u.split
        if u.severity == "Control":
            assert u.split == "train"
    for sid in corpus.test_speakers():
        splits = {u.split for u in corpus.utterances if u.speaker_id == sid}
        assert splits == {"train", "adapt", "test"}
    assert len(corpus.test_speakers()) == len(DYSARTHRIC) * 2  # per-gender cells


def test_frame_counts_respect_ctc_minimum(tmp_path):
    corpus = generate_corpus(SMALL, 2, tmp_path / "c")
    for u in corpus.utterances:
        assert u.features.shape[0] >= ctc_min_frames(u.tokens)
        assert np.all(np.isfinite(u.features))
        assert u.duration == u.features.shape[0] / SMALL.frame_rate


def test_roundtrip_load_equals_generated(tmp_path):
    gen = generate_corpus(SMALL, 5, tmp_path / "c")
    loaded = load_corpus(tmp_path / "c" / "manifest.txt")
    assert loaded.seed == 5
    assert loaded.config == gen.config
    assert len(loaded.utterances) == len(gen.utterances)
    for u, v in zip(gen.utterances, loaded.utterances):
        assert (u.utt_id, u.speaker_id, u.severity, u.gender, u.split, u.tokens) == \
               (v.utt_id, v.speaker_id, v.severity, v.gender, v.split, v.tokens)
        assert np.array_equal(u.features, v.features)


def test_split_filtering(tmp_path):
    corpus = generate_corpus(SMALL, 5, tmp_path / "c")
    test = corpus.split("test")
    assert test and all(u.split == "test" for u in test)
    counts = {s: len(corpus.split(s)) for s in ("train", "adapt", "test")}
    assert counts["train"] == 8 * 4 + 2 * 8
    assert counts["adapt"] == 8 * 2
    assert counts["test"] == 8 * 2


def test_corrupted_feature_file_rejected(tmp_path):
    generate_corpus(SMALL, 6, tmp_path / "c")
    manifest = tmp_path / "c" / "manifest.txt"
    victim = next((tmp_path / "c" / "features").iterdir())
    raw = bytearray(victim.read_bytes())
    raw[-1] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match=victim.name):
        load_corpus(manifest)


def test_missing_feature_file_rejected(tmp_path):
    generate_corpus(SMALL, 6, tmp_path / "c")
    victim = next((tmp_path / "c" / "features").iterdir())
    victim.unlink()
    with pytest.raises(ValueError, match=victim.name):
        load_corpus(tmp_path / "c" / "manifest.txt")


def test_config_validation():
    with pytest.raises(ValueError):
        CorpusConfig(speakers_per_cell=0).validate()
    with pytest.raises(ValueError):
        CorpusConfig(vocab_size=1).validate()


def test_class_spaces():
    assert class_space(None, "severity") == list(SEVERITIES)
    sg = class_space(None, "severity_gender")
    assert len(sg) == 10 and "VL/F" in sg
    with pytest.raises(ValueError):
        class_space(None, "nonsense")


def test_linear_probe_separates_control_from_vl(tmp_path):
    """Pooled features of Control vs VL speakers must be linearly separable;
    this gates that severity distortions are learnably distinct."""
    cfg = CorpusConfig(speakers_per_cell=2, vocab_size=10, alphabet_size=6,
                       train_per_speaker=10, adapt_per_speaker=2, test_per_speaker=2,
                       feature_dim=12)
    corpus = generate_corpus(cfg, 11, tmp_path / "c")
    utts = [u for u in corpus.utterances if u.severity in ("Control", "VL")]
    feats = np.stack([np.concatenate([u.features.mean(0), u.features.std(0)])
                      for u in utts])
    labels = np.array([1.0 if u.severity == "VL" else 0.0 for u in utts])
    mean, std = feats.mean(0), feats.std(0) + 1e-8
    x_all = (feats - mean) / std
    n = len(utts)
    d = x_all.shape[1]
    order = np.random.default_rng(0).permutation(n)
    train_idx, held_idx = order[: int(0.7 * n)], order[int(0.7 * n):]
    w = Tensor(np.zeros((d, 2)), name="w")
    b = Tensor(np.zeros(2), name="b")
    opt = Adam({"w": w, "b": b}, lr=5e-2)
    xt = Tensor(x_all[train_idx])
    onehot = Tensor(np.eye(2)[labels[train_idx].astype(int)])
    for _ in range(200):
        logits = ad.add(ad.matmul(xt, w), b)
        loss = ad.mul(ad.tsum(ad.mul(ad.log_softmax(logits, axis=1), onehot)),
                      -1.0 / len(train_idx))
        opt.step(ad.gradients(loss, {"w": w, "b": b}))
    held_logits = x_all[held_idx] @ w.data + b.data
    acc = (held_logits.argmax(axis=1) == labels[held_idx]).mean()
    assert acc > 0.9
