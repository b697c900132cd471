"""Synthetic dysarthric-style corpus: speakers with severity/gender
attributes render token sequences as distorted feature trajectories.

Each alphabet symbol owns a prototype feature segment; tokens are short
symbol strings; utterances concatenate token prototypes and then apply
severity-scaled noise, temporal smearing and stretch, a gender channel
shift, and a per-speaker offset. Everything derives deterministically from
the generation seed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor_io

SEVERITIES = ("VL", "L", "M", "H", "Control")
GENDERS = ("F", "M")
DYSARTHRIC = ("VL", "L", "M", "H")


def _default_noise():
    return {"Control": 0.0, "H": 0.1, "M": 0.2, "L": 0.4, "VL": 0.8}


def _default_blur():
    return {"Control": 1, "H": 2, "M": 3, "L": 4, "VL": 5}


def _default_stretch():
    return {"Control": 1.0, "H": 1.1, "M": 1.25, "L": 1.45, "VL": 1.7}


@dataclass(frozen=True)
class CorpusConfig:
    speakers_per_cell: int = 2
    vocab_size: int = 30
    alphabet_size: int = 12
    symbol_frames: int = 2
    token_symbols_min: int = 2
    token_symbols_max: int = 3
    utter_tokens_min: int = 3
    utter_tokens_max: int = 5
    train_per_speaker: int = 20
    adapt_per_speaker: int = 10
    test_per_speaker: int = 10
    feature_dim: int = 64
    frame_rate: int = 100
    noise_scales: dict = field(default_factory=_default_noise)
    blur_widths: dict = field(default_factory=_default_blur)
    stretch_factors: dict = field(default_factory=_default_stretch)
    gender_shift_scale: float = 0.35
    speaker_offset_scale: float = 0.25
    speaker_offset_max_norm: float = 4.0
    stretch_jitter: float = 0.05

    def validate(self) -> "CorpusConfig":
        if self.speakers_per_cell < 1:
            raise ValueError("speakers_per_cell must be >= 1 (no empty cells)")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.alphabet_size < 2 or self.symbol_frames < 1:
            raise ValueError("alphabet must have >= 2 symbols of >= 1 frame")
        return self


@dataclass
class SpeakerProfile:
    speaker_id: str
    severity: str
    gender: str
    offset: np.ndarray | None = None
    stretch: float = 1.0


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    severity: str
    gender: str
    split: str
    tokens: tuple
    features: np.ndarray
    duration: float  # seconds, frames / frame_rate


class Corpus:
    def __init__(self, config: CorpusConfig, seed: int, speakers: dict, utterances: list):
        self.config = config
        self.seed = seed
        self.speakers = speakers
        self.utterances = utterances

    def split(self, name: str) -> list:
        return [u for u in self.utterances if u.split == name]

    def by_speaker(self, split: str | None = None) -> dict:
        out: dict = {}
        for u in self.utterances:
            if split is None or u.split == split:
                out.setdefault(u.speaker_id, []).append(u)
        return out

    def test_speakers(self) -> list:
        return sorted({u.speaker_id for u in self.utterances if u.split == "test"})

    def train_speakers(self) -> list:
        return sorted({u.speaker_id for u in self.utterances if u.split == "train"})


def class_space(corpus_or_config, grouping: str, speakers=None) -> list:
    """Ordered label space for a domain-knowledge granularity."""
    if grouping == "severity":
        return list(SEVERITIES)
    if grouping == "severity_gender":
        return [f"{s}/{g}" for s in SEVERITIES for g in GENDERS]
    if grouping == "speaker":
        if speakers is None:
            if not isinstance(corpus_or_config, Corpus):
                raise ValueError("speaker grouping needs a corpus or speaker list")
            speakers = corpus_or_config.train_speakers()
        return list(speakers)
    raise ValueError(f"unknown grouping '{grouping}'")


def group_name(severity: str, gender: str, speaker_id: str, grouping: str) -> str:
    if grouping == "severity":
        return severity
    if grouping == "severity_gender":
        return f"{severity}/{gender}"
    if grouping == "speaker":
        return speaker_id
    raise ValueError(f"unknown grouping '{grouping}'")


def group_label(utt: Utterance, grouping: str, space: list) -> int:
    return space.index(group_name(utt.severity, utt.gender, utt.speaker_id, grouping))


def _build_vocab(config: CorpusConfig, rng) -> list:
    seen = set()
    vocab = []
    while len(vocab) < config.vocab_size:
        length = int(rng.integers(config.token_symbols_min, config.token_symbols_max + 1))
        syms = tuple(int(s) for s in rng.integers(0, config.alphabet_size, size=length))
        if syms not in seen:
            seen.add(syms)
            vocab.append(syms)
    return vocab


def _moving_average(x: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return x
    lead = width // 2
    pad = np.pad(x, ((lead, width - 1 - lead), (0, 0)), mode="edge")
    c = np.cumsum(pad, axis=0)
    c = np.vstack([np.zeros((1, x.shape[1])), c])
    return (c[width:] - c[:-width]) / width


def _gender_transform(config: CorpusConfig, gender: str):
    f = config.feature_dim
    scale = config.gender_shift_scale
    pattern = np.cos(2.0 * np.pi * np.arange(f) / f)
    if scale == 0.0:
        return np.arange(f), np.zeros(f)
    if gender == "F":
        perm = np.arange(f)
        half = (f // 2) * 2
        perm[0:half:2], perm[1:half:2] = np.arange(1, half, 2), np.arange(0, half, 2)
        return perm, pattern * scale
    return np.arange(f), -pattern * scale


def render_utterance(tokens, vocab, prototypes, profile: SpeakerProfile,
                     config: CorpusConfig, rng) -> np.ndarray:
    base = np.concatenate([prototypes[list(vocab[t])].reshape(-1, config.feature_dim)
                           for t in tokens], axis=0)
    if profile.stretch != 1.0:
        t_out = max(base.shape[0], int(round(base.shape[0] * profile.stretch)))
        idx = (np.arange(t_out) * base.shape[0]) // t_out
        base = base[idx]
    base = _moving_average(base, int(config.blur_widths[profile.severity]))
    perm, bias = _gender_transform(config, profile.gender)
    base = base[:, perm] + bias
    if profile.offset is not None:
        base = base + profile.offset
    sigma = float(config.noise_scales[profile.severity])
    if sigma > 0:
        base = base + rng.normal(0.0, sigma, size=base.shape)
    return base


def generate_corpus(config: CorpusConfig, seed: int, out_dir) -> Corpus:
    """Generate, write manifest plus feature files, and return the corpus.

    Control speakers contribute training data only; dysarthric speakers get
    disjoint train / adaptation / test blocks, mirroring a block-structured
    test design where every test speaker also has an adaptation block.
    """
    config = config.validate()
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)

    prototypes = np.random.default_rng([seed, 0]).standard_normal(
        (config.alphabet_size, config.symbol_frames, config.feature_dim))
    vocab = _build_vocab(config, np.random.default_rng([seed, 1]))
    spk_rng = np.random.default_rng([seed, 2])

    speakers: dict = {}
    for severity in SEVERITIES:
        for gender in GENDERS:
            for k in range(config.speakers_per_cell):
                sid = f"{severity}{gender}{k:02d}"
                offset = spk_rng.standard_normal(config.feature_dim) * config.speaker_offset_scale
                norm = float(np.linalg.norm(offset))
                if norm > config.speaker_offset_max_norm > 0:
                    offset *= config.speaker_offset_max_norm / norm
                stretch = float(config.stretch_factors[severity])
                if config.stretch_jitter > 0:
                    stretch *= 1.0 + float(spk_rng.uniform(-config.stretch_jitter,
                                                           config.stretch_jitter))
                speakers[sid] = SpeakerProfile(sid, severity, gender, offset, stretch)

    utterances = []
    checksums = []
    for spk_index, sid in enumerate(sorted(speakers)):
        profile = speakers[sid]
        if profile.severity == "Control":
            blocks = [("train", config.train_per_speaker + config.adapt_per_speaker
                       + config.test_per_speaker)]
        else:
            blocks = [("train", config.train_per_speaker),
                      ("adapt", config.adapt_per_speaker),
                      ("test", config.test_per_speaker)]
        counter = 0
        for split, count in blocks:
            for _ in range(count):
                rng = np.random.default_rng([seed, 3, spk_index, counter])
                n_tokens = int(rng.integers(config.utter_tokens_min,
                                            config.utter_tokens_max + 1))
                tokens = tuple(int(t) for t in rng.integers(0, config.vocab_size,
                                                            size=n_tokens))
                feats = render_utterance(tokens, vocab, prototypes, profile, config, rng)
                utt_id = f"{sid}_{counter:03d}"
                raw = tensor_io.tensor_bytes({"features": feats})
                rel = f"features/{utt_id}.bin"
                (out_dir / rel).write_bytes(raw)
                checksums.append((utt_id, rel, tensor_io.sha256_hex(raw)))
                utterances.append(Utterance(
                    utt_id=utt_id, speaker_id=sid, severity=profile.severity,
                    gender=profile.gender, split=split, tokens=tokens,
                    features=feats, duration=feats.shape[0] / config.frame_rate))
                counter += 1

    lines = ["# moe-route corpus manifest",
             f"# seed: {seed}",
             "# config: " + json.dumps(asdict(config), sort_keys=True)]
    for utt_id, rel, digest in checksums:
        lines.append(f"# sha256: {rel} {digest}")
    for u in utterances:
        tokens = " ".join(str(t) for t in u.tokens)
        lines.append(f"{u.utt_id}|{u.speaker_id}|{u.severity}|{u.gender}|{u.split}|"
                     f"{tokens}|features/{u.utt_id}.bin|{u.features.shape[0]}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
    return Corpus(config, seed, speakers, utterances)


def load_corpus(manifest_path) -> Corpus:
    """Load a generated corpus, verifying per-file checksums."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    seed = None
    config = None
    checksums: dict = {}
    records = []
    for line in manifest_path.read_text().splitlines():
        if line.startswith("# seed:"):
            seed = int(line.split(":", 1)[1])
        elif line.startswith("# config:"):
            config = CorpusConfig(**json.loads(line.split(":", 1)[1]))
        elif line.startswith("# sha256:"):
            rel, digest = line.split(":", 1)[1].split()
            checksums[rel] = digest
        elif line.startswith("#") or not line.strip():
            continue
        else:
            records.append(line)
    if config is None or seed is None:
        raise ValueError(f"manifest missing seed/config headers: {manifest_path}")

    speakers: dict = {}
    utterances = []
    for line in records:
        parts = line.split("|")
        if len(parts) != 8:
            raise ValueError(f"malformed manifest record: {line!r}")
        utt_id, sid, severity, gender, split, token_field, rel, frames = parts
        feature_path = root / rel
        if not feature_path.exists():
            raise ValueError(f"missing feature file: {feature_path}")
        raw = feature_path.read_bytes()
        expected = checksums.get(rel)
        if expected is None or tensor_io.sha256_hex(raw) != expected:
            raise ValueError(f"checksum mismatch for feature file: {feature_path}")
        feats = tensor_io.load_tensors(feature_path)["features"]
        if feats.shape[0] != int(frames):
            raise ValueError(f"frame count mismatch for {feature_path}")
        tokens = tuple(int(t) for t in token_field.split())
        if sid not in speakers:
            speakers[sid] = SpeakerProfile(sid, severity, gender)
        utterances.append(Utterance(
            utt_id=utt_id, speaker_id=sid, severity=severity, gender=gender,
            split=split, tokens=tokens, features=feats,
            duration=feats.shape[0] / config.frame_rate))
    return Corpus(config, seed, speakers, utterances)
