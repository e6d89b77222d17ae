"""Acoustic frontend and the synthetic desk-scale task.

Real path: waveform -> 40-channel log-Mel filterbank (25 ms window, 10 ms
hop) -> per-speaker normalization -> optional SpecAugment masking.

Synthetic path: each source symbol owns a frozen Gaussian prototype
vector; an utterance is rendered as, per symbol, a run of 2..4 noisy
copies of its prototype (variable duration), so frame-level content
recovers the symbol sequence by nearest prototype when the noise is off.
Words are separated by short runs of a dedicated silence prototype (the
pause analogue) so that word boundaries are observable in the signal;
silence carries no phone label. Phone targets are the symbols, optionally
suffixed with their position in the word (begin / middle / end /
standalone); translation targets apply a deterministic per-symbol mapping
with an adjacent swap inside each word, making the task translation-like
rather than a plain copy.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import binio
from .ctc import Vocabulary
from .errors import DataError, InvalidInputError
from .model import TargetVocabulary

LOG_FLOOR = 1e-10


@dataclass
class FeatureSequence:
    """T x F frame matrix with timing metadata."""

    frames: np.ndarray
    frame_period_ms: float = 10.0
    speaker_id: str | None = None

    def __post_init__(self):
        arr = np.asarray(self.frames)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise InvalidInputError(f"frames must be (T >= 1, F), got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise InvalidInputError("frames contain NaN or Inf")
        self.frames = arr

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def mel_scale(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def inverse_mel_scale(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 20.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters on the Mel scale, (n_mels, n_fft // 2 + 1)."""
    fmax = fmax or sample_rate / 2.0
    mel_points = np.linspace(mel_scale(fmin), mel_scale(fmax), n_mels + 2)
    hz_points = inverse_mel_scale(mel_points)
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fb = np.zeros((n_mels, freqs.shape[0]))
    for m in range(n_mels):
        lower, center, upper = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (freqs - lower) / max(center - lower, 1e-12)
        falling = (upper - freqs) / max(upper - center, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def logmel(
    waveform: np.ndarray,
    sample_rate: int,
    *,
    n_mels: int = 40,
    window_ms: float = 25.0,
    hop_ms: float = 10.0,
    fmin: float = 20.0,
    speaker_id: str | None = None,
) -> FeatureSequence:
    """Log Mel filterbank energies, one frame every ``hop_ms`` milliseconds."""
    wav = np.asarray(waveform, dtype=np.float64)
    if wav.ndim != 1 or wav.size == 0:
        raise InvalidInputError("waveform must be non-empty and mono")
    if sample_rate < 8000:
        raise InvalidInputError(f"sample rate {sample_rate} below 8 kHz")
    win = int(round(sample_rate * window_ms / 1000.0))
    hop = int(round(sample_rate * hop_ms / 1000.0))
    if wav.size < win:
        wav = np.pad(wav, (0, win - wav.size))
    n_frames = 1 + (wav.size - win) // hop
    window = np.hanning(win)
    fb = mel_filterbank(n_mels, win, sample_rate, fmin=fmin)
    out = np.empty((n_frames, n_mels))
    for t in range(n_frames):
        frame = wav[t * hop : t * hop + win] * window
        power = np.abs(np.fft.rfft(frame)) ** 2
        out[t] = np.log(np.maximum(fb @ power, LOG_FLOOR))
    return FeatureSequence(frames=out, frame_period_ms=hop_ms, speaker_id=speaker_id)


@dataclass
class SpeakerStats:
    mean: np.ndarray
    std: np.ndarray


def compute_speaker_stats(features: Sequence[FeatureSequence]) -> SpeakerStats:
    """Per-coefficient moments pooled over all of a speaker's utterances."""
    if not features:
        raise InvalidInputError("need at least one utterance to compute statistics")
    pooled = np.concatenate([f.frames for f in features], axis=0)
    return SpeakerStats(mean=pooled.mean(axis=0), std=pooled.std(axis=0))


def speaker_normalize(features: FeatureSequence, stats: SpeakerStats) -> FeatureSequence:
    """(x - mean) / std with the deviation floored at 1e-8."""
    std = np.maximum(stats.std, 1e-8)
    return FeatureSequence(
        frames=(features.frames - stats.mean) / std,
        frame_period_ms=features.frame_period_ms,
        speaker_id=features.speaker_id,
    )


@dataclass
class SpecAugmentConfig:
    n_freq_masks: int = 2
    max_freq_width: int = 13
    n_time_masks: int = 2
    max_time_width_fraction: float = 0.05
    mask_value: float = 0.0

    def __post_init__(self):
        if self.max_freq_width < 0 or self.n_freq_masks < 0 or self.n_time_masks < 0:
            raise InvalidInputError("mask counts and widths must be non-negative")
        if not 0.0 <= self.max_time_width_fraction <= 1.0:
            raise InvalidInputError("max_time_width_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SpecAugmentConfig":
        return cls(**data)


def spec_augment(features: FeatureSequence, config: SpecAugmentConfig, rng: np.random.Generator) -> FeatureSequence:
    """Mask random frequency bands and time spans; shape is never changed."""
    frames = features.frames.copy()
    T, F = frames.shape
    for _ in range(config.n_freq_masks):
        width = int(rng.integers(0, config.max_freq_width + 1))
        width = min(width, F)
        start = int(rng.integers(0, F - width + 1))
        frames[:, start : start + width] = config.mask_value
    max_t = int(config.max_time_width_fraction * T)
    for _ in range(config.n_time_masks):
        width = int(rng.integers(0, max_t + 1))
        start = int(rng.integers(0, T - width + 1))
        frames[start : start + width, :] = config.mask_value
    return FeatureSequence(frames=frames, frame_period_ms=features.frame_period_ms, speaker_id=features.speaker_id)


# ---------------------------------------------------------------------------
# Synthetic task
# ---------------------------------------------------------------------------

POSITION_SUFFIXES = ("B", "M", "E", "S")


@dataclass
class SyntheticConfig:
    vocab_size: int = 12
    feature_dim: int = 40
    duration_min: int = 2
    duration_max: int = 4
    noise_sigma: float = 0.1
    words_min: int = 2
    words_max: int = 3
    word_len_min: int = 1
    word_len_max: int = 3
    silence_min: int = 1  # inter-word pause length in frames; 0/0 disables
    silence_max: int = 2
    positional_suffixes: bool = True
    n_speakers: int = 4
    prototype_seed: int = 17

    def __post_init__(self):
        if self.vocab_size < 2:
            raise InvalidInputError("need at least two source symbols")
        if not 1 <= self.word_len_min <= self.word_len_max:
            raise InvalidInputError("bad word length range")
        if self.vocab_size < 2 * self.word_len_max:
            # a word and its neighbour must be able to stay symbol-disjoint
            raise InvalidInputError("vocab_size must be at least twice word_len_max")
        if not 1 <= self.duration_min <= self.duration_max:
            raise InvalidInputError("bad duration range")
        if not 0 <= self.silence_min <= self.silence_max:
            raise InvalidInputError("bad silence range")
        if self.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticConfig":
        return cls(**data)


@dataclass
class Utterance:
    uid: str
    speaker_id: str | None
    features: FeatureSequence
    phones: list[str]
    translation: list[str]
    meta: dict = field(default_factory=dict)


def _symbol_names(vocab_size: int) -> list[str]:
    if vocab_size <= 26:
        return [chr(ord("a") + i) for i in range(vocab_size)]
    return [f"s{i}" for i in range(vocab_size)]


class SyntheticTask:
    """Frozen prototypes plus the deterministic phone/translation targets.

    Row ``vocab_size`` of the prototype matrix is the silence prototype
    rendered between words; it never appears in the phone targets.
    """

    def __init__(self, config: SyntheticConfig, prototypes: np.ndarray | None = None):
        self.config = config
        self.symbols = _symbol_names(config.vocab_size)
        self.silence_id = config.vocab_size
        if prototypes is None:
            proto_rng = np.random.default_rng(config.prototype_seed)
            prototypes = proto_rng.normal(size=(config.vocab_size + 1, config.feature_dim))
        self.prototypes = np.asarray(prototypes, dtype=np.float64)
        if self.prototypes.shape != (config.vocab_size + 1, config.feature_dim):
            raise InvalidInputError("prototype matrix does not match the config")

    # -- vocabularies -------------------------------------------------------
    def ctc_labels(self) -> list[str]:
        if not self.config.positional_suffixes:
            return list(self.symbols)
        return [f"{sym}_{pos}" for sym in self.symbols for pos in POSITION_SUFFIXES]

    def ctc_vocabulary(self) -> Vocabulary:
        return Vocabulary.from_labels(self.ctc_labels())

    def target_labels(self) -> list[str]:
        return [sym.upper() for sym in self.symbols]

    def target_vocabulary(self) -> TargetVocabulary:
        return TargetVocabulary.from_labels(self.target_labels())

    # -- deterministic targets ---------------------------------------------
    def phone_labels(self, words: Sequence[Sequence[int]]) -> list[str]:
        out: list[str] = []
        for word in words:
            for i, sym_id in enumerate(word):
                sym = self.symbols[sym_id]
                if not self.config.positional_suffixes:
                    out.append(sym)
                elif len(word) == 1:
                    out.append(f"{sym}_S")
                elif i == 0:
                    out.append(f"{sym}_B")
                elif i == len(word) - 1:
                    out.append(f"{sym}_E")
                else:
                    out.append(f"{sym}_M")
        return out

    def translation_tokens(self, words: Sequence[Sequence[int]]) -> list[str]:
        """Per-symbol uppercase mapping with adjacent swaps inside each word."""
        out: list[str] = []
        for word in words:
            mapped = [self.symbols[s].upper() for s in word]
            for i in range(0, len(mapped) - 1, 2):
                mapped[i], mapped[i + 1] = mapped[i + 1], mapped[i]
            out.extend(mapped)
        return out

    # -- rendering -----------------------------------------------------------
    def render_frames(self, symbol_ids: Sequence[int], durations: Sequence[int], noise_rng: np.random.Generator) -> np.ndarray:
        """Frame matrix for a run-length encoding; ids may include silence."""
        if len(symbol_ids) != len(durations):
            raise InvalidInputError("one duration per symbol required")
        for s in symbol_ids:
            if not 0 <= s <= self.silence_id:
                raise InvalidInputError(f"symbol id {s} out of range")
        base = np.repeat(self.prototypes[list(symbol_ids)], list(durations), axis=0)
        if self.config.noise_sigma > 0:
            base = base + noise_rng.normal(scale=self.config.noise_sigma, size=base.shape)
        return base

    def run_encoding(self, words: Sequence[Sequence[int]], rng: np.random.Generator) -> tuple[list[int], list[int]]:
        """Symbol/duration runs for an utterance, with inter-word silences."""
        cfg = self.config
        symbol_ids: list[int] = []
        durations: list[int] = []
        for w, word in enumerate(words):
            if w > 0 and cfg.silence_max > 0:
                pause = int(rng.integers(cfg.silence_min, cfg.silence_max + 1))
                if pause > 0:
                    symbol_ids.append(self.silence_id)
                    durations.append(pause)
            for sym in word:
                symbol_ids.append(int(sym))
                durations.append(int(rng.integers(cfg.duration_min, cfg.duration_max + 1)))
        return symbol_ids, durations

    def sample_utterance(self, index: int, master_seed: int, split_tag: int = 0) -> Utterance:
        """Derived-seed sampling: independent of worker count and call order."""
        cfg = self.config
        rng = np.random.default_rng([master_seed, split_tag, index])
        n_words = int(rng.integers(cfg.words_min, cfg.words_max + 1))
        words: list[list[int]] = []
        for _ in range(n_words):
            n_sym = int(rng.integers(cfg.word_len_min, cfg.word_len_max + 1))
            word: list[int] = []
            for _ in range(n_sym):
                # consecutive duplicate symbols would merge into one
                # indistinguishable run; adjacent words stay symbol-disjoint
                # so the reordered translation never needs to emit the same
                # token twice in a row either
                banned = set(word) | (set(words[-1]) if words else set())
                choices = [s for s in range(cfg.vocab_size) if s not in banned]
                sym = int(choices[rng.integers(0, len(choices))])
                word.append(sym)
            words.append(word)
        symbol_ids, durations = self.run_encoding(words, rng)
        noise_seed = int(rng.integers(0, 2**31 - 1))
        frames = self.render_frames(symbol_ids, durations, np.random.default_rng(noise_seed))
        speaker = f"spk{index % cfg.n_speakers}"
        return Utterance(
            uid=f"utt{split_tag}_{index:05d}",
            speaker_id=speaker,
            features=FeatureSequence(frames=frames, speaker_id=speaker),
            phones=self.phone_labels(words),
            translation=self.translation_tokens(words),
            meta={
                "words": [list(w) for w in words],
                "symbol_ids": symbol_ids,
                "durations": durations,
                "noise_seed": noise_seed,
            },
        )

    def make_dataset(self, n_utterances: int, master_seed: int, split_tag: int = 0) -> list[Utterance]:
        return [self.sample_utterance(i, master_seed, split_tag) for i in range(n_utterances)]


def render_synthetic(
    words: Sequence[Sequence[int]],
    rng: np.random.Generator,
    task: SyntheticTask,
) -> tuple[FeatureSequence, list[str], list[str]]:
    """Render one utterance given its word/symbol structure.

    Symbol durations and inter-word pause lengths are drawn uniformly from
    the configured ranges; each frame is its prototype plus Gaussian noise.
    """
    if not any(len(w) for w in words):
        raise InvalidInputError("utterances must contain at least one symbol")
    cfg = task.config
    for word in words:
        for s in word:
            if not 0 <= s < cfg.vocab_size:
                raise InvalidInputError(f"symbol id {s} out of range")
    symbol_ids, durations = task.run_encoding(words, rng)
    frames = task.render_frames(symbol_ids, durations, rng)
    return (
        FeatureSequence(frames=frames),
        task.phone_labels(words),
        task.translation_tokens(words),
    )


def nearest_prototype_ids(frames: np.ndarray, prototypes: np.ndarray) -> list[int]:
    """Frame-level classification used by the solvability check."""
    d2 = ((frames[:, None, :] - prototypes[None, :, :]) ** 2).sum(axis=2)
    return [int(i) for i in d2.argmin(axis=1)]


# ---------------------------------------------------------------------------
# Dataset directory layout
# ---------------------------------------------------------------------------

SYNTH_FILE = "synth.json"
CTC_VOCAB_FILE = "ctc_vocab.txt"
TARGET_VOCAB_FILE = "target_vocab.txt"


def write_dataset(out_dir: str | Path, task: SyntheticTask, splits: dict[str, list[Utterance]]) -> None:
    """Self-contained dataset directory: manifests, vocab files, synth sidecar.

    Manifest lines carry the inline synthetic spec (symbols, durations,
    noise seed); the sidecar freezes the generator config and prototypes so
    features re-render bit-identically at load time. Real precomputed
    features can be referenced per line with ``features_path`` instead.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sidecar = {
        "config": task.config.to_dict(),
        "prototypes": task.prototypes.tolist(),
        "symbols": task.symbols,
    }
    (out / SYNTH_FILE).write_text(json.dumps(sidecar, sort_keys=True), encoding="utf-8")
    binio.write_vocab_file(out / CTC_VOCAB_FILE, task.ctc_vocabulary().labels)
    binio.write_vocab_file(out / TARGET_VOCAB_FILE, task.target_vocabulary().labels)
    for split, utts in splits.items():
        records = []
        for u in utts:
            records.append(
                {
                    "id": u.uid,
                    "speaker": u.speaker_id,
                    "phones": u.phones,
                    "translation": u.translation,
                    "synthetic": {
                        "symbol_ids": u.meta["symbol_ids"],
                        "durations": u.meta["durations"],
                        "noise_seed": u.meta["noise_seed"],
                    },
                }
            )
        binio.write_jsonl(out / f"manifest_{split}.jsonl", records)


@dataclass
class LoadedDataset:
    utterances: list[Utterance]
    ctc_vocab: Vocabulary
    target_vocab: TargetVocabulary
    synth_config: SyntheticConfig | None = None


def load_dataset(data_dir: str | Path, split: str) -> LoadedDataset:
    data_dir = Path(data_dir)
    manifest = data_dir / f"manifest_{split}.jsonl"
    if not manifest.exists():
        raise DataError(f"{manifest}: no such manifest")
    ctc_vocab = Vocabulary(labels=tuple(binio.read_vocab_file(data_dir / CTC_VOCAB_FILE)), blank_index=0)
    target_vocab = TargetVocabulary(labels=tuple(binio.read_vocab_file(data_dir / TARGET_VOCAB_FILE)))
    task = None
    synth_config = None
    sidecar_path = data_dir / SYNTH_FILE
    if sidecar_path.exists():
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
        synth_config = SyntheticConfig.from_dict(sidecar["config"])
        task = SyntheticTask(synth_config, prototypes=np.asarray(sidecar["prototypes"]))
    utterances = []
    for record in binio.read_jsonl(manifest):
        speaker = record.get("speaker")
        if "synthetic" in record:
            if task is None:
                raise DataError(f"{manifest}: synthetic entries need a {SYNTH_FILE} sidecar")
            spec = record["synthetic"]
            frames = task.render_frames(
                spec["symbol_ids"], spec["durations"], np.random.default_rng(spec["noise_seed"])
            )
            feats = FeatureSequence(frames=frames, speaker_id=speaker)
            meta = dict(spec)
        elif "features_path" in record:
            frames = binio.read_features(data_dir / record["features_path"])
            feats = FeatureSequence(frames=frames, speaker_id=speaker)
            meta = {}
        else:
            raise DataError(f"{manifest}: record {record.get('id')} has neither features_path nor synthetic spec")
        utterances.append(
            Utterance(
                uid=str(record["id"]),
                speaker_id=speaker,
                features=feats,
                phones=list(record["phones"]),
                translation=list(record["translation"]),
                meta=meta,
            )
        )
    return LoadedDataset(utterances, ctc_vocab, target_vocab, synth_config)
