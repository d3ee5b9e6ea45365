"""Synthetic corpus with ground-truth alignments, augmentation and corpus files."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .align import (
    BPE,
    PHONEME,
    AlignmentError,
    FrameAlignment,
    ToyAcousticModel,
    bpe_frame_alignment,
    viterbi_align,
    word_alignment,
)
from .bpe import BpeModel, bpe_learn
from .losses import IGNORE

PHONEME_ALPHABET = "abdefgiklmnoprstu"


@dataclass
class CorpusSpec:
    num_utterances: int = 500
    num_phonemes: int = 15
    num_words: int = 24
    word_length: tuple[int, int] = (2, 5)
    words_per_utterance: tuple[int, int] = (2, 3)
    duration: tuple[int, int] = (2, 4)
    min_duration: int = 2
    silence_prob: float = 0.3
    silence_duration: tuple[int, int] = (1, 3)
    feature_dim: int = 8
    mean_scale: float = 1.0
    noise_scale: float = 1.0
    num_merges: int = 12

    def __post_init__(self):
        for name in ("word_length", "words_per_utterance", "duration", "silence_duration"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.num_phonemes > len(PHONEME_ALPHABET):
            raise ValueError(f"at most {len(PHONEME_ALPHABET)} phonemes")


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    words: list[str]
    bpe_ids: list[int]
    phone_alignment: FrameAlignment
    bpe_alignment: FrameAlignment
    word_alignment: FrameAlignment | None = None

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Corpus:
    spec: CorpusSpec
    phonemes: str
    lexicon: list[str]
    am: ToyAcousticModel
    bpe: BpeModel
    utterances: list[Utterance] = field(default_factory=list)

    @property
    def phoneme_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.phonemes)}

    def split(self, name: str) -> list[Utterance]:
        return [u for u in self.utterances if split_of(u.id) == name]


def split_of(uid: str) -> str:
    """80/10/10 train/dev/test by a stable hash of the utterance id."""
    bucket = int(hashlib.md5(uid.encode()).hexdigest(), 16) % 10
    return "train" if bucket < 8 else ("dev" if bucket == 8 else "test")


def _lexicon(spec: CorpusSpec, phonemes: str, rng) -> list[str]:
    words: set[str] = set()
    lo, hi = spec.word_length
    while len(words) < spec.num_words:
        n = int(rng.integers(lo, hi + 1))
        w = [phonemes[int(rng.integers(len(phonemes)))]]
        while len(w) < n:
            c = phonemes[int(rng.integers(len(phonemes)))]
            if c != w[-1]:
                w.append(c)
        words.add("".join(w))
    return sorted(words)


def _acoustic_model(spec: CorpusSpec, rng) -> ToyAcousticModel:
    U, F = spec.num_phonemes, spec.feature_dim
    means = np.vstack([rng.normal(0.0, spec.mean_scale, size=(U, F)), np.zeros((1, F))])
    variances = np.ones((U + 1, F))
    mind = np.full(U + 1, spec.min_duration)
    mind[U] = 1
    return ToyAcousticModel(means, variances, mind)


def generate_corpus(spec: CorpusSpec | None = None, seed: int = 0) -> Corpus:
    """Sample a corpus; alignments recorded during generation are exact."""
    spec = spec or CorpusSpec()
    rng = np.random.default_rng(seed)
    phonemes = PHONEME_ALPHABET[: spec.num_phonemes]
    pidx = {c: i for i, c in enumerate(phonemes)}
    am = _acoustic_model(spec, rng)
    lexicon = _lexicon(spec, phonemes, rng)

    sentences = []
    for _ in range(spec.num_utterances):
        n = int(rng.integers(spec.words_per_utterance[0], spec.words_per_utterance[1] + 1))
        sentences.append([lexicon[int(rng.integers(len(lexicon)))] for _ in range(n)])
    bpe = bpe_learn([w for s in sentences for w in s], spec.num_merges)

    std = np.sqrt(am.variances) * spec.noise_scale
    utts = []
    for i, words in enumerate(sentences):
        frames, phone_lab, bpe_lab = [], [], []
        phone_segs, bpe_segs = [], []
        t = 0

        def emit(unit, dur, plab, blab):
            nonlocal t
            frames.append(am.means[unit] + std[unit] * rng.standard_normal((dur, spec.feature_dim)))
            phone_lab.extend([plab] * dur)
            bpe_lab.extend([blab] * dur)
            t += dur

        prev_last = None
        for w_i, word in enumerate(words):
            edge = w_i == 0
            forced = prev_last is not None and prev_last == word[0]
            if forced or rng.random() < (0.5 if edge else spec.silence_prob):
                d = int(rng.integers(spec.silence_duration[0], spec.silence_duration[1] + 1))
                emit(am.silence, d, IGNORE, IGNORE)
            for tok in bpe.apply(word):
                start = t
                for ch in tok.replace("@@", ""):
                    d = int(rng.integers(max(spec.duration[0], spec.min_duration), spec.duration[1] + 1))
                    s0 = t
                    emit(pidx[ch], d, pidx[ch], bpe.vocab[tok])
                    phone_segs.append((s0, t))
                bpe_segs.append((start, t))
            prev_last = word[-1]
        if rng.random() < 0.5:
            d = int(rng.integers(spec.silence_duration[0], spec.silence_duration[1] + 1))
            emit(am.silence, d, IGNORE, IGNORE)
        feats = np.vstack(frames)
        utts.append(
            Utterance(
                id=f"utt{i:05d}",
                features=feats,
                words=list(words),
                bpe_ids=bpe.encode(words),
                phone_alignment=FrameAlignment(phone_lab, PHONEME, phone_segs),
                bpe_alignment=FrameAlignment(bpe_lab, BPE, bpe_segs),
            )
        )
    return Corpus(spec, phonemes, lexicon, am, bpe, utts)


def align_utterance(utt: Utterance, corpus: Corpus, features: np.ndarray | None = None):
    """Viterbi phoneme alignment, word spans and BPE re-alignment for ``utt``."""
    feats = utt.features if features is None else features
    pidx = corpus.phoneme_index
    units, gaps, lengths = [], [0], []
    for w in utt.words:
        units += [pidx[c] for c in w]
        lengths.append(len(w))
        gaps.append(len(units))
    phone = viterbi_align(feats, units, corpus.am, silence_gaps=gaps)
    words = word_alignment(phone, lengths)
    bpe = bpe_frame_alignment(feats, words, utt.words, corpus.bpe, corpus.am, pidx)
    return phone, bpe, words


def align_corpus(corpus: Corpus) -> dict[str, int]:
    """Replace generation-time alignments with forced alignments; returns frame-error counts."""
    stats = {"frames": 0, "phone_mismatch": 0}
    for u in corpus.utterances:
        phone, bpe, words = align_utterance(u, corpus)
        stats["frames"] += u.num_frames
        stats["phone_mismatch"] += int((phone.labels != u.phone_alignment.labels).sum())
        u.phone_alignment, u.bpe_alignment, u.word_alignment = phone, bpe, words
    return stats


# ---------------------------------------------------------------- augmentation


@dataclass
class AugmentSpec:
    num_time_masks: int = 2
    max_time_width: int = 4
    num_feature_masks: int = 1
    max_feature_width: int = 2
    speed_perturb_prob: float = 0.2
    speed_factors: tuple[float, ...] = (0.9, 1.1)
    noise_prob: float = 0.2
    min_snr_db: float = 0.0
    max_snr_db: float = 30.0

    def __post_init__(self):
        self.speed_factors = tuple(self.speed_factors)
        for p in (self.speed_perturb_prob, self.noise_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        if min(self.max_time_width, self.max_feature_width, self.num_time_masks, self.num_feature_masks) < 0:
            raise ValueError("mask counts and widths must be non-negative")
        if self.min_snr_db < 0:
            raise ValueError("min_snr_db must be >= 0")


def apply_masks(features: np.ndarray, time_spans, feature_spans) -> np.ndarray:
    out = np.array(features, dtype=np.float64, copy=True)
    for s, e in time_spans:
        out[s:e, :] = 0.0
    for s, e in feature_spans:
        out[:, s:e] = 0.0
    return out


def spec_augment(features: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Zero random time spans and feature bands (zero is the post-normalisation mean)."""
    T, F = features.shape

    def spans(count, max_w, dim):
        out = []
        for _ in range(count):
            w = int(rng.integers(0, min(max_w, dim) + 1))
            s = int(rng.integers(0, dim - w + 1))
            out.append((s, s + w))
        return out

    return apply_masks(
        features,
        spans(spec.num_time_masks, spec.max_time_width, T),
        spans(spec.num_feature_masks, spec.max_feature_width, F),
    )


def speed_perturb(features: np.ndarray, factor: float) -> np.ndarray:
    """Linear interpolation along time to ``round(T / factor)`` frames."""
    if factor <= 0:
        raise ValueError("speed factor must be positive")
    x = np.asarray(features, dtype=np.float64)
    T = x.shape[0]
    n = max(1, int(round(T / factor)))
    pos = np.minimum(np.arange(n) * factor, T - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, T - 1)
    frac = (pos - lo)[:, None]
    return x[lo] * (1.0 - frac) + x[hi] * frac


def add_noise(features: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add white Gaussian noise at the requested signal-to-noise ratio."""
    if snr_db < 0:
        raise ValueError("snr_db must be >= 0")
    x = np.asarray(features, dtype=np.float64)
    if np.isinf(snr_db):
        return x.copy()
    power = float(np.mean(x * x))
    noise_power = power / 10.0 ** (snr_db / 10.0)
    return x + rng.standard_normal(x.shape) * np.sqrt(noise_power)


def normalize(features: np.ndarray) -> np.ndarray:
    """Per-utterance, per-dimension mean and variance normalisation."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("normalisation needs at least two frames")
    mu = x.mean(axis=0)
    var = np.maximum(x.var(axis=0), 1e-8)
    out = (x - mu) / np.sqrt(var)
    out[:, x.var(axis=0) < 1e-8] = 0.0
    return out


def augment_utterance(utt: Utterance, corpus: Corpus, spec: AugmentSpec, rng: np.random.Generator):
    """Training-time pipeline: speed -> noise -> normalise -> SpecAugment.

    Returns ``(features, phone_labels, bpe_labels)``; labels are re-aligned
    whenever the time axis was warped.
    """
    feats = utt.features
    phone, bpe = utt.phone_alignment.labels, utt.bpe_alignment.labels
    if spec.speed_factors and rng.random() < spec.speed_perturb_prob:
        factor = spec.speed_factors[int(rng.integers(len(spec.speed_factors)))]
        warped = speed_perturb(feats, factor)
        try:
            p_ali, b_ali, _ = align_utterance(utt, corpus, warped)
            feats, phone, bpe = warped, p_ali.labels, b_ali.labels
        except AlignmentError:
            pass
    if rng.random() < spec.noise_prob:
        feats = add_noise(feats, float(rng.uniform(spec.min_snr_db, spec.max_snr_db)), rng)
    feats = spec_augment(normalize(feats), spec, rng)
    return feats, phone, bpe


# ---------------------------------------------------------------- corpus files


def _header(corpus: Corpus) -> dict:
    return {
        "spec": asdict(corpus.spec),
        "phonemes": corpus.phonemes,
        "lexicon": corpus.lexicon,
        "am": {
            "means": corpus.am.means.tolist(),
            "variances": corpus.am.variances.tolist(),
            "min_duration": corpus.am.min_duration.tolist(),
        },
        "bpe": json.loads(corpus.bpe.to_json()),
    }


def _from_header(h: dict) -> Corpus:
    am = ToyAcousticModel(
        np.array(h["am"]["means"]), np.array(h["am"]["variances"]), np.array(h["am"]["min_duration"])
    )
    bpe = BpeModel.from_json(json.dumps(h["bpe"]))
    return Corpus(CorpusSpec(**h["spec"]), h["phonemes"], h["lexicon"], am, bpe)


def _record(u: Utterance) -> dict:
    return {
        "id": u.id,
        "words": u.words,
        "bpe_ids": u.bpe_ids,
        "features": u.features.tolist(),
        "phone_alignment": u.phone_alignment.labels.tolist(),
        "phone_segments": u.phone_alignment.segments,
        "bpe_alignment": u.bpe_alignment.labels.tolist(),
        "bpe_segments": u.bpe_alignment.segments,
    }


def _utterance(r: dict) -> Utterance:
    return Utterance(
        r["id"],
        np.array(r["features"], dtype=np.float64).reshape(len(r["features"]), -1),
        list(r["words"]),
        list(r["bpe_ids"]),
        FrameAlignment(r["phone_alignment"], PHONEME, [tuple(s) for s in r["phone_segments"]]),
        FrameAlignment(r["bpe_alignment"], BPE, [tuple(s) for s in r["bpe_segments"]]),
    )


def save_corpus(corpus: Corpus, path, fmt: str = "jsonl") -> None:
    """``jsonl``: header line then one record per utterance; ``npz``: numpy archive."""
    path = Path(path)
    if fmt == "jsonl":
        with open(path, "w") as f:
            f.write(json.dumps({"header": _header(corpus)}) + "\n")
            for u in corpus.utterances:
                f.write(json.dumps(_record(u)) + "\n")
    elif fmt == "npz":
        arrays = {"header": np.frombuffer(json.dumps(_header(corpus)).encode(), dtype=np.uint8)}
        for i, u in enumerate(corpus.utterances):
            meta = {k: v for k, v in _record(u).items() if k not in ("features", "phone_alignment", "bpe_alignment")}
            arrays[f"u{i}_meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
            arrays[f"u{i}_features"] = u.features
            arrays[f"u{i}_phone"] = u.phone_alignment.labels
            arrays[f"u{i}_bpe"] = u.bpe_alignment.labels
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        path.write_bytes(buf.getvalue())
    else:
        raise ValueError(f"unknown corpus format {fmt!r}")


def load_corpus(path) -> Corpus:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"PK":
        z = np.load(io.BytesIO(raw))
        corpus = _from_header(json.loads(z["header"].tobytes().decode()))
        n = sum(1 for k in z.files if k.endswith("_meta"))
        for i in range(n):
            meta = json.loads(z[f"u{i}_meta"].tobytes().decode())
            meta["features"] = z[f"u{i}_features"]
            meta["phone_alignment"] = z[f"u{i}_phone"]
            meta["bpe_alignment"] = z[f"u{i}_bpe"]
            corpus.utterances.append(_utterance(meta))
        return corpus
    lines = raw.decode().splitlines()
    corpus = _from_header(json.loads(lines[0])["header"])
    corpus.utterances = [_utterance(json.loads(line)) for line in lines[1:] if line.strip()]
    return corpus
