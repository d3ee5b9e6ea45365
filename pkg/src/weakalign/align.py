"""Toy forced aligner producing frame-level phoneme and BPE label sequences.

A :class:`ToyAcousticModel` holds one diagonal Gaussian per phoneme-like unit
plus a silence unit.  :func:`viterbi_align` finds the best monotone
segmentation of a feature matrix into a reference unit sequence with optional
silence at allowed gaps.  Silence frames are labelled ``IGNORE`` so that the
frame-level CE heads skip them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bpe import BpeModel, strip_marker
from .losses import IGNORE

PHONEME = "phoneme"
BPE = "bpe"
_KINDS = {PHONEME: 0, BPE: 1}


@dataclass
class ToyAcousticModel:
    means: np.ndarray  # [U+1, F]; the last row is silence
    variances: np.ndarray  # [U+1, F]
    min_duration: np.ndarray  # [U+1] frames

    @property
    def silence(self) -> int:
        return self.means.shape[0] - 1

    @property
    def num_units(self) -> int:
        return self.means.shape[0] - 1

    def loglik(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)[:, None, :]
        var = self.variances[None]
        return -0.5 * (np.log(2 * np.pi * var) + (x - self.means[None]) ** 2 / var).sum(-1)


@dataclass
class FrameAlignment:
    labels: np.ndarray
    unit_kind: str = PHONEME
    segments: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def runs(self) -> list[int]:
        """Distinct label runs with silence removed."""
        out = []
        prev = None
        for lab in self.labels.tolist():
            if lab != prev and lab != IGNORE:
                out.append(lab)
            prev = lab
        return out

    def unit_sequence(self) -> list[int]:
        """Label of each recorded segment, which survives adjacent repeats."""
        return [int(self.labels[s]) for s, _ in self.segments]


class AlignmentError(ValueError):
    pass


def min_frames(units: Sequence[int], am: ToyAcousticModel) -> int:
    return int(sum(am.min_duration[u] for u in units))


def viterbi_align(
    features: np.ndarray,
    units: Sequence[int],
    am: ToyAcousticModel,
    silence_gaps: Sequence[int] | None = None,
    unit_kind: str = PHONEME,
    loglik: np.ndarray | None = None,
) -> FrameAlignment:
    """Best segmentation of ``features`` into ``units``.

    ``silence_gaps`` lists the gap indices (0 before the first unit, ``K``
    after the last) where an optional silence may sit; ``None`` allows every
    gap, an empty list none.  In the backtrace a tie prefers staying in the
    current segment, which puts each boundary as early as possible.
    """
    units = [int(u) for u in units]
    K = len(units)
    ll = am.loglik(features) if loglik is None else np.asarray(loglik, dtype=np.float64)
    T = ll.shape[0]
    if K == 0:
        raise AlignmentError("empty reference unit sequence")
    need = min_frames(units, am)
    if T < need:
        raise AlignmentError(f"{T} frames cannot hold units needing at least {need} frames")
    gaps = set(range(K + 1)) if silence_gaps is None else set(silence_gaps)

    # segment chain: (kind, unit position or -1, emission column, optional)
    segs = []
    for k in range(K + 1):
        if k in gaps:
            segs.append((-1, am.silence, True))
        if k < K:
            segs.append((k, units[k], False))
    state_seg, state_col, first, last = [], [], [], []
    for j, (_, col, _) in enumerate(segs):
        n = int(am.min_duration[col])
        first.append(len(state_seg))
        state_seg += [j] * n
        state_col += [col] * n
        last.append(len(state_seg) - 1)
    S = len(state_seg)
    state_col = np.array(state_col)
    is_last = np.zeros(S, dtype=bool)
    is_last[last] = True

    # entry predecessors of each segment's first state: previous segment, or
    # the one before when the previous segment is optional silence
    pred_a = np.full(S, -1)
    pred_b = np.full(S, -1)
    for s in range(S):
        j = state_seg[s]
        if s != first[j]:
            pred_a[s] = s - 1
            continue
        if j >= 1:
            pred_a[s] = last[j - 1]
            if j >= 2 and segs[j - 1][2]:
                pred_b[s] = last[j - 2]
    start_ok = np.zeros(S, dtype=bool)
    start_ok[first[0]] = True
    if segs[0][2] and len(segs) > 1:
        start_ok[first[1]] = True
    end_ok = np.zeros(S, dtype=bool)
    end_ok[last[-1]] = True
    if segs[-1][2] and len(segs) > 1:
        end_ok[last[-2]] = True

    neg = -np.inf
    emit = ll[:, state_col]
    delta = np.where(start_ok, emit[0], neg)
    back = np.zeros((T, S), dtype=np.int8)  # 0 stay, 1 pred_a, 2 pred_b
    for t in range(1, T):
        stay = np.where(is_last, delta, neg)
        via_a = np.where(pred_a >= 0, delta[np.maximum(pred_a, 0)], neg)
        via_b = np.where(pred_b >= 0, delta[np.maximum(pred_b, 0)], neg)
        choice = np.where(stay >= via_a, 0, 1)
        best = np.maximum(stay, via_a)
        use_b = via_b > best
        choice = np.where(use_b, 2, choice)
        best = np.where(use_b, via_b, best)
        delta = best + emit[t]
        back[t] = choice

    final = np.where(end_ok, delta, neg)
    # on ties end in the latest chain state, so a trailing silence wins
    s = int(np.flatnonzero(final == final.max())[-1])
    path = np.empty(T, dtype=np.int64)
    for t in range(T - 1, -1, -1):
        path[t] = s
        c = back[t, s]
        if t == 0:
            break
        s = s if c == 0 else (pred_a[s] if c == 1 else pred_b[s])

    labels = np.full(T, IGNORE, dtype=np.int64)
    segments: list[tuple[int, int]] = [(0, 0)] * K
    seg_of_frame = np.array(state_seg)[path]
    for k in range(K):
        j = next(i for i, sg in enumerate(segs) if sg[0] == k)
        frames = np.flatnonzero(seg_of_frame == j)
        segments[k] = (int(frames[0]), int(frames[-1]) + 1)
        labels[frames] = units[k]
    return FrameAlignment(labels, unit_kind, segments)


def word_spans(phone_alignment: FrameAlignment, word_lengths: Sequence[int]) -> list[tuple[int, int]]:
    """Group consecutive phoneme segments into word spans."""
    spans = []
    i = 0
    for n in word_lengths:
        segs = phone_alignment.segments[i : i + n]
        spans.append((segs[0][0], segs[-1][1]))
        i += n
    return spans


def word_alignment(phone_alignment: FrameAlignment, word_lengths: Sequence[int]) -> FrameAlignment:
    spans = word_spans(phone_alignment, word_lengths)
    labels = np.full(len(phone_alignment), IGNORE)
    for w, (s, e) in enumerate(spans):
        labels[s:e] = w
    return FrameAlignment(labels, "word", spans)


def token_pronunciation(token: str, phoneme_index: dict[str, int]) -> list[int]:
    """Toy G2P: every character of the unmarked token is one phoneme."""
    return [phoneme_index[c] for c in strip_marker(token)]


def bpe_frame_alignment(
    features: np.ndarray,
    word_alignment: FrameAlignment,
    words: Sequence[str],
    bpe: BpeModel,
    am: ToyAcousticModel,
    phoneme_index: dict[str, int],
) -> FrameAlignment:
    """Re-align every word span into the sub-spans of its BPE tokens."""
    if len(word_alignment.segments) != len(words):
        raise AlignmentError("word alignment and word list disagree in length")
    labels = np.full(len(word_alignment), IGNORE, dtype=np.int64)
    segments = []
    ll = am.loglik(features)
    for (s, e), word in zip(word_alignment.segments, words):
        tokens = bpe.apply(word)
        ids = [bpe.vocab[t] for t in tokens]
        if e - s < len(tokens):
            raise AlignmentError(f"span of {e - s} frames is shorter than {len(tokens)} tokens")
        if len(tokens) == 1:
            labels[s:e] = ids[0]
            segments.append((s, e))
            continue
        pron = [token_pronunciation(t, phoneme_index) for t in tokens]
        flat = [p for ps in pron for p in ps]
        owner = [i for i, ps in enumerate(pron) for _ in ps]
        sub = viterbi_align(features[s:e], flat, am, silence_gaps=[], loglik=ll[s:e])
        for i, tid in enumerate(ids):
            phones = [k for k, o in enumerate(owner) if o == i]
            a = sub.segments[phones[0]][0] + s
            b = sub.segments[phones[-1]][1] + s
            labels[a:b] = tid
            segments.append((a, b))
    return FrameAlignment(labels, BPE, segments)


# ---------------------------------------------------------------- cache file

_MAGIC = b"WALIGN01"


def write_alignment_cache(path, records: dict[str, FrameAlignment]) -> None:
    """Binary cache: magic, record count, then per record id/kind/T/int32 labels."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(records)))
        for uid in sorted(records):
            ali = records[uid]
            raw = uid.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BI", _KINDS.get(ali.unit_kind, 255), len(ali.labels)))
            f.write(np.asarray(ali.labels, dtype="<i4").tobytes())


def read_alignment_cache(path) -> dict[str, FrameAlignment]:
    buf = Path(path).read_bytes()
    if buf[:8] != _MAGIC:
        raise ValueError(f"{path}: not an alignment cache")
    (n,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    kinds = {v: k for k, v in _KINDS.items()}
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        uid = buf[pos : pos + ln].decode("utf-8")
        pos += ln
        kind, T = struct.unpack_from("<BI", buf, pos)
        pos += 5
        labels = np.frombuffer(buf, dtype="<i4", count=T, offset=pos).astype(np.int64)
        pos += 4 * T
        out[uid] = FrameAlignment(labels, kinds.get(kind, "unknown"))
    return out
