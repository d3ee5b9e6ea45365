"""Byte-pair encoding with the ``@@`` continuation convention."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

MARKER = "@@"


@dataclass
class BpeModel:
    alphabet: list[str]
    merges: list[tuple[str, str]]
    vocab: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self._rank = {pair: i for i, pair in enumerate(self.merges)}
        if not self.vocab:
            self.vocab = {tok: i for i, tok in enumerate(_base_tokens(self.alphabet))}
        self.inverse = {i: tok for tok, i in self.vocab.items()}

    def __len__(self):
        return len(self.vocab)

    def segment(self, word: str) -> list[str]:
        """Unmarked segments of ``word`` after applying the merges in order."""
        if not word:
            return []
        bad = set(word) - set(self.alphabet)
        if bad:
            raise ValueError(f"characters {sorted(bad)} are outside the alphabet")
        symbols = list(word)
        while len(symbols) > 1:
            ranked = [
                (self._rank[p], i)
                for i, p in enumerate(zip(symbols, symbols[1:]))
                if p in self._rank
            ]
            if not ranked:
                break
            best = min(ranked)[0]
            pair = self.merges[best]
            out = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
                    out.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            symbols = out
        return symbols

    def apply(self, word: str) -> list[str]:
        segs = self.segment(word)
        return [s + MARKER for s in segs[:-1]] + segs[-1:]

    def encode(self, words: Iterable[str]) -> list[int]:
        ids = []
        for w in words:
            for tok in self.apply(w):
                if tok not in self.vocab:
                    raise KeyError(f"token {tok!r} is not in the vocabulary")
                ids.append(self.vocab[tok])
        return ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        return detokenize(self.inverse[i] for i in ids)

    def to_json(self) -> str:
        return json.dumps(
            {"alphabet": self.alphabet, "merges": [list(m) for m in self.merges], "vocab": self.vocab},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "BpeModel":
        d = json.loads(text)
        return cls(d["alphabet"], [tuple(m) for m in d["merges"]], d["vocab"])


def _base_tokens(alphabet):
    return [c + suffix for c in sorted(alphabet) for suffix in ("", MARKER)]


def detokenize(tokens: Iterable[str]) -> list[str]:
    """Concatenate tokens, splitting words after every token that lacks the marker."""
    words = []
    cur = ""
    for tok in tokens:
        if tok.endswith(MARKER):
            cur += tok[: -len(MARKER)]
        else:
            words.append(cur + tok)
            cur = ""
    if cur:
        words.append(cur)
    return words


def strip_marker(token: str) -> str:
    return token[: -len(MARKER)] if token.endswith(MARKER) else token


def bpe_learn(corpus: Iterable[str], num_merges: int) -> BpeModel:
    """Greedy most-frequent-pair merging; ties go to the lexicographically smallest pair.

    The vocabulary holds every base character in both marked and final form
    plus every token produced when the learned model segments the corpus.
    """
    counts = Counter(w for w in corpus if w)
    if not counts:
        raise ValueError("empty corpus")
    alphabet = sorted({c for w in counts for c in w})
    words = {w: list(w) for w in counts}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: Counter = Counter()
        for w, syms in words.items():
            for p in zip(syms, syms[1:]):
                pairs[p] += counts[w]
        if not pairs:
            break
        top = max(pairs.values())
        pair = min(p for p, c in pairs.items() if c == top)
        merges.append(pair)
        for w, syms in words.items():
            out = []
            i = 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == pair:
                    out.append(syms[i] + syms[i + 1])
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[w] = out

    model = BpeModel(alphabet, merges)
    tokens = set(_base_tokens(alphabet))
    for w in sorted(counts):
        tokens.update(model.apply(w))
    ordered = _base_tokens(alphabet) + sorted(tokens - set(_base_tokens(alphabet)))
    return BpeModel(alphabet, merges, {t: i for i, t in enumerate(ordered)})
