"""Rule-based tokenizer, byte-pair encoding and vocabularies."""

from __future__ import annotations

import re
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_NO_SPACE_BEFORE = set(",.!?;:%)]}'")
_NO_SPACE_AFTER = set("([{$")


def tokenize(text: str) -> list[str]:
    """Lowercase and split punctuation into separate tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    out = ""
    for i, tok in enumerate(tokens):
        if i and tok not in _NO_SPACE_BEFORE and tokens[i - 1] not in _NO_SPACE_AFTER:
            out += " "
        out += tok
    return out


@dataclass
class SubwordModel:
    merges: list[tuple[str, str]] = field(default_factory=list)
    continuation_marker: str = "@@"

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise ValueError("duplicate merge pair")
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._cache: dict[str, tuple[str, ...]] = {}

    def segment(self, word: str) -> tuple[str, ...]:
        """Symbols of ``word`` after replaying the merges in learned order."""
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = list(word)
        last = -1
        while len(symbols) > 1:
            # Next effective merge: the lowest rank after the last one applied.
            best, best_rank = None, None
            for pair in zip(symbols, symbols[1:]):
                r = self._ranks.get(pair)
                if r is not None and r > last and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            symbols = _merge_pair(symbols, best)
            last = best_rank
        out = tuple(symbols)
        self._cache[word] = out
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SubwordModel":
        merges = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                a, b = line.split(" ")
                merges.append((a, b))
        return cls(merges)


def _merge_pair(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    a, b = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def learn_bpe(corpus: Iterable[Sequence[str] | str], n_merges: int) -> SubwordModel:
    """Greedy most-frequent-pair merging; ties go to the lexicographically smallest pair.

    ``corpus`` holds tokenized sentences (token lists) or whitespace-tokenized strings.
    """
    if n_merges < 0:
        raise ValueError("n_merges must be non-negative")
    counts: Counter[str] = Counter()
    for sent in corpus:
        counts.update(sent.split() if isinstance(sent, str) else sent)
    words = [list(w) for w in counts]
    freqs = list(counts.values())

    stats: Counter[tuple[str, str]] = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, (syms, f) in enumerate(zip(words, freqs)):
        for pair in zip(syms, syms[1:]):
            stats[pair] += f
            where[pair].add(wi)

    merges: list[tuple[str, str]] = []
    while len(merges) < n_merges and stats:
        best = min(stats.items(), key=lambda kv: (-kv[1], kv[0]))
        pair, freq = best
        if freq < 2:
            break
        merges.append(pair)
        for wi in sorted(where.pop(pair, ())):
            syms, f = words[wi], freqs[wi]
            for old in zip(syms, syms[1:]):
                stats[old] -= f
                if stats[old] <= 0:
                    del stats[old]
            new = _merge_pair(syms, pair)
            words[wi] = new
            for p in zip(new, new[1:]):
                stats[p] += f
                where[p].add(wi)
        stats.pop(pair, None)
    return SubwordModel(merges)


def apply_bpe(model: SubwordModel, tokens: Sequence[str]) -> list[str]:
    """Segment each token; every piece but the last of a word carries the marker."""
    marker = model.continuation_marker
    out = []
    for tok in tokens:
        pieces = model.segment(tok)
        out.extend(p + marker for p in pieces[:-1])
        out.append(pieces[-1])
    return out


def merge_subwords(pieces: Sequence[str], marker: str = "@@") -> list[str]:
    """Undo :func:`apply_bpe`; a dangling marker at the end is stripped with a warning."""
    out = []
    buf = ""
    for piece in pieces:
        if piece.endswith(marker):
            buf += piece[: -len(marker)]
        else:
            out.append(buf + piece)
            buf = ""
    if buf:
        warnings.warn(f"dangling continuation marker on {buf!r}", stacklevel=2)
        out.append(buf)
    return out


class Vocabulary:
    """Bijective token <-> id map with PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], max_size: int | None = None) -> "Vocabulary":
        counts: Counter[str] = Counter()
        for s in sentences:
            counts.update(s)
        ranked = sorted((t for t in counts if t not in SPECIALS), key=lambda t: (-counts[t], t))
        if max_size is not None:
            ranked = ranked[: max(0, max_size - len(SPECIALS))]
        return cls(ranked)

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str], eos: bool = True) -> list[int]:
        ids = [self.stoi.get(t, UNK) for t in tokens]
        return ids + [EOS] if eos else ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{t}\t{i}\n" for i, t in enumerate(self.itos)), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        pairs = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line:
                tok, idx = line.rsplit("\t", 1)
                pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError(f"{path}: ids are not contiguous from 0")
        if tuple(t for _, t in pairs[:4]) != SPECIALS:
            raise ValueError(f"{path}: reserved ids 0-3 must be {SPECIALS}")
        vocab = cls()
        for _, tok in pairs[4:]:
            vocab.stoi[tok] = len(vocab.itos)
            vocab.itos.append(tok)
        return vocab
