"""Synthetic multimodal translation task where one target word is only recoverable from video.

Each source sentence contains one ambiguous verb.  Its translation is the
target word of the sentence's action category, which is drawn independently
of the text and encoded only in the visual features:

* AvgPool: a fixed per-category 2048-d prototype plus noise;
* ConvMap: a per-category channel prototype in every region plus noise;
* ActionScores: the category and nine fixed companion categories form the top ten.

AvgPool and ConvMap vectors are scaled to roughly unit L2 norm (as if
L2-normalised).  Raw 2048-d activations make each Adam step move a linear
projection's output by about ``lr * |v|_1``, which destabilises training at
desk-scale learning rates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..features import N_CATEGORIES, write_features

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"
AMBIGUOUS_VERB = "handles"
FEATURE_FILES = {"AvgPool": "avgpool", "ConvMap": "conv", "ActionScores": "emb"}
ALL_TAGS = ("AvgPool", "ActionScores", "ConvMap")


def _words(rng: np.random.Generator, n: int, taken: set[str], suffix: str = "") -> list[str]:
    out = []
    while len(out) < n:
        syl = rng.integers(2, 4)
        w = "".join(rng.choice(list(CONSONANTS)) + rng.choice(list(VOWELS)) for _ in range(syl)) + suffix
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


@dataclass
class SyntheticSplit:
    src: list[str]
    tgt: list[str]
    categories: np.ndarray
    features: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class SyntheticTask:
    splits: dict[str, SyntheticSplit]
    lexicon: dict[str, str]
    category_words: list[str]
    avgpool_prototypes: np.ndarray
    conv_prototypes: np.ndarray
    companions: np.ndarray

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, split in self.splits.items():
            (out / f"{name}.src").write_text("\n".join(split.src) + "\n", encoding="utf-8")
            (out / f"{name}.tgt").write_text("\n".join(split.tgt) + "\n", encoding="utf-8")
            (out / f"{name}.cat").write_text("\n".join(map(str, split.categories)) + "\n", encoding="utf-8")
            for tag, arr in split.features.items():
                write_features(out / f"{name}.{FEATURE_FILES[tag]}.feat", tag, arr)


def make_synthetic_task(n_sentences: int = 2000, src_vocab: int = 40, tgt_vocab: int = 40,
                        n_categories: int = 8, seed: int = 1, tags=ALL_TAGS,
                        n_valid: int | None = None, n_test: int | None = None,
                        min_len: int = 3, max_len: int = 8, noise: float = 0.5) -> SyntheticTask:
    """Generate train/valid/test splits (valid and test default to a tenth of ``n_sentences``)."""
    if not 1 <= n_categories <= N_CATEGORIES:
        raise ValueError(f"n_categories must be in [1, {N_CATEGORIES}]")
    rng = np.random.default_rng(seed)
    taken = {AMBIGUOUS_VERB}
    src_words = _words(rng, src_vocab, taken)
    tgt_words = _words(rng, tgt_vocab, taken, suffix="o")
    lexicon = dict(zip(src_words, tgt_words))
    category_words = _words(rng, n_categories, taken, suffix="ar")

    scale = 1.0 / np.sqrt(2048.0)
    avg_proto = (scale * rng.normal(0.0, 1.0, size=(n_categories, 2048))).astype(np.float32)
    conv_proto = (scale * rng.normal(0.0, 1.0, size=(n_categories, 2048))).astype(np.float32)
    pool = np.setdiff1d(np.arange(N_CATEGORIES), np.arange(n_categories))
    if 9 * n_categories <= len(pool):
        companions = pool[: 9 * n_categories].reshape(n_categories, 9)
    else:
        companions = np.stack([rng.choice(np.delete(np.arange(N_CATEGORIES), c), 9, replace=False)
                               for c in range(n_categories)])

    sizes = {"train": n_sentences,
             "valid": n_valid if n_valid is not None else max(2, n_sentences // 10),
             "test": n_test if n_test is not None else max(2, n_sentences // 10)}
    splits = {}
    for name, n in sizes.items():
        srcs, tgts = [], []
        cats = rng.integers(0, n_categories, size=n)
        for c in cats:
            length = int(rng.integers(min_len, max_len + 1))
            words = list(rng.choice(src_words, size=length))
            pos = int(rng.integers(0, length + 1))
            src = words[:pos] + [AMBIGUOUS_VERB] + words[pos:]
            tgt = [lexicon[w] for w in words[:pos]] + [category_words[c]] + [lexicon[w] for w in words[pos:]]
            srcs.append(" ".join(src).capitalize() + " .")
            tgts.append(" ".join(tgt).capitalize() + " .")
        feats = {}
        if "AvgPool" in tags:
            feats["AvgPool"] = avg_proto[cats] + (noise * scale * rng.normal(size=(n, 2048))).astype(np.float32)
        if "ActionScores" in tags:
            scores = rng.random((n, N_CATEGORIES)) * 0.01
            for i, c in enumerate(cats):
                scores[i, companions[c]] = 0.05 + 0.01 * rng.random(9)
                scores[i, c] = 0.5
            feats["ActionScores"] = (scores / scores.sum(axis=1, keepdims=True)).astype(np.float32)
        if "ConvMap" in tags:
            conv = np.empty((n, 7, 7, 2048), dtype=np.float32)
            for i, c in enumerate(cats):
                conv[i] = conv_proto[c] + (noise * scale * rng.normal(size=(7, 7, 2048))).astype(np.float32)
            feats["ConvMap"] = conv
        splits[name] = SyntheticSplit(srcs, tgts, cats, feats)
    return SyntheticTask(splits, lexicon, category_words, avg_proto, conv_proto, companions)
