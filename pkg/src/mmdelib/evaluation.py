"""Corpus BLEU, paired significance tests and word error rate."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_ORDER = 4


@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def lines(self) -> list[str]:
        return [
            f"bleu: {self.bleu:.2f}",
            *(f"p{n + 1}: {p:.4f}" for n, p in enumerate(self.precisions)),
            f"brevity_penalty: {self.brevity_penalty:.4f}",
            f"hyp_len: {self.hyp_len}",
            f"ref_len: {self.ref_len}",
        ]

    def summary(self) -> str:
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (f"BLEU={self.bleu:.2f} {ps} BP={self.brevity_penalty:.4f} "
                f"hyp_len={self.hyp_len} ref_len={self.ref_len}")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def sentence_stats(hyp: Sequence[str], ref: Sequence[str]) -> np.ndarray:
    """[matches_1..4, totals_1..4, hyp_len, ref_len] for one sentence pair."""
    row = np.zeros(2 * MAX_ORDER + 2, dtype=np.int64)
    for n in range(1, MAX_ORDER + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        row[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        row[MAX_ORDER + n - 1] = max(len(hyp) - n + 1, 0)
    row[-2], row[-1] = len(hyp), len(ref)
    return row


def corpus_stats(hyps, refs) -> np.ndarray:
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    return np.stack([sentence_stats(h, r) for h, r in zip(hyps, refs)])


def bleu_from_stats(stats: np.ndarray, smooth: bool = False) -> BleuReport:
    """BLEU from summed sufficient statistics (one row, or rows to be summed)."""
    s = stats.sum(axis=0) if stats.ndim == 2 else stats
    matches, totals = s[:MAX_ORDER], s[MAX_ORDER: 2 * MAX_ORDER]
    hyp_len, ref_len = int(s[-2]), int(s[-1])
    if smooth:
        precisions = [(m + 1) / (t + 1) for m, t in zip(matches, totals)]
    else:
        precisions = [m / t if t > 0 else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) <= 0.0 or bp == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuReport(score, [float(p) for p in precisions], bp, hyp_len, ref_len)


def corpus_bleu(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]], smooth: bool = False) -> BleuReport:
    """Tokenized corpus BLEU with clipped n-gram counts pooled over sentences (n = 1..4)."""
    return bleu_from_stats(corpus_stats(hyps, refs), smooth)


def _bleu_vec(stats: np.ndarray, smooth: bool) -> np.ndarray:
    """Vectorised BLEU over a [I, 10] batch of summed statistics."""
    m = stats[:, :MAX_ORDER].astype(np.float64)
    t = stats[:, MAX_ORDER: 2 * MAX_ORDER].astype(np.float64)
    h = stats[:, -2].astype(np.float64)
    r = stats[:, -1].astype(np.float64)
    if smooth:
        p = (m + 1) / (t + 1)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            p = np.where(t > 0, m / np.maximum(t, 1), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        bp = np.where(h >= r, 1.0, np.exp(1.0 - r / np.maximum(h, 1)))
        logs = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -np.inf).mean(axis=1)
        out = 100.0 * bp * np.exp(logs)
    out[(h == 0) | ~np.isfinite(logs)] = 0.0
    return out


def significance(hyp_a, hyp_b, refs, iterations: int = 10000, seed: int = 12345,
                 method: str = "approximate", smooth: bool = False, chunk: int = 1000) -> float:
    """Two-sided paired test on the corpus-BLEU difference between systems A and B.

    ``approximate``: approximate randomization, each sentence's outputs swapped
    with probability 1/2 per iteration, p = (#{|d_perm| >= |d_obs|} + 1) / (I + 1).
    ``bootstrap``: paired bootstrap resampling of sentences; p estimates how often
    the resampled difference departs from the observed one by at least |d_obs|.
    """
    if not (len(hyp_a) == len(hyp_b) == len(refs)):
        raise ValueError(f"misaligned corpora: {len(hyp_a)}, {len(hyp_b)}, {len(refs)}")
    A = corpus_stats(hyp_a, refs)
    B = corpus_stats(hyp_b, refs)
    observed = abs(float(_bleu_vec(A.sum(0)[None], smooth)[0] - _bleu_vec(B.sum(0)[None], smooth)[0]))
    rng = np.random.default_rng(seed)
    n = len(refs)
    hits = 0
    done = 0
    diff = B - A
    while done < iterations:
        size = min(chunk, iterations - done)
        if method == "approximate":
            swap = rng.random((size, n)) < 0.5
            sa = A.sum(0) + swap.astype(np.int64) @ diff
            sb = B.sum(0) - swap.astype(np.int64) @ diff
            delta = np.abs(_bleu_vec(sa, smooth) - _bleu_vec(sb, smooth))
            hits += int((delta >= observed).sum())
        elif method == "bootstrap":
            counts = np.stack([np.bincount(rng.integers(0, n, n), minlength=n) for _ in range(size)])
            d = _bleu_vec(counts @ A, smooth) - _bleu_vec(counts @ B, smooth)
            signed = _bleu_vec(A.sum(0)[None], smooth)[0] - _bleu_vec(B.sum(0)[None], smooth)[0]
            hits += int((np.abs(d - signed) >= observed).sum())
        else:
            raise ValueError(f"unknown method {method!r}")
        done += size
    return (hits + 1) / (iterations + 1)


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(hyp: Sequence, ref: Sequence) -> float:
    """Edit distance over reference length; inf for a non-empty hypothesis of an empty reference."""
    if not ref:
        return 0.0 if not hyp else math.inf
    return edit_distance(hyp, ref) / len(ref)


def corpus_wer(hyps: Sequence[Sequence], refs: Sequence[Sequence]) -> float:
    """Total edits over total reference tokens."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    total = sum(len(r) for r in refs)
    edits = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    if total == 0:
        return 0.0 if edits == 0 else math.inf
    return edits / total
