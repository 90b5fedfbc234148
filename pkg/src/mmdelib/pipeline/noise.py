"""Stand-in for the ASR stage: WER-calibrated token corruption of clean transcripts."""

from __future__ import annotations

from collections import Counter
from typing import Sequence

import numpy as np

from ..evaluation import corpus_wer

EDIT_MIX = (0.7, 0.2, 0.1)  # substitute, delete, insert


class NoiseCalibrationError(RuntimeError):
    pass


def _corrupt(corpus, rate: float, seed: int, words: np.ndarray, probs: np.ndarray):
    rng = np.random.default_rng(seed)
    sub_end, del_end = EDIT_MIX[0], EDIT_MIX[0] + EDIT_MIX[1]
    out = []
    for sent in corpus:
        n = len(sent)
        # Draw every random quantity regardless of rate: common random numbers
        # keep the corruption monotone in ``rate`` during calibration.
        hit = rng.random(n)
        kind = rng.random(n)
        picks = rng.choice(len(words), size=(n, 4), p=probs)
        noisy = []
        for tok, h, k, pk in zip(sent, hit, kind, picks):
            if h >= rate:
                noisy.append(tok)
            elif k < sub_end:
                alt = next((words[j] for j in pk if words[j] != tok), tok)
                noisy.append(alt)
            elif k < del_end:
                continue
            else:
                noisy.extend((tok, words[pk[0]]))
        out.append(noisy)
    return out


def noise_transcripts(corpus: Sequence[Sequence[str]], target_wer: float, seed: int,
                      tolerance: float = 0.02, max_attempts: int = 30) -> list[list[str]]:
    """Corrupt tokenized sentences so the corpus WER against the input is ``target_wer``.

    Each token is edited with probability ``rate`` (substitution by a
    frequency-sampled token, deletion, or insertion after it, mixed 70/20/10);
    ``rate`` is bisected until the measured WER lies within a quarter of
    ``tolerance`` of the target, accepting anything within ``tolerance``.
    """
    if not 0.0 <= target_wer < 1.0:
        raise ValueError("target_wer must lie in [0, 1)")
    corpus = [list(s) for s in corpus]
    if target_wer == 0.0:
        return corpus
    counts = Counter(t for s in corpus for t in s)
    if not counts:
        raise NoiseCalibrationError("corpus has no tokens to corrupt")
    words = np.array(sorted(counts))
    probs = np.array([counts[w] for w in words], dtype=np.float64)
    probs /= probs.sum()

    # Common random numbers make the measured WER non-decreasing in ``rate``,
    # so bisection converges even when few WER values are attainable.
    lo, hi = 0.0, 1.0
    rate = target_wer
    best, best_err = None, np.inf
    for _ in range(max_attempts):
        noisy = _corrupt(corpus, rate, seed, words, probs)
        measured = corpus_wer(noisy, corpus)
        err = abs(measured - target_wer)
        if err < best_err:
            best, best_err = noisy, err
        if err <= tolerance / 4:
            return noisy
        if measured < target_wer:
            lo = rate
        else:
            hi = rate
        rate = 0.5 * (lo + hi)
    if best_err <= tolerance:
        return best
    raise NoiseCalibrationError(
        f"could not reach WER {target_wer:.3f} (closest {target_wer + best_err:.3f}) in {max_attempts} attempts")
