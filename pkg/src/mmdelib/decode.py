"""Beam search, greedy decoding and the incongruent-decoding harness.

Decoders drive any model exposing the incremental interface

* ``start(src_ids, visual)`` -> opaque state for one sentence,
* ``next_logprobs(state, prefixes)`` -> ``[k, V]`` next-token log-probabilities,

and, for batched greedy decoding, ``start_batch(srcs, visual)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .subword import BOS, EOS, PAD

_BANNED = (PAD, BOS)


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    finished: bool

    def __post_init__(self):
        if self.finished and (not self.tokens or self.tokens[-1] != EOS):
            raise ValueError("a finished hypothesis must end with EOS")


def default_max_len(source: Sequence[int]) -> int:
    return 2 * len(source) + 10


def _length_bound(model, max_len: int | None, sources) -> int:
    """Requested (or default) output bound, capped by the model's positional capacity."""
    bound = max_len or max(default_max_len(s) for s in sources)
    cfg = getattr(model, "cfg", None)
    return min(bound, cfg.max_len) if cfg is not None else bound


def _step_scores(model, state, prefixes: list[list[int]], base: np.ndarray) -> np.ndarray:
    arr = np.array([[BOS] + p for p in prefixes], dtype=np.int64)
    lp = np.asarray(model.next_logprobs(state, arr), dtype=np.float64)
    lp[:, _BANNED] = -np.inf
    return base[:, None] + lp


def _rank(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep the lower index first."""
    return np.argsort(-scores, kind="stable")


def _norm(h: Hypothesis, alpha: float) -> float:
    return h.score / (len(h.tokens) ** alpha) if alpha else h.score


def greedy(model, source, visual=None, max_len: int | None = None) -> Hypothesis:
    state = model.start(source, visual)
    max_len = _length_bound(model, max_len, [source])
    tokens: list[int] = []
    score = np.zeros(1)
    for _ in range(max_len):
        cand = _step_scores(model, state, [tokens], score)[0]
        tok = int(_rank(cand)[0])
        score = np.array([cand[tok]])
        tokens.append(tok)
        if tok == EOS:
            return Hypothesis(tokens, float(score[0]), True)
    return Hypothesis(tokens, float(score[0]), False)


def beam_search(model, source, visual=None, beam: int = 10, max_len: int | None = None,
                alpha: float = 0.0, trace: list | None = None) -> list[Hypothesis]:
    """Length-bounded beam search; returns up to ``beam`` finished hypotheses, best first.

    Each step keeps the ``beam`` best expansions; expansions ending in EOS
    leave the beam as finished hypotheses.  If nothing finishes within
    ``max_len`` the best unfinished hypothesis is returned (``finished=False``).
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    max_len = _length_bound(model, max_len, [source])
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    state = model.start(source, visual)
    alive: list[list[int]] = [[]]
    alive_scores = np.zeros(1)
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        cand = _step_scores(model, state, alive, alive_scores)
        V = cand.shape[1]
        flat = cand.reshape(-1)
        order = _rank(flat)
        n_valid = int(np.isfinite(flat).sum())
        keep = order[: min(beam, n_valid)]
        if trace is not None:
            rest = order[len(keep): n_valid]
            trace.append({
                "kept": flat[keep].tolist(),
                "kept_finished": [float(flat[i]) for i in keep if i % V == EOS],
                "best_discarded_finished": max((float(flat[i]) for i in rest if i % V == EOS),
                                               default=-np.inf),
            })
        new_alive, new_scores = [], []
        for idx in keep:
            b, tok = divmod(int(idx), V)
            toks = alive[b] + [tok]
            if tok == EOS:
                finished.append(Hypothesis(toks, float(flat[idx]), True))
            else:
                new_alive.append(toks)
                new_scores.append(flat[idx])
        alive, alive_scores = new_alive, np.array(new_scores)
        if not alive:
            break
        if alpha == 0.0 and len(finished) >= beam:
            # Scores only decrease with length, so no live prefix can overtake.
            kth = sorted((h.score for h in finished), reverse=True)[beam - 1]
            if alive_scores.max() <= kth:
                break
    if not finished:
        best = int(_rank(alive_scores)[0])
        return [Hypothesis(alive[best], float(alive_scores[best]), False)]
    finished.sort(key=lambda h: -_norm(h, alpha))
    return finished[:beam]


def greedy_batch(model, sources: Sequence[Sequence[int]], visual=None, max_len: int | None = None,
                 state=None) -> list[list[int]]:
    """Greedy decoding of a whole batch at once (validation-time fast path)."""
    state = state if state is not None else model.start_batch(sources, visual)
    B = len(sources)
    bounds = [_length_bound(model, max_len, [s]) for s in sources]
    max_len = max(bounds)
    prefixes = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        lp = np.asarray(model.next_logprobs(state, prefixes), dtype=np.float64)
        lp[:, _BANNED] = -np.inf
        tok = lp.argmax(axis=1)
        tok[done] = PAD
        prefixes = np.concatenate([prefixes, tok[:, None]], axis=1)
        done |= tok == EOS
        if done.all():
            break
    out = []
    for row, bound in zip(prefixes[:, 1:], bounds):
        toks = []
        for t in row[:bound]:
            if t in (EOS, PAD):
                break
            toks.append(int(t))
        out.append(toks)
    return out


def strip_eos(tokens: Sequence[int]) -> list[int]:
    return [t for t in tokens if t != EOS]


# ---------------------------------------------------------------------------
# Incongruent decoding
# ---------------------------------------------------------------------------

def derangement(n: int, seed: int) -> np.ndarray:
    """Uniform random permutation with no fixed point (seeded rejection sampling)."""
    if n < 2:
        raise ValueError(f"no derangement exists for n={n}")
    rng = np.random.default_rng(seed)
    ident = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == ident):
            return perm


@dataclass
class IncongruentResult:
    translations: list[list[int]]
    permutation: np.ndarray
    seed: int | None
    hypotheses: list[Hypothesis] = field(default_factory=list)


def write_permutation(path, perm: np.ndarray, seed) -> None:
    lines = [f"{len(perm)} {seed}"] + [f"{i}→{int(p)}" for i, p in enumerate(perm)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_permutation(path) -> tuple[np.ndarray, int]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    n, seed = lines[0].split()
    perm = np.empty(int(n), dtype=np.int64)
    for line in lines[1:]:
        i, p = line.split("→")
        perm[int(i)] = int(p)
    return perm, int(seed)


def incongruent_decode(model, sources: Sequence[Sequence[int]], visual: np.ndarray | None, seed: int | None,
                       beam: int = 10, max_len: int | None = None, congruent: bool = False,
                       alpha: float = 0.0) -> IncongruentResult:
    """Decode every source with the visual feature of another sentence.

    ``congruent=True`` uses the identity permutation (standard decoding).
    """
    n = len(sources)
    if visual is not None and len(visual) != n:
        raise ValueError(f"{len(visual)} feature records for {n} sentences")
    perm = np.arange(n) if congruent else derangement(n, seed)
    hyps = []
    for i, src in enumerate(sources):
        feat = None if visual is None else visual[perm[i]]
        hyps.append(beam_search(model, src, feat, beam=beam, max_len=max_len, alpha=alpha)[0])
    return IncongruentResult([strip_eos(h.tokens) for h in hyps], perm, None if congruent else seed, hyps)
