"""Two-pass deliberation decoding in additive and cascade form.

The first pass (encoder + vanilla decoder) is a trained transformer that is
frozen while the second-pass decoder learns to refine its drafts.  Second-pass
blocks in the first half of the stack attend to the first pass through the
per-step vectors ``[s_t ; E(y_t)]`` (pre-softmax state next to the embedding of
the emitted token), linearly projected to ``d_model``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .decode import beam_search
from .tensor_core import (
    Linear, Module, Tensor, additive_mask, cross_entropy, dropout, log_softmax, no_grad,
    parameter_hash,
)
from .training import Batch, ParallelData, TrainConfig, fit, make_batches
from .transformer import (
    Decoder, EncoderOutput, ModelConfig, TargetSide, TransformerMT, VisualEncoder, pad_batch,
    shift_right, sinusoid_table,
)

MODES = {"A-Delib": "additive", "C-Delib": "cascade"}


@dataclass
class FirstPassOutput:
    tokens: np.ndarray      # [M] hypothesis ids (EOS included when finished)
    states: np.ndarray      # [M, d_model] pre-softmax decoder states
    concat: np.ndarray      # [M, 2 d_model] rows [state ; embedding(token)]
    score: float

    def __post_init__(self):
        M = len(self.tokens)
        if self.states.shape[0] != M or self.concat.shape[0] != M:
            raise ValueError("first-pass tokens, states and concat must share length")


def first_pass_config(cfg: ModelConfig) -> ModelConfig:
    """The transformer underlying a deliberation model (1P has no visual attention)."""
    return cfg.replace(family="Trans", visual_mode=cfg.visual_mode if cfg.is_cond else "None")


class DeliberationMT(Module):
    def __init__(self, cfg: ModelConfig, fp_beam: int = 10):
        if cfg.family not in MODES:
            raise ValueError(f"deliberation needs family A-Delib or C-Delib, got {cfg.family}")
        self.cfg = cfg
        self.mode = MODES[cfg.family]
        self.first = TransformerMT(first_pass_config(cfg))
        rng = np.random.default_rng(cfg.seed + 104729)
        d = cfg.d_model
        self.n_fp_blocks = math.ceil(cfg.n_dec_blocks / 2)
        self.second_target = TargetSide(cfg, rng)
        self.fp_proj = Linear(2 * d, d, rng)
        vis_blocks = cfg.visual_block_set(cfg.n_dec_blocks) if cfg.is_attn else set()
        self.second = Decoder(cfg, rng, visual_blocks=vis_blocks, first_pass=self.mode,
                              first_pass_blocks=self.n_fp_blocks)
        if cfg.is_attn:
            self.visual = VisualEncoder(cfg, rng)
        self.positions = sinusoid_table(cfg.max_len + 2, d)
        self.dropout_rng = np.random.default_rng(cfg.seed + 15485863)
        self.fp_beam = fp_beam
        self.stage1_loaded = False

    @property
    def dtype(self):
        return self.fp_proj.weight.dtype

    # -- stage-1 handling -----------------------------------------------
    def load_first_pass(self, stage1: TransformerMT) -> None:
        if stage1.cfg != self.first.cfg:
            raise ValueError("stage-1 transformer config does not match the deliberation first pass")
        self.first.load_state_dict(stage1.state_dict())
        self.stage1_loaded = True

    def freeze_first_pass(self) -> None:
        self.first.freeze()

    def frozen_hash(self) -> str:
        return parameter_hash(self.first.named_parameters())

    # -- forward --------------------------------------------------------
    def fp_memory(self, concat: np.ndarray, keep: np.ndarray) -> tuple[Tensor, np.ndarray]:
        C = self.fp_proj(Tensor(np.asarray(concat, dtype=self.dtype)))
        return C, additive_mask(keep)

    def second_forward(self, tgt_in: np.ndarray, enc: EncoderOutput, fp_concat: np.ndarray,
                       fp_keep: np.ndarray, visual=None):
        """Teacher-forced second pass -> (states, logits)."""
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        L = tgt_in.shape[1]
        if L > self.cfg.max_len + 1:
            raise ValueError(f"target of length {L} exceeds max_len={self.cfg.max_len}")
        x = self.second_target.embed(tgt_in) * math.sqrt(self.cfg.d_model) + self.positions[:L].astype(self.dtype)
        x = dropout(x, self.cfg.dropout, self.dropout_rng, self.training)
        C, fp_mask = self.fp_memory(fp_concat, fp_keep)
        vis = None
        if self.cfg.is_attn:
            if visual is None:
                raise ValueError(f"{self.cfg.visual_mode} needs visual features")
            vis = self.visual.memory(visual, self.dtype)
        S = self.second(x, enc, self.dropout_rng, fp=C, fp_mask=fp_mask, vis=vis)
        return S, self.second_target.logits(S)

    def encode(self, src, visual=None) -> EncoderOutput:
        return self.first.encode(src, visual if self.cfg.is_cond else None)

    def loss(self, batch: Batch) -> Tensor:
        enc = self.encode(batch.src, batch.visual)
        _, logits = self.second_forward(shift_right(batch.tgt), enc, batch.fp_concat, batch.fp_keep,
                                        batch.visual)
        return cross_entropy(logits, batch.tgt, 0, self.cfg.label_smoothing if self.training else 0.0)

    # -- incremental decoding interface ---------------------------------
    def start_batch(self, srcs, visual=None, fps: Sequence[FirstPassOutput] | None = None) -> dict:
        with no_grad():
            if fps is None:
                fps = [first_pass(self, s, None if visual is None else visual[i], self.fp_beam, 1)[0]
                       for i, s in enumerate(srcs)]
            concat, keep = pad_first_pass(fps)
            vis = None if visual is None else np.asarray(visual)
            enc = self.encode(pad_batch(srcs), vis)
            C, fp_mask = self.fp_memory(concat, keep)
            mem = self.visual.memory(vis, self.dtype) if self.cfg.is_attn else None
            return {"enc": enc, "C": C, "fp_mask": fp_mask, "vis": mem, "fps": fps}

    def start(self, src_ids, visual=None) -> dict:
        return self.start_batch([list(src_ids)], None if visual is None else np.asarray(visual)[None])

    def next_logprobs(self, state: dict, prefixes: np.ndarray) -> np.ndarray:
        with no_grad():
            prefixes = np.asarray(prefixes, dtype=np.int64)
            L = prefixes.shape[1]
            x = self.second_target.embed(prefixes) * math.sqrt(self.cfg.d_model) + self.positions[:L].astype(self.dtype)
            S = self.second(x, state["enc"], None, fp=state["C"], fp_mask=state["fp_mask"], vis=state["vis"])
            return log_softmax(self.second_target.logits(S)[:, -1, :]).data


def pad_first_pass(fps: Sequence[FirstPassOutput]) -> tuple[np.ndarray, np.ndarray]:
    """Stack first-pass concat rows -> ([B, M, 2d] array, [B, 1, 1, M] keep-mask)."""
    M = max(len(fp.tokens) for fp in fps)
    width = fps[0].concat.shape[1]
    concat = np.zeros((len(fps), M, width), dtype=fps[0].concat.dtype)
    keep = np.zeros((len(fps), 1, 1, M), dtype=bool)
    for i, fp in enumerate(fps):
        concat[i, : len(fp.tokens)] = fp.concat
        keep[i, 0, 0, : len(fp.tokens)] = True
    return concat, keep


def first_pass_states(first: TransformerMT, src, visual, hyps: Sequence[Sequence[int]]) -> list[np.ndarray]:
    """Teacher-force each hypothesis through the first pass; returns its [M, d] states."""
    with no_grad():
        tgt = pad_batch([list(h) for h in hyps])
        src_b = np.repeat(np.asarray(src, dtype=np.int64)[None, :], len(hyps), axis=0)
        vis = None
        if visual is not None and first.cfg.is_cond:
            vis = np.repeat(np.asarray(visual)[None], len(hyps), axis=0)
        S, _ = first.forward(src_b, shift_right(tgt), vis)
        return [S.data[i, : len(h)] for i, h in enumerate(hyps)]


def first_pass(model: DeliberationMT, source, visual=None, beam: int = 10, n_best: int = 10) -> list[FirstPassOutput]:
    """n-best first-pass drafts of ``source`` with their states, best first."""
    if n_best > beam:
        raise ValueError(f"n_best={n_best} exceeds beam={beam}")
    first = model.first
    cond_visual = visual if first.cfg.is_cond else None
    hyps = beam_search(first, source, cond_visual, beam=beam)[:n_best]
    states = first_pass_states(first, source, cond_visual, [h.tokens for h in hyps])
    emb = first.target.embed.weight.data
    out = []
    for h, S in zip(hyps, states):
        toks = np.asarray(h.tokens, dtype=np.int64)
        out.append(FirstPassOutput(toks, S, np.concatenate([S, emb[toks]], axis=1), h.score))
    return out


def second_pass_forward(model: DeliberationMT, tgt_in, enc: EncoderOutput, fp: FirstPassOutput | Sequence[FirstPassOutput],
                        visual=None):
    """Teacher-forced second-pass logits for ``tgt_in`` given first-pass draft(s)."""
    fps = [fp] if isinstance(fp, FirstPassOutput) else list(fp)
    concat, keep = pad_first_pass(fps)
    return model.second_forward(tgt_in, enc, concat, keep, visual)[1]


# ---------------------------------------------------------------------------
# Two-stage training
# ---------------------------------------------------------------------------

@dataclass
class StageTwoData:
    """Second-pass training instances: one per (sentence, first-pass hypothesis)."""

    data: ParallelData
    fps: list[list[FirstPassOutput]]

    def instances(self, rng: np.random.Generator | None, subsample: bool) -> list[tuple[int, int]]:
        if subsample:
            return [(i, int(rng.integers(len(f)))) for i, f in enumerate(self.fps)]
        return [(i, j) for i, f in enumerate(self.fps) for j in range(len(f))]

    def collate(self, pairs: Sequence[tuple[int, int]]) -> Batch:
        idx = np.array([i for i, _ in pairs])
        d = self.data
        concat, keep = pad_first_pass([self.fps[i][j] for i, j in pairs])
        visual = None if d.visual is None else d.visual[idx]
        return Batch(pad_batch([d.src[i] for i in idx]), pad_batch([d.tgt[i] for i in idx]), visual, idx,
                     concat, keep)


def compute_first_passes(model: DeliberationMT, data: ParallelData, beam: int, n_best: int) -> list[list[FirstPassOutput]]:
    out = []
    for i, src in enumerate(data.src):
        vis = None if data.visual is None else data.visual[i]
        out.append(first_pass(model, src, vis, beam, n_best))
    return out


def stage_two_batches(stage2: StageTwoData, tcfg: TrainConfig, epoch: int) -> list[Batch]:
    rng = np.random.default_rng((tcfg.seed, epoch, 2))
    pairs = stage2.instances(rng, tcfg.nbest_subsample)
    src_lens = [len(stage2.data.src[i]) for i, _ in pairs]
    tgt_lens = [max(len(stage2.data.tgt[i]), len(stage2.fps[i][j].tokens)) for i, j in pairs]
    groups = make_batches(src_lens, tgt_lens, tcfg.batch_tokens, rng)
    return [stage2.collate([pairs[g] for g in grp]) for grp in groups]


def train_second_stage(model: DeliberationMT, train: ParallelData, validate: Callable, tcfg: TrainConfig,
                       k: int | None = None, max_epochs: int | None = None, on_epoch=None):
    """Freeze encoder + first pass and train the second pass on k-best drafts."""
    if not model.stage1_loaded:
        raise RuntimeError("stage 2 needs stage-1 weights: call load_first_pass() first")
    k = k or tcfg.n_best
    model.freeze_first_pass()
    before = model.frozen_hash()
    stage2 = StageTwoData(train, compute_first_passes(model, train, max(tcfg.beam, k), k))
    result = fit(model, lambda epoch: stage_two_batches(stage2, tcfg, epoch), validate, tcfg,
                 tcfg.patience_delib, model.cfg.d_model, max_epochs, on_epoch)
    if model.frozen_hash() != before:
        raise RuntimeError("frozen first-pass parameters changed during stage 2")
    return result


def two_stage_train(train: ParallelData, cfg: ModelConfig, tcfg: TrainConfig,
                    validate_first: Callable, validate_second: Callable,
                    stage1: TransformerMT | None = None, k: int | None = None,
                    max_epochs: int | None = None):
    """Stage 1: train (or reuse) the transformer; stage 2: freeze it and train the second pass."""
    from .pipeline.experiment import transformer_batches  # local: pipeline depends on this module

    result1 = None
    if stage1 is None:
        stage1 = TransformerMT(first_pass_config(cfg))
        result1 = fit(stage1, lambda epoch: transformer_batches(train, tcfg, epoch), validate_first, tcfg,
                      tcfg.patience_trans, cfg.d_model, max_epochs)
    model = DeliberationMT(cfg, fp_beam=tcfg.beam)
    model.load_first_pass(stage1)
    result2 = train_second_stage(model, train, validate_second, tcfg, k, max_epochs)
    return model, result1, result2
