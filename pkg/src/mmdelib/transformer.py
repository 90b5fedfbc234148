"""Transformer encoder/decoder with optional visual conditioning or visual attention.

Residual sublayers use pre-normalisation: ``x + sublayer(norm(x))``.  A
sublayer whose output projection is zero is then an exact identity, so a
multimodal model with zeroed visual parameters reproduces its text-only
counterpart bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import features as F
from .subword import BOS, PAD
from .tensor_core import (
    Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, Tensor,
    additive_mask, causal_keep, cross_entropy, dropout, linear, log_softmax, no_grad,
    padding_keep, transpose,
)

FAMILIES = ("Trans", "A-Delib", "C-Delib")
VISUAL_MODES = ("None", "Cond-AvgPool", "Attn-AvgPool", "Attn-Emb", "Attn-Conv")
MODE_TAG = {
    "Cond-AvgPool": "AvgPool",
    "Attn-AvgPool": "AvgPool",
    "Attn-Emb": "ActionScores",
    "Attn-Conv": "ConvMap",
}
# Row width of the visual attention memory before projection (d_emb for Attn-Emb).
_CONTEXT_WIDTH = {"Attn-AvgPool": 64, "Attn-Conv": 2048}


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc_blocks: int = 2
    n_dec_blocks: int = 2
    d_ffn: int = 128
    dropout: float = 0.1
    label_smoothing: float = 0.1
    src_vocab: int = 64
    tgt_vocab: int = 64
    family: str = "Trans"
    visual_mode: str = "None"
    d_emb: int = 64
    max_len: int = 128
    seed: int = 1
    share_embeddings: bool = True
    visual_blocks: str = "all"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "n_heads", "n_enc_blocks", "n_dec_blocks", "d_ffn", "src_vocab",
                     "tgt_vocab", "d_emb", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.visual_mode not in VISUAL_MODES:
            raise ValueError(f"visual_mode must be one of {VISUAL_MODES}, got {self.visual_mode!r}")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("dropout and label_smoothing must lie in [0, 1)")
        self.visual_block_set(self.n_dec_blocks)

    @property
    def feature_tag(self) -> str | None:
        return MODE_TAG.get(self.visual_mode)

    @property
    def is_cond(self) -> bool:
        return self.visual_mode.startswith("Cond")

    @property
    def is_attn(self) -> bool:
        return self.visual_mode.startswith("Attn")

    def visual_block_set(self, n_blocks: int) -> set[int]:
        if self.visual_blocks == "all":
            return set(range(n_blocks))
        chosen = {int(b) for b in self.visual_blocks.split(",") if b.strip()}
        if any(b < 0 or b >= n_blocks for b in chosen):
            raise ValueError(f"visual_blocks {self.visual_blocks!r} out of range for {n_blocks} blocks")
        return chosen

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                raise KeyError(f"unknown ModelConfig field {k!r}")
            t = kinds[k]
            if t in ("int", int):
                v = int(v)
            elif t in ("float", float):
                v = float(v)
            elif t in ("bool", bool):
                v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            else:
                v = str(v)
            out[k] = v
        return cls(**out)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def sinusoid_table(n_pos: int, d: int) -> np.ndarray:
    pos = np.arange(n_pos)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def pad_batch(seqs, pad: int = PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


@dataclass
class EncoderOutput:
    H: Tensor               # [B, N, d_model]
    keep: np.ndarray        # [B, 1, 1, N] boolean key mask

    @property
    def mask(self) -> np.ndarray:
        return additive_mask(self.keep)


class EncoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.self_norm = LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ffn_norm = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, rng)
        self.rate = cfg.dropout

    def __call__(self, x: Tensor, mask: np.ndarray, rng) -> Tensor:
        y = self.self_norm(x)
        x = x + dropout(self.self_attn(y, y, mask, self.rate, rng), self.rate, rng, self.training)
        return x + dropout(self.ffn(self.ffn_norm(x), self.rate, rng), self.rate, rng, self.training)


class DecoderBlock(Module):
    """Decoder block; ``first_pass`` adds deliberation attention, ``visual`` a visual sublayer.

    Sublayer order: causal self-attention -> encoder attention (and, when
    deliberating, first-pass attention: summed with it in ``"additive"`` mode,
    stacked after it in ``"cascade"`` mode) -> visual attention -> feed-forward.
    """

    def __init__(self, cfg: ModelConfig, rng, visual: bool = False, first_pass: str | None = None):
        if first_pass not in (None, "additive", "cascade"):
            raise ValueError(f"unknown first_pass mode {first_pass!r}")
        d, h = cfg.d_model, cfg.n_heads
        self.self_norm = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, h, rng)
        self.enc_norm = LayerNorm(d)
        self.enc_attn = MultiHeadAttention(d, h, rng)
        self.first_pass = first_pass
        if first_pass == "cascade":
            self.fp_norm = LayerNorm(d)
        if first_pass is not None:
            self.fp_attn = MultiHeadAttention(d, h, rng)
        self.has_visual = visual
        if visual:
            self.visual_norm = LayerNorm(d)
            self.visual_attn = MultiHeadAttention(d, h, rng)
        self.ffn_norm = LayerNorm(d)
        self.ffn = FeedForward(d, cfg.d_ffn, rng)
        self.rate = cfg.dropout
        self.probe: dict | None = None

    def _res(self, x: Tensor, y: Tensor, rng) -> Tensor:
        return x + dropout(y, self.rate, rng, self.training)

    def __call__(self, x: Tensor, enc: Tensor, enc_mask, self_mask, rng=None,
                 fp: Tensor | None = None, fp_mask=None, vis: Tensor | None = None) -> Tensor:
        r = self.rate
        y = self.self_norm(x)
        x = self._res(x, self.self_attn(y, y, self_mask, r, rng), rng)
        probe = self.probe
        if self.first_pass is not None and fp is None:
            raise ValueError("this block attends to the first pass but no first-pass memory was given")
        if self.first_pass == "additive":
            y = self.enc_norm(x)
            if probe is not None:
                probe["enc_attn_in"] = y.data.copy()
                probe["fp_attn_in"] = y.data.copy()
            a = self.enc_attn(y, enc, enc_mask, r, rng)
            b = self.fp_attn(y, fp, fp_mask, r, rng)
            x = self._res(self._res(x, a, rng), b, rng)
        else:
            y = self.enc_norm(x)
            if probe is not None:
                probe["enc_attn_in"] = y.data.copy()
            x = self._res(x, self.enc_attn(y, enc, enc_mask, r, rng), rng)
            if self.first_pass == "cascade":
                if probe is not None:
                    probe["enc_layer_out"] = x.data.copy()
                y = self.fp_norm(x)
                if probe is not None:
                    probe["fp_attn_in"] = y.data.copy()
                x = self._res(x, self.fp_attn(y, fp, fp_mask, r, rng), rng)
        if probe is not None:
            probe["textual_out"] = x.data.copy()
        if self.has_visual:
            if vis is None:
                raise ValueError("visual block called without visual memory")
            y = self.visual_norm(x)
            x = self._res(x, self.visual_attn(y, vis, None, r, rng), rng)
        return self._res(x, self.ffn(self.ffn_norm(x), r, rng), rng)


class VisualEncoder(Module):
    """Turns raw per-sentence features into the model-side visual inputs."""

    def __init__(self, cfg: ModelConfig, rng):
        self.mode = cfg.visual_mode
        d = cfg.d_model
        if cfg.is_cond:
            # strictly linear, no bias
            self.visual_cond = Linear(2048, d, rng, bias=False)
        elif cfg.is_attn:
            width = cfg.d_emb if cfg.visual_mode == "Attn-Emb" else _CONTEXT_WIDTH[cfg.visual_mode]
            if cfg.visual_mode == "Attn-Emb":
                self.visual_table = Parameter(rng.normal(0.0, 1.0, size=(F.N_CATEGORIES, cfg.d_emb)))
            self.visual_proj = Linear(width, d, rng, bias=False)

    def context(self, raw: np.ndarray) -> F.VisualContext:
        tag = MODE_TAG[self.mode]
        return F.to_context(tag, raw, getattr(self, "visual_table", None))

    def memory(self, raw: np.ndarray, dtype) -> Tensor:
        """Projected attention memory [B, R, d_model]."""
        ctx = self.context(raw).matrix
        if not isinstance(ctx, Tensor):
            ctx = Tensor(np.asarray(ctx, dtype=dtype))
        return self.visual_proj(ctx)

    def offset(self, raw: np.ndarray, dtype) -> Tensor:
        """Conditioning offset [B, 1, d_model] added to every encoder position."""
        raw = np.asarray(raw, dtype=dtype)
        if raw.shape[-1:] != (2048,):
            raise F.FeatureFormatError(f"conditioning expects 2048-d AvgPool vectors, got {raw.shape}")
        return self.visual_cond(Tensor(raw[:, None, :]))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.n_enc_blocks)]
        self.final_norm = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor, mask, rng) -> Tensor:
        for block in self.blocks:
            x = block(x, mask, rng)
        return self.final_norm(x)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng, visual_blocks: set[int] = frozenset(),
                 first_pass: str | None = None, first_pass_blocks: int = 0):
        self.blocks = [
            DecoderBlock(cfg, rng, visual=i in visual_blocks,
                         first_pass=first_pass if i < first_pass_blocks else None)
            for i in range(cfg.n_dec_blocks)
        ]
        self.final_norm = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor, enc: EncoderOutput, rng, fp=None, fp_mask=None, vis=None) -> Tensor:
        L = x.shape[1]
        self_mask = additive_mask(np.broadcast_to(causal_keep(L), (1, 1, L, L)))
        enc_mask = enc.mask
        for block in self.blocks:
            x = block(x, enc.H, enc_mask, self_mask, rng, fp=fp, fp_mask=fp_mask, vis=vis)
        return self.final_norm(x)


class TargetSide(Module):
    """Target embedding, positional encoding and the (optionally tied) output layer."""

    def __init__(self, cfg: ModelConfig, rng):
        self.embed = Embedding(cfg.tgt_vocab, cfg.d_model, rng)
        if not cfg.share_embeddings:
            self.output = Linear(cfg.d_model, cfg.tgt_vocab, rng, bias=False)
        self.shared = cfg.share_embeddings

    def logits(self, states: Tensor) -> Tensor:
        if self.shared:
            return linear(states, transpose(self.embed.weight))
        return self.output(states)


class TransformerMT(Module):
    """Trans-Baseline / Trans-Cond / Trans-Attn, selected by ``cfg.visual_mode``."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.src_embed = Embedding(cfg.src_vocab, d, rng)
        self.encoder = Encoder(cfg, rng)
        self.target = TargetSide(cfg, rng)
        vis_blocks = cfg.visual_block_set(cfg.n_dec_blocks) if cfg.is_attn else set()
        self.decoder = Decoder(cfg, rng, visual_blocks=vis_blocks)
        if cfg.visual_mode != "None":
            self.visual = VisualEncoder(cfg, rng)
        self.positions = sinusoid_table(cfg.max_len + 2, d)
        self.dropout_rng = np.random.default_rng(cfg.seed + 7919)

    @property
    def dtype(self):
        return self.src_embed.weight.dtype

    def _embed(self, table: Embedding, ids: np.ndarray) -> Tensor:
        L = ids.shape[1]
        if L > self.cfg.max_len + 1:
            raise ValueError(f"sequence of length {L} exceeds max_len={self.cfg.max_len}")
        x = table(ids) * math.sqrt(self.cfg.d_model) + self.positions[:L].astype(self.dtype)
        return dropout(x, self.cfg.dropout, self.dropout_rng, self.training)

    def encode(self, src: np.ndarray, visual: np.ndarray | None = None) -> EncoderOutput:
        """Enc-Van, or Enc-Cond when configured (``visual`` = [B, 2048] AvgPool)."""
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        keep = padding_keep(src)
        H = self.encoder(self._embed(self.src_embed, src), additive_mask(keep), self.dropout_rng)
        if self.cfg.is_cond:
            if visual is None:
                raise ValueError("Enc-Cond needs an AvgPool feature per sentence")
            H = H + self.visual.offset(visual, self.dtype)
        return EncoderOutput(H, keep)

    def visual_memory(self, visual: np.ndarray | None) -> Tensor | None:
        if not self.cfg.is_attn:
            return None
        if visual is None:
            raise ValueError(f"{self.cfg.visual_mode} needs visual features")
        return self.visual.memory(visual, self.dtype)

    def decode(self, tgt_in: np.ndarray, enc: EncoderOutput, vis: Tensor | None = None):
        """Teacher-forced decoder pass -> (pre-softmax states S, logits)."""
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        if self.cfg.is_attn and vis is None:
            raise ValueError("Dec-Attn needs a visual memory")
        x = self._embed(self.target.embed, tgt_in)
        S = self.decoder(x, enc, self.dropout_rng, vis=vis)
        return S, self.target.logits(S)

    def forward(self, src, tgt_in, visual=None):
        enc = self.encode(src, visual if self.cfg.is_cond else None)
        return self.decode(tgt_in, enc, self.visual_memory(visual))

    def loss(self, batch) -> Tensor:
        return translate_loss(batch, self)

    # -- incremental decoding interface ---------------------------------
    def start_batch(self, srcs, visual=None) -> dict:
        with no_grad():
            src = pad_batch(srcs)
            vis = None if visual is None else np.asarray(visual)
            enc = self.encode(src, vis if self.cfg.is_cond else None)
            return {"enc": enc, "vis": self.visual_memory(vis)}

    def start(self, src_ids, visual=None) -> dict:
        return self.start_batch([list(src_ids)], None if visual is None else np.asarray(visual)[None])

    def next_logprobs(self, state: dict, prefixes: np.ndarray) -> np.ndarray:
        """Log-probabilities of the next token after each prefix ([k, t] -> [k, V])."""
        with no_grad():
            _, logits = self.decode(prefixes, state["enc"], state["vis"])
            return log_softmax(logits[:, -1, :]).data


def shift_right(tgt: np.ndarray) -> np.ndarray:
    """Teacher-forcing input: BOS followed by all but the last target token."""
    tgt = np.asarray(tgt, dtype=np.int64)
    out = np.full_like(tgt, PAD)
    out[:, 0] = BOS
    out[:, 1:] = tgt[:, :-1]
    out[:, 1:][tgt[:, :-1] == PAD] = PAD
    return out


def translate_loss(batch, model: TransformerMT) -> Tensor:
    """Teacher-forced label-smoothed cross-entropy of ``batch`` (src, tgt, visual)."""
    _, logits = model.forward(batch.src, shift_right(batch.tgt), batch.visual)
    return cross_entropy(logits, batch.tgt, PAD, model.cfg.label_smoothing if model.training else 0.0)


# Spec-facing operation names ------------------------------------------------

def encoder_forward(model: TransformerMT, tokens) -> EncoderOutput:
    if model.cfg.is_cond:
        raise ValueError("model is configured with Enc-Cond; use encoder_cond_forward")
    return model.encode(tokens)


def encoder_cond_forward(model: TransformerMT, tokens, visual) -> EncoderOutput:
    if not model.cfg.is_cond:
        raise ValueError("model has no conditioning projection")
    if visual is None:
        raise ValueError("Enc-Cond needs an AvgPool feature")
    return model.encode(tokens, np.atleast_2d(visual))


def decoder_van_forward(model: TransformerMT, tgt_in, enc: EncoderOutput):
    if model.cfg.is_attn:
        raise ValueError("model carries visual attention; use decoder_attn_forward")
    return model.decode(tgt_in, enc)


def decoder_attn_forward(model: TransformerMT, tgt_in, enc: EncoderOutput, visual: F.VisualContext):
    if not model.cfg.is_attn:
        raise ValueError("model has no visual attention")
    if visual.tag != model.cfg.feature_tag:
        raise ValueError(f"visual context {visual.tag} does not match mode {model.cfg.visual_mode}")
    ctx = visual.matrix
    if not isinstance(ctx, Tensor):
        ctx = Tensor(np.asarray(ctx, dtype=model.dtype))
    if ctx.ndim == 2:
        ctx = ctx.reshape((1,) + ctx.shape)
    return model.decode(tgt_in, enc, model.visual.visual_proj(ctx))


def zero_visual_parameters(model: Module) -> None:
    """Zero every parameter on a visual path (conditioning, projections, visual sublayers)."""
    for name, p in model.named_parameters():
        if "visual" in name:
            p.data = np.zeros_like(p.data)


def text_state(model: Module) -> dict[str, np.ndarray]:
    return {n: a for n, a in model.state_dict().items() if "visual" not in n}
