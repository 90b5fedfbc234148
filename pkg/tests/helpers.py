"""Small-model factories shared by the test modules."""

from __future__ import annotations

import numpy as np

from mmdelib.deliberation import DeliberationMT
from mmdelib.features import N_CATEGORIES
from mmdelib.subword import EOS
from mmdelib.training import Batch
from mmdelib.transformer import ModelConfig, TransformerMT, pad_batch

VARIANTS = [(f, m) for f in ("Trans", "A-Delib", "C-Delib") for m in ("Cond-AvgPool", "Attn-AvgPool")]
MODES = ("Cond-AvgPool", "Attn-AvgPool", "Attn-Emb", "Attn-Conv")

# (number, title, passed, detail) per acceptance criterion; printed by conftest.
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def small_config(family="Trans", visual_mode="None", d=8, heads=2, seed=0, src_vocab=11, tgt_vocab=13,
                 n_dec_blocks=2, **kw) -> ModelConfig:
    fields = dict(d_model=d, n_heads=heads, n_enc_blocks=2, n_dec_blocks=n_dec_blocks, d_ffn=2 * d, dropout=0.1,
                  label_smoothing=0.1, src_vocab=src_vocab, tgt_vocab=tgt_vocab, family=family,
                  visual_mode=visual_mode, d_emb=d, max_len=24, seed=seed)
    fields.update(kw)
    return ModelConfig(**fields)


def build(cfg: ModelConfig, dtype=np.float32, train=False):
    model = TransformerMT(cfg) if cfg.family == "Trans" else DeliberationMT(cfg, fp_beam=2)
    if cfg.family != "Trans":
        model.stage1_loaded = True
    model.astype(dtype)
    model.train() if train else model.eval()
    return model


def random_visual(mode: str, batch: int, rng: np.random.Generator) -> np.ndarray | None:
    if mode in ("Cond-AvgPool", "Attn-AvgPool"):
        return (rng.normal(size=(batch, 2048)) / 45.0).astype(np.float32)
    if mode == "Attn-Conv":
        return (rng.normal(size=(batch, 7, 7, 2048)) / 45.0).astype(np.float32)
    if mode == "Attn-Emb":
        return rng.random((batch, N_CATEGORIES)).astype(np.float32)
    return None


def random_sentence(rng, vocab: int, lo=1, hi=7) -> list[int]:
    return [int(t) for t in rng.integers(4, vocab, size=int(rng.integers(lo, hi + 1)))] + [EOS]


def random_fp(rng, batch: int, d: int, lo=1, hi=6, dtype=np.float32):
    """Random first-pass memory: ([B, M, 2d] concat, [B, 1, 1, M] keep)."""
    lens = rng.integers(lo, hi + 1, size=batch)
    M = int(lens.max())
    concat = rng.normal(size=(batch, M, 2 * d)).astype(dtype)
    keep = np.zeros((batch, 1, 1, M), dtype=bool)
    for i, n in enumerate(lens):
        keep[i, 0, 0, :n] = True
        concat[i, n:] = 0.0
    return concat, keep


def random_batch(rng, cfg: ModelConfig, batch: int = 3, dtype=np.float32) -> Batch:
    src = pad_batch([random_sentence(rng, cfg.src_vocab) for _ in range(batch)])
    tgt = pad_batch([random_sentence(rng, cfg.tgt_vocab) for _ in range(batch)])
    vis = random_visual(cfg.visual_mode, batch, rng)
    if vis is not None:
        vis = vis.astype(dtype)
    b = Batch(src, tgt, vis, np.arange(batch))
    if cfg.family != "Trans":
        b.fp_concat, b.fp_keep = random_fp(rng, batch, cfg.d_model, dtype=dtype)
    return b


def perturb_visual_parameters(model, rng, scale=0.5) -> None:
    """Give every visual parameter clearly nonzero values."""
    for name, p in model.named_parameters():
        if "visual" in name:
            p.data = (scale * rng.normal(size=p.data.shape)).astype(p.data.dtype)
