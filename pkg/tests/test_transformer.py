import math

import numpy as np
import pytest

from mmdelib.features import N_CATEGORIES, to_context
from mmdelib.subword import EOS
from mmdelib.tensor_core import (
    Adam, MultiHeadAttention, Tensor, additive_mask, backward, causal_keep, check_module_gradients,
    padding_keep,
)
from mmdelib.transformer import (
    DecoderBlock, EncoderBlock, ModelConfig, TransformerMT, decoder_attn_forward, decoder_van_forward,
    encoder_cond_forward, encoder_forward, shift_right, text_state, translate_loss, zero_visual_parameters,
)
from mmdelib.training import Batch
from mmdelib.transformer import pad_batch

from helpers import build, perturb_visual_parameters, random_batch, random_visual, small_config


def _identity_attention(d=2):
    mha = MultiHeadAttention(d, 1, np.random.default_rng(0))
    for lin in (mha.q, mha.k, mha.v, mha.o):
        lin.weight.data = np.eye(d)
        lin.bias.data = np.zeros(d)
    return mha


class TestAttention:
    def test_hand_computed_two_by_two(self):
        out = _identity_attention()(Tensor([[[1.0, 0.0]]]), Tensor([[[1.0, 0.0], [0.0, 1.0]]]))
        w0 = 1.0 / (1.0 + math.exp(-1.0 / math.sqrt(2.0)))
        np.testing.assert_allclose(out.data[0, 0], [w0, 1.0 - w0], rtol=1e-12)

    def test_identical_keys_average_values(self):
        rng = np.random.default_rng(1)
        mha = MultiHeadAttention(8, 2, rng)
        row = rng.normal(size=8)
        memory = np.tile(row, (1, 5, 1))
        out = mha(Tensor(rng.normal(size=(1, 3, 8))), Tensor(memory)).data
        expected = (row @ mha.v.weight.data + mha.v.bias.data) @ mha.o.weight.data + mha.o.bias.data
        np.testing.assert_allclose(out[0], np.tile(expected, (3, 1)), rtol=1e-5, atol=1e-6)

    def test_causal_position_zero(self):
        rng = np.random.default_rng(2)
        mha = MultiHeadAttention(8, 2, rng)
        mha.record = True
        x = Tensor(rng.normal(size=(1, 4, 8)))
        mha(x, x, additive_mask(causal_keep(4)))
        assert np.all(mha.last_weights[..., 0, 1:] == 0.0)
        assert np.all(np.triu(mha.last_weights[0, 0], 1) == 0.0)

    def test_rows_are_distributions(self):
        rng = np.random.default_rng(3)
        mha = MultiHeadAttention(8, 4, rng)
        mha.record = True
        ids = np.array([[5, 6, 2, 0, 0]])
        x = Tensor(rng.normal(size=(1, 5, 8)))
        mha(x, x, additive_mask(padding_keep(ids)))
        np.testing.assert_allclose(mha.last_weights.sum(-1), 1.0, atol=1e-6)
        assert np.all(mha.last_weights[..., 3:] == 0.0)

    def test_fully_masked_row_rejected(self):
        with pytest.raises(ValueError):
            additive_mask(np.zeros((1, 1, 1, 3), dtype=bool))


@pytest.mark.parametrize("seed", [0, 1, 2])
class TestCompositeGradients:
    def _check(self, module, loss_fn, seed):
        errs = check_module_gradients(loss_fn, module.named_parameters(), max_coords=24, seed=seed)
        assert max(errs.values()) < 1e-4, errs

    def test_attention(self, seed):
        rng = np.random.default_rng(seed)
        mha = MultiHeadAttention(8, 2, rng).astype(np.float64)
        q, m = Tensor(rng.normal(size=(2, 3, 8))), Tensor(rng.normal(size=(2, 4, 8)))
        mask = additive_mask(padding_keep(np.array([[5, 5, 5, 5], [5, 5, 0, 0]])))
        w = rng.normal(size=(2, 3, 8))
        self._check(mha, lambda: (mha(q, m, mask) * w).sum(), seed)

    def test_encoder_block(self, seed):
        rng = np.random.default_rng(seed)
        cfg = small_config(dropout=0.0)
        block = EncoderBlock(cfg, rng).astype(np.float64)
        x = Tensor(rng.normal(size=(2, 4, 8)))
        mask = additive_mask(padding_keep(np.array([[5, 5, 5, 0], [5, 5, 5, 5]])))
        w = rng.normal(size=(2, 4, 8))
        self._check(block, lambda: (block(x, mask, None) * w).sum(), seed)

    @pytest.mark.parametrize("first_pass,visual", [(None, False), (None, True), ("additive", True),
                                                   ("cascade", False)])
    def test_decoder_block(self, seed, first_pass, visual):
        rng = np.random.default_rng(seed)
        cfg = small_config(dropout=0.0)
        block = DecoderBlock(cfg, rng, visual=visual, first_pass=first_pass).astype(np.float64)
        x, enc = Tensor(rng.normal(size=(1, 3, 8))), Tensor(rng.normal(size=(1, 4, 8)))
        fp, vis = Tensor(rng.normal(size=(1, 2, 8))), Tensor(rng.normal(size=(1, 5, 8)))
        self_mask = additive_mask(causal_keep(3))
        w = rng.normal(size=(1, 3, 8))
        self._check(block, lambda: (block(x, enc, None, self_mask, None, fp=fp, vis=vis) * w).sum(), seed)


class TestEncoder:
    def test_shape_and_determinism(self):
        model = build(small_config())
        src = np.array([[4, 5, 6, EOS]])
        a, b = encoder_forward(model, src), encoder_forward(model, src)
        assert a.H.shape == (1, 4, 8)
        assert a.H.data.tobytes() == b.H.data.tobytes()

    def test_pad_append(self):
        model = build(small_config())
        src = [4, 7, 9, EOS]
        short = encoder_forward(model, np.array([src])).H.data
        long = encoder_forward(model, np.array([src + [0, 0, 0]])).H.data
        assert np.array_equal(short[0], long[0, :4])


class TestEncoderCond:
    @pytest.fixture
    def model(self):
        model = build(small_config(visual_mode="Cond-AvgPool"))
        perturb_visual_parameters(model, np.random.default_rng(0), 0.05)
        return model

    def test_zero_feature(self, model):
        src = np.array([[4, 5, EOS]])
        vanilla = model.encoder(model._embed(model.src_embed, src), additive_mask(padding_keep(src)), None)
        cond = encoder_cond_forward(model, src, np.zeros(2048, dtype=np.float32))
        assert np.array_equal(cond.H.data, vanilla.data)

    def test_zero_projection(self, model):
        src = np.array([[4, 5, EOS]])
        v = random_visual("Cond-AvgPool", 1, np.random.default_rng(1))
        H = encoder_cond_forward(model, src, v).H.data
        model.visual.visual_cond.weight.data[:] = 0.0
        H0 = encoder_cond_forward(model, src, v).H.data
        assert not np.array_equal(H, H0)
        vanilla = model.encoder(model._embed(model.src_embed, src), additive_mask(padding_keep(src)), None)
        assert np.array_equal(H0, vanilla.data)

    def test_shared_offset(self, model):
        src = np.array([[4, 5, 6, 7, EOS]])
        v = random_visual("Cond-AvgPool", 1, np.random.default_rng(2))
        H = model.encoder(model._embed(model.src_embed, src), additive_mask(padding_keep(src)), None).data
        diff = encoder_cond_forward(model, src, v).H.data - H
        np.testing.assert_allclose(diff[0], np.tile(diff[0, :1], (5, 1)), atol=1e-6)


class TestDecoder:
    def test_shapes_and_tied_output(self):
        model = build(small_config())
        enc = encoder_forward(model, np.array([[4, 5, EOS]]))
        S, logits = decoder_van_forward(model, np.array([[1, 6, 7, 8]]), enc)
        assert S.shape == (1, 4, 8) and logits.shape == (1, 4, 13)
        recomputed = S.data[0].astype(np.float64) @ model.target.embed.weight.data.T.astype(np.float64)
        np.testing.assert_allclose(logits.data[0], recomputed, rtol=1e-5, atol=1e-6)

    def test_causality(self):
        model = build(small_config())
        rng = np.random.default_rng(4)
        enc = encoder_forward(model, np.array([[4, 5, 9, EOS]]))
        tgt = np.array([[1, 6, 7, 8, 9, 10]])
        _, base = decoder_van_forward(model, tgt, enc)
        for t in range(tgt.shape[1] - 1):
            alt = tgt.copy()
            alt[0, t + 1:] = rng.integers(4, 13, size=tgt.shape[1] - t - 1)
            _, out = decoder_van_forward(model, alt, enc)
            assert np.array_equal(out.data[0, : t + 1], base.data[0, : t + 1])


@pytest.mark.parametrize("mode", ["Attn-AvgPool", "Attn-Emb", "Attn-Conv"])
class TestDecoderAttn:
    def test_zeroed_visual_equals_vanilla(self, mode):
        mm = build(small_config(visual_mode=mode))
        zero_visual_parameters(mm)
        text = build(small_config())
        text.load_state_dict(text_state(mm))
        rng = np.random.default_rng(5)
        src, tgt = np.array([[4, 5, 6, EOS]]), np.array([[1, 7, 8]])
        vis = random_visual(mode, 1, rng)
        _, a = mm.forward(src, tgt, vis)
        _, b = text.forward(src, tgt)
        assert np.array_equal(a.data, b.data)

    def test_attention_rows_sum_to_one(self, mode):
        model = build(small_config(visual_mode=mode))
        for block in model.decoder.blocks:
            block.visual_attn.record = True
        model.forward(np.array([[4, 5, EOS]]), np.array([[1, 7]]), random_visual(mode, 1, np.random.default_rng(6)))
        rows = {"Attn-AvgPool": 32, "Attn-Conv": 49, "Attn-Emb": N_CATEGORIES}[mode]
        for block in model.decoder.blocks:
            w = block.visual_attn.last_weights
            assert w.shape[-1] == rows
            np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-5)

    def test_row_order_irrelevant_content_relevant(self, mode):
        model = build(small_config(visual_mode=mode))
        perturb_visual_parameters(model, np.random.default_rng(7), 1.0)
        rng = np.random.default_rng(8)
        ctx = model.visual.context(random_visual(mode, 1, rng))
        matrix = ctx.matrix.data if isinstance(ctx.matrix, Tensor) else np.asarray(ctx.matrix)
        enc = encoder_forward(model, np.array([[4, 5, EOS]]))
        tgt = np.array([[1, 7, 8]])
        _, a = decoder_attn_forward(model, tgt, enc, type(ctx)(ctx.tag, matrix))
        _, b = decoder_attn_forward(model, tgt, enc, type(ctx)(ctx.tag, matrix[:, rng.permutation(matrix.shape[1])]))
        _, c = decoder_attn_forward(model, tgt, enc, model.visual.context(random_visual(mode, 1, rng)))
        np.testing.assert_allclose(a.data, b.data, rtol=1e-4, atol=1e-5)
        assert not np.allclose(a.data, c.data, rtol=1e-4, atol=1e-5)

    def test_mismatched_context_rejected(self, mode):
        model = build(small_config(visual_mode=mode))
        other = "AvgPool" if mode != "Attn-AvgPool" else "ConvMap"
        raw = np.zeros(2048) if other == "AvgPool" else np.zeros((7, 7, 2048))
        enc = encoder_forward(model, np.array([[4, EOS]]))
        with pytest.raises(ValueError):
            decoder_attn_forward(model, np.array([[1]]), enc, to_context(other, raw))


class TestLoss:
    def test_uniform_model_single_token(self):
        cfg = small_config(share_embeddings=False, label_smoothing=0.0)
        model = build(cfg)
        model.target.output.weight.data[:] = 0.0
        batch = Batch(np.array([[4, EOS]]), np.array([[EOS]]), None, np.arange(1))
        assert translate_loss(batch, model).item() == pytest.approx(math.log(13), rel=1e-6)

    def test_copy_task_loss_decreases(self):
        cfg = small_config(d=16, heads=2, src_vocab=12, tgt_vocab=12, dropout=0.0)
        model = build(cfg, train=True)
        rng = np.random.default_rng(9)
        sents = [[int(t) for t in rng.integers(4, 12, size=int(rng.integers(2, 6)))] + [EOS] for _ in range(10)]
        batch = Batch(pad_batch(sents), pad_batch(sents), None, np.arange(10))
        opt = Adam(model.named_parameters(), cfg.d_model, fixed_lr=3e-3)
        losses = []
        for _ in range(50):
            opt.zero_grad()
            loss = translate_loss(batch, model)
            backward(loss)
            opt.step()
            losses.append(loss.item())
        assert losses[-1] < 0.7 * losses[0]

    @pytest.mark.parametrize("mode", ["None", "Cond-AvgPool", "Attn-Emb"])
    def test_gradient_matches_finite_differences(self, mode):
        cfg = small_config(visual_mode=mode)
        model = build(cfg, dtype=np.float64)
        perturb_visual_parameters(model, np.random.default_rng(10), 0.3)
        batch = random_batch(np.random.default_rng(11), cfg, dtype=np.float64)
        errs = check_module_gradients(lambda: translate_loss(batch, model), model.named_parameters(), max_coords=12)
        assert max(errs.values()) < 1e-4, errs

    def test_shift_right(self):
        tgt = np.array([[5, 6, EOS, 0], [7, EOS, 0, 0]])
        np.testing.assert_array_equal(shift_right(tgt), [[1, 5, 6, EOS], [1, 7, EOS, 0]])


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(d_model=10, n_heads=4)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            ModelConfig(visual_mode="Attn-Audio")

    def test_dict_roundtrip(self):
        cfg = small_config(visual_mode="Attn-Conv", visual_blocks="1")
        assert ModelConfig.from_dict({k: str(v) for k, v in cfg.to_dict().items()}) == cfg

    def test_per_block_toggle(self):
        model = TransformerMT(small_config(visual_mode="Attn-AvgPool", visual_blocks="1"))
        assert [b.has_visual for b in model.decoder.blocks] == [False, True]
