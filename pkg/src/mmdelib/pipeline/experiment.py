"""Experiment cells: data preparation, training with early stopping, decoding to words."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..decode import beam_search, greedy_batch, strip_eos
from ..deliberation import DeliberationMT, compute_first_passes, first_pass_config, train_second_stage
from ..evaluation import corpus_bleu
from ..features import read_feature_array
from ..subword import SubwordModel, Vocabulary, apply_bpe, learn_bpe, merge_subwords, tokenize
from ..training import FitResult, ParallelData, TrainConfig, collate, fit, make_batches
from ..transformer import FAMILIES, ModelConfig, TransformerMT
from .config import model_config
from .noise import noise_transcripts
from .synthetic import FEATURE_FILES

log = logging.getLogger(__name__)

SETUPS = ("Baseline", "Cond-AvgPool", "Attn-AvgPool", "Attn-Emb", "Attn-Conv")
SPLITS = ("train", "valid", "test")


@dataclass
class ExperimentSpec:
    family: str
    setup: str
    data_dir: Path
    model_fields: dict
    train: TrainConfig
    seed: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.setup not in SETUPS:
            raise ValueError(f"unknown setup {self.setup!r}")

    @property
    def visual_mode(self) -> str:
        return "None" if self.setup == "Baseline" else self.setup

    @property
    def name(self) -> str:
        return f"{self.family}_{self.setup}"


def enumerate_specs(data_dir, model_fields: dict, tcfg: TrainConfig, seed: int,
                    families=FAMILIES, setups=SETUPS) -> list[ExperimentSpec]:
    return [ExperimentSpec(f, s, Path(data_dir), model_fields, tcfg, seed) for f in families for s in setups]


def _read_lines(path: Path) -> list[str]:
    return path.read_text(encoding="utf-8").splitlines()


@dataclass
class TextSide:
    bpe: SubwordModel
    vocab: Vocabulary

    def encode(self, tokens: list[str]) -> list[int]:
        return self.vocab.encode(apply_bpe(self.bpe, tokens))

    def decode(self, ids) -> list[str]:
        # Model output may legitimately end mid-word; no warning for that.
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return merge_subwords(self.vocab.decode(ids), self.bpe.continuation_marker)

    def save(self, out: Path, prefix: str) -> None:
        self.bpe.save(out / f"{prefix}.bpe")
        self.vocab.save(out / f"{prefix}.vocab")

    @classmethod
    def load(cls, out: Path, prefix: str) -> "TextSide":
        return cls(SubwordModel.load(out / f"{prefix}.bpe"), Vocabulary.load(out / f"{prefix}.vocab"))


@dataclass
class PreparedData:
    """Noised, subword-encoded corpus shared by every cell of an experiment."""

    data_dir: Path
    src_side: TextSide
    tgt_side: TextSide
    src_ids: dict[str, list[list[int]]]
    tgt_ids: dict[str, list[list[int]]]
    refs: dict[str, list[list[str]]]
    noisy_src: dict[str, list[list[str]]]
    _features: dict = field(default_factory=dict)

    def features(self, tag: str | None, split: str) -> np.ndarray | None:
        if tag is None:
            return None
        key = (tag, split)
        if key not in self._features:
            path = self.data_dir / f"{split}.{FEATURE_FILES[tag]}.feat"
            _, arr = read_feature_array(path, tag, expected=len(self.src_ids[split]))
            self._features[key] = arr
        return self._features[key]

    def parallel(self, split: str, tag: str | None) -> ParallelData:
        return ParallelData(self.src_ids[split], self.tgt_ids[split], self.features(tag, split))


def prepare_data(data_dir, tcfg: TrainConfig, seed: int) -> PreparedData:
    """Tokenize, simulate ASR noise on sources, learn separate BPE models, build vocabularies."""
    data_dir = Path(data_dir)
    clean_src, tgt, noisy = {}, {}, {}
    for i, split in enumerate(SPLITS):
        clean_src[split] = [tokenize(s) for s in _read_lines(data_dir / f"{split}.src")]
        tgt[split] = [tokenize(s) for s in _read_lines(data_dir / f"{split}.tgt")]
        if len(clean_src[split]) != len(tgt[split]):
            raise ValueError(f"{split}: {len(clean_src[split])} sources vs {len(tgt[split])} targets")
        noisy[split] = noise_transcripts(clean_src[split], tcfg.noise_wer, seed * 1000 + i)
    # The source subword model sees both clean and noisy transcripts.
    src_bpe = learn_bpe(clean_src["train"] + noisy["train"], tcfg.bpe_merges)
    tgt_bpe = learn_bpe(tgt["train"], tcfg.bpe_merges)
    src_vocab = Vocabulary.build(apply_bpe(src_bpe, s) for s in clean_src["train"] + noisy["train"])
    tgt_vocab = Vocabulary.build(apply_bpe(tgt_bpe, s) for s in tgt["train"])
    src_side, tgt_side = TextSide(src_bpe, src_vocab), TextSide(tgt_bpe, tgt_vocab)
    src_ids = {s: [src_side.encode(t) for t in noisy[s]] for s in SPLITS}
    tgt_ids = {s: [tgt_side.encode(t) for t in tgt[s]] for s in SPLITS}
    return PreparedData(data_dir, src_side, tgt_side, src_ids, tgt_ids, tgt, noisy)


def transformer_batches(data: ParallelData, tcfg: TrainConfig, epoch: int):
    rng = np.random.default_rng((tcfg.seed, epoch, 1))
    groups = make_batches([len(s) for s in data.src], [len(t) for t in data.tgt], tcfg.batch_tokens, rng)
    return [collate(data, g) for g in groups]


def decode_words(model, prepared: PreparedData, split: str, tag: str | None, beam: int,
                 visual: np.ndarray | None = None, chunk: int = 64, fps=None) -> list[list[str]]:
    """Translate a split into target words (beam search, or batched greedy when beam == 1)."""
    srcs = prepared.src_ids[split]
    if visual is None:
        visual = prepared.features(tag, split)
    out = []
    if beam == 1:
        for lo in range(0, len(srcs), chunk):
            vis = None if visual is None else visual[lo: lo + chunk]
            kw = {}
            if fps is not None:
                kw["state"] = model.start_batch(srcs[lo: lo + chunk], vis, fps=fps[lo: lo + chunk])
            ids = greedy_batch(model, srcs[lo: lo + chunk], vis, **kw)
            out.extend(prepared.tgt_side.decode(i) for i in ids)
        return out
    for i, src in enumerate(srcs):
        vis = None if visual is None else visual[i]
        hyp = beam_search(model, src, vis, beam=beam)[0]
        out.append(prepared.tgt_side.decode(strip_eos(hyp.tokens)))
    return out


def make_validator(prepared: PreparedData, tag: str | None, beam: int):
    refs = prepared.refs["valid"]

    def validate(model) -> float:
        fps = None
        if isinstance(model, DeliberationMT):
            # The first pass is frozen during stage 2: its drafts never change.
            cache = getattr(model, "_valid_fps", None)
            if cache is None:
                data = prepared.parallel("valid", tag)
                cache = [f[0] for f in compute_first_passes(model, data, model.fp_beam, 1)]
                model._valid_fps = cache
            fps = cache
        hyps = decode_words(model, prepared, "valid", tag, beam, fps=fps)
        return corpus_bleu(hyps, refs, smooth=False).bleu

    return validate


@dataclass
class TrainedSystem:
    spec: ExperimentSpec
    model: object
    config: ModelConfig
    history: list[dict]
    stage1_history: list[dict] = field(default_factory=list)
    optimizer: object = None


def build_config(spec: ExperimentSpec, prepared: PreparedData) -> ModelConfig:
    return model_config(spec.model_fields, len(prepared.src_side.vocab), len(prepared.tgt_side.vocab),
                        spec.family, spec.visual_mode, spec.seed)


def train_transformer(cfg: ModelConfig, prepared: PreparedData, tcfg: TrainConfig,
                      max_epochs: int | None = None) -> tuple[TransformerMT, FitResult]:
    model = TransformerMT(cfg)
    data = prepared.parallel("train", cfg.feature_tag)
    result = fit(model, lambda epoch: transformer_batches(data, tcfg, epoch),
                 make_validator(prepared, cfg.feature_tag, tcfg.valid_beam), tcfg,
                 tcfg.patience_trans, cfg.d_model, max_epochs)
    return model, result


def train(spec: ExperimentSpec, prepared: PreparedData | None = None, stage1_cache: dict | None = None,
          max_epochs: int | None = None) -> TrainedSystem:
    """Train one cell; deliberation families reuse (or train) their stage-1 transformer."""
    prepared = prepared or prepare_data(spec.data_dir, spec.train, spec.seed)
    tcfg = spec.train
    cfg = build_config(spec, prepared)
    if spec.family == "Trans":
        model, result = train_transformer(cfg, prepared, tcfg, max_epochs)
        if stage1_cache is not None:
            stage1_cache[cfg] = (model, result)
        return TrainedSystem(spec, model, cfg, result.history, optimizer=result.optimizer)

    first_cfg = first_pass_config(cfg)
    cached = stage1_cache.get(first_cfg) if stage1_cache is not None else None
    if cached is None:
        cached = train_transformer(first_cfg, prepared, tcfg, max_epochs)
        if stage1_cache is not None:
            stage1_cache[first_cfg] = cached
    stage1, result1 = cached
    model = DeliberationMT(cfg, fp_beam=tcfg.beam)
    model.load_first_pass(stage1)
    data = prepared.parallel("train", cfg.feature_tag)
    result2 = train_second_stage(model, data, make_validator(prepared, cfg.feature_tag, tcfg.valid_beam),
                                 tcfg, max_epochs=max_epochs)
    return TrainedSystem(spec, model, cfg, result2.history, result1.history, result2.optimizer)


def save_run(system: TrainedSystem, prepared: PreparedData, out_dir) -> Path:
    """Persist a trained cell: checkpoint plus the text-side models needed to translate."""
    from .checkpoint import checkpoint_from_model, save_checkpoint

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prepared.src_side.save(out, "src")
    prepared.tgt_side.save(out, "tgt")
    ckpt = checkpoint_from_model(system.model, system.history, system.optimizer)
    save_checkpoint(ckpt, out / "model.ckpt")
    (out / "history.json").write_text(json.dumps({"stage1": system.stage1_history, "final": system.history},
                                                 indent=1, sort_keys=True), encoding="utf-8")
    return out / "model.ckpt"
