"""Token-bucketed batching, early stopping and the generic training loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from .tensor_core import Adam, FaultError, backward
from .transformer import pad_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.02
    warmup: int = 8000
    beta1: float = 0.9
    beta2: float = 0.997
    adam_eps: float = 1e-9
    batch_tokens: int = 1024
    max_epochs: int = 30
    patience_trans: int = 10
    patience_delib: int = 3
    beam: int = 10
    valid_beam: int = 1
    n_best: int = 10
    nbest_subsample: bool = False
    noise_wer: float = 0.19
    bpe_merges: int = 500
    seed: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                raise KeyError(f"unknown TrainConfig field {k!r}")
            t = kinds[k]
            if t == "int":
                out[k] = int(v)
            elif t == "float":
                out[k] = float(v)
            elif t == "bool":
                out[k] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            else:
                out[k] = v
        return cls(**out)


@dataclass
class ParallelData:
    """Id-encoded sentence pairs with row-aligned raw visual features."""

    src: list[list[int]]
    tgt: list[list[int]]
    visual: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.src)

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise ValueError(f"{len(self.src)} sources vs {len(self.tgt)} targets")
        if self.visual is not None and len(self.visual) != len(self.src):
            raise ValueError(f"{len(self.visual)} feature records for {len(self.src)} sentences")


@dataclass
class Batch:
    src: np.ndarray
    tgt: np.ndarray
    visual: np.ndarray | None
    index: np.ndarray
    fp_concat: np.ndarray | None = None
    fp_keep: np.ndarray | None = None

    @property
    def n_tokens(self) -> int:
        return int((self.tgt != 0).sum())


def collate(data: ParallelData, idx: np.ndarray) -> Batch:
    visual = None if data.visual is None else data.visual[idx]
    return Batch(pad_batch([data.src[i] for i in idx]), pad_batch([data.tgt[i] for i in idx]), visual, idx)


def make_batches(src_lens: Sequence[int], tgt_lens: Sequence[int], batch_tokens: int,
                 rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Group length-sorted examples so that rows x longest side <= ``batch_tokens``."""
    n = len(src_lens)
    order = sorted(range(n), key=lambda i: (tgt_lens[i], src_lens[i], i))
    batches, cur, width = [], [], 0
    for i in order:
        w = max(width, src_lens[i], tgt_lens[i])
        if cur and w * (len(cur) + 1) > batch_tokens:
            batches.append(np.array(cur))
            cur, w = [], max(src_lens[i], tgt_lens[i])
        cur.append(i)
        width = w
    if cur:
        batches.append(np.array(cur))
    if rng is not None:
        perm = rng.permutation(len(batches))
        batches = [batches[j] for j in perm]
    return batches


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strict improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best: float | None = None
        self.bad_epochs = 0

    def update(self, score: float) -> bool:
        """Record an epoch score; returns True if it is a new best."""
        if self.best is None or score > self.best:
            self.best = score
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, best_state: dict | None):
        super().__init__(msg)
        self.best_state = best_state


@dataclass
class FitResult:
    history: list[dict]
    best_epoch: int
    best_score: float
    optimizer: Adam


def fit(model, batches_fn: Callable[[int], list], validate: Callable[[object], float],
        tcfg: TrainConfig, patience: int, d_model: int, max_epochs: int | None = None,
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train ``model`` until early stopping; the best-validation parameters are restored.

    ``batches_fn(epoch)`` yields the epoch's batches; ``validate(model)``
    returns the score used for checkpoint selection (validation BLEU).
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    opt = Adam(named, d_model, tcfg.base_lr, tcfg.warmup, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    stopper = EarlyStopping(patience)
    history: list[dict] = []
    best_state = model.state_dict()
    best_epoch = 0
    for epoch in range(1, (max_epochs or tcfg.max_epochs) + 1):
        model.train()
        total, count = 0.0, 0
        for batch in batches_fn(epoch):
            loss = model.loss(batch)
            value = loss.item()
            if not np.isfinite(value):
                model.load_state_dict(best_state)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", best_state)
            opt.zero_grad()
            backward(loss)
            try:
                opt.step()
            except FaultError as exc:
                model.load_state_dict(best_state)
                raise TrainingDiverged(str(exc), best_state) from exc
            total += value * batch.n_tokens
            count += batch.n_tokens
        model.eval()
        score = float(validate(model))
        improved = stopper.update(score)
        if improved:
            best_state = model.state_dict()
            best_epoch = epoch
        record = {"epoch": epoch, "train_loss": total / max(count, 1), "valid_bleu": score,
                  "lr": opt.lr(max(opt.state.t, 1))}
        history.append(record)
        log.info("epoch %d loss %.4f valid BLEU %.2f%s", epoch, record["train_loss"], score,
                 " *" if improved else "")
        if on_epoch is not None:
            on_epoch(record)
        if stopper.should_stop:
            break
    model.load_state_dict(best_state)
    model.eval()
    return FitResult(history, best_epoch, stopper.best if stopper.best is not None else 0.0, opt)
