"""Flat ``key = value`` experiment configuration with ``[model]``, ``[train]`` and ``[experiment]`` sections."""

from __future__ import annotations

import configparser
from dataclasses import fields
from pathlib import Path

from ..training import TrainConfig
from ..transformer import ModelConfig

AUTO_FIELDS = ("src_vocab", "tgt_vocab")
# ModelConfig fields fixed by the experiment cell rather than the file.
CELL_FIELDS = ("family", "visual_mode")
EXPERIMENT_KEYS = ("seed", "families", "setups", "n_sentences", "n_categories", "features")


class ConfigError(ValueError):
    pass


def read_config(path, strict: bool = True) -> tuple[dict, TrainConfig, dict]:
    """Parse a config file -> (model field dict, TrainConfig, experiment dict).

    With ``strict`` every ModelConfig and TrainConfig field must be present.
    ``src_vocab``/``tgt_vocab`` may be ``auto`` (taken from the built vocabularies).
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if not parser.read(path, encoding="utf-8"):
        raise ConfigError(f"cannot read config {path}")
    for section in ("model", "train"):
        if not parser.has_section(section):
            raise ConfigError(f"{path}: missing [{section}] section")
    model = dict(parser["model"])
    train = dict(parser["train"])
    experiment = dict(parser["experiment"]) if parser.has_section("experiment") else {}

    model_names = {f.name for f in fields(ModelConfig)}
    train_names = {f.name for f in fields(TrainConfig)}
    unknown = (set(model) - model_names) | (set(train) - train_names) | (set(experiment) - set(EXPERIMENT_KEYS))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    if strict:
        missing = (model_names - set(CELL_FIELDS) - set(model)) | (train_names - set(train))
        if missing:
            raise ConfigError(f"{path}: missing mandatory keys {sorted(missing)}")
    return model, TrainConfig.from_dict(train), experiment


def model_config(fields_: dict, src_vocab: int, tgt_vocab: int, family: str = "Trans",
                 visual_mode: str = "None", seed: int | None = None) -> ModelConfig:
    d = dict(fields_)
    for key, size in (("src_vocab", src_vocab), ("tgt_vocab", tgt_vocab)):
        if str(d.get(key, "auto")).lower() == "auto":
            d[key] = size
    d["family"] = family
    d["visual_mode"] = visual_mode
    if seed is not None:
        d["seed"] = seed
    return ModelConfig.from_dict(d)


def write_config(path, model: dict, train: TrainConfig, experiment: dict | None = None) -> None:
    lines = ["[model]"]
    lines += [f"{k} = {v}" for k, v in model.items() if k not in CELL_FIELDS]
    lines += ["", "[train]"]
    lines += [f"{k} = {v}" for k, v in train.to_dict().items()]
    if experiment:
        lines += ["", "[experiment]"]
        lines += [f"{k} = {v}" for k, v in experiment.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
