"""Experiment configuration: line-oriented `key = value` sections.

Files are parsed and fully validated before any compute; unknown sections or
keys are rejected by name.  `resolve` fills in every default so the effective
configuration can be echoed verbatim into the run's output directory.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig
from .data import SplitSpec, Splits, load_cifar_binary, load_idx, split_dataset, \
    standardize_splits, synth_generate
from .losses import LossWeights
from .nn import ArchConfig, BlockSpec, preset_config
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid experiment configuration."""


_SCHEMA = {
    "data": {
        "source": ("str", "synth"),
        "classes": ("int", 4),
        "train_size": ("int", 2000),
        "val_size": ("int", 400),
        "test_size": ("int", 400),
        "height": ("int", 16),
        "width": ("int", 16),
        "noise_sigma": ("float", 0.55),
        "seed": ("int", 1),
        "train_files": ("str", ""),
        "test_files": ("str", ""),
        "train_images": ("str", ""),
        "train_labels": ("str", ""),
        "test_images": ("str", ""),
        "test_labels": ("str", ""),
    },
    "model": {
        "preset": ("str", ""),
        "blocks": ("str", ""),
        "dropout": ("float", 0.5),
    },
    "teacher": {
        "preset": ("str", ""),
        "blocks": ("str", ""),
        "dropout": ("float", 0.5),
        "exit_map": ("str", ""),
    },
    "train": {
        "epochs": ("int", 300),
        "batch_size": ("int", 64),
        "learning_rate": ("float", 1e-3),
        "seed": ("int", 0),
        "early_stop_patience": ("int", 20),
        "augment": ("str", "none"),
        "final_exit_ce_only": ("bool", False),
    },
    "loss": {
        "omega_kl": ("float", 0.25),
        "omega_ce": ("float", 0.75),
        "omega_e": ("float", 0.005),
        "temperature": ("float", 2.0),
        "soften_ce": ("bool", False),
    },
    "sweep": {
        "theta_min": ("float", 0.0),
        "theta_max": ("float", -1.0),   # -1 means "ln K of the dataset"
        "steps": ("int", 100),
    },
}

_COERCE = {
    "int": int,
    "float": float,
    "str": str,
    "bool": lambda s: {"true": True, "false": False, "1": True, "0": False,
                       "yes": True, "no": False}[str(s).strip().lower()],
}


def parse_config_text(text):
    """Parse and validate config text; returns {section: {key: value}} with defaults."""
    parser = configparser.ConfigParser(interpolation=None,
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc

    resolved = {section: {k: default for k, (_, default) in keys.items()}
                for section, keys in _SCHEMA.items()}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {key!r} in section [{section}]")
            kind = _SCHEMA[section][key][0]
            try:
                resolved[section][key] = _COERCE[kind](raw)
            except (ValueError, KeyError) as exc:
                raise ConfigError(
                    f"config key {key!r} in [{section}]: cannot parse {raw!r} as {kind}") from exc
    return resolved


def load_config(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())


def echo_config(resolved):
    """Serialize a resolved config (defaults included) back to INI text."""
    buf = io.StringIO()
    for section in _SCHEMA:
        buf.write(f"[{section}]\n")
        for key in _SCHEMA[section]:
            value = resolved[section][key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            buf.write(f"{key} = {value}\n")
        buf.write("\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# section -> object resolution


def _parse_block_token(token, in_channels):
    token = token.strip()
    kind = "plain"
    if token.startswith("r"):
        kind = "residual"
        token = token[1:]
    parts = token.split("/")
    if len(parts) != 3:
        raise ConfigError(
            f"block spec {token!r} must be OUT/STRIDE/CONVS (optionally prefixed 'r')")
    try:
        out_ch, stride, convs = (int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"block spec {token!r}: fields must be integers") from exc
    return BlockSpec(kind, in_channels, out_ch, stride=stride, conv_count=convs)


def resolve_arch(section, class_count, in_channels, image_hw):
    """Build an architecture from a [model] or [teacher] section."""
    preset = section.get("preset", "")
    blocks = section.get("blocks", "")
    if bool(preset) == bool(blocks):
        raise ConfigError("exactly one of 'preset' or 'blocks' must be set")
    if preset:
        try:
            base = preset_config(preset, class_count, in_channels, image_hw)
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc
        if section.get("dropout", 0.5) != 0.5:
            base = ArchConfig(blocks=base.blocks, class_count=base.class_count,
                              in_channels=base.in_channels, image_hw=base.image_hw,
                              dropout_p=section["dropout"])
        return base
    specs = []
    chain = in_channels
    for token in blocks.split(","):
        spec = _parse_block_token(token, chain)
        specs.append(spec)
        chain = spec.out_channels
    try:
        return ArchConfig(blocks=tuple(specs), class_count=class_count,
                          in_channels=in_channels, image_hw=tuple(image_hw),
                          dropout_p=section.get("dropout", 0.5))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def resolve_exit_map(section):
    raw = section.get("exit_map", "")
    if not raw:
        return None
    try:
        return tuple(int(tok) for tok in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"exit_map {raw!r}: entries must be integers") from exc


def resolve_loss_weights(section):
    try:
        return LossWeights(omega_kl=section["omega_kl"], omega_ce=section["omega_ce"],
                           omega_e=section["omega_e"], temperature=section["temperature"],
                           soften_ce=section["soften_ce"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def resolve_train_config(section, mode, weights, exit_map=None):
    augment_raw = section.get("augment", "none").strip()
    if augment_raw in ("", "none"):
        augment = AugmentConfig()
    else:
        try:
            augment = AugmentConfig.from_names(
                [tok.strip() for tok in augment_raw.split(",") if tok.strip()])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    try:
        return TrainConfig(mode=mode, epochs=section["epochs"],
                           batch_size=section["batch_size"],
                           learning_rate=section["learning_rate"],
                           seed=section["seed"],
                           early_stop_patience=section["early_stop_patience"],
                           weights=weights, augment=augment, exit_map=exit_map,
                           final_exit_ce_only=section["final_exit_ce_only"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _split_paths(raw):
    return [tok.strip() for tok in raw.split(",") if tok.strip()]


def build_splits(section):
    """Materialize the dataset described by a [data] section into standardized splits."""
    source = section["source"]
    seed = section["seed"]
    val_size = section["val_size"]
    if source == "synth":
        total = section["train_size"] + val_size + section["test_size"]
        full = synth_generate(section["classes"], total, section["height"],
                              section["width"], section["noise_sigma"], seed)
        splits = split_dataset(full, SplitSpec(section["train_size"], val_size,
                                               section["test_size"], seed=seed))
    elif source == "cifar":
        train_files = _split_paths(section["train_files"])
        test_files = _split_paths(section["test_files"])
        if not train_files or not test_files:
            raise ConfigError("cifar source requires train_files and test_files")
        train_full = load_cifar_binary(train_files, class_count=section["classes"])
        test = load_cifar_binary(test_files, class_count=section["classes"])
        pair = split_dataset(train_full, SplitSpec(len(train_full) - val_size,
                                                   val_size, 0, seed=seed))
        splits = Splits(pair.train, pair.val, test)
    elif source == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not section[key]:
                raise ConfigError(f"idx source requires {key}")
        train_full = load_idx(section["train_images"], section["train_labels"])
        test = load_idx(section["test_images"], section["test_labels"])
        pair = split_dataset(train_full, SplitSpec(len(train_full) - val_size,
                                                   val_size, 0, seed=seed))
        splits = Splits(pair.train, pair.val, test)
    else:
        raise ConfigError(f"unknown data source {source!r}")
    return standardize_splits(splits)


def data_channels(section):
    return 1 if section["source"] == "idx" else 3


def data_image_hw(section):
    if section["source"] == "synth":
        return (section["height"], section["width"])
    if section["source"] == "cifar":
        return (32, 32)
    return None  # idx: determined by the files


def sweep_theta_grid(section, class_count):
    theta_max = section["theta_max"]
    if theta_max < 0:
        theta_max = float(np.log(class_count))
    return section["theta_min"], theta_max, section["steps"]
