"""Run configuration: a flat key=value text file with section headers.

Unknown sections or keys are rejected outright; every run echoes the fully
resolved configuration so the file plus the seed reproduce the run.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Optional

from masklab.corruption import MaskingConfig
from masklab.flops import FlopsConfig
from masklab.models import ModelConfig
from masklab.probes import MIProbeConfig
from masklab.train import OptimizerConfig, TrainConfig

DEFAULT_FLOPS_VOCAB = 50265  # 50K-class tokenizer, the published accounting scale


class ConfigFileError(ValueError):
    """Malformed run-configuration file."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigFileError(f"not a boolean: {text!r}")


def _parse_strategy(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.replace(",", " ").split()]
    if len(parts) != 3:
        raise ConfigFileError(f"strategy needs three shares, got {text!r}")
    return tuple(parts)


_SCHEMA = {
    "model": {
        "arch": (str, "vanilla"),
        "n": (int, 64),
        "vocab_size": (int, 0),  # 0 -> take the built vocabulary's size
        "l_en": (int, 4),
        "d_en": (int, 128),
        "h_en": (int, 4),
        "l_de": (int, 2),
        "d_de": (int, 64),
        "h_de": (int, 2),
        "ln_mode": (str, "pre"),
        "dropout": (float, 0.1),
        "attn_dropout": (float, 0.1),
        "max_positions": (int, 0),
    },
    "masking": {
        "rate": (float, 0.4),
        "strategy": (_parse_strategy, (0.8, 0.1, 0.1)),
        "deterministic_counts": (_parse_bool, True),
    },
    "optimizer": {
        "peak_lr": (float, 1e-3),
        "total_steps": (int, 2000),
        "warmup_proportion": (float, 0.06),
        "beta1": (float, 0.9),
        "beta2": (float, 0.98),
        "eps": (float, 1e-6),
        "weight_decay": (float, 0.01),
        "grad_clip": (float, 0.0),
    },
    "train": {
        "batch_size": (int, 32),
        "max_steps": (int, 2000),
        "seed": (int, 0),
        "log_every": (int, 10),
        "checkpoint_every": (int, 0),
    },
    "data": {
        "corpus": (str, ""),
        "vocab": (str, ""),
        "min_count": (int, 1),
        "max_size": (int, 0),
    },
    "probe": {
        "num_token_labels": (int, 50),
        "k": (int, 200),
        "max_samples": (int, 50000),
        "kmeans_batch": (int, 1024),
        "kmeans_iters": (int, 150),
        "seed": (int, 0),
    },
    "flops": {
        "batch_size": (int, 1),
        "updates": (int, 1),
        "vocab_size": (int, DEFAULT_FLOPS_VOCAB),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]]

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def masking_config(self) -> MaskingConfig:
        m = self.values["masking"]
        return MaskingConfig(rate=m["rate"], strategy=m["strategy"],
                             deterministic_counts=m["deterministic_counts"])

    def model_config(self, vocab_size: Optional[int] = None) -> ModelConfig:
        m = self.values["model"]
        size = m["vocab_size"] or vocab_size
        if not size:
            raise ConfigFileError("vocab_size not set and no vocabulary supplied")
        return ModelConfig(
            arch=m["arch"], vocab_size=size, n=m["n"],
            l_en=m["l_en"], d_en=m["d_en"], h_en=m["h_en"],
            l_de=m["l_de"], d_de=m["d_de"], h_de=m["h_de"],
            ln_mode=m["ln_mode"], dropout_p=m["dropout"], attn_dropout_p=m["attn_dropout"],
            max_positions=m["max_positions"],
        )

    def optimizer_config(self) -> OptimizerConfig:
        o = self.values["optimizer"]
        return OptimizerConfig(
            peak_lr=o["peak_lr"], total_steps=o["total_steps"],
            warmup_proportion=o["warmup_proportion"], betas=(o["beta1"], o["beta2"]),
            eps=o["eps"], weight_decay=o["weight_decay"], grad_clip=o["grad_clip"],
        )

    def train_config(self, seed_override: Optional[int] = None) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            batch_size=t["batch_size"], max_steps=t["max_steps"],
            seed=t["seed"] if seed_override is None else seed_override,
            log_every=t["log_every"], checkpoint_every=t["checkpoint_every"],
        )

    def probe_config(self) -> MIProbeConfig:
        p = self.values["probe"]
        return MIProbeConfig(
            num_token_labels=p["num_token_labels"], k=p["k"], max_samples=p["max_samples"],
            kmeans_batch=p["kmeans_batch"], kmeans_iters=p["kmeans_iters"], seed=p["seed"],
        )

    def flops_config(self) -> FlopsConfig:
        m, f = self.values["model"], self.values["flops"]
        return FlopsConfig(
            arch=m["arch"], n=m["n"], vocab_size=f["vocab_size"],
            rate=self.values["masking"]["rate"],
            l_en=m["l_en"], d_en=m["d_en"], l_de=m["l_de"], d_de=m["d_de"],
            batch_size=f["batch_size"], updates=f["updates"],
        )

    def render(self) -> str:
        """Resolved configuration, normalized; echoed by every command."""
        lines = []
        for section in _SCHEMA:
            lines.append(f"[{section}]")
            for key in _SCHEMA[section]:
                value = self.values[section][key]
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def default_run_config() -> RunConfig:
    return RunConfig({s: {k: d for k, (_, d) in keys.items()} for s, keys in _SCHEMA.items()})


def load_run_config(path) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path)
    if not read:
        raise ConfigFileError(f"cannot read configuration file {path}")
    config = default_run_config()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigFileError(f"unknown section [{section}] in {path}")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigFileError(f"unknown key {key!r} in section [{section}] of {path}")
            converter, _ = _SCHEMA[section][key]
            try:
                config.values[section][key] = converter(raw)
            except ConfigFileError:
                raise
            except ValueError as exc:
                raise ConfigFileError(f"bad value for {section}.{key}: {raw!r}") from exc
    return config
