"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Union

from .fusion import BeamConfig, FusionMethod
from .models import OptimConfig
from .residual import TrainConfig

CONFIG_VERSION = 1
EXPERIMENTS = ("crossdomain", "intradomain")


class ConfigError(ValueError):
    pass


class ConfigVersionError(ConfigError):
    pass


@dataclass
class ExperimentConfig:
    config_version: int = CONFIG_VERSION
    experiment: str = "crossdomain"
    seed: int = 0

    # corpus
    source_grammar_seed: int = 1
    target_grammar_seed: int = 2
    vocab_size: int = 30
    concentration: float = 0.5
    popularity: float = 2.0
    eos_prob: float = 0.12
    len_min: int = 3
    len_max: int = 12
    n_source_paired: int = 2000
    n_source_text: int = 10000
    n_target_text: int = 10000
    n_test: int = 200
    feat_dim: int = 16
    noise_std: float = 0.3
    codebook_seed: int = 0
    code_group_size: int = 2
    code_spread: float = 0.8

    # models
    hidden: int = 64
    emb_dim: int = 32
    att_dim: int = 32
    lm_layers: int = 1

    # recognizer / LM training
    asr_epochs: int = 15
    asr_batch_size: int = 32
    asr_lr: float = 3e-3
    lm_epochs: int = 5
    lm_batch_size: int = 64
    lm_lr: float = 3e-3

    # residual LM training
    gamma: float = 0.3
    omega: float = 0.01
    temperature: float = 2.0
    epsilon: float = 1e-7
    eta: float = 0.1
    res_epochs: int = 5
    res_batch_size: int = 64
    res_lr: float = 3e-3

    # decoding
    lambda_lm: float = 0.6
    lambda_dr: float = 0.3
    lambda_ilm: float = 0.3
    ilme_smoothing: bool = False
    beam: int = 10
    nbest: int = 1
    bench_utterances: int = 100
    bench_repeats: int = 3

    def __post_init__(self):
        if self.config_version != CONFIG_VERSION:
            raise ConfigVersionError(
                f"config version {self.config_version} is not supported (expected {CONFIG_VERSION})"
            )
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")

    # derived seeds: one master seed drives data sampling, noise and training
    def derived_seed(self, stage: str) -> int:
        h = hashlib.sha256(f"{self.seed}:{stage}".encode()).digest()
        return int.from_bytes(h[:4], "little")

    @property
    def target_seed(self) -> int:
        return self.source_grammar_seed if self.experiment == "intradomain" else self.target_grammar_seed

    def asr_optim(self) -> OptimConfig:
        return OptimConfig(self.asr_epochs, self.asr_batch_size, self.asr_lr, seed=self.derived_seed("asr"))

    def lm_optim(self, domain: str) -> OptimConfig:
        return OptimConfig(self.lm_epochs, self.lm_batch_size, self.lm_lr, seed=self.derived_seed(f"lm{domain}"))

    def residual_train(self) -> TrainConfig:
        return TrainConfig(
            gamma=self.gamma,
            omega=self.omega,
            temperature=self.temperature,
            epsilon=self.epsilon,
            eta=self.eta,
            epochs=self.res_epochs,
            batch_size=self.res_batch_size,
            lr=self.res_lr,
            seed=self.derived_seed("res"),
        )

    def fusion(self, variant: str) -> FusionMethod:
        return FusionMethod(
            variant,
            self.lambda_lm,
            self.lambda_dr,
            self.lambda_ilm,
            self.ilme_smoothing,
            self.temperature,
            self.epsilon,
        )

    def beam_config(self) -> BeamConfig:
        return BeamConfig(beam=self.beam, nbest=self.nbest)

    # serialization ---------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def replace(self, **overrides) -> "ExperimentConfig":
        return dataclasses.replace(self, **overrides)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    t = _TYPES[key]
    try:
        if t in ("bool", bool):
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if t in ("int", int):
            return int(raw)
        if t in ("float", float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str, origin: str = "<config>") -> Dict[str, object]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        values[key.strip()] = _convert(key.strip(), val.strip())
    return values


def load_config(path: Union[str, Path, None] = None, overrides: Dict[str, object] = None) -> ExperimentConfig:
    """File values over defaults, then ``overrides`` over file values."""
    values: Dict[str, object] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        values[k] = _convert(k, v) if isinstance(v, str) else v
    return ExperimentConfig(**values)
