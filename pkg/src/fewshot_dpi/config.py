"""Run configuration: a TOML document whose tables mirror the pipeline stages.

Example::

    seed = 7
    out = "runs/demo"

    [data]
    pcaps = ["capture.pcap"]
    rules = "rules.csv"
    default_label = "benign"
    dataset = "runs/demo/dataset.fsds"
    max_len = 1500

    [encoder]
    preset = "toy-scale"        # paper-scale | toy-scale | custom

    [pretrain]
    class_pair = ["exploits", "fuzzers"]
    epochs = 15
    learning_rate = 2e-5

    [fewshot]
    shot = 5
    iterations = 10

    [crypto]
    aes_key = "keys/aes.bin"
    fernet_key = "keys/fernet.key"

Relative paths resolve against the working directory. Command-line flags
override file values; :func:`RunConfig.validate` runs before any work.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .encoder import PRESETS, EncoderConfig, PretrainConfig
from .protonet import FewShotProtocol


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    pcaps: list[str] = field(default_factory=list)
    rules: str | None = None
    default_label: str = "benign"
    dataset: str | None = None
    max_len: int = 1500
    classes: list[str] = field(default_factory=list)
    dedup: bool = True


@dataclass
class EncoderSection:
    preset: str = "toy-scale"
    d_model: int | None = None
    n_layers: int | None = None
    n_heads: int | None = None
    d_ff: int | None = None
    max_positions: int | None = None
    dropout: float | None = None


@dataclass
class PretrainSection:
    class_pair: list[str] = field(default_factory=list)
    epochs: int = 15
    learning_rate: float = 2e-5
    batch_size: int = 16
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1


@dataclass
class FewShotSection:
    checkpoint: str | None = None
    way: int = 3
    shot: int = 5
    query: int = 5
    epochs: int = 10
    episodes_per_epoch: int = 1000
    eval_episodes: int = 1000
    d_proj: int = 128
    learning_rate: float = 1e-3
    prototype_norm: str = "mean"
    resample_support: bool = True
    iterations: int = 10
    test_fraction: float = 0.5
    shots: list[int] = field(default_factory=lambda: [5, 10])


@dataclass
class CryptoSection:
    aes_key: str | None = None
    fernet_key: str | None = None
    iv_policy: str = "random_per_packet"
    test_mode: bool = False
    fernet_as_text: bool = False
    benign_class: str | None = None
    test_fraction: float = 0.5


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/latest"
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    fewshot: FewShotSection = field(default_factory=FewShotSection)
    crypto: CryptoSection = field(default_factory=CryptoSection)

    def to_dict(self) -> dict:
        return asdict(self)

    # -- derived objects --------------------------------------------------
    def encoder_config(self, n_classes: int = 2) -> EncoderConfig:
        e = self.encoder
        if e.preset == "custom":
            base = EncoderConfig()
        elif e.preset in PRESETS:
            base = PRESETS[e.preset]
        else:
            raise ConfigError(f"unknown encoder preset {e.preset!r}; choose paper-scale, toy-scale or custom")
        overrides = {f.name: getattr(e, f.name) for f in fields(e) if f.name != "preset" and getattr(e, f.name) is not None}
        try:
            return replace(base, n_classes=n_classes, **overrides)
        except ValueError as exc:
            raise ConfigError(f"[encoder] {exc}") from None

    def pretrain_config(self, seed: int) -> PretrainConfig:
        p = self.pretrain
        return PretrainConfig(p.epochs, p.learning_rate, p.batch_size, p.weight_decay, p.warmup_fraction, seed)

    def fewshot_protocol(self) -> FewShotProtocol:
        f = self.fewshot
        try:
            return FewShotProtocol(f.way, f.shot, f.query, f.epochs, f.episodes_per_epoch, f.eval_episodes, f.d_proj,
                                   f.learning_rate, f.prototype_norm, f.resample_support)
        except ValueError as exc:
            raise ConfigError(f"[fewshot] {exc}") from None

    # -- validation ---------------------------------------------------------
    def validate(self, command: str) -> None:
        """Check ranges and that every input the command reads exists."""
        problems = []

        def need_file(label, value):
            if not value:
                problems.append(f"{label} is required for {command}")
            elif not Path(value).is_file():
                problems.append(f"{label} {value!r} does not exist")

        if self.data.max_len < 1:
            problems.append("data.max_len must be >= 1")
        p, f, c = self.pretrain, self.fewshot, self.crypto
        if p.epochs < 0 or p.batch_size < 1 or p.learning_rate < 0 or p.weight_decay < 0:
            problems.append("pretrain: epochs >= 0, batch_size >= 1, learning_rate >= 0, weight_decay >= 0")
        if not 0.0 <= p.warmup_fraction < 1.0:
            problems.append("pretrain.warmup_fraction must be in [0, 1)")
        if f.iterations < 1:
            problems.append("fewshot.iterations must be >= 1")
        if not 0.0 < f.test_fraction < 1.0 or not 0.0 < c.test_fraction < 1.0:
            problems.append("test_fraction must be in (0, 1)")
        if any(s < 1 for s in f.shots):
            problems.append("fewshot.shots entries must be >= 1")
        if c.iv_policy not in ("random_per_packet", "fixed_for_test"):
            problems.append("crypto.iv_policy must be random_per_packet or fixed_for_test")
        elif c.iv_policy == "fixed_for_test" and not c.test_mode:
            problems.append("crypto.iv_policy fixed_for_test requires crypto.test_mode = true")
        try:
            self.encoder_config()
            self.fewshot_protocol()
        except ConfigError as exc:
            problems.append(str(exc))

        if command == "preprocess":
            if not self.data.pcaps:
                problems.append("data.pcaps must list at least one capture")
            for pcap in self.data.pcaps:
                need_file("pcap", pcap)
            if self.data.rules:
                need_file("data.rules", self.data.rules)
        elif command in ("pretrain", "fewshot", "table1", "encrypt-experiment"):
            need_file("data.dataset", self.data.dataset)
        if command == "pretrain" and len(p.class_pair) not in (0, 2):
            problems.append("pretrain.class_pair must name exactly two classes")
        if command == "fewshot":
            need_file("fewshot.checkpoint", f.checkpoint)
        if command == "encrypt-experiment":
            for label, value in (("crypto.aes_key", c.aes_key), ("crypto.fernet_key", c.fernet_key)):
                if value:
                    need_file(label, value)
        if problems:
            raise ConfigError("; ".join(problems))


_SECTIONS = {"data": DataSection, "encoder": EncoderSection, "pretrain": PretrainSection, "fewshot": FewShotSection,
             "crypto": CryptoSection}


def config_from_dict(doc: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in doc.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            section = getattr(cfg, key)
            known = {f.name for f in fields(section)}
            unknown = set(value) - known
            if unknown:
                raise ConfigError(f"[{key}] has unknown keys {sorted(unknown)}")
            for k, v in value.items():
                setattr(section, k, v)
        elif key in ("seed", "out"):
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc)
