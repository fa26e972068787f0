"""Experiment configuration: an INI file with one section per pipeline stage."""

from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

DECODERS = ("wfst", "seq2seq", "rerank-wfst", "rerank-seq2seq", "poe")
DIRECTIONS = ("forward", "backward")


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    train_source: str = ""
    train_target: str = ""
    valid_source: str = ""
    valid_target: str = ""
    test_source: str = ""
    test_target: str = ""
    priors: str = ""  # comma-separated TSV paths
    addbacks_source: str = ""
    addbacks_target: str = ""
    output_dir: str = "run"


@dataclass
class AlphabetConfig:
    coverage: float = 0.99


@dataclass
class LmConfig:
    order: int = 6
    smoothing: str = "witten_bell"


@dataclass
class ChannelConfig:
    delay: int = 2
    prior_base: float = 0.01
    prior_boost: float = 1.0
    identical_prior: bool = True


@dataclass
class EmConfig:
    stepsize_exponent: float = 0.9
    minibatch: int = 10
    epochs: int = 20
    n_shortest: int = 1000
    patience: int = 3
    seed: int = 0


@dataclass
class NeuralConfig:
    emb_dim: int = 32
    hidden_dim: int = 64
    drop_prob: float = 0.1
    shuffle_window: int = 3
    anneal_epochs: int = 3
    ae_floor: float = 0.0
    patience: int = 10
    max_epochs: int = 100
    batch_size: int = 32
    lr: float = 0.5
    clip: float = 5.0
    optimizer: str = "sgd"
    tie_embeddings: bool = False
    time_budget: float = 0.0  # seconds; 0 means unlimited
    seed: int = 0


@dataclass
class DecodeConfig:
    decoder: str = "wfst"
    beam: int = 5
    nbest: int = 5
    length_normalize: bool = False
    poe_threshold: float = 0.0  # closure score window; 0 means exhaustive
    directions: str = "forward"
    workers: int = 1


@dataclass
class EvalConfig:
    top_k: int = 1000


@dataclass
class ExperimentConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    alphabet: AlphabetConfig = field(default_factory=AlphabetConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    em: EmConfig = field(default_factory=EmConfig)
    neural: NeuralConfig = field(default_factory=NeuralConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    base_dir: Path = field(default=Path("."), compare=False)

    def sections(self):
        for f in fields(self):
            if f.name != "base_dir":
                yield f.name, getattr(self, f.name)

    def path(self, key: str) -> Optional[Path]:
        value = getattr(self.paths, key)
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def prior_paths(self) -> list[Path]:
        out = []
        for item in self.paths.priors.split(","):
            item = item.strip()
            if item:
                p = Path(item)
                out.append(p if p.is_absolute() else self.base_dir / p)
        return out

    @property
    def directions(self) -> list[str]:
        return [d.strip() for d in self.decode.directions.split(",") if d.strip()]

    def validate(self) -> None:
        if self.decode.decoder not in DECODERS:
            raise ConfigError(f"[decode] decoder: {self.decode.decoder!r} is not one of {', '.join(DECODERS)}")
        for d in self.directions:
            if d not in DIRECTIONS:
                raise ConfigError(f"[decode] directions: unknown direction {d!r}")
        if not self.directions:
            raise ConfigError("[decode] directions: at least one direction is required")
        checks = [
            (0 < self.alphabet.coverage <= 1, "[alphabet] coverage must be in (0, 1]"),
            (self.lm.order >= 1, "[lm] order must be >= 1"),
            (self.channel.delay >= 0, "[channel] delay must be >= 0"),
            (self.decode.beam >= 1, "[decode] beam must be >= 1"),
            (self.decode.nbest >= 1, "[decode] nbest must be >= 1"),
            (self.decode.workers >= 1, "[decode] workers must be >= 1"),
            (self.em.minibatch >= 1, "[em] minibatch must be >= 1"),
            (self.neural.patience >= 1, "[neural] patience must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def serialize(self) -> str:
        lines = []
        for name, section in self.sections():
            lines.append(f"[{name}]")
            for f in fields(section):
                value = getattr(section, f.name)
                if isinstance(value, bool):
                    value = "true" if value else "false"
                lines.append(f"{f.name} = {value}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()


def _line_of(text: str, section: str, key: Optional[str] = None) -> int:
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return lineno
            continue
        if key is not None and current == section and re.match(rf"\s*{re.escape(key)}\s*[=:]", line):
            return lineno
    return 0


def _coerce(raw: str, kind, where: str):
    if kind is bool or kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if kind is int or kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if kind is float or kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    return raw.strip()


def parse_config_text(text: str, base_dir: Path = Path("."), source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="\0none")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    cfg = ExperimentConfig(base_dir=base_dir)
    known = dict(cfg.sections())
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"{source}:{_line_of(text, name)}: unknown section [{name}]")
        section = known[name]
        types = {f.name: f.type for f in fields(section)}
        for key, raw in parser.items(name):
            where = f"{source}:{_line_of(text, name, key)}: [{name}] {key}"
            if key not in types:
                raise ConfigError(f"{where}: unknown key {key!r}")
            setattr(section, key, _coerce(raw, types[key], where))
    cfg.validate()
    return cfg


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config_text(text, base_dir=path.resolve().parent, source=str(path))
