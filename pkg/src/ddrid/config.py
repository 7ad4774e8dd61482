"""Run configuration: a flat ``key = value`` file with strict, typed parsing.

Blank lines and lines starting with ``#`` are ignored.  Every key must be a
known field; training hyperparameters sit beside the run fields, e.g.::

    dataset = mnist
    normal_class = 0
    pretrain_epochs = 20
    finetune_epochs = 20
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ArgumentError, ConfigError
from .evaluate import KIND_POLICIES
from .train import TrainConfig

DATA_DIR_ENV = "DDRID_DATA_DIR"
DATASETS = ("mnist", "cifar10")
_SECTION = "run"


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


@dataclass
class RunConfig:
    dataset: str = "mnist"
    data_dir: Path = field(default_factory=default_data_dir)
    normal_class: int = 0
    rounds: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    kind_policy: str = "algorithm2"
    output_dir: Path = Path("runs")
    test_subset_size: int | None = None

    def validate(self) -> "RunConfig":
        if self.dataset not in DATASETS:
            raise ConfigError("dataset", f"must be one of {', '.join(DATASETS)}, got {self.dataset!r}")
        if not 0 <= self.normal_class <= 9:
            raise ConfigError("normal_class", f"must lie in 0..9, got {self.normal_class}")
        if self.rounds < 1:
            raise ConfigError("rounds", f"must be >= 1, got {self.rounds}")
        if self.kind_policy not in KIND_POLICIES:
            raise ConfigError("kind_policy", f"must be one of {', '.join(KIND_POLICIES)}, got {self.kind_policy!r}")
        if self.test_subset_size is not None and self.test_subset_size < 2:
            raise ConfigError("test_subset_size", "must be >= 2")
        return self

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"}
        d["data_dir"] = str(self.data_dir)
        d["output_dir"] = str(self.output_dir)
        d.update(asdict(self.train))
        return d

    def to_text(self) -> str:
        return "".join(f"{k} = {'' if v is None else v}\n" for k, v in self.to_dict().items())


_RUN_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "train"}
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _convert(name: str, raw: str, default):
    kind = type(default)
    if name == "test_subset_size":
        if raw.lower() in ("", "none"):
            return None
        kind = int
    try:
        if name in ("data_dir", "output_dir"):
            return Path(raw)
        if kind is bool:
            raise ValueError
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                       inline_comment_prefixes=("#",), delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n{text}", source=source)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(exc.option, "given more than once") from None
    except configparser.Error as exc:
        raise ConfigError("<syntax>", str(exc).splitlines()[0]) from None
    if len(parser.sections()) != 1:
        raise ConfigError("<syntax>", "section headers are not allowed")
    return apply_overrides(RunConfig(), dict(parser[_SECTION]))


def apply_overrides(cfg: RunConfig, values: dict) -> RunConfig:
    """Return ``cfg`` with ``values`` (strings or typed) applied and validated."""
    run, train = {}, {}
    for key, raw in values.items():
        if key in _RUN_FIELDS:
            target, default = run, getattr(cfg, key)
            if key == "test_subset_size":
                default = 0
        elif key in _TRAIN_FIELDS:
            target, default = train, getattr(cfg.train, key)
        else:
            raise ConfigError(key, "unknown configuration key")
        target[key] = _convert(key, raw.strip(), default) if isinstance(raw, str) else raw
    try:
        new_train = replace(cfg.train, **train)
    except ArgumentError as exc:
        bad = next(iter(train), "train")
        for k in train:
            if k in str(exc):
                bad = k
        raise ConfigError(bad, str(exc)) from None
    return replace(cfg, train=new_train, **run).validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
