"""Effective run configuration: flags > config file > environment > defaults.

The config file is UTF-8 INI text (read with configparser)::

    [network]
    input_hw = 120x120          ; HxW images are rescaled to
    in_channels = 1
    conv_specs = 50x11,120x5,120x3   ; out_channels x kernel per convolution
    conv_strides =              ; empty: 1 everywhere
    conv_paddings =             ; empty: 0 everywhere
    pool_after = 1,2            ; 1-based convolutions followed by 2x2 max pooling
    fc_dims = 10,2              ; fully connected widths, last must be 2

    [training]
    batch_size = 128
    learning_rate = 0.001
    momentum = 0.9
    max_iterations = 11000
    epochs =                    ; when set, overrides max_iterations
    eval_every = 100            ; iterations between validation passes
    eval_batch_size = 64
    class_weighted_loss = false ; weight cancer samples by f_free / f_cancer per batch
    log_timing = false          ; record wall-clock ms in curves.csv

    [split]
    train_frac = 0.5
    val_frac = 0.25
    test_frac = 0.25

    [run]
    seed = 0                    ; fanned out to split, init and shuffle sub-seeds
    data_dir =
    out_dir =
    threshold = 0.5             ; decision threshold on p(cancer)
    cache_dir =                 ; optional TNSR dataset cache
"""

import configparser
import logging
import math
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, Mapping, Optional

from config import derive_seed, get_setting
from data_processing import SplitSpec
from errors import ArgumentError, ConfigError
from network import NetworkConfig
from training import TrainingConfig

logger = logging.getLogger(__name__)

U64_MAX = 2 ** 64 - 1

SECTIONS = ("network", "training", "split", "run")
TRAINING_KEYS = {
    "batch_size": int,
    "learning_rate": float,
    "momentum": float,
    "max_iterations": int,
    "epochs": int,
    "eval_every": int,
    "eval_batch_size": int,
    "class_weighted_loss": bool,
    "log_timing": bool,
}
SPLIT_KEYS = {"train_frac": float, "val_frac": float, "test_frac": float}
RUN_KEYS = {"seed": int, "data_dir": str, "out_dir": str, "threshold": float, "cache_dir": str}

# Environment fallbacks for [run] keys
ENV_SETTINGS = {"seed": "DCNN_SEED", "data_dir": "DCNN_DATA_DIR", "out_dir": "DCNN_OUT_DIR"}

_BOOLEANS = {"1": True, "true": True, "yes": True, "on": True,
             "0": False, "false": False, "no": False, "off": False}


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = NetworkConfig()
    training: TrainingConfig = TrainingConfig()
    split: SplitSpec = SplitSpec()
    seed: int = 0
    data_dir: Optional[str] = None
    out_dir: Optional[str] = None
    threshold: float = 0.5
    cache_dir: Optional[str] = None

    @property
    def init_seed(self) -> int:
        return derive_seed(self.seed, "init")

    def validate(self) -> "RunConfig":
        self.network.validate()
        self.training.validate()
        self.split.validate()
        if not 0 <= self.seed <= U64_MAX:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if not 0.0 <= self.threshold <= 1.0 or math.isnan(self.threshold):
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        return self

    def require(self, *names: str) -> "RunConfig":
        """Fail with a ConfigError when a path a command needs is missing"""
        missing = [name for name in names if not getattr(self, name)]
        if missing:
            flags = ", ".join(f"--{name.replace('_', '-')}" for name in missing)
            raise ConfigError(f"missing required setting(s): {flags}")
        return self


def _parse(section: str, key: str, raw: str, kind):
    text = str(raw).strip()
    try:
        if kind is bool:
            if text.lower() not in _BOOLEANS:
                raise ValueError("expected true or false")
            return _BOOLEANS[text.lower()]
        if kind is str:
            return text or None
        if kind is int:
            return int(text)
        return float(text)
    except ValueError as e:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} ({e})") from e


def _typed_section(section: str, values: Mapping[str, str], schema: Dict[str, type]) -> Dict[str, Any]:
    unknown = sorted(set(values) - set(schema))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    parsed = {}
    for key, raw in values.items():
        if key == "epochs" and not str(raw).strip():
            parsed[key] = None
            continue
        parsed[key] = _parse(section, key, raw, schema[key])
    return parsed


def read_config_file(path) -> Dict[str, Dict[str, str]]:
    """Raw section -> key -> text mapping of an INI config file"""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    unknown = sorted(set(parser.sections()) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{path}: unknown section(s): {', '.join(unknown)}")
    return {section: dict(parser.items(section)) for section in parser.sections()}


def load_run_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Resolve the effective RunConfig.

    ``overrides`` holds [run] keys (seed, data_dir, out_dir, threshold,
    cache_dir) from command-line flags; None values are ignored. The split
    and shuffle seeds are derived from the resolved ``seed``.
    """
    sections = read_config_file(path) if path else {}

    network = NetworkConfig.from_mapping(sections.get("network", {}))
    training = TrainingConfig(**_typed_section("training", sections.get("training", {}), TRAINING_KEYS))
    split_spec = SplitSpec(**_typed_section("split", sections.get("split", {}), SPLIT_KEYS))

    run: Dict[str, Any] = {}
    for key, env_name in ENV_SETTINGS.items():
        value = get_setting(env_name)
        if value is not None:
            run[key] = _parse("environment", env_name, value, RUN_KEYS[key])
    file_run = _typed_section("run", sections.get("run", {}), RUN_KEYS)
    run.update({key: value for key, value in file_run.items() if value is not None})
    for key, value in (overrides or {}).items():
        if key not in RUN_KEYS:
            raise ConfigError(f"unknown override {key!r}")
        if value is not None:
            run[key] = value

    cfg = RunConfig(network=network, training=training, split=split_spec, **run)
    try:
        cfg.validate()
    except ArgumentError as e:
        raise ConfigError(str(e)) from e
    logger.debug(f"Resolved run config from {path or 'defaults'}: seed={cfg.seed}, data_dir={cfg.data_dir}, out_dir={cfg.out_dir}")
    return replace(
        cfg,
        training=replace(training, seed=derive_seed(cfg.seed, "shuffle")),
        split=replace(split_spec, seed=derive_seed(cfg.seed, "split")),
    )


def write_run_config(cfg: RunConfig, path):
    """Write the effective configuration in the format load_run_config reads"""
    parser = configparser.ConfigParser(interpolation=None)
    parser["network"] = cfg.network.to_mapping()
    training = {f.name: getattr(cfg.training, f.name) for f in fields(cfg.training) if f.name != "seed"}
    parser["training"] = {key: _format(value) for key, value in training.items()}
    parser["split"] = {key: _format(getattr(cfg.split, key)) for key in SPLIT_KEYS}
    parser["run"] = {key: _format(getattr(cfg, key)) for key in RUN_KEYS}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        parser.write(fh)


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)
