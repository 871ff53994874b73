"""Run configuration: a TOML file (or a resolved-config JSON snapshot) with optional environment overrides.

    seed = 0

    [data]
    path = "ratings.dat"
    separator = "::"

    [train]
    mode = "acl"
    f_kind = "mf"
    g_kind = "mf"
    alpha = 1.0

Environment variables `CFRECSYS_<SECTION>__<KEY>` (and `CFRECSYS_SEED`) override file values; their values are
parsed as TOML literals, falling back to plain strings.
"""

import dataclasses
import json
import os
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional, TypeVar

from counterfactual_recsys._logging import logger
from counterfactual_recsys.error import ConfigurationError
from counterfactual_recsys.evaluation import EvalProtocol, Weighting
from counterfactual_recsys.models import ModelKind
from counterfactual_recsys.simulation import SimConfig
from counterfactual_recsys.training import TrainConfig, TrainMode

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

__all__ = [
    "DataSettings",
    "TrainSettings",
    "EvalSettings",
    "OutputSettings",
    "RunConfig",
    "ENV_PREFIX",
]

ENV_PREFIX = "CFRECSYS_"

_T = TypeVar("_T")


@dataclass
class DataSettings:
    path: Optional[str] = None
    format: str = "delimited"
    separator: str = "::"
    implicit: bool = False
    skip_header: bool = False
    min_n: int = 20
    max_n: int = 1000
    # items with fewer interactions are dropped after the user filter (1 keeps every item)
    min_item_n: int = 1

    def __post_init__(self) -> None:
        if self.format != "delimited":
            msg = f"unsupported data format {self.format!r} (only 'delimited' is supported)"
            raise ConfigurationError(msg)
        if self.min_n < 1 or self.max_n <= self.min_n or self.min_item_n < 1:
            msg = f"invalid filter bounds: min_n={self.min_n}, max_n={self.max_n}, min_item_n={self.min_item_n}"
            raise ConfigurationError(msg)


@dataclass
class TrainSettings:
    mode: TrainMode = TrainMode.ERM
    f_kind: ModelKind = ModelKind.MF
    g_kind: ModelKind = ModelKind.MF
    # "prepared" trains on the split of `prepare`, "simulated" on the split of the simulated clicks
    dataset: str = "prepared"
    config: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if not isinstance(self.mode, TrainMode):
            try:
                self.mode = TrainMode(str(self.mode).lower())
            except ValueError:
                msg = f"unknown training mode {self.mode!r} (expected erm, ps or acl)"
                raise ConfigurationError(msg) from None
        if not isinstance(self.f_kind, ModelKind):
            self.f_kind = ModelKind.parse(str(self.f_kind))
        if not isinstance(self.g_kind, ModelKind):
            self.g_kind = ModelKind.parse(str(self.g_kind))
        if self.dataset not in ("prepared", "simulated"):
            msg = f"train.dataset must be 'prepared' or 'simulated', got {self.dataset!r}"
            raise ConfigurationError(msg)


@dataclass
class EvalSettings:
    weighting: list[Weighting] = field(default_factory=lambda: [Weighting.STANDARD])
    # checkpoint of a g model (with its propensity head) for robust evaluation of ERM/PS models
    g_checkpoint: Optional[str] = None
    protocol: EvalProtocol = field(default_factory=EvalProtocol)

    def __post_init__(self) -> None:
        self.weighting = [w if isinstance(w, Weighting) else Weighting.parse(str(w)) for w in self.weighting]
        if not self.weighting:
            msg = "eval.weighting must name at least one weighting"
            raise ConfigurationError(msg)

    def protocol_for(self, weighting: Weighting, seed: int) -> EvalProtocol:
        return dataclasses.replace(self.protocol, weighting=weighting, seed=seed)


@dataclass
class OutputSettings:
    directory: Optional[str] = None
    lock_timeout_seconds: float = 600.0


class _ConfigFile:
    def __init__(self, path: Optional[Path], data: dict[Any, Any]) -> None:
        self.path = path
        self.data = data

    @staticmethod
    def load(path: Path) -> "_ConfigFile":
        if not path.is_file():
            msg = f"config file not found: '{path}'"
            raise ConfigurationError(msg)
        try:
            if path.suffix == ".json":
                with path.open("r", encoding="utf-8") as f:
                    return _ConfigFile(path, json.load(f))
            with path.open("rb") as f:
                return _ConfigFile(path, tomllib.load(f))
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
            msg = f"failed to parse config file '{path}': {e}"
            raise ConfigurationError(msg) from None

    @staticmethod
    def from_string(data_str: str) -> "_ConfigFile":
        return _ConfigFile(None, tomllib.loads(data_str))

    def get_value(self, keys: list[str], required_type: type[_T]) -> Optional[_T]:
        assert keys
        current_data: Any = self.data
        for i, key in enumerate(keys):
            if i > 0 and not isinstance(current_data, dict):
                msg = f"'{'.'.join(keys[:i])}' in {self._where()} must be a table"
                raise ConfigurationError(msg)
            current_data = current_data.get(key)
            if current_data is None:
                return None
        if required_type is float and isinstance(current_data, int) and not isinstance(current_data, bool):
            current_data = float(current_data)
        if not isinstance(current_data, required_type) or (required_type is int and isinstance(current_data, bool)):
            msg = f"expected {required_type.__name__} value at '{'.'.join(keys)}' in {self._where()}"
            raise ConfigurationError(msg)
        return current_data

    def _where(self) -> str:
        return "the config" if self.path is None else f"'{self.path}'"


def _field_type(default: Any) -> type:
    if default is None:
        return str
    if isinstance(default, Enum) or isinstance(default, str):
        return str
    if isinstance(default, bool):
        return bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, (list, tuple)):
        return list
    return object


def _defaults(cls: Any) -> dict[str, Any]:
    instance = cls()
    return {f.name: getattr(instance, f.name) for f in dataclasses.fields(cls)}


# section -> {key -> (target, default)}; target says which object the key configures
def _section_schema() -> dict[str, dict[str, tuple[str, Any]]]:
    def keys(target: str, cls: Any, exclude: tuple[str, ...] = ()) -> dict[str, tuple[str, Any]]:
        return {k: (target, v) for k, v in _defaults(cls).items() if k not in exclude}

    return {
        "data": keys("data", DataSettings),
        "sim": keys("sim", SimConfig, ("seed",)),
        "train": {
            **keys("train", TrainSettings, ("config",)),
            **keys("train_config", TrainConfig, ("seed",)),
        },
        "eval": {
            **keys("eval", EvalSettings, ("protocol",)),
            **keys("protocol", EvalProtocol, ("weighting", "seed")),
        },
        "output": keys("output", OutputSettings),
    }


def _parse_env_value(raw: str) -> Any:
    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def _env_overrides(environ: Mapping[str, str]) -> tuple[dict[str, Any], list[str]]:
    overrides: dict[str, Any] = {}
    names = []
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX) :]
        if rest == "SEED":
            overrides["seed"] = _parse_env_value(raw)
        elif "__" in rest:
            section, key = rest.lower().split("__", 1)
            overrides.setdefault(section, {})[key] = _parse_env_value(raw)
        else:
            continue
        names.append(name)
    return overrides, names


def _merge(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


@dataclass
class RunConfig:
    data: DataSettings = field(default_factory=DataSettings)
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    output: OutputSettings = field(default_factory=OutputSettings)
    seed: int = 0
    # dotted keys set explicitly by the config file or the environment
    provided: frozenset[str] = frozenset()

    @staticmethod
    def load(path: Optional[Path] = None, environ: Optional[Mapping[str, str]] = None) -> "RunConfig":
        """Read `path` (TOML, or a `.json` resolved-config snapshot) and apply environment overrides.

        Unknown sections and keys are rejected.
        """
        config_file = _ConfigFile.load(path) if path is not None else _ConfigFile(None, {})
        overrides, names = _env_overrides(os.environ if environ is None else environ)
        if names:
            logger.debug("config overridden by environment: %s", ", ".join(names))
        return RunConfig.from_dict(_merge(config_file.data, overrides), path)

    @staticmethod
    def from_string(data_str: str) -> "RunConfig":
        return RunConfig.from_dict(_ConfigFile.from_string(data_str).data)

    @staticmethod
    def from_dict(data: dict[str, Any], path: Optional[Path] = None) -> "RunConfig":
        config_file = _ConfigFile(path, data)
        schema = _section_schema()
        unknown = sorted(set(data) - set(schema) - {"seed"})
        if unknown:
            msg = f"unknown config section(s): {', '.join(unknown)}"
            raise ConfigurationError(msg)
        seed = config_file.get_value(["seed"], int)
        values: dict[str, dict[str, Any]] = {}
        provided = set()
        for section, keys in schema.items():
            table = config_file.get_value([section], dict) or {}
            unknown = sorted(set(table) - set(keys))
            if unknown:
                msg = f"unknown key(s) in [{section}]: {', '.join(unknown)}"
                raise ConfigurationError(msg)
            for key, (target, default) in keys.items():
                value = config_file.get_value([section, key], _field_type(default))
                if value is None:
                    continue
                if isinstance(default, tuple):
                    value = tuple(value)
                values.setdefault(target, {})[key] = value
                provided.add(f"{section}.{key}")
        seed = 0 if seed is None else seed
        if "seed" in data:
            provided.add("seed")
        return RunConfig(
            data=DataSettings(**values.get("data", {})),
            sim=SimConfig(**values.get("sim", {}), seed=seed),
            train=TrainSettings(
                **values.get("train", {}), config=TrainConfig(**values.get("train_config", {}), seed=seed)
            ),
            eval=EvalSettings(
                **values.get("eval", {}), protocol=EvalProtocol(**values.get("protocol", {}), seed=seed)
            ),
            output=OutputSettings(**values.get("output", {})),
            seed=seed,
            provided=frozenset(provided),
        )

    def with_overrides(self, *, seed: Optional[int] = None, out: Optional[Path] = None) -> "RunConfig":
        """Apply command-line flags, which take precedence over the file and the environment."""
        config = self
        if seed is not None:
            config = dataclasses.replace(
                config,
                seed=seed,
                sim=dataclasses.replace(config.sim, seed=seed),
                train=dataclasses.replace(config.train, config=dataclasses.replace(config.train.config, seed=seed)),
                eval=dataclasses.replace(config.eval, protocol=dataclasses.replace(config.eval.protocol, seed=seed)),
                provided=config.provided | {"seed"},
            )
        if out is not None:
            config = dataclasses.replace(
                config,
                output=dataclasses.replace(config.output, directory=str(out)),
                provided=config.provided | {"output.directory"},
            )
        return config

    def to_json(self) -> dict[str, Any]:
        """The resolved configuration; loading it back (as a `.json` config) reproduces this object."""

        def plain(value: Any) -> Any:
            if isinstance(value, Enum):
                return value.value
            if isinstance(value, (list, tuple)):
                return [plain(v) for v in value]
            return value

        def section(obj: Any, exclude: tuple[str, ...] = ()) -> dict[str, Any]:
            return {
                f.name: plain(getattr(obj, f.name))
                for f in dataclasses.fields(obj)
                if f.name not in exclude and getattr(obj, f.name) is not None
            }

        return {
            "seed": self.seed,
            "data": section(self.data),
            "sim": section(self.sim, ("seed",)),
            "train": {**section(self.train, ("config",)), **section(self.train.config, ("seed",))},
            "eval": {**section(self.eval, ("protocol",)), **section(self.eval.protocol, ("weighting", "seed"))},
            "output": section(self.output),
        }

    def ignored_keys(self) -> list[str]:
        """Explicitly set keys that the selected training mode does not use."""
        mode = self.train.mode
        unused: set[str] = set()
        if mode is TrainMode.ERM:
            unused = {"alpha", "reg_kind", "r_psi", "d_theta", "d_psi", "mu", "g_kind", "freeze_beta", "corr_users"}
        elif mode is TrainMode.PS:
            unused = {"alpha", "reg_kind", "d_theta", "d_psi", "corr_users"}
        return sorted(f"train.{key}" for key in unused if f"train.{key}" in self.provided)
