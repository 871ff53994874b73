"""Model checkpoints: one `.npz` archive per model, parameters stored as-is plus a JSON metadata entry."""

import json
from pathlib import Path
from typing import Any, Optional

import numpy as np

from counterfactual_recsys._logging import logger
from counterfactual_recsys.error import ConfigurationError
from counterfactual_recsys.models import ModelKind, RecModel
from counterfactual_recsys.propensity import PropensityHead

__all__ = ["CHECKPOINT_FORMAT_VERSION", "save_model", "load_model", "read_metadata"]

CHECKPOINT_FORMAT_VERSION = 1

_META_KEY = "__meta__"


def save_model(
    path: Path, model: RecModel, head: Optional[PropensityHead] = None, extra: Optional[dict[str, Any]] = None
) -> None:
    """Write `model` (and the propensity head paired with it, if any) to `path`.

    Parameter arrays are stored without conversion so that loading is bit-exact.
    """
    meta: dict[str, Any] = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": model.kind.value,
        "n_users": model.n_users,
        "n_items": model.n_items,
        "dim": model.dim,
        "layers": list(model.layers),
        "param_names": list(model.params),
        "head": None if head is None else head.to_json(),
        "extra": extra or {},
    }
    if _META_KEY in model.params:
        msg = f"parameter name collides with metadata key: {_META_KEY}"
        raise ConfigurationError(msg)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, Any] = {name: value for name, value in model.params.items()}
    arrays[_META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with path.open("wb") as f:
        np.savez(f, **arrays)
    logger.debug("saved %s checkpoint to %s", model.kind.value, path)


def read_metadata(path: Path) -> dict[str, Any]:
    with np.load(path, allow_pickle=False) as data:
        return _parse_metadata(path, data)


def _parse_metadata(path: Path, data: Any) -> dict[str, Any]:
    if _META_KEY not in data:
        msg = f"'{path}' is not a model checkpoint (missing metadata)"
        raise ConfigurationError(msg)
    meta: dict[str, Any] = json.loads(str(data[_META_KEY]))
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        msg = f"unsupported checkpoint format version {version} in '{path}' (expected {CHECKPOINT_FORMAT_VERSION})"
        raise ConfigurationError(msg)
    return meta


def load_model(path: Path) -> tuple[RecModel, Optional[PropensityHead]]:
    if not path.is_file():
        msg = f"checkpoint not found: '{path}'"
        raise ConfigurationError(msg)
    with np.load(path, allow_pickle=False) as data:
        meta = _parse_metadata(path, data)
        params = {name: np.array(data[name]) for name in meta["param_names"]}
    model = RecModel(
        kind=ModelKind(meta["kind"]),
        n_users=meta["n_users"],
        n_items=meta["n_items"],
        dim=meta["dim"],
        layers=tuple(meta["layers"]),
        params=params,
    )
    head = None if meta["head"] is None else PropensityHead.from_json(meta["head"])
    return model, head
