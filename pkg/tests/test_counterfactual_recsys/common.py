import logging
import os
import subprocess
import sys
from collections.abc import Iterator
from contextlib import contextmanager
from io import StringIO
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pytest

from counterfactual_recsys.data import Batch, Interaction, InteractionLog, SplitDataset, leave_last_split
from counterfactual_recsys.models import ModelKind, RecModel, _tower_forward

script_dir = Path(__file__).resolve().parent
log = logging.getLogger(__name__)

RUN_SLOW = os.environ.get("CFRECSYS_RUN_SLOW") == "1"
"""
the directional experiments train dozens of models; set CFRECSYS_RUN_SLOW=1 to run them
"""

slow = pytest.mark.skipif(not RUN_SLOW, reason="slow experiment (set CFRECSYS_RUN_SLOW=1 to run)")


def synthetic_ratings(
    n_users: int, n_items: int, per_user: int, *, seed: int = 0, rank: int = 2, separator: str = "::"
) -> list[str]:
    """`user::item::rating::timestamp` lines drawn from a planted low-rank rating model."""
    rng = np.random.default_rng(seed)
    user_factors = rng.normal(size=(n_users, rank))
    item_factors = rng.normal(size=(n_items, rank))
    lines = []
    for user in range(n_users):
        for t, item in enumerate(rng.choice(n_items, size=per_user, replace=False)):
            rating = int(np.clip(np.round(3.0 + user_factors[user] @ item_factors[item]), 1, 5))
            lines.append(separator.join([f"u{user}", f"i{item}", str(rating), str(1000 + t)]))
    return lines


def write_ratings(path: Path, lines: list[str]) -> Path:
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def random_log(n_users: int, n_items: int, per_user: int, *, seed: int = 0, implicit: bool = False) -> InteractionLog:
    """An in-memory log over dense ids; labels are the dense ids as strings."""
    rng = np.random.default_rng(seed)
    interactions = []
    for user in range(n_users):
        for position, item in enumerate(rng.choice(n_items, size=per_user, replace=False)):
            value = 1.0 if implicit else float(rng.integers(1, 6))
            interactions.append(Interaction(user, int(item), value, position))
    return InteractionLog(
        interactions, [str(u) for u in range(n_users)], [str(i) for i in range(n_items)], implicit=implicit
    )


def random_split(n_users: int = 12, n_items: int = 30, per_user: int = 6, *, seed: int = 0) -> SplitDataset:
    return leave_last_split(random_log(n_users, n_items, per_user, seed=seed, implicit=True))


def random_batch(n_users: int, n_items: int, size: int, rng: np.random.Generator) -> Batch:
    return Batch(
        users=rng.integers(0, n_users, size=size).astype(np.int64),
        items=rng.integers(0, n_items, size=size).astype(np.int64),
        labels=rng.choice([-1.0, 1.0], size=size),
    )


def near_relu_kink(model: RecModel, users: np.ndarray, items: np.ndarray, margin: float = 1e-3) -> bool:
    """finite differences are meaningless where a ReLU input sits next to zero"""
    if model.kind not in (ModelKind.MLP, ModelKind.NCF):
        return False
    prefix = "" if model.kind is ModelKind.MLP else "mlp_"
    x = np.concatenate([model.params[f"{prefix}user_emb"][users], model.params[f"{prefix}item_emb"][items]], axis=1)
    return any(np.min(np.abs(z)) < margin for z in _tower_forward(model, x).pre_activations)


def full_grid(n_users: int, n_items: int) -> tuple[np.ndarray, np.ndarray]:
    users = np.repeat(np.arange(n_users, dtype=np.int64), n_items)
    items = np.tile(np.arange(n_items, dtype=np.int64), n_users)
    return users, items


@contextmanager
def capture_logs(log: Optional[logging.Logger] = None, level: int = logging.INFO) -> Iterator[StringIO]:
    out = StringIO()
    if log is None:
        log = logging.getLogger()
    handler = logging.StreamHandler(out)
    handler.setLevel(level)
    log.addHandler(handler)
    try:
        yield out
    finally:
        log.removeHandler(handler)


def run_cli(
    args: list[str], cwd: Path, *, env: Optional[dict[str, Any]] = None, quiet: bool = False
) -> tuple[int, str]:
    """Run `python -m counterfactual_recsys` and return its exit code and combined output."""
    cmd = [sys.executable, "-m", "counterfactual_recsys", *args]
    # only the variables given here may configure the run
    full_env = {k: v for k, v in os.environ.items() if not k.startswith("CFRECSYS_")}
    full_env.update(env or {})
    proc = subprocess.run(cmd, stdout=subprocess.PIPE, stderr=subprocess.STDOUT, cwd=cwd, env=full_env, check=False)
    output = proc.stdout.decode().replace("\r\n", "\n")
    if not quiet:
        log.info("-" * 40)
        log.info("cmd: %s (exit code %d)", subprocess.list2cmdline(cmd), proc.returncode)
        log.info("output:\n%s", output)
        log.info("-" * 40)
    return proc.returncode, output
