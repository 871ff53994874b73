"""Interaction logs, leave-last-two-out splits and negative-sampled training batches."""

import csv
import json
from collections import Counter, defaultdict
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Optional

import numpy as np

from counterfactual_recsys._logging import logger
from counterfactual_recsys.error import DataError, DataParseError, SamplingError, SplitError
from counterfactual_recsys.numerics import FloatArray, IntArray

__all__ = [
    "Interaction",
    "InteractionLog",
    "SplitDataset",
    "Batch",
    "load_interactions",
    "filter_users",
    "filter_items",
    "leave_last_split",
    "sample_negatives",
    "iterate_pair_batches",
    "make_batches",
    "write_split",
    "read_split",
    "all_interactions",
]

SEPARATORS = {"::": "::", "tab": "\t", "\\t": "\t", "\t": "\t", "comma": ",", ",": ","}


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    value: float
    # position of the interaction in the user's chronological sequence
    order: int


@dataclass
class InteractionLog:
    """Interactions over dense ids together with the tables mapping dense ids back to the raw labels."""

    interactions: list[Interaction]
    user_ids: list[str]
    item_ids: list[str]
    implicit: bool = False

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.interactions)

    def by_user(self) -> dict[int, list[Interaction]]:
        grouped: dict[int, list[Interaction]] = defaultdict(list)
        for interaction in self.interactions:
            grouped[interaction.user].append(interaction)
        for sequence in grouped.values():
            sequence.sort(key=lambda x: x.order)
        return dict(grouped)

    def summary(self) -> dict[str, object]:
        return {"n_users": self.n_users, "n_items": self.n_items, "interactions": len(self.interactions)}


@dataclass(frozen=True)
class SplitDataset:
    """Per-user train sequences plus one held-out validation and one test item per user.

    Instances are never mutated after construction, so they can be shared freely.
    """

    n_users: int
    n_items: int
    train: tuple[tuple[int, ...], ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    user_ids: tuple[str, ...] = ()
    item_ids: tuple[str, ...] = ()
    # per-user values of the whole sequence (train, then validation, then test); None for implicit data
    values: Optional[tuple[tuple[float, ...], ...]] = field(default=None, compare=False)

    @cached_property
    def positive_mask(self) -> np.ndarray:
        """Boolean (n_users, n_items) matrix of every item a user interacted with (train, val and test)."""
        mask = np.zeros((self.n_users, self.n_items), dtype=bool)
        users, items = self.train_pairs
        mask[users, items] = True
        held_out_users = np.arange(self.n_users)
        mask[held_out_users, np.asarray(self.val, dtype=np.int64)] = True
        mask[held_out_users, np.asarray(self.test, dtype=np.int64)] = True
        return mask

    @cached_property
    def train_pairs(self) -> tuple[IntArray, IntArray]:
        users = np.fromiter(
            (u for u, seq in enumerate(self.train) for _ in seq), dtype=np.int64, count=self.n_train
        )
        items = np.fromiter((i for seq in self.train for i in seq), dtype=np.int64, count=self.n_train)
        return users, items

    @cached_property
    def n_train(self) -> int:
        return sum(len(seq) for seq in self.train)

    def positives(self, user: int) -> frozenset[int]:
        return frozenset(self.train[user]) | {self.val[user], self.test[user]}

    def item_counts(self) -> FloatArray:
        """Number of train interactions per item."""
        _, items = self.train_pairs
        return np.bincount(items, minlength=self.n_items).astype(np.float64)

    def held_out(self, target: str) -> tuple[int, ...]:
        if target == "val":
            return self.val
        if target == "test":
            return self.test
        msg = f"unknown held-out target: {target!r}"
        raise DataError(msg)


@dataclass
class Batch:
    users: IntArray
    items: IntArray
    labels: FloatArray

    def __post_init__(self) -> None:
        if not (len(self.users) == len(self.items) == len(self.labels)):
            msg = "batch arrays must have equal lengths"
            raise DataError(msg)

    def __len__(self) -> int:
        return len(self.users)


def _parse_separator(separator: str) -> str:
    return SEPARATORS.get(separator, separator)


def load_interactions(
    path: Path,
    *,
    separator: str = "::",
    implicit: bool = False,
    skip_header: bool = False,
) -> InteractionLog:
    """Read `user<sep>item<sep>value[<sep>timestamp]` lines.

    Interactions are ordered per user by timestamp (stable, so ties and missing timestamps keep file order). Raw
    labels are remapped to dense ids in order of first appearance.
    """
    sep = _parse_separator(separator)
    records: list[tuple[str, str, float, float, int]] = []
    with path.open("r", encoding="utf-8") as f:
        for line_number, raw_line in enumerate(f, start=1):
            if skip_header and line_number == 1:
                continue
            line = raw_line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split(sep)
            if len(fields) not in (3, 4):
                msg = f"expected 3 or 4 fields separated by {sep!r}, found {len(fields)}"
                raise DataParseError(msg, line_number)
            user, item = fields[0].strip(), fields[1].strip()
            try:
                value = float(fields[2])
            except ValueError:
                msg = f"non-numeric value {fields[2]!r}"
                raise DataParseError(msg, line_number) from None
            if implicit:
                value = 1.0
            elif not 1.0 <= value <= 5.0:
                msg = f"rating {value} outside [1, 5]"
                raise DataParseError(msg, line_number)
            timestamp = float(line_number)
            if len(fields) == 4:
                try:
                    timestamp = float(fields[3])
                except ValueError:
                    msg = f"non-numeric timestamp {fields[3]!r}"
                    raise DataParseError(msg, line_number) from None
            records.append((user, item, value, timestamp, line_number))

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    for user, item, *_ in records:
        user_index.setdefault(user, len(user_index))
        item_index.setdefault(item, len(item_index))

    per_user: dict[int, list[tuple[float, int, int, float]]] = defaultdict(list)
    for user, item, value, timestamp, line_number in records:
        per_user[user_index[user]].append((timestamp, line_number, item_index[item], value))

    interactions: list[Interaction] = []
    for user in sorted(per_user):
        sequence = sorted(per_user[user], key=lambda r: (r[0], r[1]))
        interactions.extend(
            Interaction(user=user, item=item, value=value, order=position)
            for position, (_, _, item, value) in enumerate(sequence)
        )
    log = InteractionLog(interactions, list(user_index), list(item_index), implicit=implicit)
    logger.debug("loaded %d interactions from %s", len(log), path)
    return log


def _redensify(log: InteractionLog, interactions: list[Interaction]) -> InteractionLog:
    kept_users = sorted({x.user for x in interactions})
    kept_items = sorted({x.item for x in interactions})
    user_map = {old: new for new, old in enumerate(kept_users)}
    item_map = {old: new for new, old in enumerate(kept_items)}
    remapped: list[Interaction] = []
    order: Counter[int] = Counter()
    for x in sorted(interactions, key=lambda x: (user_map[x.user], x.order)):
        new_user = user_map[x.user]
        remapped.append(Interaction(new_user, item_map[x.item], x.value, order[new_user]))
        order[new_user] += 1
    return InteractionLog(
        remapped,
        [log.user_ids[u] for u in kept_users],
        [log.item_ids[i] for i in kept_items],
        implicit=log.implicit,
    )


def filter_users(log: InteractionLog, min_n: int, max_n: int) -> InteractionLog:
    """Keep users whose interaction count lies in [min_n, max_n]; items left without interactions are dropped."""
    if min_n < 1 or max_n <= min_n:
        msg = f"invalid user filter bounds: min_n={min_n}, max_n={max_n}"
        raise DataError(msg)
    counts = Counter(x.user for x in log.interactions)
    kept = [x for x in log.interactions if min_n <= counts[x.user] <= max_n]
    removed = sum(1 for c in counts.values() if not min_n <= c <= max_n)
    if removed:
        logger.debug("filter_users removed %d of %d users", removed, len(counts))
    return _redensify(log, kept)


def filter_items(log: InteractionLog, min_n: int) -> InteractionLog:
    """Drop items with fewer than `min_n` interactions."""
    counts = Counter(x.item for x in log.interactions)
    kept = [x for x in log.interactions if counts[x.item] >= min_n]
    return _redensify(log, kept)


def leave_last_split(log: InteractionLog) -> SplitDataset:
    """Last interaction -> test, second-to-last -> validation, the rest -> train."""
    sequences = log.by_user()
    train: list[tuple[int, ...]] = []
    values: list[tuple[float, ...]] = []
    val: list[int] = []
    test: list[int] = []
    for user in range(log.n_users):
        sequence = sequences.get(user, [])
        if len(sequence) < 3:
            label = log.user_ids[user]
            msg = f"user {label!r} has {len(sequence)} interactions, at least 3 are required"
            raise SplitError(msg, label)
        train.append(tuple(x.item for x in sequence[:-2]))
        values.append(tuple(x.value for x in sequence))
        val.append(sequence[-2].item)
        test.append(sequence[-1].item)
    return SplitDataset(
        n_users=log.n_users,
        n_items=log.n_items,
        train=tuple(train),
        val=tuple(val),
        test=tuple(test),
        user_ids=tuple(log.user_ids),
        item_ids=tuple(log.item_ids),
        values=None if log.implicit else tuple(values),
    )


def sample_negatives(user: int, k: int, split: SplitDataset, rng: np.random.Generator) -> IntArray:
    """k distinct items the user never interacted with, uniformly at random."""
    candidates = np.flatnonzero(~split.positive_mask[user])
    if candidates.size < k:
        msg = f"user {user} has {candidates.size} candidate negatives, {k} requested"
        raise SamplingError(msg)
    return rng.choice(candidates, size=k, replace=False).astype(np.int64)


def _draw_negatives(users: IntArray, positive_mask: np.ndarray, rng: np.random.Generator) -> IntArray:
    """One uniform non-positive item per entry of `users`, by rejection."""
    n_items = positive_mask.shape[1]
    if np.any(positive_mask[np.unique(users)].all(axis=1)):
        msg = "a user has interacted with every item, no negatives available"
        raise SamplingError(msg)
    items = rng.integers(0, n_items, size=users.size)
    rejected = np.flatnonzero(positive_mask[users, items])
    while rejected.size:
        items[rejected] = rng.integers(0, n_items, size=rejected.size)
        rejected = rejected[positive_mask[users[rejected], items[rejected]]]
    return items.astype(np.int64)


def iterate_pair_batches(
    users: IntArray,
    items: IntArray,
    positive_mask: np.ndarray,
    *,
    batch_size: int,
    negs_per_pos: int,
    rng: np.random.Generator,
) -> Iterator[Batch]:
    """Shuffle the positive pairs once, attach `negs_per_pos` fresh negatives to each and emit fixed-size batches.

    Each positive is immediately followed by its negatives; the final partial batch is emitted as well.
    """
    if batch_size < 1 or negs_per_pos < 0:
        msg = f"invalid batching parameters: batch_size={batch_size}, negs_per_pos={negs_per_pos}"
        raise DataError(msg)
    permutation = rng.permutation(users.size)
    pos_users = users[permutation]
    pos_items = items[permutation]
    group = 1 + negs_per_pos
    all_users = np.repeat(pos_users, group)
    all_items = np.repeat(pos_items, group)
    labels = np.tile(np.array([1.0] + [-1.0] * negs_per_pos), pos_users.size)
    if negs_per_pos:
        negative_slots = np.flatnonzero(labels < 0)
        all_items[negative_slots] = _draw_negatives(all_users[negative_slots], positive_mask, rng)
    for start in range(0, all_users.size, batch_size):
        end = start + batch_size
        yield Batch(all_users[start:end], all_items[start:end], labels[start:end])


def make_batches(
    split: SplitDataset, batch_size: int, negs_per_pos: int, rng: np.random.Generator
) -> Iterator[Batch]:
    """One epoch of training batches over the split's train interactions."""
    users, items = split.train_pairs
    return iterate_pair_batches(
        users, items, split.positive_mask, batch_size=batch_size, negs_per_pos=negs_per_pos, rng=rng
    )


@dataclass
class SplitManifest:
    n_users: int
    n_items: int
    n_train: int
    implicit: bool

    def to_json(self) -> dict[str, Any]:
        return {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_train": self.n_train,
            "implicit": self.implicit,
        }

    @staticmethod
    def from_json(json_data: dict[Any, Any]) -> Optional["SplitManifest"]:
        try:
            return SplitManifest(
                n_users=json_data["n_users"],
                n_items=json_data["n_items"],
                n_train=json_data["n_train"],
                implicit=json_data["implicit"],
            )
        except KeyError:
            logger.debug("failed to parse SplitManifest from %s", json_data)
            return None


def _write_rows(path: Path, rows: Sequence[Sequence[object]]) -> None:
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerows(rows)


def _read_rows(path: Path) -> list[list[str]]:
    with path.open("r", encoding="utf-8", newline="") as f:
        return [row for row in csv.reader(f, delimiter="\t") if row]


def write_split(split: SplitDataset, directory: Path) -> None:
    """Persist a split as train/val/test files over dense ids plus the two id-remap tables.

    Rows are `user item value position`; the position is the index in the user's full sequence.
    """
    directory.mkdir(parents=True, exist_ok=True)
    train_rows: list[tuple[object, ...]] = []
    val_rows: list[tuple[object, ...]] = []
    test_rows: list[tuple[object, ...]] = []
    for user, sequence in enumerate(split.train):
        values = split.values[user] if split.values is not None else (1.0,) * (len(sequence) + 2)
        train_rows.extend((user, item, repr(values[pos]), pos) for pos, item in enumerate(sequence))
        val_rows.append((user, split.val[user], repr(values[-2]), len(sequence)))
        test_rows.append((user, split.test[user], repr(values[-1]), len(sequence) + 1))
    _write_rows(directory / "train.tsv", train_rows)
    _write_rows(directory / "val.tsv", val_rows)
    _write_rows(directory / "test.tsv", test_rows)
    _write_rows(directory / "users.tsv", list(enumerate(split.user_ids)))
    _write_rows(directory / "items.tsv", list(enumerate(split.item_ids)))
    manifest = SplitManifest(split.n_users, split.n_items, split.n_train, split.values is None)
    with (directory / "manifest.json").open("w", encoding="utf-8") as f:
        json.dump(manifest.to_json(), f, indent="  ", sort_keys=True)


def read_split(directory: Path) -> SplitDataset:
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        msg = f"no prepared split found at '{directory}' (run the `prepare` command first)"
        raise DataError(msg)
    with manifest_path.open("r", encoding="utf-8") as f:
        manifest = SplitManifest.from_json(json.load(f))
    if manifest is None:
        msg = f"invalid split manifest: '{manifest_path}'"
        raise DataError(msg)
    train: list[list[int]] = [[] for _ in range(manifest.n_users)]
    values: list[list[float]] = [[] for _ in range(manifest.n_users)]
    for user, item, value, _ in _read_rows(directory / "train.tsv"):
        train[int(user)].append(int(item))
        values[int(user)].append(float(value))
    val = [0] * manifest.n_users
    test = [0] * manifest.n_users
    for target, name in ((val, "val.tsv"), (test, "test.tsv")):
        for user, item, value, _ in _read_rows(directory / name):
            target[int(user)] = int(item)
            values[int(user)].append(float(value))
    user_ids = tuple(label for _, label in _read_rows(directory / "users.tsv"))
    item_ids = tuple(label for _, label in _read_rows(directory / "items.tsv"))
    return SplitDataset(
        n_users=manifest.n_users,
        n_items=manifest.n_items,
        train=tuple(tuple(seq) for seq in train),
        val=tuple(val),
        test=tuple(test),
        user_ids=user_ids,
        item_ids=item_ids,
        values=None if manifest.implicit else tuple(tuple(v) for v in values),
    )


def all_interactions(split: SplitDataset) -> InteractionLog:
    """Rebuild the ordered interaction log a split was made from (train, then validation, then test)."""
    interactions: list[Interaction] = []
    for user in range(split.n_users):
        items = (*split.train[user], split.val[user], split.test[user])
        values = split.values[user] if split.values is not None else (1.0,) * len(items)
        interactions.extend(Interaction(user, item, value, pos) for pos, (item, value) in enumerate(zip(items, values)))
    return InteractionLog(interactions, list(split.user_ids), list(split.item_ids), implicit=split.values is None)
