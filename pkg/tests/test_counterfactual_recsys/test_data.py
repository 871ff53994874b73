from pathlib import Path

import numpy as np
import pytest

from counterfactual_recsys.data import (
    SplitDataset,
    all_interactions,
    filter_items,
    filter_users,
    leave_last_split,
    load_interactions,
    make_batches,
    read_split,
    sample_negatives,
    write_split,
)
from counterfactual_recsys.error import DataError, DataParseError, SamplingError, SplitError

from .common import random_log, synthetic_ratings, write_ratings


def test_load_interactions_orders_by_timestamp(workspace: Path) -> None:
    path = write_ratings(
        workspace / "ratings.dat",
        [
            "alice::m1::4::300",
            "alice::m2::5::100",
            "bob::m2::3::50",
            "alice::m3::1::200",
            "bob::m9::2::50",
        ],
    )
    log = load_interactions(path)
    assert log.user_ids == ["alice", "bob"]
    assert log.item_ids == ["m1", "m2", "m3", "m9"]
    assert len(log) == 5
    sequences = log.by_user()
    assert [x.item for x in sequences[0]] == [1, 2, 0]
    assert [x.value for x in sequences[0]] == [5.0, 1.0, 4.0]
    # equal timestamps keep file order
    assert [x.item for x in sequences[1]] == [1, 3]
    assert log.summary() == {"n_users": 2, "n_items": 4, "interactions": 5}


def test_load_interactions_formats(workspace: Path) -> None:
    path = write_ratings(workspace / "ratings.csv", ["user,item,rating", "1,10,3.5", "1,11,2", "2,10,4"])
    log = load_interactions(path, separator=",", skip_header=True)
    assert len(log) == 3
    assert log.user_ids == ["1", "2"]

    implicit = load_interactions(path, separator="comma", skip_header=True, implicit=True)
    assert {x.value for x in implicit.interactions} == {1.0}
    assert implicit.implicit

    tsv = write_ratings(workspace / "ratings.tsv", ["a\tx\t1", "a\ty\t2"])
    assert len(load_interactions(tsv, separator="tab")) == 2


@pytest.mark.parametrize(
    ("line", "message"),
    [
        ("u1::i1", "expected 3 or 4 fields"),
        ("u1::i1::good", "non-numeric value"),
        ("u1::i1::7", "outside [1, 5]"),
        ("u1::i1::3::yesterday", "non-numeric timestamp"),
    ],
)
def test_load_interactions_parse_errors(workspace: Path, line: str, message: str) -> None:
    path = write_ratings(workspace / "ratings.dat", ["u0::i0::3::1", line])
    with pytest.raises(DataParseError) as e:
        load_interactions(path)
    assert e.value.line_number == 2
    assert message in str(e.value)
    assert str(e.value).startswith("line 2: ")


def test_filter_users() -> None:
    log = random_log(6, 20, 4, seed=0)
    short = random_log(1, 20, 2, seed=1)
    combined = type(log)(
        log.interactions + [type(x)(6, x.item, x.value, x.order) for x in short.interactions],
        [*log.user_ids, "short"],
        log.item_ids,
    )
    filtered = filter_users(combined, 3, 10)
    assert filtered.n_users == 6
    assert "short" not in filtered.user_ids
    assert len(filtered) == 24
    # dense ids are compact again
    assert {x.item for x in filtered.interactions} == set(range(filtered.n_items))

    assert filter_users(combined, 3, 3 + 1).n_users == 6
    assert filter_users(combined, 5, 10).n_users == 0
    with pytest.raises(DataError):
        filter_users(combined, 3, 3)


def test_filter_items() -> None:
    log = random_log(10, 8, 5, seed=2)
    counts = np.bincount([x.item for x in log.interactions], minlength=8)
    filtered = filter_items(log, 7)
    assert filtered.n_items == int((counts >= 7).sum())
    assert len(filtered) == int(counts[counts >= 7].sum())


def test_leave_last_split(workspace: Path) -> None:
    path = write_ratings(
        workspace / "ratings.dat",
        ["a::x::1::1", "a::y::2::2", "a::z::3::3", "a::w::4::4", "b::y::5::1", "b::x::4::2", "b::w::3::3"],
    )
    split = leave_last_split(load_interactions(path))
    assert split.train == ((0, 1), (1,))
    assert split.val == (2, 0)
    assert split.test == (3, 3)
    assert split.values == ((1.0, 2.0, 3.0, 4.0), (5.0, 4.0, 3.0))
    assert split.n_train == 3
    assert split.positives(1) == frozenset({0, 1, 3})
    assert split.held_out("val") == split.val
    with pytest.raises(DataError):
        split.held_out("train")


def test_leave_last_split_rejects_short_users(workspace: Path) -> None:
    path = write_ratings(workspace / "ratings.dat", ["a::x::1::1", "a::y::2::2", "a::z::3::3", "b::x::1::1"])
    with pytest.raises(SplitError) as e:
        leave_last_split(load_interactions(path))
    assert e.value.user == "b"


def test_sample_negatives(small_split: SplitDataset, rng: np.random.Generator) -> None:
    for user in range(small_split.n_users):
        negatives = sample_negatives(user, 10, small_split, rng)
        assert len(set(negatives.tolist())) == 10
        assert not set(negatives.tolist()) & small_split.positives(user)

    available = small_split.n_items - len(small_split.positives(0))
    assert len(sample_negatives(0, available, small_split, rng)) == available
    with pytest.raises(SamplingError):
        sample_negatives(0, available + 1, small_split, rng)


def test_make_batches(small_split: SplitDataset) -> None:
    batches = list(make_batches(small_split, 7, 3, np.random.default_rng(0)))
    assert [len(b) for b in batches[:-1]] == [7] * (len(batches) - 1)
    users = np.concatenate([b.users for b in batches])
    items = np.concatenate([b.items for b in batches])
    labels = np.concatenate([b.labels for b in batches])
    assert users.size == small_split.n_train * 4
    assert list(labels[:8]) == [1.0, -1.0, -1.0, -1.0, 1.0, -1.0, -1.0, -1.0]
    # negatives are never among the user's positives, positives are exactly the train pairs
    assert not small_split.positive_mask[users[labels < 0], items[labels < 0]].any()
    train_users, train_items = small_split.train_pairs
    assert sorted(zip(users[labels > 0].tolist(), items[labels > 0].tolist())) == sorted(
        zip(train_users.tolist(), train_items.tolist())
    )

    again = list(make_batches(small_split, 7, 3, np.random.default_rng(0)))
    assert all(np.array_equal(a.items, b.items) for a, b in zip(batches, again))

    with pytest.raises(DataError):
        next(make_batches(small_split, 0, 3, np.random.default_rng(0)))


def test_split_persistence(workspace: Path) -> None:
    path = write_ratings(workspace / "ratings.dat", synthetic_ratings(15, 25, 6, seed=4))
    split = leave_last_split(load_interactions(path))
    write_split(split, workspace / "split")
    assert {p.name for p in (workspace / "split").iterdir()} == {
        "train.tsv",
        "val.tsv",
        "test.tsv",
        "users.tsv",
        "items.tsv",
        "manifest.json",
    }
    restored = read_split(workspace / "split")
    assert restored == split
    assert restored.values == split.values

    log = all_interactions(restored)
    assert len(log) == split.n_train + 2 * split.n_users
    assert leave_last_split(log) == split

    with pytest.raises(DataError, match="run the `prepare` command first"):
        read_split(workspace / "missing")


def test_implicit_split_persistence(workspace: Path, small_split: SplitDataset) -> None:
    write_split(small_split, workspace / "split")
    restored = read_split(workspace / "split")
    assert restored == small_split
    assert restored.values is None
    assert all_interactions(restored).implicit


def test_filter_users_is_idempotent() -> None:
    log = random_log(10, 25, 6, seed=3)
    log.interactions[:] = [x for x in log.interactions if x.user % 3 or x.order < 2]
    once = filter_users(log, 3, 10)
    twice = filter_users(once, 3, 10)
    assert once.n_users < log.n_users
    assert twice.interactions == once.interactions
    assert twice.user_ids == once.user_ids
    assert twice.item_ids == once.item_ids


def test_ids_are_dense_after_load_and_filter(workspace: Path) -> None:
    lines = synthetic_ratings(8, 15, 6, seed=4)
    # two-interaction users and an item only they rated
    lines += ["x0::i99::3::1", "x0::i3::4::2", "x1::i99::2::1", "x1::i7::5::2"]
    log = load_interactions(write_ratings(workspace / "ratings.dat", lines))
    filtered = filter_users(log, 3, 100)

    assert filtered.n_users == 8
    assert "i99" not in filtered.item_ids
    assert {x.user for x in filtered.interactions} == set(range(filtered.n_users))
    assert {x.item for x in filtered.interactions} == set(range(filtered.n_items))
    raw = {(log.user_ids[x.user], log.item_ids[x.item], x.value) for x in log.interactions}
    kept = {(filtered.user_ids[x.user], filtered.item_ids[x.item], x.value) for x in filtered.interactions}
    assert kept == {t for t in raw if not t[0].startswith("x")}
