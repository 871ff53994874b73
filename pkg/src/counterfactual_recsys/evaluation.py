"""Leave-one-out ranking evaluation (Hit@K, NDCG@K) with optional inverse-propensity weighting of users.

Each evaluated user contributes one held-out positive ranked against sampled negatives (or the whole catalog).
Weighted regimes reweight the per-user metric by 1 / propensity of the held-out pair.
"""

from abc import ABC, abstractmethod
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

import numpy as np

from counterfactual_recsys._logging import logger
from counterfactual_recsys.data import SplitDataset, sample_negatives
from counterfactual_recsys.error import ConfigurationError, EvaluationError
from counterfactual_recsys.models import RecModel, score_batch
from counterfactual_recsys.numerics import FloatArray, IntArray
from counterfactual_recsys.propensity import PropensityHead, g_beta

__all__ = [
    "Weighting",
    "EvalProtocol",
    "CandidateSet",
    "MetricValue",
    "EvalReport",
    "PropensitySource",
    "RobustPropensity",
    "OraclePropensity",
    "PopularityPropensity",
    "build_candidates",
    "rank_position",
    "hit_at_k",
    "ndcg_at_k",
    "evaluate_candidates",
    "evaluate",
    "unbiased_gap",
    "ips_estimate",
]


class Weighting(str, Enum):
    STANDARD = "standard"
    ORACLE_UNBIASED = "oracle_unbiased"
    POPULARITY_DEBIASED = "popularity_debiased"
    ROBUST = "robust"

    @staticmethod
    def parse(name: str) -> "Weighting":
        try:
            return Weighting(name.lower())
        except ValueError:
            options = ", ".join(w.value for w in Weighting)
            msg = f"unknown weighting {name!r} (expected one of: {options})"
            raise ConfigurationError(msg) from None


@dataclass
class EvalProtocol:
    n_eval_negatives: int = 100
    cutoffs: tuple[int, ...] = (10,)
    weighting: Weighting = Weighting.STANDARD
    # report the self-normalized weighted metric as the primary figure (raw IPS is always reported too)
    self_normalize: bool = False
    mu: float = 0.05
    # rank the held-out item against every item the user never interacted with
    full_catalog: bool = False
    repetitions: int = 1
    target: str = "test"
    seed: int = 0

    def __post_init__(self) -> None:
        self.cutoffs = tuple(int(k) for k in self.cutoffs)
        if not self.cutoffs or any(k < 1 for k in self.cutoffs):
            msg = f"cutoffs must be a non-empty list of positive integers, got {list(self.cutoffs)}"
            raise ConfigurationError(msg)
        if list(self.cutoffs) != sorted(set(self.cutoffs)):
            msg = f"cutoffs must be sorted ascending without duplicates, got {list(self.cutoffs)}"
            raise ConfigurationError(msg)
        if not self.full_catalog and self.n_eval_negatives < max(self.cutoffs) - 1:
            msg = f"n_eval_negatives={self.n_eval_negatives} is too small for cutoff {max(self.cutoffs)}"
            raise ConfigurationError(msg)
        if not 0.0 < self.mu < 0.5:
            msg = f"evaluation propensity floor mu must lie in (0, 0.5), got {self.mu}"
            raise ConfigurationError(msg)
        if self.repetitions < 1:
            msg = f"repetitions must be >= 1, got {self.repetitions}"
            raise ConfigurationError(msg)
        if self.target not in ("val", "test"):
            msg = f"evaluation target must be 'val' or 'test', got {self.target!r}"
            raise ConfigurationError(msg)
        self.weighting = Weighting.parse(self.weighting) if isinstance(self.weighting, str) else self.weighting

    def to_json(self) -> dict[str, Any]:
        return {
            "n_eval_negatives": self.n_eval_negatives,
            "cutoffs": list(self.cutoffs),
            "weighting": self.weighting.value,
            "self_normalize": self.self_normalize,
            "mu": self.mu,
            "full_catalog": self.full_catalog,
            "repetitions": self.repetitions,
            "target": self.target,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(json_data: dict[Any, Any]) -> Optional["EvalProtocol"]:
        try:
            return EvalProtocol(
                n_eval_negatives=json_data["n_eval_negatives"],
                cutoffs=tuple(json_data["cutoffs"]),
                weighting=Weighting(json_data["weighting"]),
                self_normalize=json_data["self_normalize"],
                mu=json_data["mu"],
                full_catalog=json_data["full_catalog"],
                repetitions=json_data["repetitions"],
                target=json_data["target"],
                seed=json_data["seed"],
            )
        except KeyError:
            logger.debug("failed to parse EvalProtocol from %s", json_data)
            return None


@dataclass
class CandidateSet:
    """Column 0 of `items` holds each user's held-out positive.

    `tie_order` is a per-user random permutation of the columns: among equal scores the candidate with the
    smaller tie_order ranks first. `valid` masks padding in full-catalog mode.
    """

    users: IntArray
    items: IntArray
    tie_order: IntArray
    valid: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


def build_candidates(
    split: SplitDataset, target: str, protocol: EvalProtocol, rng: np.random.Generator
) -> CandidateSet:
    positives = np.asarray(split.held_out(target), dtype=np.int64)
    users = np.arange(split.n_users, dtype=np.int64)
    if protocol.full_catalog:
        width = split.n_items
        items = np.empty((split.n_users, width), dtype=np.int64)
        valid = np.zeros((split.n_users, width), dtype=bool)
        for user in range(split.n_users):
            negatives = np.flatnonzero(~split.positive_mask[user])
            items[user, 0] = positives[user]
            items[user, 1 : 1 + negatives.size] = negatives
            items[user, 1 + negatives.size :] = positives[user]
            valid[user, : 1 + negatives.size] = True
    else:
        width = 1 + protocol.n_eval_negatives
        items = np.empty((split.n_users, width), dtype=np.int64)
        for user in range(split.n_users):
            items[user, 0] = positives[user]
            items[user, 1:] = sample_negatives(user, protocol.n_eval_negatives, split, rng)
        valid = np.ones((split.n_users, width), dtype=bool)
    tie_order = np.argsort(rng.random((split.n_users, width)), axis=1).astype(np.int64)
    return CandidateSet(users, items, tie_order, valid)


def _ranks(scores: FloatArray, tie_order: IntArray, valid: np.ndarray) -> IntArray:
    positive = scores[:, :1]
    above = (scores > positive) & valid
    tied = (scores == positive) & valid & (tie_order < tie_order[:, :1])
    return (1 + above.sum(axis=1) + tied.sum(axis=1)).astype(np.int64)


def rank_position(
    model: RecModel, user: int, positive: int, negatives: Sequence[int], rng: np.random.Generator
) -> int:
    """1-based rank of `positive` among `negatives`; ties are broken by a seeded shuffle of the candidates."""
    if positive in set(negatives):
        msg = f"positive item {positive} is also listed as a negative"
        raise EvaluationError(msg)
    items = np.array([positive, *negatives], dtype=np.int64)
    scores = score_batch(model, np.full(items.size, user, dtype=np.int64), items)
    tie_order = rng.permutation(items.size)[None, :]
    return int(_ranks(scores[None, :], tie_order, np.ones((1, items.size), dtype=bool))[0])


def hit_at_k(rank: Any, k: int) -> Any:
    out = (np.asarray(rank) <= k).astype(np.float64)
    return float(out) if out.ndim == 0 else out


def ndcg_at_k(rank: Any, k: int) -> Any:
    r = np.asarray(rank, dtype=np.float64)
    out = np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def evaluate_candidates(model: RecModel, candidates: CandidateSet) -> IntArray:
    """Rank of the held-out positive for every user of the candidate set."""
    n, width = candidates.items.shape
    users = np.repeat(candidates.users, width)
    scores = score_batch(model, users, candidates.items.reshape(-1)).reshape(n, width)
    return _ranks(scores, candidates.tie_order, candidates.valid)


class PropensitySource(ABC):
    """Exposure propensities of (user, item) pairs used to weight the per-user metrics."""

    @abstractmethod
    def propensities(self, users: IntArray, items: IntArray) -> FloatArray: ...


class RobustPropensity(PropensitySource):
    """The learned adversarial propensity G_β(g(u, i), +1): held-out pairs are positives."""

    def __init__(self, g: RecModel, head: PropensityHead) -> None:
        self.g = g
        self.head = head

    def propensities(self, users: IntArray, items: IntArray) -> FloatArray:
        scores = score_batch(self.g, users, items)
        return np.asarray(g_beta(scores, np.ones_like(scores), self.head))


class OraclePropensity(PropensitySource):
    """The simulator's true exposure probabilities.

    The split's raw user/item labels are the simulator grid indices; they are mapped back to look up the table.
    """

    def __init__(self, p_exposure: FloatArray, split: SplitDataset) -> None:
        self.p_exposure = p_exposure
        self._user_rows = _grid_index(split.user_ids, p_exposure.shape[0])
        self._item_cols = _grid_index(split.item_ids, p_exposure.shape[1])

    def propensities(self, users: IntArray, items: IntArray) -> FloatArray:
        rows = self._user_rows[users]
        cols = self._item_cols[items]
        missing = (rows < 0) | (cols < 0)
        if np.any(missing):
            pairs = ", ".join(f"({u}, {i})" for u, i in zip(users[missing][:10], items[missing][:10]))
            msg = f"oracle exposure table has no entry for {int(missing.sum())} test pairs: {pairs}"
            raise EvaluationError(msg)
        out = self.p_exposure[rows, cols]
        bad = ~np.isfinite(out)
        if np.any(bad):
            pairs = ", ".join(f"({u}, {i})" for u, i in zip(users[bad][:10], items[bad][:10]))
            msg = f"oracle exposure table has no entry for {int(bad.sum())} test pairs: {pairs}"
            raise EvaluationError(msg)
        return out


def _grid_index(labels: Sequence[str], size: int) -> IntArray:
    out = np.full(len(labels), -1, dtype=np.int64)
    for dense, label in enumerate(labels):
        try:
            index = int(label)
        except ValueError:
            continue
        if 0 <= index < size:
            out[dense] = index
    return out


class PopularityPropensity(PropensitySource):
    """Train-set item frequency normalized by the most popular item, in (0, 1].

    Items without train interactions count as seen once.
    """

    def __init__(self, split: SplitDataset) -> None:
        counts = np.maximum(split.item_counts(), 1.0)
        self.frequency = counts / float(counts.max())

    def propensities(self, users: IntArray, items: IntArray) -> FloatArray:
        return self.frequency[items]


@dataclass
class MetricValue:
    mean: float
    std: Optional[float] = None

    def format(self, scale: float = 1.0) -> str:
        if self.std is None:
            return f"{self.mean * scale:.4f}"
        return f"{self.mean * scale:.4f} ({self.std * scale:.4f})"


def _summarize(values: Sequence[float]) -> MetricValue:
    if len(values) == 1:
        return MetricValue(float(values[0]))
    return MetricValue(float(np.mean(values)), float(np.std(values, ddof=1)))


@dataclass
class EvalReport:
    weighting: Weighting
    n_users: int
    protocol: dict[str, Any]
    raw: dict[str, MetricValue]
    self_normalized: Optional[dict[str, MetricValue]] = None
    effective_sample_size: Optional[float] = None
    label: dict[str, Any] = field(default_factory=dict)

    @property
    def exceeds_one(self) -> bool:
        return any(v.mean > 1.0 for v in self.raw.values())

    def primary(self, metric: str) -> float:
        if self.self_normalized is not None and self.protocol.get("self_normalize", False):
            return self.self_normalized[metric].mean
        return self.raw[metric].mean

    def to_json(self) -> dict[str, Any]:
        def values(metrics: Optional[dict[str, MetricValue]]) -> Optional[dict[str, Any]]:
            if metrics is None:
                return None
            return {k: {"mean": v.mean, "std": v.std} for k, v in metrics.items()}

        return {
            "weighting": self.weighting.value,
            "n_users": self.n_users,
            "protocol": self.protocol,
            "raw": values(self.raw),
            "self_normalized": values(self.self_normalized),
            "effective_sample_size": self.effective_sample_size,
            "raw_exceeds_one": self.exceeds_one,
            "label": self.label,
        }

    @staticmethod
    def from_json(json_data: dict[Any, Any]) -> Optional["EvalReport"]:
        def values(metrics: Optional[dict[str, Any]]) -> Optional[dict[str, MetricValue]]:
            if metrics is None:
                return None
            return {k: MetricValue(v["mean"], v["std"]) for k, v in metrics.items()}

        try:
            raw = values(json_data["raw"])
            assert raw is not None
            return EvalReport(
                weighting=Weighting(json_data["weighting"]),
                n_users=json_data["n_users"],
                protocol=json_data["protocol"],
                raw=raw,
                self_normalized=values(json_data["self_normalized"]),
                effective_sample_size=json_data["effective_sample_size"],
                label=json_data.get("label", {}),
            )
        except (KeyError, TypeError, AssertionError):
            logger.debug("failed to parse EvalReport from %s", json_data)
            return None

    def to_text(self) -> str:
        rows = [("metric", "raw", "self-normalized")]
        for name, value in self.raw.items():
            flag = " *" if value.mean > 1.0 else ""
            sn = "" if self.self_normalized is None else self.self_normalized[name].format()
            rows.append((name, value.format() + flag, sn))
        widths = [max(len(row[c]) for row in rows) for c in range(3)]
        lines = [f"weighting: {self.weighting.value}  users: {self.n_users}  seed: {self.protocol.get('seed')}"]
        lines.extend("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows)
        if self.effective_sample_size is not None:
            lines.append(f"effective sample size: {self.effective_sample_size:.2f}")
        if self.exceeds_one:
            lines.append("* raw weighted value exceeds 1")
        return "\n".join(lines)


def _weights(
    protocol: EvalProtocol, candidates: CandidateSet, source: Optional[PropensitySource]
) -> Optional[FloatArray]:
    if protocol.weighting is Weighting.STANDARD:
        return None
    if source is None:
        msg = f"{protocol.weighting.value} evaluation requires a propensity source"
        raise ConfigurationError(msg)
    positives = candidates.items[:, 0]
    propensity = np.asarray(source.propensities(candidates.users, positives), dtype=np.float64)
    return 1.0 / np.maximum(propensity, protocol.mu)


def _metric_columns(ranks: IntArray, cutoffs: Sequence[int]) -> dict[str, FloatArray]:
    columns: dict[str, FloatArray] = {}
    for k in cutoffs:
        columns[f"hit@{k}"] = hit_at_k(ranks, k)
        columns[f"ndcg@{k}"] = ndcg_at_k(ranks, k)
    return columns


def evaluate(
    model: RecModel,
    split: SplitDataset,
    protocol: EvalProtocol,
    weights_source: Optional[PropensitySource] = None,
    rng: Optional[np.random.Generator] = None,
) -> EvalReport:
    """Hit@K and NDCG@K for every cutoff of the protocol, averaged over users (user-id order) and repetitions."""
    rng = np.random.default_rng(protocol.seed) if rng is None else rng
    raw: dict[str, list[float]] = {}
    normalized: dict[str, list[float]] = {}
    ess: list[float] = []
    for _ in range(protocol.repetitions):
        candidates = build_candidates(split, protocol.target, protocol, rng)
        ranks = evaluate_candidates(model, candidates)
        weights = _weights(protocol, candidates, weights_source)
        for name, column in _metric_columns(ranks, protocol.cutoffs).items():
            if weights is None:
                raw.setdefault(name, []).append(float(np.mean(column)))
            else:
                raw.setdefault(name, []).append(float(np.sum(column * weights) / column.size))
                normalized.setdefault(name, []).append(float(np.sum(column * weights) / np.sum(weights)))
        if weights is not None:
            ess.append(float(np.sum(weights) ** 2 / np.sum(np.square(weights))))
    report = EvalReport(
        weighting=protocol.weighting,
        n_users=split.n_users,
        protocol=protocol.to_json(),
        raw={name: _summarize(v) for name, v in raw.items()},
        self_normalized={name: _summarize(v) for name, v in normalized.items()} if normalized else None,
        effective_sample_size=float(np.mean(ess)) if ess else None,
    )
    if report.exceeds_one:
        logger.warning("raw %s weighted metric exceeds 1 (not self-normalized)", protocol.weighting.value)
    return report


def unbiased_gap(
    model: RecModel,
    split: SplitDataset,
    oracle: OraclePropensity,
    protocol: EvalProtocol,
    k: int = 10,
    metric: str = "ndcg",
) -> float:
    """|oracle-weighted metric - standard metric| at cutoff k over one shared candidate draw.

    The oracle side is self-normalized so both figures are on the same scale.
    """
    if metric not in ("hit", "ndcg"):
        msg = f"metric must be 'hit' or 'ndcg', got {metric!r}"
        raise ConfigurationError(msg)
    rng = np.random.default_rng(protocol.seed)
    candidates = build_candidates(split, protocol.target, protocol, rng)
    ranks = evaluate_candidates(model, candidates)
    column = hit_at_k(ranks, k) if metric == "hit" else ndcg_at_k(ranks, k)
    propensity = oracle.propensities(candidates.users, candidates.items[:, 0])
    weights = 1.0 / np.maximum(propensity, protocol.mu)
    standard = float(np.mean(column))
    weighted = float(np.sum(column * weights) / np.sum(weights))
    return abs(weighted - standard)


def ips_estimate(values: FloatArray, exposed: np.ndarray, propensity: FloatArray) -> float:
    """(1/N) Σ values·𝟙(exposed)/propensity over all N entries: an unbiased estimate of mean(values)."""
    values = np.asarray(values, dtype=np.float64)
    exposed = np.asarray(exposed, dtype=bool)
    propensity = np.asarray(propensity, dtype=np.float64)
    if not (values.shape == exposed.shape == propensity.shape):
        msg = "values, exposure indicators and propensities must have the same shape"
        raise ConfigurationError(msg)
    if np.any(propensity[exposed] <= 0.0):
        msg = "exposed entries must have a positive propensity"
        raise ConfigurationError(msg)
    safe = np.where(exposed, propensity, 1.0)
    return float(np.sum(np.where(exposed, values / safe, 0.0)) / values.size)
