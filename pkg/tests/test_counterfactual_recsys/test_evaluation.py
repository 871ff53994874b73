import logging

import numpy as np
import pytest

from counterfactual_recsys._logging import logger
from counterfactual_recsys.data import SplitDataset
from counterfactual_recsys.error import ConfigurationError, EvaluationError
from counterfactual_recsys.evaluation import (
    CandidateSet,
    EvalProtocol,
    EvalReport,
    OraclePropensity,
    PopularityPropensity,
    PropensitySource,
    RobustPropensity,
    Weighting,
    build_candidates,
    evaluate,
    evaluate_candidates,
    hit_at_k,
    ips_estimate,
    ndcg_at_k,
    rank_position,
    unbiased_gap,
)
from counterfactual_recsys.models import ModelKind, RecModel, init_model, pop_fit, score_batch
from counterfactual_recsys.numerics import FloatArray, IntArray
from counterfactual_recsys.propensity import PropensityHead
from counterfactual_recsys.simulation import SimConfig, generate_semi_synthetic

from .common import capture_logs, random_log, random_split


class ConstantPropensity(PropensitySource):
    def __init__(self, value: float) -> None:
        self.value = value

    def propensities(self, users: IntArray, items: IntArray) -> FloatArray:
        return np.full(len(users), self.value)


def _mf(split: SplitDataset, seed: int = 0) -> RecModel:
    return init_model(ModelKind.MF, split.n_users, split.n_items, 3, np.random.default_rng(seed), init_scale=0.5)


def _pop(split: SplitDataset) -> RecModel:
    return pop_fit(init_model(ModelKind.POP, split.n_users, split.n_items, 1, np.random.default_rng(0)), split)


def _brute_force_ranks(model: RecModel, candidates: CandidateSet) -> list[int]:
    ranks = []
    for row, user in enumerate(candidates.users):
        columns = np.flatnonzero(candidates.valid[row])
        items = candidates.items[row, columns]
        scores = score_batch(model, np.full(items.size, user), items)
        order = sorted(range(columns.size), key=lambda c: (-scores[c], candidates.tie_order[row, columns[c]]))
        ranks.append(order.index(0) + 1)
    return ranks


def test_metric_spot_values() -> None:
    assert hit_at_k(1, 10) == 1.0
    assert hit_at_k(11, 10) == 0.0
    assert ndcg_at_k(1, 10) == 1.0
    assert ndcg_at_k(3, 10) == pytest.approx(0.5)
    assert ndcg_at_k(11, 10) == 0.0
    assert list(hit_at_k(np.array([1, 5, 6]), 5)) == [1.0, 1.0, 0.0]


def test_rank_position_breaks_ties_randomly() -> None:
    model = init_model(ModelKind.POP, 1, 5, 1, np.random.default_rng(0))
    model.params["pop_scores"][:, 0] = [5.0, 4.0, 4.0, 1.0, 0.0]
    rng = np.random.default_rng(0)
    ranks = {rank_position(model, 0, 1, [0, 2, 3], rng) for _ in range(50)}
    assert ranks == {2, 3}
    assert {rank_position(model, 0, 0, [1, 2, 3, 4], rng) for _ in range(10)} == {1}
    assert {rank_position(model, 0, 4, [0, 1, 2, 3], rng) for _ in range(10)} == {5}
    with pytest.raises(EvaluationError):
        rank_position(model, 0, 1, [1, 2], rng)


@pytest.mark.parametrize("kind", [ModelKind.MF, ModelKind.POP])
def test_evaluate_matches_brute_force(small_split: SplitDataset, kind: ModelKind) -> None:
    model = _mf(small_split) if kind is ModelKind.MF else _pop(small_split)
    protocol = EvalProtocol(n_eval_negatives=5, cutoffs=(1, 3, 5), seed=7)
    report = evaluate(model, small_split, protocol)

    candidates = build_candidates(small_split, "test", protocol, np.random.default_rng(protocol.seed))
    assert candidates.items.shape == (small_split.n_users, 6)
    assert list(candidates.items[:, 0]) == list(small_split.test)
    ranks = np.array(_brute_force_ranks(model, candidates))
    for k in (1, 3, 5):
        assert report.raw[f"hit@{k}"].mean == pytest.approx(np.mean(ranks <= k))
        assert report.raw[f"ndcg@{k}"].mean == pytest.approx(np.mean(np.where(ranks <= k, 1 / np.log2(ranks + 1), 0)))
    assert report.self_normalized is None
    assert report.effective_sample_size is None
    assert report.n_users == small_split.n_users


def test_full_catalog_candidates(small_split: SplitDataset) -> None:
    protocol = EvalProtocol(full_catalog=True, cutoffs=(1, 5))
    candidates = build_candidates(small_split, "test", protocol, np.random.default_rng(0))
    for user in range(small_split.n_users):
        listed = set(candidates.items[user, candidates.valid[user]].tolist())
        assert listed == (set(range(small_split.n_items)) - small_split.positives(user)) | {small_split.test[user]}
    model = _pop(small_split)
    report = evaluate(model, small_split, protocol, rng=np.random.default_rng(0))
    ranks = np.array(_brute_force_ranks(model, candidates))
    assert report.raw["hit@5"].mean == pytest.approx(np.mean(ranks <= 5))


def test_constant_half_propensity(small_split: SplitDataset) -> None:
    model = _mf(small_split, seed=2)
    standard = evaluate(model, small_split, EvalProtocol(n_eval_negatives=10))
    weighted = evaluate(
        model, small_split, EvalProtocol(n_eval_negatives=10, weighting=Weighting.ROBUST), ConstantPropensity(0.5)
    )
    assert weighted.self_normalized is not None
    for name, value in standard.raw.items():
        assert weighted.raw[name].mean == pytest.approx(2.0 * value.mean)
        assert weighted.self_normalized[name].mean == pytest.approx(value.mean)
    assert weighted.effective_sample_size == pytest.approx(small_split.n_users)


def test_propensity_floor(small_split: SplitDataset) -> None:
    model = _mf(small_split)
    protocol = EvalProtocol(n_eval_negatives=5, cutoffs=(6,), weighting="robust", mu=0.1)
    with capture_logs(logger, logging.WARNING) as logs:
        report = evaluate(model, small_split, protocol, ConstantPropensity(0.0))
    # every positive ranks within the 6 candidates, so each user contributes exactly 1 / mu
    assert report.raw["hit@6"].mean == pytest.approx(10.0)
    assert report.exceeds_one
    assert "exceeds 1" in logs.getvalue()
    assert "* raw weighted value exceeds 1" in report.to_text()
    assert report.primary("hit@6") == pytest.approx(10.0)

    normalized = EvalProtocol(**{**protocol.to_json(), "self_normalize": True})
    assert evaluate(model, small_split, normalized, ConstantPropensity(0.0)).primary("hit@6") == pytest.approx(1.0)


def test_weighted_evaluation_needs_a_source(small_split: SplitDataset) -> None:
    with pytest.raises(ConfigurationError, match="requires a propensity source"):
        evaluate(_mf(small_split), small_split, EvalProtocol(n_eval_negatives=10, weighting="popularity_debiased"))


def test_propensity_sources(small_split: SplitDataset) -> None:
    users = np.arange(small_split.n_users)
    items = np.array(small_split.test)

    popularity = PopularityPropensity(small_split).propensities(users, items)
    assert np.all((popularity > 0.0) & (popularity <= 1.0))
    assert PopularityPropensity(small_split).frequency.max() == 1.0

    robust = RobustPropensity(_mf(small_split), PropensityHead(beta0=30.0, mu=0.1)).propensities(users, items)
    assert np.allclose(robust, 1.0 - 1e-6)

    table = np.random.default_rng(0).random((small_split.n_users, small_split.n_items))
    oracle = OraclePropensity(table, small_split)
    # split labels are the dense ids themselves
    assert np.array_equal(oracle.propensities(users, items), table[users, items])


def test_oracle_propensity_missing_entries(small_split: SplitDataset) -> None:
    users = np.arange(small_split.n_users)
    items = np.array(small_split.test)
    too_small = OraclePropensity(np.full((4, small_split.n_items), 0.5), small_split)
    with pytest.raises(EvaluationError, match="no entry for 8 test pairs"):
        too_small.propensities(users, items)

    table = np.full((small_split.n_users, small_split.n_items), 0.5)
    table[0, items[0]] = np.nan
    with pytest.raises(EvaluationError, match="no entry for 1 test pairs"):
        OraclePropensity(table, small_split).propensities(users, items)


def test_unbiased_gap_with_constant_oracle(small_split: SplitDataset) -> None:
    oracle = OraclePropensity(np.full((small_split.n_users, small_split.n_items), 0.3), small_split)
    protocol = EvalProtocol(n_eval_negatives=10)
    assert unbiased_gap(_mf(small_split), small_split, oracle, protocol) == pytest.approx(0.0, abs=1e-12)
    assert unbiased_gap(_mf(small_split), small_split, oracle, protocol, k=5, metric="hit") == pytest.approx(
        0.0, abs=1e-12
    )
    with pytest.raises(ConfigurationError):
        unbiased_gap(_mf(small_split), small_split, oracle, protocol, metric="mrr")


def test_ips_estimate_is_unbiased() -> None:
    oracle = generate_semi_synthetic(random_log(50, 50, 12, seed=9), SimConfig(dim=4, epochs=10, seed=9))
    assert oracle.shape == (50, 50)
    relevance, propensity = oracle.p_relevance, oracle.p_exposure
    rng = np.random.default_rng(0)
    estimates = np.array(
        [ips_estimate(relevance, rng.random(propensity.shape) < propensity, propensity) for _ in range(1000)]
    )
    standard_error = estimates.std(ddof=1) / np.sqrt(estimates.size)
    assert abs(estimates.mean() - relevance.mean()) < 3 * standard_error

    assert ips_estimate(relevance, np.ones((50, 50), dtype=bool), np.ones((50, 50))) == pytest.approx(relevance.mean())
    with pytest.raises(ConfigurationError):
        ips_estimate(relevance, np.ones((50, 50), dtype=bool), np.zeros((50, 50)))
    with pytest.raises(ConfigurationError):
        ips_estimate(relevance, np.ones((5, 5), dtype=bool), propensity)


def test_repetitions_report_spread(small_split: SplitDataset) -> None:
    report = evaluate(_mf(small_split), small_split, EvalProtocol(n_eval_negatives=10, repetitions=3))
    assert report.raw["hit@10"].std is not None
    assert "(" in report.raw["hit@10"].format()
    single = evaluate(_mf(small_split), small_split, EvalProtocol(n_eval_negatives=10))
    assert single.raw["hit@10"].std is None


def test_evaluation_is_deterministic(small_split: SplitDataset) -> None:
    protocol = EvalProtocol(n_eval_negatives=10, seed=3)
    first = evaluate(_mf(small_split), small_split, protocol)
    assert evaluate(_mf(small_split), small_split, protocol).to_json() == first.to_json()


def test_eval_report_json(small_split: SplitDataset) -> None:
    report = evaluate(
        _mf(small_split),
        small_split,
        EvalProtocol(n_eval_negatives=10, cutoffs=(5, 10), weighting="robust"),
        ConstantPropensity(0.4),
    )
    report.label = {"model": "mf", "mode": "acl"}
    restored = EvalReport.from_json(report.to_json())
    assert restored == report
    assert restored is not None
    assert EvalProtocol.from_json(restored.protocol) == EvalProtocol(
        n_eval_negatives=10, cutoffs=(5, 10), weighting=Weighting.ROBUST
    )
    assert EvalReport.from_json({"weighting": "robust"}) is None
    text = report.to_text()
    assert text.startswith("weighting: robust")
    assert "effective sample size" in text


def test_protocol_validation() -> None:
    assert EvalProtocol(weighting="Oracle_Unbiased").weighting is Weighting.ORACLE_UNBIASED
    for bad in (
        {"cutoffs": ()},
        {"cutoffs": (10, 5)},
        {"cutoffs": (0,)},
        {"n_eval_negatives": 5},
        {"mu": 0.0},
        {"repetitions": 0},
        {"target": "train"},
        {"weighting": "ips"},
    ):
        with pytest.raises(ConfigurationError):
            EvalProtocol(**bad)  # type: ignore[arg-type]
    # a full-catalog ranking does not sample negatives
    EvalProtocol(n_eval_negatives=1, full_catalog=True)


def test_metrics_never_fall_as_k_grows(small_split: SplitDataset) -> None:
    cutoffs = (1, 2, 3, 5, 8, 10)
    protocol = EvalProtocol(n_eval_negatives=10, cutoffs=cutoffs, seed=4)
    ranks = evaluate_candidates(
        _mf(small_split), build_candidates(small_split, "test", protocol, np.random.default_rng(4))
    )
    for small, large in zip(cutoffs, cutoffs[1:]):
        assert np.all(hit_at_k(ranks, small) <= hit_at_k(ranks, large))
        assert np.all(ndcg_at_k(ranks, small) <= ndcg_at_k(ranks, large))
    report = evaluate(_mf(small_split), small_split, protocol)
    for metric in ("hit", "ndcg"):
        means = [report.raw[f"{metric}@{k}"].mean for k in cutoffs]
        assert means == sorted(means)


def test_standard_evaluation_only_sees_the_ranking(small_split: SplitDataset) -> None:
    model = _mf(small_split, seed=5)
    # 2 * score + 1, parameter by parameter
    affine = model.copy()
    affine.params["user_emb"] *= 2.0
    affine.params["user_bias"] = 2.0 * affine.params["user_bias"] + 1.0
    affine.params["item_bias"] *= 2.0
    users = np.repeat(np.arange(small_split.n_users), small_split.n_items)
    items = np.tile(np.arange(small_split.n_items), small_split.n_users)
    assert np.allclose(score_batch(affine, users, items), 2.0 * score_batch(model, users, items) + 1.0)

    protocol = EvalProtocol(n_eval_negatives=10, cutoffs=(1, 5, 10))
    assert evaluate(affine, small_split, protocol).raw == evaluate(model, small_split, protocol).raw

    pop = _pop(small_split)
    shifted = pop.copy()
    shifted.params["pop_scores"] = 2.0 * shifted.params["pop_scores"] + 1.0
    assert evaluate(shifted, small_split, protocol).raw == evaluate(pop, small_split, protocol).raw


class RandomPropensity(PropensitySource):
    def __init__(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def propensities(self, users: IntArray, items: IntArray) -> FloatArray:
        return self.rng.uniform(0.05, 1.0, size=len(users))


def test_self_normalized_metric_is_a_convex_combination(small_split: SplitDataset) -> None:
    protocol = EvalProtocol(n_eval_negatives=10, cutoffs=(3, 10), weighting="robust", seed=2)
    model = _mf(small_split, seed=3)
    ranks = evaluate_candidates(model, build_candidates(small_split, "test", protocol, np.random.default_rng(2)))
    report = evaluate(model, small_split, protocol, RandomPropensity(0))
    assert report.self_normalized is not None
    for k in (3, 10):
        for name, column in ((f"hit@{k}", hit_at_k(ranks, k)), (f"ndcg@{k}", ndcg_at_k(ranks, k))):
            value = report.self_normalized[name].mean
            assert column.min() - 1e-12 <= value <= column.max() + 1e-12, name


def test_unit_propensities_reproduce_standard(small_split: SplitDataset) -> None:
    model = _mf(small_split, seed=6)
    standard = evaluate(model, small_split, EvalProtocol(n_eval_negatives=10, cutoffs=(5, 10)))
    for weighting in ("robust", "oracle_unbiased", "popularity_debiased"):
        protocol = EvalProtocol(n_eval_negatives=10, cutoffs=(5, 10), weighting=weighting)
        weighted = evaluate(model, small_split, protocol, ConstantPropensity(1.0))
        assert weighted.self_normalized is not None
        for name, value in standard.raw.items():
            assert weighted.raw[name].mean == pytest.approx(value.mean, abs=1e-12)
            assert weighted.self_normalized[name].mean == pytest.approx(value.mean, abs=1e-12)
        assert weighted.effective_sample_size == pytest.approx(small_split.n_users)


def test_popularity_propensity_is_positive_for_unseen_items() -> None:
    split = random_split(4, 30, 4, seed=1)
    counts = split.item_counts()
    assert np.any(counts == 0)
    frequency = PopularityPropensity(split).frequency
    assert np.all((frequency > 0.0) & (frequency <= 1.0))
    assert np.allclose(frequency[counts == 0], 1.0 / counts.max())
    assert np.allclose(frequency[counts > 0], counts[counts > 0] / counts.max())
