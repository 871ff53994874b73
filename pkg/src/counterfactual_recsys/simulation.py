"""Semi-synthetic click data with known exposure and relevance probabilities.

Two factor models are fitted on an explicit rating log: one regresses the ratings (relevance), the other
predicts which pairs were rated at all (occurrence). Stage one perturbs both with Gaussian noise. Stage two
refits an implicit model on the stage-one clicks and shifts exposure by κ · cos(x_u, z_i) of its factors.
Clicks are exposure ∧ relevance, drawn independently, so a click has probability p_relevance × p_exposure.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from counterfactual_recsys._logging import logger
from counterfactual_recsys.data import (
    Interaction,
    InteractionLog,
    SplitDataset,
    iterate_pair_batches,
    load_interactions,
)
from counterfactual_recsys.error import ConfigurationError, DataError, DivergenceError
from counterfactual_recsys.models import ModelKind, RecModel, init_model, score_batch, score_grad
from counterfactual_recsys.numerics import DenseMatrix, FloatArray, logistic_loss, logistic_loss_grad, sigmoid
from counterfactual_recsys.propensity import ExposureData
from counterfactual_recsys.training import ModelOptimizer

__all__ = [
    "MIN_PROBABILITY",
    "SimConfig",
    "Stage1Output",
    "OracleDataset",
    "fit_relevance_model",
    "fit_occurrence_model",
    "draw_clicks",
    "stage1_generate",
    "stage2_generate",
    "generate_semi_synthetic",
    "write_oracle",
    "read_oracle",
]

MIN_PROBABILITY = 1e-6


@dataclass
class SimConfig:
    dim: int = 8
    # std of the relevance noise and of the log-exposure noise
    sigma1: float = 0.5
    sigma2: float = 0.5
    # scale of the stage-two exposure shift
    kappa: float = 1.0
    seed: int = 0
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 256
    negs_per_pos: int = 4
    init_scale: float = 0.1
    l2: float = 0.0
    # subtracted from the predicted rating before the sigmoid
    relevance_shift: float = 0.0

    def __post_init__(self) -> None:
        errors = []
        if self.dim < 1:
            errors.append("dim must be >= 1")
        if self.sigma1 < 0 or self.sigma2 < 0:
            errors.append("sigma1 and sigma2 must be >= 0")
        if not np.isfinite(self.kappa) or not np.isfinite(self.relevance_shift):
            errors.append("kappa and relevance_shift must be finite")
        if self.epochs < 0 or self.lr < 0 or self.l2 < 0:
            errors.append("epochs, lr and l2 must be >= 0")
        if self.batch_size < 1 or self.negs_per_pos < 0 or self.init_scale <= 0:
            errors.append("batch_size must be >= 1, negs_per_pos >= 0 and init_scale > 0")
        if errors:
            msg = "invalid simulation configuration: " + "; ".join(errors)
            raise ConfigurationError(msg)

    def to_json(self) -> dict[str, Any]:
        return {
            "dim": self.dim,
            "sigma1": self.sigma1,
            "sigma2": self.sigma2,
            "kappa": self.kappa,
            "seed": self.seed,
            "epochs": self.epochs,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "negs_per_pos": self.negs_per_pos,
            "init_scale": self.init_scale,
            "l2": self.l2,
            "relevance_shift": self.relevance_shift,
        }

    @staticmethod
    def from_json(json_data: dict[Any, Any]) -> Optional["SimConfig"]:
        try:
            return SimConfig(**{key: json_data[key] for key in SimConfig().to_json()})
        except KeyError:
            logger.debug("failed to parse SimConfig from %s", json_data)
            return None


@dataclass
class Stage1Output:
    p_relevance: DenseMatrix
    p_exposure: DenseMatrix
    exposed: np.ndarray
    relevant: np.ndarray

    @property
    def clicks(self) -> np.ndarray:
        return self.exposed & self.relevant


@dataclass
class OracleDataset:
    """Clicks over the full user × item grid plus the probabilities they were drawn from.

    Dense ids of `clicks` are grid indices; their raw labels are the indices as strings.
    """

    clicks: InteractionLog
    p_relevance: DenseMatrix
    p_exposure: DenseMatrix
    stage1_exposure: DenseMatrix
    exposed: np.ndarray
    config: SimConfig = field(default_factory=SimConfig)

    @property
    def shape(self) -> tuple[int, int]:
        return self.p_relevance.shape  # type: ignore[return-value]

    @property
    def click_probability(self) -> DenseMatrix:
        return self.p_relevance * self.p_exposure

    def exposure_data(self, split: SplitDataset) -> ExposureData:
        """Exposure draws (+1 exposed, -1 not) for every grid pair that survived into `split`, in split ids."""
        user_rows = _labels_to_grid(split.user_ids, self.shape[0])
        item_cols = _labels_to_grid(split.item_ids, self.shape[1])
        users = np.repeat(np.arange(split.n_users, dtype=np.int64), split.n_items)
        items = np.tile(np.arange(split.n_items, dtype=np.int64), split.n_users)
        labels = np.where(self.exposed[user_rows[users], item_cols[items]], 1.0, -1.0)
        return ExposureData(users, items, labels)


def _labels_to_grid(labels: tuple[str, ...], size: int) -> np.ndarray:
    try:
        index = np.array([int(label) for label in labels], dtype=np.int64)
    except ValueError:
        msg = "split labels are not simulator grid indices (was the split prepared from simulated clicks?)"
        raise DataError(msg) from None
    if index.size and (index.min() < 0 or index.max() >= size):
        msg = f"split label outside the simulator grid of size {size}"
        raise DataError(msg)
    return index


def _grid_scores(model: RecModel) -> DenseMatrix:
    users = np.repeat(np.arange(model.n_users, dtype=np.int64), model.n_items)
    items = np.tile(np.arange(model.n_items, dtype=np.int64), model.n_users)
    return score_batch(model, users, items).reshape(model.n_users, model.n_items)


def _as_arrays(log: InteractionLog) -> tuple[np.ndarray, np.ndarray, FloatArray]:
    users = np.fromiter((x.user for x in log.interactions), dtype=np.int64, count=len(log))
    items = np.fromiter((x.item for x in log.interactions), dtype=np.int64, count=len(log))
    values = np.fromiter((x.value for x in log.interactions), dtype=np.float64, count=len(log))
    return users, items, values


def fit_relevance_model(log: InteractionLog, cfg: SimConfig, rng: np.random.Generator) -> RecModel:
    """MF regression of the observed ratings (squared error), predicting E[rating | rated]."""
    if log.implicit:
        msg = "the relevance model needs explicit ratings"
        raise DataError(msg)
    if len(log) == 0:
        msg = "cannot fit a relevance model on an empty log"
        raise DataError(msg)
    users, items, ratings = _as_arrays(log)
    if ratings.min() < 1.0 or ratings.max() > 5.0:
        msg = "ratings must lie in [1, 5]"
        raise DataError(msg)
    model = init_model(ModelKind.MF, log.n_users, log.n_items, cfg.dim, rng, init_scale=cfg.init_scale)
    model.params["item_bias"][:] = ratings.mean()
    optimizer = ModelOptimizer(model, l2=cfg.l2)
    for epoch in range(cfg.epochs):
        order = rng.permutation(users.size)
        squared = 0.0
        for start in range(0, order.size, cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            residual = score_batch(model, users[chunk], items[chunk]) - ratings[chunk]
            squared += float(np.sum(np.square(residual)))
            optimizer.step(score_grad(model, users[chunk], items[chunk], 2.0 * residual / chunk.size), cfg.lr)
        rmse = float(np.sqrt(squared / users.size))
        if not np.isfinite(rmse):
            msg = f"relevance model diverged in epoch {epoch + 1}; try a lower simulation lr"
            raise DivergenceError(msg)
        logger.debug("relevance model epoch %d: train rmse %.4f", epoch + 1, rmse)
    return model


def fit_occurrence_model(log: InteractionLog, cfg: SimConfig, rng: np.random.Generator) -> RecModel:
    """Implicit MF with logistic loss on the binarized log; σ(score) estimates P(pair observed)."""
    model = init_model(ModelKind.MF, log.n_users, log.n_items, cfg.dim, rng, init_scale=cfg.init_scale)
    if len(log) == 0:
        return model
    users, items, _ = _as_arrays(log)
    positive_mask = np.zeros((log.n_users, log.n_items), dtype=bool)
    positive_mask[users, items] = True
    saturated = positive_mask.all(axis=1)
    if cfg.negs_per_pos and saturated.any():
        logger.warning(
            "%d users interacted with every item and are left out of the occurrence fit", int(saturated.sum())
        )
        keep = ~saturated[users]
        users, items = users[keep], items[keep]
        if users.size == 0:
            return model
    optimizer = ModelOptimizer(model, l2=cfg.l2)
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        batches = iterate_pair_batches(
            users, items, positive_mask, batch_size=cfg.batch_size, negs_per_pos=cfg.negs_per_pos, rng=rng
        )
        for batch in batches:
            scores = score_batch(model, batch.users, batch.items)
            total += float(np.sum(logistic_loss(batch.labels, scores)))
            count += len(batch)
            upstream = np.asarray(logistic_loss_grad(batch.labels, scores)) / len(batch)
            optimizer.step(score_grad(model, batch.users, batch.items, upstream), cfg.lr)
        if not np.isfinite(total):
            msg = f"occurrence model diverged in epoch {epoch + 1}; try a lower simulation lr"
            raise DivergenceError(msg)
        logger.debug("occurrence model epoch %d: loss %.4f", epoch + 1, total / max(count, 1))
    return model


def draw_clicks(
    p_relevance: DenseMatrix, p_exposure: DenseMatrix, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Independent exposure and relevance indicators; their conjunction is the click."""
    exposed = rng.random(p_exposure.shape) < p_exposure
    relevant = rng.random(p_relevance.shape) < p_relevance
    return exposed, relevant


def stage1_generate(
    relevance_model: RecModel, occurrence_model: RecModel, cfg: SimConfig, rng: np.random.Generator
) -> Stage1Output:
    if (relevance_model.n_users, relevance_model.n_items) != (occurrence_model.n_users, occurrence_model.n_items):
        msg = "relevance and occurrence models must share one id space"
        raise ConfigurationError(msg)
    predicted = _grid_scores(relevance_model)
    eps1 = rng.normal(0.0, cfg.sigma1, size=predicted.shape)
    eps2 = rng.normal(0.0, cfg.sigma2, size=predicted.shape)
    p_relevance = np.asarray(sigmoid(predicted + eps1 - cfg.relevance_shift))
    p_occurrence = np.asarray(sigmoid(_grid_scores(occurrence_model)))
    p_exposure = np.clip(p_occurrence * np.exp(eps2), MIN_PROBABILITY, 1.0)
    exposed, relevant = draw_clicks(p_relevance, p_exposure, rng)
    return Stage1Output(p_relevance, p_exposure, exposed, relevant)


def _click_log(clicks: np.ndarray, rng: np.random.Generator) -> InteractionLog:
    """Clicked pairs as an implicit log over the full grid; each user's click order is a seeded shuffle."""
    n_users, n_items = clicks.shape
    interactions: list[Interaction] = []
    for user in range(n_users):
        clicked = np.flatnonzero(clicks[user])
        for position, item in enumerate(rng.permutation(clicked)):
            interactions.append(Interaction(user, int(item), 1.0, position))
    return InteractionLog(
        interactions,
        [str(u) for u in range(n_users)],
        [str(i) for i in range(n_items)],
        implicit=True,
    )


def _cosine(x: DenseMatrix, z: DenseMatrix) -> DenseMatrix:
    x_norm = np.linalg.norm(x, axis=1, keepdims=True)
    z_norm = np.linalg.norm(z, axis=1, keepdims=True)
    x_unit = np.divide(x, x_norm, out=np.zeros_like(x), where=x_norm > 0)
    z_unit = np.divide(z, z_norm, out=np.zeros_like(z), where=z_norm > 0)
    return x_unit @ z_unit.T


def stage2_generate(stage1: Stage1Output, cfg: SimConfig, rng: np.random.Generator) -> OracleDataset:
    if cfg.kappa == 0.0:
        p_exposure = stage1.p_exposure.copy()
    else:
        refit = fit_occurrence_model(_click_log(stage1.clicks, rng), cfg, rng)
        shift = cfg.kappa * _cosine(refit.params["user_emb"], refit.params["item_emb"])
        p_exposure = np.clip(stage1.p_exposure * np.exp(shift), MIN_PROBABILITY, 1.0)
    exposed, relevant = draw_clicks(stage1.p_relevance, p_exposure, rng)
    return OracleDataset(
        clicks=_click_log(exposed & relevant, rng),
        p_relevance=stage1.p_relevance,
        p_exposure=p_exposure,
        stage1_exposure=stage1.p_exposure,
        exposed=exposed,
        config=cfg,
    )


def generate_semi_synthetic(log: InteractionLog, cfg: SimConfig) -> OracleDataset:
    relevance_seed, occurrence_seed, stage1_seed, stage2_seed = np.random.SeedSequence(cfg.seed).spawn(4)
    logger.info("fitting simulator models on %d ratings", len(log))
    relevance = fit_relevance_model(log, cfg, np.random.default_rng(relevance_seed))
    occurrence = fit_occurrence_model(log, cfg, np.random.default_rng(occurrence_seed))
    stage1 = stage1_generate(relevance, occurrence, cfg, np.random.default_rng(stage1_seed))
    oracle = stage2_generate(stage1, cfg, np.random.default_rng(stage2_seed))
    logger.info(
        "simulated %d clicks over %d users x %d items (stage-1 clicks: %d)",
        len(oracle.clicks),
        oracle.shape[0],
        oracle.shape[1],
        int(stage1.clicks.sum()),
    )
    return oracle


@dataclass
class OracleManifest:
    n_users: int
    n_items: int
    n_clicks: int
    config: dict[str, Any]
    # stage-two exposure equals stage-one exposure (no shift applied)
    stage2_identical: bool

    def to_json(self) -> dict[str, Any]:
        return {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_clicks": self.n_clicks,
            "config": self.config,
            "stage2_identical": self.stage2_identical,
        }

    @staticmethod
    def from_json(json_data: dict[Any, Any]) -> Optional["OracleManifest"]:
        try:
            return OracleManifest(
                n_users=json_data["n_users"],
                n_items=json_data["n_items"],
                n_clicks=json_data["n_clicks"],
                config=json_data["config"],
                stage2_identical=json_data["stage2_identical"],
            )
        except KeyError:
            logger.debug("failed to parse OracleManifest from %s", json_data)
            return None


_TABLES = ("p_relevance", "p_exposure", "stage1_exposure")


def _write_table(path: Path, table: DenseMatrix) -> None:
    with path.open("w", encoding="utf-8") as f:
        for (user, item), p in np.ndenumerate(table):
            f.write(f"{user}\t{item}\t{float(p)!r}\n")


def _read_table(path: Path, shape: tuple[int, int]) -> DenseMatrix:
    table = np.full(shape, np.nan)
    with path.open("r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                user, item, p = line.split("\t")
                table[int(user), int(item)] = float(p)
    return table


def write_oracle(oracle: OracleDataset, directory: Path) -> None:
    """clicks.tsv (user, item, 1, order), one `user item probability` file per table, exposure draws, manifest."""
    directory.mkdir(parents=True, exist_ok=True)
    with (directory / "clicks.tsv").open("w", encoding="utf-8") as f:
        for x in oracle.clicks.interactions:
            f.write(f"{x.user}\t{x.item}\t1\t{x.order}\n")
    for name in _TABLES:
        _write_table(directory / f"{name}.tsv", getattr(oracle, name))
    with (directory / "exposed.tsv").open("w", encoding="utf-8") as f:
        for user, item in zip(*np.nonzero(oracle.exposed)):
            f.write(f"{user}\t{item}\n")
    manifest = OracleManifest(
        n_users=oracle.shape[0],
        n_items=oracle.shape[1],
        n_clicks=len(oracle.clicks),
        config=oracle.config.to_json(),
        stage2_identical=bool(np.array_equal(oracle.p_exposure, oracle.stage1_exposure)),
    )
    with (directory / "manifest.json").open("w", encoding="utf-8") as f:
        json.dump(manifest.to_json(), f, indent="  ", sort_keys=True)


def read_oracle(directory: Path) -> OracleDataset:
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        msg = f"no simulated data found at '{directory}' (run the `simulate` command first)"
        raise DataError(msg)
    with manifest_path.open("r", encoding="utf-8") as f:
        manifest = OracleManifest.from_json(json.load(f))
    config = None if manifest is None else SimConfig.from_json(manifest.config)
    if manifest is None or config is None:
        msg = f"invalid oracle manifest: '{manifest_path}'"
        raise DataError(msg)
    shape = (manifest.n_users, manifest.n_items)
    tables = {name: _read_table(directory / f"{name}.tsv", shape) for name in _TABLES}
    exposed = np.zeros(shape, dtype=bool)
    with (directory / "exposed.tsv").open("r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                user, item = line.split("\t")
                exposed[int(user), int(item)] = True
    clicks = load_interactions(directory / "clicks.tsv", separator="tab", implicit=True)
    # clicks.tsv only lists users/items with clicks; restore the full grid id space
    on_grid = [
        Interaction(int(clicks.user_ids[x.user]), int(clicks.item_ids[x.item]), 1.0, x.order)
        for x in clicks.interactions
    ]
    grid_log = InteractionLog(
        sorted(on_grid, key=lambda x: (x.user, x.order)),
        [str(u) for u in range(shape[0])],
        [str(i) for i in range(shape[1])],
        implicit=True,
    )
    return OracleDataset(
        grid_log, tables["p_relevance"], tables["p_exposure"], tables["stage1_exposure"], exposed, config
    )
