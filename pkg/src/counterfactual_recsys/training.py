"""Training procedures: plain ERM, two-stage propensity-weighted ERM (PS) and the adversarial minimax game (ACL).

The ACL objective for a batch of (u, i, y) is

    J(θ, ψ, β) = mean_j[ φ(y_j · f_θ(u_j, i_j)) / G_β(g_ψ(u_j, i_j), y_j) ] - α · R(g_ψ)

which f and β minimize and g maximizes, by alternating a descent step and an ascent step on every batch.
"""

import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import TracebackType
from typing import Any, Optional, TextIO

import numpy as np

from counterfactual_recsys._logging import logger
from counterfactual_recsys.data import Batch, SplitDataset, make_batches
from counterfactual_recsys.error import ConfigurationError, DivergenceError
from counterfactual_recsys.evaluation import (
    CandidateSet,
    EvalProtocol,
    build_candidates,
    evaluate_candidates,
    hit_at_k,
    ndcg_at_k,
)
from counterfactual_recsys.models import (
    ModelGradients,
    ModelKind,
    RecModel,
    init_model,
    pop_fit,
    score_batch,
    score_grad,
)
from counterfactual_recsys.numerics import (
    AdamState,
    FloatArray,
    adam_step,
    logistic_loss,
    logistic_loss_grad,
    sparse_adam_step,
)
from counterfactual_recsys.propensity import (
    ExposureData,
    PropensityHead,
    RegularizerContext,
    RegularizerKind,
    RegularizerTerm,
    g_beta,
    g_beta_grads,
    regularizer_loss,
)

__all__ = [
    "TrainMode",
    "OptimizerKind",
    "TrainConfig",
    "TrainState",
    "TrainLog",
    "ModelOptimizer",
    "AclLoss",
    "AclGradients",
    "AclStepper",
    "build_model",
    "erm_train",
    "ps_train",
    "acl_loss",
    "acl_gradients",
    "acl_train",
    "early_stop_check",
    "DIVERGENCE_THRESHOLD",
]

DIVERGENCE_THRESHOLD = 1e6
_VALIDATION_CUTOFF = 10


class TrainMode(str, Enum):
    ERM = "erm"
    PS = "ps"
    ACL = "acl"


class OptimizerKind(str, Enum):
    ADAM = "adam"
    SGD = "sgd"


def _parse_enum(enum_type: Any, value: Any, what: str) -> Any:
    if isinstance(value, enum_type):
        return value
    try:
        return enum_type(str(value).lower())
    except ValueError:
        options = ", ".join(e.value for e in enum_type)
        msg = f"unknown {what} {value!r} (expected one of: {options})"
        raise ConfigurationError(msg) from None


@dataclass
class TrainConfig:
    # learning rate of f (and β), learning rate of g
    r_theta: float = 0.01
    r_psi: float = 0.05
    # per-epoch learning-rate discounts of the ACL game
    d_theta: float = 1.02
    d_psi: float = 1.01
    alpha: float = 1.0
    reg_kind: RegularizerKind = RegularizerKind.FEEDBACK_LOSS
    mu: float = 0.05
    batch_size: int = 256
    negs_per_pos: int = 4
    max_epochs: int = 100
    patience: int = 10
    objective_tol: float = 1e-3
    l2: float = 0.0
    seed: int = 0
    optimizer: OptimizerKind = OptimizerKind.ADAM
    freeze_beta: bool = False
    dim: int = 32
    layers: tuple[int, ...] = ()
    init_scale: float = 0.01
    n_val_negatives: int = 100
    # users sampled per batch by the popularity_correlation regularizer
    corr_users: int = 64

    def __post_init__(self) -> None:
        self.reg_kind = _parse_enum(RegularizerKind, self.reg_kind, "regularizer")
        self.optimizer = _parse_enum(OptimizerKind, self.optimizer, "optimizer")
        self.layers = tuple(int(h) for h in self.layers)
        errors = []
        if self.r_theta < 0 or self.r_psi < 0:
            errors.append("learning rates must be non-negative")
        if self.d_theta < 1 or self.d_psi < 1:
            errors.append("learning-rate discounts must be >= 1")
        if self.alpha < 0:
            errors.append("alpha must be >= 0")
        if not 0.0 < self.mu < 0.5:
            errors.append("mu must lie in (0, 0.5)")
        if self.batch_size < 1 or self.negs_per_pos < 0:
            errors.append("batch_size must be >= 1 and negs_per_pos >= 0")
        if self.max_epochs < 1 or self.patience < 1:
            errors.append("max_epochs and patience must be >= 1")
        if self.objective_tol < 0 or self.l2 < 0:
            errors.append("objective_tol and l2 must be >= 0")
        if self.dim < 1 or self.init_scale <= 0:
            errors.append("dim must be >= 1 and init_scale > 0")
        if self.n_val_negatives < 1 or self.corr_users < 1:
            errors.append("n_val_negatives and corr_users must be >= 1")
        if errors:
            msg = "invalid training configuration: " + "; ".join(errors)
            raise ConfigurationError(msg)

    def to_json(self) -> dict[str, Any]:
        return {
            "r_theta": self.r_theta,
            "r_psi": self.r_psi,
            "d_theta": self.d_theta,
            "d_psi": self.d_psi,
            "alpha": self.alpha,
            "reg_kind": self.reg_kind.value,
            "mu": self.mu,
            "batch_size": self.batch_size,
            "negs_per_pos": self.negs_per_pos,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "objective_tol": self.objective_tol,
            "l2": self.l2,
            "seed": self.seed,
            "optimizer": self.optimizer.value,
            "freeze_beta": self.freeze_beta,
            "dim": self.dim,
            "layers": list(self.layers),
            "init_scale": self.init_scale,
            "n_val_negatives": self.n_val_negatives,
            "corr_users": self.corr_users,
        }


@dataclass
class TrainState:
    epochs_run: int = 0
    objective_history: list[float] = field(default_factory=list)
    # validation Hit@10 of f (and of g, for ACL)
    val_history: list[float] = field(default_factory=list)
    g_val_history: list[float] = field(default_factory=list)
    lr_history: list[tuple[float, float]] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_json(self) -> dict[str, Any]:
        return {
            "epochs_run": self.epochs_run,
            "objective_history": self.objective_history,
            "val_history": self.val_history,
            "g_val_history": self.g_val_history,
            "lr_history": [list(lrs) for lrs in self.lr_history],
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
        }


class TrainLog:
    """Per-epoch JSON-lines log. Records are also kept in memory; `path=None` keeps them only in memory."""

    def __init__(self, path: Optional[Path] = None) -> None:
        self.path = path
        self.records: list[dict[str, Any]] = []
        self._file: Optional[TextIO] = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._file = path.open("w", encoding="utf-8")

    def write(self, record: dict[str, Any]) -> None:
        self.records.append(record)
        if self._file is not None:
            self._file.write(json.dumps(record, sort_keys=True) + "\n")
            self._file.flush()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self) -> "TrainLog":
        return self

    def __exit__(
        self,
        exc_type: Optional[type[BaseException]],
        exc_value: Optional[BaseException],
        traceback: Optional[TracebackType],
    ) -> None:
        self.close()


class ModelOptimizer:
    """Applies `ModelGradients` to a model: sparse updates for row parameters, dense updates for the rest.

    Weight decay (`l2`) is decoupled and only shrinks the rows (and dense weights) a step touches.
    """

    def __init__(self, model: RecModel, kind: OptimizerKind = OptimizerKind.ADAM, l2: float = 0.0) -> None:
        self.model = model
        self.kind = kind
        self.l2 = l2
        self._states: dict[str, AdamState] = {}

    def _state(self, name: str) -> AdamState:
        if name not in self._states:
            self._states[name] = AdamState.zeros_like(self.model.params[name])
        return self._states[name]

    def step(self, grads: ModelGradients, lr: float, *, ascent: bool = False) -> None:
        sign = -1.0 if ascent else 1.0
        params = self.model.params
        for name, (rows, row_grads) in grads.rows.items():
            param = params[name]
            if self.l2 > 0.0:
                param[rows] *= 1.0 - lr * self.l2
            if self.kind is OptimizerKind.ADAM:
                sparse_adam_step(param, (rows, sign * row_grads), self._state(name), lr)
            else:
                param[rows] -= lr * (sign * row_grads)
        for name, grad in grads.dense.items():
            param = params[name]
            if self.l2 > 0.0:
                param *= 1.0 - lr * self.l2
            if self.kind is OptimizerKind.ADAM:
                adam_step(param, sign * grad, self._state(name), lr)
            else:
                param -= lr * (sign * grad)


class _HeadOptimizer:
    def __init__(self, kind: OptimizerKind) -> None:
        self.kind = kind
        self._state = AdamState.zeros_like(np.zeros((1, 3)))

    def step(self, head: PropensityHead, grad: FloatArray, lr: float) -> PropensityHead:
        betas = head.betas[None, :]
        if self.kind is OptimizerKind.ADAM:
            adam_step(betas, grad[None, :], self._state, lr)
        else:
            betas -= lr * grad[None, :]
        return head.with_betas(betas[0])


def _streams(seed: int) -> dict[str, np.random.SeedSequence]:
    names = ("f_init", "g_init", "batches", "validation", "stage1", "regularizer")
    return dict(zip(names, np.random.SeedSequence(seed).spawn(len(names))))


def build_model(kind: ModelKind, split: SplitDataset, cfg: TrainConfig, role: str = "f") -> RecModel:
    """Initial model for `role` ('f' or 'g'); the same config always yields the same parameters."""
    if role not in ("f", "g"):
        msg = f"role must be 'f' or 'g', got {role!r}"
        raise ConfigurationError(msg)
    rng = np.random.default_rng(_streams(cfg.seed)[f"{role}_init"])
    return init_model(kind, split.n_users, split.n_items, cfg.dim, rng, cfg.layers or None, cfg.init_scale)


def early_stop_check(history: Sequence[float], patience: int, tol: float, mode: str = "metric") -> bool:
    """Whether the last `patience` entries show no progress.

    metric mode: none of them improves on the best earlier value by more than `tol`.
    objective mode: none of the last `patience` epoch-to-epoch changes exceeds `tol`.
    """
    if patience < 1:
        msg = f"patience must be >= 1, got {patience}"
        raise ConfigurationError(msg)
    if len(history) <= patience:
        return False
    if mode == "metric":
        return max(history[-patience:]) <= max(history[:-patience]) + tol
    if mode == "objective":
        recent = np.asarray(history[-(patience + 1) :], dtype=np.float64)
        return bool(np.all(np.abs(np.diff(recent)) <= tol))
    msg = f"unknown early-stopping mode: {mode!r}"
    raise ConfigurationError(msg)


def _validation_candidates(split: SplitDataset, cfg: TrainConfig) -> CandidateSet:
    available = int((~split.positive_mask).sum(axis=1).min())
    full_catalog = available < cfg.n_val_negatives
    protocol = EvalProtocol(
        n_eval_negatives=cfg.n_val_negatives,
        cutoffs=(_VALIDATION_CUTOFF,),
        full_catalog=full_catalog,
        target="val",
    )
    rng = np.random.default_rng(_streams(cfg.seed)["validation"])
    return build_candidates(split, "val", protocol, rng)


def _validation_metrics(model: RecModel, candidates: CandidateSet) -> tuple[float, float]:
    ranks = evaluate_candidates(model, candidates)
    hit = float(np.mean(hit_at_k(ranks, _VALIDATION_CUTOFF)))
    ndcg = float(np.mean(ndcg_at_k(ranks, _VALIDATION_CUTOFF)))
    return hit, ndcg


def _check_finite(value: float, what: str, last_good: dict[str, Any]) -> None:
    if not np.isfinite(value) or abs(value) > DIVERGENCE_THRESHOLD:
        msg = f"{what} diverged (value {value}); try a lower learning rate"
        raise DivergenceError(msg, last_good)


def _fit_supervised(
    model: RecModel,
    split: SplitDataset,
    cfg: TrainConfig,
    *,
    lr: float,
    stream: str,
    log: Optional[TrainLog],
    role: str,
    propensity: Optional[RecModel] = None,
    head: Optional[PropensityHead] = None,
) -> tuple[RecModel, Optional[PropensityHead], TrainState]:
    """Minimize the (optionally propensity-weighted) logistic loss with early stopping on validation Hit@10.

    With `propensity` given, each example's loss is divided by G_β(g(u, i), y) for the frozen model g, and β is
    trained alongside `model` unless `cfg.freeze_beta`.
    """
    model = model.copy()
    optimizer = ModelOptimizer(model, cfg.optimizer, cfg.l2)
    head_optimizer = _HeadOptimizer(cfg.optimizer)
    rng = np.random.default_rng(_streams(cfg.seed)[stream])
    candidates = _validation_candidates(split, cfg)
    state = TrainState()
    best_model, best_head, best_metric = model.copy(), head, -np.inf

    for epoch in range(cfg.max_epochs):
        total, count = 0.0, 0
        for batch in make_batches(split, cfg.batch_size, cfg.negs_per_pos, rng):
            scores = score_batch(model, batch.users, batch.items)
            losses = np.asarray(logistic_loss(batch.labels, scores))
            upstream = np.asarray(logistic_loss_grad(batch.labels, scores)) / len(batch)
            beta_step: Optional[FloatArray] = None
            if propensity is not None and head is not None:
                g_scores = score_batch(propensity, batch.users, batch.items)
                weights = np.asarray(g_beta(g_scores, batch.labels, head))
                upstream = upstream / weights
                losses = losses / weights
                if not cfg.freeze_beta:
                    beta_grads = g_beta_grads(g_scores, batch.labels, head, -losses / weights / len(batch))
                    beta_step = np.array([np.sum(b) for b in beta_grads[:3]])
            batch_loss = float(np.mean(losses))
            _check_finite(batch_loss, f"{role} training loss", {role: best_model, "head": best_head})
            if beta_step is not None and head is not None:
                head = head_optimizer.step(head, beta_step, lr)
            optimizer.step(score_grad(model, batch.users, batch.items, upstream), lr)
            total += batch_loss * len(batch)
            count += len(batch)

        hit, ndcg = _validation_metrics(model, candidates)
        state.epochs_run = epoch + 1
        state.objective_history.append(total / max(count, 1))
        state.val_history.append(hit)
        state.lr_history.append((lr, 0.0))
        if hit > best_metric:
            best_model, best_head, best_metric = model.copy(), head, hit
            state.best_epoch = epoch + 1
        record = {
            "epoch": epoch + 1,
            "role": role,
            "loss": state.objective_history[-1],
            "lr": lr,
            "val_hit@10": hit,
            "val_ndcg@10": ndcg,
        }
        if head is not None:
            record["head"] = head.to_json()
        if log is not None:
            log.write(record)
        logger.info("%s epoch %d: loss %.5f, val hit@10 %.4f", role, epoch + 1, record["loss"], hit)
        if early_stop_check(state.val_history, cfg.patience, 0.0, mode="metric"):
            state.stopped_early = True
            logger.debug("%s: validation hit@10 did not improve for %d epochs", role, cfg.patience)
            break
    return best_model, best_head, state


def erm_train(
    model: RecModel, split: SplitDataset, cfg: TrainConfig, log: Optional[TrainLog] = None
) -> tuple[RecModel, TrainState]:
    """Plain logistic-loss training; returns the best-validation model and the training history."""
    if model.kind is ModelKind.POP:
        return pop_fit(model, split), TrainState()
    trained, _, state = _fit_supervised(model, split, cfg, lr=cfg.r_theta, stream="batches", log=log, role="f")
    return trained, state


def ps_train(
    f_kind: ModelKind,
    g_kind: ModelKind,
    split: SplitDataset,
    cfg: TrainConfig,
    log: Optional[TrainLog] = None,
) -> tuple[RecModel, RecModel, PropensityHead, TrainState]:
    """Two-stage propensity weighting: fit g by ERM on the feedback, freeze it, then train f and β on the
    loss weighted by 1 / G_β(g, y).
    """
    if f_kind is ModelKind.POP:
        msg = "the recommender f of a propensity-weighted run cannot be a pop model"
        raise ConfigurationError(msg)
    g = build_model(g_kind, split, cfg, "g")
    if g_kind is ModelKind.POP:
        g = pop_fit(g, split)
    else:
        g, _, _ = _fit_supervised(g, split, cfg, lr=cfg.r_psi, stream="stage1", log=log, role="g")
    logger.info("propensity model fitted, training the recommender")
    head = PropensityHead(mu=cfg.mu)
    f = build_model(f_kind, split, cfg, "f")
    f, trained_head, state = _fit_supervised(
        f, split, cfg, lr=cfg.r_theta, stream="batches", log=log, role="f", propensity=g, head=head
    )
    assert trained_head is not None
    return f, g, trained_head, state


@dataclass
class AclLoss:
    objective: float
    weighted_f_loss: float
    reg_term: float
    # importance weights 1 / G_β of the batch
    weights: FloatArray
    degenerate: bool = False


@dataclass
class AclGradients:
    loss: AclLoss
    f: ModelGradients
    g: ModelGradients
    beta: FloatArray


def _acl_parts(
    f: RecModel,
    g: RecModel,
    head: PropensityHead,
    batch: Batch,
    alpha: float,
    reg_kind: RegularizerKind,
    context: Optional[RegularizerContext],
) -> tuple[FloatArray, FloatArray, FloatArray, RegularizerTerm, AclLoss]:
    if len(batch) == 0:
        msg = "the adversarial objective needs a non-empty batch"
        raise ConfigurationError(msg)
    f_scores = score_batch(f, batch.users, batch.items)
    g_scores = score_batch(g, batch.users, batch.items)
    propensity = np.asarray(g_beta(g_scores, batch.labels, head))
    losses = np.asarray(logistic_loss(batch.labels, f_scores))
    weighted = float(np.mean(losses / propensity))
    term = regularizer_loss(reg_kind, g, batch, context)
    loss = AclLoss(weighted - alpha * term.value, weighted, term.value, 1.0 / propensity, term.degenerate)
    return f_scores, g_scores, losses, term, loss


def acl_loss(
    f: RecModel,
    g: RecModel,
    head: PropensityHead,
    batch: Batch,
    alpha: float,
    reg_kind: RegularizerKind,
    context: Optional[RegularizerContext] = None,
) -> AclLoss:
    return _acl_parts(f, g, head, batch, alpha, reg_kind, context)[-1]


def acl_gradients(
    f: RecModel,
    g: RecModel,
    head: PropensityHead,
    batch: Batch,
    alpha: float,
    reg_kind: RegularizerKind,
    context: Optional[RegularizerContext] = None,
) -> AclGradients:
    """Exact gradients of the batch objective w.r.t. f's parameters, g's parameters and (β0, β1, β2)."""
    f_scores, g_scores, losses, term, loss = _acl_parts(f, g, head, batch, alpha, reg_kind, context)
    n = len(batch)
    propensity = 1.0 / loss.weights
    f_upstream = np.asarray(logistic_loss_grad(batch.labels, f_scores)) / propensity / n
    d_propensity = -losses / np.square(propensity) / n
    d_b0, d_b1, d_b2, d_g = g_beta_grads(g_scores, batch.labels, head, d_propensity)
    beta = np.array([np.sum(d_b0), np.sum(d_b1), np.sum(d_b2)])
    g_users = np.concatenate([batch.users, term.users])
    g_items = np.concatenate([batch.items, term.items])
    g_upstream = np.concatenate([np.asarray(d_g), -alpha * term.score_grad])
    return AclGradients(
        loss=loss,
        f=score_grad(f, batch.users, batch.items, f_upstream),
        g=score_grad(g, g_users, g_items, g_upstream),
        beta=beta,
    )


class AclStepper:
    """One round of the game on a batch: a descent step on f and β, then an ascent step on g.

    Holds the optimizer state of all three players; models are updated in place, the head is replaced.
    """

    def __init__(self, f: RecModel, g: RecModel, head: PropensityHead, cfg: TrainConfig) -> None:
        self.f = f
        self.g = g
        self.head = head
        self.cfg = cfg
        self._f_optimizer = ModelOptimizer(f, cfg.optimizer, cfg.l2)
        self._g_optimizer = ModelOptimizer(g, cfg.optimizer, cfg.l2)
        self._head_optimizer = _HeadOptimizer(cfg.optimizer)

    def gradients(self, batch: Batch, context: Optional[RegularizerContext] = None) -> AclGradients:
        return acl_gradients(self.f, self.g, self.head, batch, self.cfg.alpha, self.cfg.reg_kind, context)

    def descent_step(
        self, batch: Batch, lr: float, context: Optional[RegularizerContext] = None
    ) -> AclGradients:
        grads = self.gradients(batch, context)
        self.apply_descent(grads, lr)
        return grads

    def apply_descent(self, grads: AclGradients, lr: float) -> None:
        weights = grads.loss.weights
        if not (np.all(weights >= 1.0) and np.all(weights <= 1.0 / self.head.mu * (1 + 1e-12))):
            msg = f"propensity weights left [1, 1/mu] (range {weights.min()} to {weights.max()})"
            raise DivergenceError(msg, {"f": self.f.copy(), "g": self.g.copy(), "head": self.head})
        self._f_optimizer.step(grads.f, lr)
        if not self.cfg.freeze_beta:
            self.head = self._head_optimizer.step(self.head, grads.beta, lr)

    def ascent_step(self, batch: Batch, lr: float, context: Optional[RegularizerContext] = None) -> AclGradients:
        grads = self.gradients(batch, context)
        self._g_optimizer.step(grads.g, lr, ascent=True)
        return grads


def _regularizer_context(
    cfg: TrainConfig,
    split: SplitDataset,
    batch: Batch,
    exposure: Optional[ExposureData],
    rng: np.random.Generator,
) -> Optional[RegularizerContext]:
    if cfg.reg_kind is RegularizerKind.EXPOSURE_LOSS:
        if exposure is None:
            msg = "the exposure_loss regularizer requires observed exposure labels (train on simulated data)"
            raise ConfigurationError(msg)
        return RegularizerContext(exposure=exposure.subsample(len(batch), rng))
    if cfg.reg_kind is RegularizerKind.POPULARITY_CORRELATION:
        n = min(cfg.corr_users, split.n_users)
        users = np.sort(rng.choice(split.n_users, size=n, replace=False)).astype(np.int64)
        return RegularizerContext(feedback_rate=split.item_counts() / split.n_users, corr_users=users)
    return None


def acl_train(
    f: RecModel,
    g: RecModel,
    head: PropensityHead,
    split: SplitDataset,
    cfg: TrainConfig,
    log: Optional[TrainLog] = None,
    exposure: Optional[ExposureData] = None,
) -> tuple[RecModel, RecModel, PropensityHead, TrainState]:
    """Two-timescale gradient descent-ascent over epochs with per-epoch learning-rate discounts.

    Stops once the epoch objective has changed by at most `objective_tol` for `patience` consecutive epochs
    (or after `max_epochs`); the returned models are those of the last epoch.
    """
    if f.kind is ModelKind.POP or g.kind is ModelKind.POP:
        msg = "adversarial training needs trainable f and g (pop models have no parameters)"
        raise ConfigurationError(msg)
    stepper = AclStepper(f.copy(), g.copy(), head, cfg)
    streams = _streams(cfg.seed)
    rng = np.random.default_rng(streams["batches"])
    reg_rng = np.random.default_rng(streams["regularizer"])
    candidates = _validation_candidates(split, cfg)
    state = TrainState()
    last_good = {"f": stepper.f.copy(), "g": stepper.g.copy(), "head": stepper.head}

    for epoch in range(cfg.max_epochs):
        lr_theta = cfg.r_theta / cfg.d_theta**epoch
        lr_psi = cfg.r_psi / cfg.d_psi**epoch
        totals = np.zeros(3)
        count = 0
        degenerate = False
        for batch in make_batches(split, cfg.batch_size, cfg.negs_per_pos, rng):
            context = _regularizer_context(cfg, split, batch, exposure, reg_rng)
            grads = stepper.gradients(batch, context)
            _check_finite(grads.loss.objective, "adversarial objective", last_good)
            stepper.apply_descent(grads, lr_theta)
            stepper.ascent_step(batch, lr_psi, context)
            totals += len(batch) * np.array([grads.loss.objective, grads.loss.weighted_f_loss, grads.loss.reg_term])
            count += len(batch)
            degenerate = degenerate or grads.loss.degenerate

        objective, weighted_f_loss, reg_term = (totals / max(count, 1)).tolist()
        f_hit, f_ndcg = _validation_metrics(stepper.f, candidates)
        g_hit, g_ndcg = _validation_metrics(stepper.g, candidates)
        state.epochs_run = epoch + 1
        state.objective_history.append(objective)
        state.val_history.append(f_hit)
        state.g_val_history.append(g_hit)
        state.lr_history.append((lr_theta, lr_psi))
        state.best_epoch = epoch + 1
        last_good = {"f": stepper.f.copy(), "g": stepper.g.copy(), "head": stepper.head}
        if log is not None:
            log.write(
                {
                    "epoch": epoch + 1,
                    "objective": objective,
                    "weighted_f_loss": weighted_f_loss,
                    "reg_term": reg_term,
                    "reg_degenerate": degenerate,
                    "lr_theta": lr_theta,
                    "lr_psi": lr_psi,
                    "head": stepper.head.to_json(),
                    "f_val_hit@10": f_hit,
                    "f_val_ndcg@10": f_ndcg,
                    "g_val_hit@10": g_hit,
                    "g_val_ndcg@10": g_ndcg,
                }
            )
        logger.info(
            "epoch %d: objective %.5f, f val hit@10 %.4f, g val hit@10 %.4f", epoch + 1, objective, f_hit, g_hit
        )
        if early_stop_check(state.objective_history, cfg.patience, cfg.objective_tol, mode="objective"):
            state.stopped_early = True
            logger.debug("objective stationary for %d epochs", cfg.patience)
            break
    return stepper.f, stepper.g, stepper.head, state
