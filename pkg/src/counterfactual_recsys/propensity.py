"""The outcome-aware exposure head G_β and the regularizers that tie the adversary to observable exposure signals."""

from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional, Union

import numpy as np

from counterfactual_recsys._logging import logger
from counterfactual_recsys.data import Batch
from counterfactual_recsys.error import ConfigurationError
from counterfactual_recsys.models import RecModel, score_batch
from counterfactual_recsys.numerics import FloatArray, IntArray, logistic_loss, logistic_loss_grad, sigmoid

__all__ = [
    "MAX_PROPENSITY",
    "PropensityHead",
    "RegularizerKind",
    "RegularizerTerm",
    "ExposureData",
    "RegularizerContext",
    "g_beta",
    "g_beta_grads",
    "pearson_correlation",
    "regularizer_loss",
]

MAX_PROPENSITY = 1.0 - 1e-6

Real = Union[float, FloatArray]


@dataclass
class PropensityHead:
    """G_β(g, y) = σ(β0 + β1·g + β2·y), clamped to [mu, MAX_PROPENSITY]."""

    beta0: float = 0.0
    beta1: float = 0.0
    beta2: float = 0.0
    mu: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 < self.mu < 0.5:
            msg = f"propensity floor mu must lie in (0, 0.5), got {self.mu}"
            raise ConfigurationError(msg)

    @property
    def betas(self) -> FloatArray:
        return np.array([self.beta0, self.beta1, self.beta2])

    def with_betas(self, betas: FloatArray) -> "PropensityHead":
        b0, b1, b2 = (float(b) for b in betas)
        return PropensityHead(b0, b1, b2, self.mu)

    def to_json(self) -> dict[str, Any]:
        return {"beta0": self.beta0, "beta1": self.beta1, "beta2": self.beta2, "mu": self.mu}

    @staticmethod
    def from_json(json_data: dict[Any, Any]) -> Optional["PropensityHead"]:
        try:
            return PropensityHead(
                beta0=json_data["beta0"],
                beta1=json_data["beta1"],
                beta2=json_data["beta2"],
                mu=json_data["mu"],
            )
        except KeyError:
            logger.debug("failed to parse PropensityHead from %s", json_data)
            return None


def _raw(g_score: Real, y: Real, head: PropensityHead) -> FloatArray:
    logits = head.beta0 + head.beta1 * np.asarray(g_score, dtype=np.float64) + head.beta2 * np.asarray(y)
    return np.asarray(sigmoid(logits))


def g_beta(g_score: Real, y: Real, head: PropensityHead) -> Real:
    out = np.clip(_raw(g_score, y, head), head.mu, MAX_PROPENSITY)
    return float(out) if out.ndim == 0 else out


def g_beta_grads(
    g_score: Real, y: Real, head: PropensityHead, upstream: Real = 1.0
) -> tuple[Real, Real, Real, Real]:
    """(d/dβ0, d/dβ1, d/dβ2, d/dg_score) of upstream·G_β, elementwise; zero wherever the clamp is active."""
    g_arr = np.asarray(g_score, dtype=np.float64)
    y_arr = np.asarray(y, dtype=np.float64)
    raw = _raw(g_arr, y_arr, head)
    inside = (raw >= head.mu) & (raw <= MAX_PROPENSITY)
    slope = np.where(inside, raw * (1.0 - raw), 0.0) * np.asarray(upstream, dtype=np.float64)
    grads = (slope, slope * g_arr, slope * y_arr, slope * head.beta1)
    if slope.ndim == 0:
        return (float(grads[0]), float(grads[1]), float(grads[2]), float(grads[3]))
    return grads


class RegularizerKind(str, Enum):
    EXPOSURE_LOSS = "exposure_loss"
    POPULARITY_CORRELATION = "popularity_correlation"
    FEEDBACK_LOSS = "feedback_loss"

    @staticmethod
    def parse(name: str) -> "RegularizerKind":
        try:
            return RegularizerKind(name.lower())
        except ValueError:
            options = ", ".join(k.value for k in RegularizerKind)
            msg = f"unknown regularizer {name!r} (expected one of: {options})"
            raise ConfigurationError(msg) from None


@dataclass
class RegularizerTerm:
    """A regularizer value together with its derivative w.r.t. each g score it was computed from."""

    value: float
    users: IntArray
    items: IntArray
    score_grad: FloatArray
    degenerate: bool = False


@dataclass
class ExposureData:
    """Observed exposure labels: +1 for pairs the user was shown, -1 for pairs they were not."""

    users: IntArray
    items: IntArray
    labels: FloatArray

    def __len__(self) -> int:
        return len(self.users)

    def subsample(self, size: int, rng: np.random.Generator) -> "ExposureData":
        if size >= len(self):
            return self
        picked = np.sort(rng.choice(len(self), size=size, replace=False))
        return ExposureData(self.users[picked], self.items[picked], self.labels[picked])


@dataclass
class RegularizerContext:
    exposure: Optional[ExposureData] = None
    # per-item positive-feedback rate over the training data
    feedback_rate: Optional[FloatArray] = None
    # users whose mean propensity per item is correlated with `feedback_rate`
    corr_users: Optional[IntArray] = None


def pearson_correlation(a: FloatArray, b: FloatArray) -> tuple[float, FloatArray, bool]:
    """Pearson correlation of two vectors, its gradient w.r.t. `a`, and whether either vector had zero variance.

    A zero-variance input gives correlation 0 with a zero gradient.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size or a.size < 2:
        msg = f"correlation needs two vectors of equal length >= 2, got {a.size} and {b.size}"
        raise ConfigurationError(msg)
    ac = a - a.mean()
    bc = b - b.mean()
    norm_a = float(np.linalg.norm(ac))
    norm_b = float(np.linalg.norm(bc))
    eps = 1e-12 * np.sqrt(a.size)
    if norm_a <= eps * max(float(np.max(np.abs(a))), 1.0) or norm_b <= eps * max(float(np.max(np.abs(b))), 1.0):
        return 0.0, np.zeros_like(a), True
    r = float(ac @ bc) / (norm_a * norm_b)
    grad = bc / (norm_a * norm_b) - r * ac / norm_a**2
    return r, grad, False


def _feedback_loss(g: RecModel, batch: Batch) -> RegularizerTerm:
    scores = score_batch(g, batch.users, batch.items)
    n = len(batch)
    value = float(np.mean(logistic_loss(batch.labels, scores)))
    grad = np.asarray(logistic_loss_grad(batch.labels, scores)) / n
    return RegularizerTerm(value, batch.users, batch.items, grad)


def _exposure_loss(g: RecModel, exposure: ExposureData) -> RegularizerTerm:
    if len(exposure) == 0:
        msg = "exposure loss needs at least one exposure observation"
        raise ConfigurationError(msg)
    scores = score_batch(g, exposure.users, exposure.items)
    value = float(np.mean(logistic_loss(exposure.labels, scores)))
    grad = np.asarray(logistic_loss_grad(exposure.labels, scores)) / len(exposure)
    return RegularizerTerm(value, exposure.users, exposure.items, grad)


def _popularity_correlation(g: RecModel, feedback_rate: FloatArray, corr_users: IntArray) -> RegularizerTerm:
    if g.n_items < 2:
        msg = "popularity correlation needs at least two items"
        raise ConfigurationError(msg)
    if feedback_rate.shape != (g.n_items,):
        msg = f"feedback rate must have one entry per item ({g.n_items}), got shape {feedback_rate.shape}"
        raise ConfigurationError(msg)
    if corr_users.size == 0:
        msg = "popularity correlation needs at least one user"
        raise ConfigurationError(msg)
    m = corr_users.size
    users = np.repeat(corr_users.astype(np.int64), g.n_items)
    items = np.tile(np.arange(g.n_items, dtype=np.int64), m)
    probs = np.asarray(sigmoid(score_batch(g, users, items))).reshape(m, g.n_items)
    mean_propensity = probs.mean(axis=0)
    r, d_mean, degenerate = pearson_correlation(mean_propensity, feedback_rate)
    if degenerate:
        logger.warning("popularity correlation is degenerate (zero variance), using 0")
    # value is -r, each mean is an average over m users
    grad = (-(probs * (1.0 - probs)) * d_mean[None, :] / m).reshape(-1)
    return RegularizerTerm(-r, users, items, grad, degenerate)


def regularizer_loss(
    kind: RegularizerKind, g: RecModel, batch: Batch, context: Optional[RegularizerContext] = None
) -> RegularizerTerm:
    """The term g trades off against the weighted loss; lower means g agrees better with observable exposure.

    - feedback_loss: mean logistic loss of g on the batch's feedback labels
    - exposure_loss: mean logistic loss of g against observed exposure labels (`context.exposure`)
    - popularity_correlation: minus the Pearson correlation across items between the mean σ(g) over
      `context.corr_users` and `context.feedback_rate`
    """
    if kind is RegularizerKind.FEEDBACK_LOSS:
        return _feedback_loss(g, batch)
    if kind is RegularizerKind.EXPOSURE_LOSS:
        if context is None or context.exposure is None:
            msg = "the exposure_loss regularizer requires observed exposure labels (use simulated data)"
            raise ConfigurationError(msg)
        return _exposure_loss(g, context.exposure)
    if kind is RegularizerKind.POPULARITY_CORRELATION:
        if context is None or context.feedback_rate is None or context.corr_users is None:
            msg = "the popularity_correlation regularizer requires item feedback rates and sampled users"
            raise ConfigurationError(msg)
        return _popularity_correlation(g, context.feedback_rate, context.corr_users)
    msg = f"unsupported regularizer: {kind}"
    raise ConfigurationError(msg)
