"""Scoring models over user/item embedding tables with hand-written backward passes.

Parameters live in a flat `params` dict. Embedding tables and biases indexed by user or item are *row*
parameters and receive sparse gradients; everything else (MLP layers, output weights) is dense.
"""

import dataclasses
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from counterfactual_recsys._logging import logger
from counterfactual_recsys.data import SplitDataset
from counterfactual_recsys.error import ConfigurationError, UnknownIdError
from counterfactual_recsys.numerics import DenseMatrix, FloatArray, IntArray

__all__ = [
    "ModelKind",
    "RecModel",
    "ModelGradients",
    "init_model",
    "pop_fit",
    "score",
    "score_batch",
    "score_grad",
    "default_layers",
]


class ModelKind(str, Enum):
    POP = "pop"
    MF = "mf"
    GMF = "gmf"
    MLP = "mlp"
    NCF = "ncf"

    @staticmethod
    def parse(name: str) -> "ModelKind":
        try:
            return ModelKind(name.lower())
        except ValueError:
            options = ", ".join(k.value for k in ModelKind)
            msg = f"unknown model kind {name!r} (expected one of: {options})"
            raise ConfigurationError(msg) from None


# which id space indexes each row parameter
_ROW_PARAMS = {
    "user_emb": "user",
    "item_emb": "item",
    "user_bias": "user",
    "item_bias": "item",
    "gmf_user_emb": "user",
    "gmf_item_emb": "item",
    "mlp_user_emb": "user",
    "mlp_item_emb": "item",
}


def default_layers(dim: int) -> tuple[int, ...]:
    """Hidden widths of the MLP tower: [2d -> d -> d/2] before the linear output."""
    return (dim, max(dim // 2, 1))


@dataclass
class RecModel:
    kind: ModelKind
    n_users: int
    n_items: int
    dim: int
    layers: tuple[int, ...] = ()
    params: dict[str, DenseMatrix] = field(default_factory=dict)

    @property
    def trainable(self) -> list[str]:
        if self.kind is ModelKind.POP:
            return []
        return list(self.params)

    def row_space(self, name: str) -> Optional[str]:
        """'user' or 'item' for row parameters, None for dense ones."""
        return _ROW_PARAMS.get(name)

    def copy(self) -> "RecModel":
        return dataclasses.replace(self, params={k: v.copy() for k, v in self.params.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def describe(self) -> dict[str, object]:
        return {
            "kind": self.kind.value,
            "n_users": self.n_users,
            "n_items": self.n_items,
            "dim": self.dim,
            "layers": list(self.layers),
            "n_parameters": self.n_parameters(),
        }


@dataclass
class ModelGradients:
    """Gradients of Σ_j upstream_j · score(u_j, i_j).

    `rows[name]` is a `(unique_rows, grads)` pair for row parameters, `dense[name]` a full-shape array.
    """

    rows: dict[str, tuple[IntArray, DenseMatrix]] = field(default_factory=dict)
    dense: dict[str, DenseMatrix] = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not self.rows and not self.dense

    def to_dense(self, model: RecModel) -> dict[str, DenseMatrix]:
        """Full-shape gradient for every trainable parameter (zeros where untouched)."""
        out = {name: np.zeros_like(model.params[name]) for name in model.trainable}
        for name, (rows, grads) in self.rows.items():
            out[name][rows] += grads
        for name, grad in self.dense.items():
            out[name] += grad
        return out

    def squared_norm(self) -> float:
        total = sum(float(np.sum(np.square(g))) for _, g in self.rows.values())
        return total + sum(float(np.sum(np.square(g))) for g in self.dense.values())


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> DenseMatrix:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _tower_params(
    params: dict[str, DenseMatrix], rng: np.random.Generator, input_width: int, layers: Sequence[int]
) -> int:
    width = input_width
    for k, hidden in enumerate(layers):
        params[f"W{k}"] = _glorot(rng, width, hidden)
        params[f"b{k}"] = np.zeros((1, hidden))
        width = hidden
    return width


def init_model(
    kind: ModelKind,
    n_users: int,
    n_items: int,
    dim: int,
    rng: np.random.Generator,
    layers: Optional[Sequence[int]] = None,
    init_scale: float = 0.01,
) -> RecModel:
    """Embeddings ~ N(0, init_scale²), Glorot-uniform head weights, zero biases.

    Parameters are drawn in a fixed order so one seed always gives bit-identical models.
    """
    if dim < 1:
        msg = f"hidden dimension must be >= 1, got {dim}"
        raise ConfigurationError(msg)
    if n_users < 1 or n_items < 1:
        msg = f"models need at least one user and one item, got {n_users} users and {n_items} items"
        raise ConfigurationError(msg)
    tower = tuple(layers) if layers else default_layers(dim)
    if any(h < 1 for h in tower):
        msg = f"invalid layer widths: {tower}"
        raise ConfigurationError(msg)

    def embedding(n: int) -> DenseMatrix:
        return rng.normal(0.0, init_scale, size=(n, dim))

    params: dict[str, DenseMatrix] = {}
    if kind is ModelKind.POP:
        params["pop_scores"] = np.zeros((n_items, 1))
        tower = ()
    elif kind is ModelKind.MF:
        params["user_emb"] = embedding(n_users)
        params["item_emb"] = embedding(n_items)
        params["user_bias"] = np.zeros((n_users, 1))
        params["item_bias"] = np.zeros((n_items, 1))
        tower = ()
    elif kind is ModelKind.GMF:
        params["user_emb"] = embedding(n_users)
        params["item_emb"] = embedding(n_items)
        params["out_w"] = _glorot(rng, dim, 1)
        tower = ()
    elif kind is ModelKind.MLP:
        params["user_emb"] = embedding(n_users)
        params["item_emb"] = embedding(n_items)
        last = _tower_params(params, rng, 2 * dim, tower)
        params["out_w"] = _glorot(rng, last, 1)
        params["out_b"] = np.zeros((1, 1))
    elif kind is ModelKind.NCF:
        params["gmf_user_emb"] = embedding(n_users)
        params["gmf_item_emb"] = embedding(n_items)
        params["mlp_user_emb"] = embedding(n_users)
        params["mlp_item_emb"] = embedding(n_items)
        last = _tower_params(params, rng, 2 * dim, tower)
        params["out_w"] = _glorot(rng, dim + last, 1)
    else:
        msg = f"unsupported model kind: {kind}"
        raise ConfigurationError(msg)
    model = RecModel(kind, n_users, n_items, dim, tower, params)
    logger.debug("initialised %s model with %d parameters", kind.value, model.n_parameters())
    return model


def pop_fit(model: RecModel, split: SplitDataset) -> RecModel:
    """Popularity scores = number of train interactions per item."""
    if model.kind is not ModelKind.POP:
        msg = f"pop_fit requires a pop model, got {model.kind.value}"
        raise ConfigurationError(msg)
    if split.n_items != model.n_items:
        msg = f"model has {model.n_items} items but the split has {split.n_items}"
        raise ConfigurationError(msg)
    fitted = model.copy()
    fitted.params["pop_scores"] = split.item_counts()[:, None]
    return fitted


def _check_ids(model: RecModel, users: IntArray, items: IntArray) -> None:
    if users.shape != items.shape:
        msg = f"users and items must have the same shape, got {users.shape} and {items.shape}"
        raise ConfigurationError(msg)
    if users.size == 0:
        return
    if users.min() < 0 or users.max() >= model.n_users:
        msg = f"user id out of range [0, {model.n_users})"
        raise UnknownIdError(msg)
    if items.min() < 0 or items.max() >= model.n_items:
        msg = f"item id out of range [0, {model.n_items})"
        raise UnknownIdError(msg)


@dataclass
class _Tower:
    inputs: list[DenseMatrix]
    pre_activations: list[DenseMatrix]
    output: DenseMatrix


def _tower_forward(model: RecModel, x: DenseMatrix) -> _Tower:
    inputs, pre_activations = [], []
    for k in range(len(model.layers)):
        inputs.append(x)
        z = x @ model.params[f"W{k}"] + model.params[f"b{k}"]
        pre_activations.append(z)
        x = np.maximum(z, 0.0)
    return _Tower(inputs, pre_activations, x)


def _tower_backward(
    model: RecModel, tower: _Tower, upstream: DenseMatrix, dense: dict[str, DenseMatrix]
) -> DenseMatrix:
    grad = upstream
    for k in reversed(range(len(model.layers))):
        grad = grad * (tower.pre_activations[k] > 0.0)
        dense[f"W{k}"] = tower.inputs[k].T @ grad
        dense[f"b{k}"] = grad.sum(axis=0, keepdims=True)
        grad = grad @ model.params[f"W{k}"].T
    return grad


def score_batch(model: RecModel, users: IntArray, items: IntArray) -> FloatArray:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    _check_ids(model, users, items)
    p = model.params
    if model.kind is ModelKind.POP:
        return p["pop_scores"][items, 0].copy()
    if model.kind is ModelKind.MF:
        dot = np.sum(p["user_emb"][users] * p["item_emb"][items], axis=1)
        return dot + p["user_bias"][users, 0] + p["item_bias"][items, 0]
    if model.kind is ModelKind.GMF:
        return ((p["user_emb"][users] * p["item_emb"][items]) @ p["out_w"])[:, 0]
    if model.kind is ModelKind.MLP:
        x = np.concatenate([p["user_emb"][users], p["item_emb"][items]], axis=1)
        tower = _tower_forward(model, x)
        return (tower.output @ p["out_w"] + p["out_b"])[:, 0]
    # NCF
    gmf = p["gmf_user_emb"][users] * p["gmf_item_emb"][items]
    tower = _tower_forward(model, np.concatenate([p["mlp_user_emb"][users], p["mlp_item_emb"][items]], axis=1))
    return (np.concatenate([gmf, tower.output], axis=1) @ p["out_w"])[:, 0]


def score(model: RecModel, user: int, item: int) -> float:
    return float(score_batch(model, np.array([user]), np.array([item]))[0])


def _sum_rows(index: IntArray, grads: DenseMatrix) -> tuple[IntArray, DenseMatrix]:
    rows, inverse = np.unique(index, return_inverse=True)
    summed = np.zeros((rows.size, grads.shape[1]))
    np.add.at(summed, inverse.reshape(-1), grads)
    return rows.astype(np.int64), summed


def score_grad(model: RecModel, users: IntArray, items: IntArray, upstream: FloatArray) -> ModelGradients:
    """Exact gradient of Σ_j upstream_j · score(model, users_j, items_j) w.r.t. every trainable parameter."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    up = np.asarray(upstream, dtype=np.float64).reshape(-1)
    _check_ids(model, users, items)
    if up.size != users.size:
        msg = f"upstream has {up.size} entries for {users.size} pairs"
        raise ConfigurationError(msg)
    out = ModelGradients()
    if model.kind is ModelKind.POP or users.size == 0:
        return out
    p = model.params
    col = up[:, None]
    if model.kind is ModelKind.MF:
        pu, qi = p["user_emb"][users], p["item_emb"][items]
        out.rows["user_emb"] = _sum_rows(users, col * qi)
        out.rows["item_emb"] = _sum_rows(items, col * pu)
        out.rows["user_bias"] = _sum_rows(users, col)
        out.rows["item_bias"] = _sum_rows(items, col)
    elif model.kind is ModelKind.GMF:
        pu, qi = p["user_emb"][users], p["item_emb"][items]
        out.dense["out_w"] = (pu * qi).T @ col
        weighted = col * p["out_w"][:, 0]
        out.rows["user_emb"] = _sum_rows(users, weighted * qi)
        out.rows["item_emb"] = _sum_rows(items, weighted * pu)
    elif model.kind is ModelKind.MLP:
        x = np.concatenate([p["user_emb"][users], p["item_emb"][items]], axis=1)
        tower = _tower_forward(model, x)
        out.dense["out_w"] = tower.output.T @ col
        out.dense["out_b"] = col.sum(axis=0, keepdims=True)
        dx = _tower_backward(model, tower, col @ p["out_w"].T, out.dense)
        out.rows["user_emb"] = _sum_rows(users, dx[:, : model.dim])
        out.rows["item_emb"] = _sum_rows(items, dx[:, model.dim :])
    else:
        pu, qi = p["gmf_user_emb"][users], p["gmf_item_emb"][items]
        x = np.concatenate([p["mlp_user_emb"][users], p["mlp_item_emb"][items]], axis=1)
        tower = _tower_forward(model, x)
        fused = np.concatenate([pu * qi, tower.output], axis=1)
        out.dense["out_w"] = fused.T @ col
        d_fused = col @ p["out_w"].T
        d_gmf = d_fused[:, : model.dim]
        out.rows["gmf_user_emb"] = _sum_rows(users, d_gmf * qi)
        out.rows["gmf_item_emb"] = _sum_rows(items, d_gmf * pu)
        dx = _tower_backward(model, tower, d_fused[:, model.dim :], out.dense)
        out.rows["mlp_user_emb"] = _sum_rows(users, dx[:, : model.dim])
        out.rows["mlp_item_emb"] = _sum_rows(items, dx[:, model.dim :])
    return out
