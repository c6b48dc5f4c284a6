"""
Trainable slide aggregation with a growable linear classification head.

Two aggregation kinds are supported: the unweighted mean of region embeddings
and gated attention, where region r gets the weight

    a_r = softmax_r( tanh(R_r . v) * sigmoid(R_r . u) )

and the slide embedding is sum_r a_r R_r. Logits are W s + b over every class
registered so far. Gradients are derived by hand; ``scripts.gradcheck`` checks
them against central differences.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from scripts.core import EmbeddingVector, GlobalLabel, ScoreVector, as_embedding
from scripts.datagen import SlideBag
from scripts.error_handling import (
    DimensionError, DivergenceError, DomainError, LabelError, StateError
)
from scripts.logger import get_logger

logger = get_logger(__name__)

AGGREGATOR_KINDS = ("mean", "gated_attention")

BagLike = Union[SlideBag, np.ndarray]


@dataclass(eq=False)
class AggregatorParams:
    """
    Parameters of the aggregator and its head.

    The flat layout (attention_v, attention_u, head_weights row-major,
    head_bias) is shared by checkpoints and the gradient checks.
    """
    kind: str
    attention_v: np.ndarray
    attention_u: np.ndarray
    head_weights: np.ndarray
    head_bias: np.ndarray

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise DomainError(f"unknown aggregator kind '{self.kind}'")
        self.attention_v = np.asarray(self.attention_v, dtype=np.float64).reshape(-1)
        self.attention_u = np.asarray(self.attention_u, dtype=np.float64).reshape(-1)
        dim = self.attention_v.size
        self.head_weights = np.asarray(self.head_weights, dtype=np.float64).reshape(-1, dim)
        self.head_bias = np.asarray(self.head_bias, dtype=np.float64).reshape(-1)
        if self.attention_u.size != dim:
            raise DimensionError(f"attention_u has length {self.attention_u.size}, expected {dim}")
        if self.head_bias.size != self.head_weights.shape[0]:
            raise DimensionError(
                f"{self.head_weights.shape[0]} head rows but {self.head_bias.size} bias entries"
            )

    @property
    def dim(self) -> int:
        return self.attention_v.size

    @property
    def class_count(self) -> int:
        return self.head_bias.size

    @property
    def size(self) -> int:
        return 2 * self.dim + self.class_count * (self.dim + 1)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.attention_v, self.attention_u,
                               self.head_weights.reshape(-1), self.head_bias])

    def with_flat(self, vector) -> "AggregatorParams":
        """Same shapes and kind, values taken from a flat vector."""
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vector.size != self.size:
            raise StateError(f"flat vector of length {vector.size}, expected {self.size}")
        d, c = self.dim, self.class_count
        return AggregatorParams(
            self.kind,
            vector[:d].copy(),
            vector[d:2 * d].copy(),
            vector[2 * d:2 * d + c * d].reshape(c, d).copy(),
            vector[2 * d + c * d:].copy(),
        )

    def copy(self) -> "AggregatorParams":
        return AggregatorParams(self.kind, self.attention_v.copy(), self.attention_u.copy(),
                                self.head_weights.copy(), self.head_bias.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))

    def __eq__(self, other):
        if not isinstance(other, AggregatorParams):
            return NotImplemented
        return (self.kind == other.kind
                and self.class_count == other.class_count
                and np.array_equal(self.flat(), other.flat()))


@dataclass(eq=False)
class Gradients:
    """Tangent values, congruent with the parameters they differentiate."""
    attention_v: np.ndarray
    attention_u: np.ndarray
    head_weights: np.ndarray
    head_bias: np.ndarray

    @classmethod
    def zeros_like(cls, params: AggregatorParams) -> "Gradients":
        return cls(np.zeros_like(params.attention_v), np.zeros_like(params.attention_u),
                   np.zeros_like(params.head_weights), np.zeros_like(params.head_bias))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.attention_v, self.attention_u,
                               self.head_weights.reshape(-1), self.head_bias])

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients(self.attention_v + other.attention_v,
                         self.attention_u + other.attention_u,
                         self.head_weights + other.head_weights,
                         self.head_bias + other.head_bias)

    def scaled(self, factor: float) -> "Gradients":
        return Gradients(factor * self.attention_v, factor * self.attention_u,
                         factor * self.head_weights, factor * self.head_bias)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))


@dataclass(frozen=True)
class FrozenAggregator:
    """Pretrained, parameter-free aggregation used by the prototype classifier."""
    kind: str = "mean_of_regions"

    def aggregate(self, bag: BagLike) -> EmbeddingVector:
        return region_matrix(bag).mean(axis=0)


@dataclass
class _ForwardCache:
    regions: np.ndarray
    weights: np.ndarray
    embedding: np.ndarray
    tanh: Optional[np.ndarray] = None
    gate: Optional[np.ndarray] = None


def region_matrix(bag: BagLike) -> np.ndarray:
    """Region embeddings of a bag (or a raw region array) as a float64 matrix."""
    if isinstance(bag, SlideBag):
        return bag.region_matrix()
    regions = np.asarray(bag, dtype=np.float64)
    if regions.ndim != 2 or regions.shape[0] == 0:
        raise DomainError("a bag needs at least one region")
    return regions


def init_params(dim: int, kind: str = "gated_attention", class_count: int = 0,
                rng: Optional[np.random.Generator] = None, scale: float = 0.1) -> AggregatorParams:
    """
    Fresh parameters with an empty (or zero) head.

    Attention vectors are drawn from N(0, scale^2 / dim) when ``rng`` is
    given and are zero otherwise; head rows are always zero.
    """
    if dim < 1:
        raise DomainError(f"dim must be positive, got {dim}")
    if rng is not None and kind == "gated_attention":
        std = scale / np.sqrt(dim)
        v = std * rng.standard_normal(dim)
        u = std * rng.standard_normal(dim)
    else:
        v = np.zeros(dim)
        u = np.zeros(dim)
    return AggregatorParams(kind, v, u, np.zeros((class_count, dim)), np.zeros(class_count))


def _forward(bag: BagLike, params: AggregatorParams) -> _ForwardCache:
    regions = region_matrix(bag)
    if regions.shape[1] != params.dim:
        raise DimensionError(f"regions of dim {regions.shape[1]} for an aggregator of dim {params.dim}")
    if params.kind == "mean":
        weights = np.full(regions.shape[0], 1.0 / regions.shape[0])
        return _ForwardCache(regions, weights, regions.mean(axis=0))

    tanh = np.tanh(regions @ params.attention_v)
    gate = special.expit(regions @ params.attention_u)
    weights = special.softmax(tanh * gate)
    return _ForwardCache(regions, weights, weights @ regions, tanh, gate)


def attention_weights(bag: BagLike, params: AggregatorParams) -> np.ndarray:
    """Per-region weights; nonnegative and summing to one."""
    return _forward(bag, params).weights


def aggregate(bag: BagLike, params: AggregatorParams) -> EmbeddingVector:
    """Slide embedding: the attention-weighted (or plain) mean of region embeddings."""
    return _forward(bag, params).embedding


def default_candidates(class_count: int) -> Tuple[GlobalLabel, ...]:
    return tuple(GlobalLabel(0, k, k) for k in range(class_count))


def logits_array(s, params: AggregatorParams) -> np.ndarray:
    if params.class_count == 0:
        raise StateError("classification head has no classes")
    s = as_embedding(s)
    if s.size != params.dim:
        raise DimensionError(f"embedding of length {s.size} for a head of dim {params.dim}")
    return params.head_weights @ s + params.head_bias


def forward_logits(s, params: AggregatorParams,
                   candidates: Optional[Sequence[GlobalLabel]] = None) -> ScoreVector:
    """
    Logits over every registered class.

    Head row k belongs to global class k; ``candidates`` only supplies the
    labels attached to the scores and must have one entry per row.
    """
    logits = logits_array(s, params)
    if candidates is None:
        candidates = default_candidates(params.class_count)
    return ScoreVector(logits, tuple(candidates))


def cross_entropy(logits: ScoreVector, y: GlobalLabel) -> float:
    """-log softmax(logits)[y], stabilized with log-sum-exp."""
    for index, candidate in enumerate(logits.candidates):
        if candidate.global_id == y.global_id:
            break
    else:
        raise LabelError(f"class {y.global_id} is not among the {len(logits)} candidates")
    return max(0.0, float(special.logsumexp(logits.scores) - logits.scores[index]))


def check_target(target: int, params: AggregatorParams) -> None:
    if not 0 <= target < params.class_count:
        raise LabelError(f"class {target} outside the head's {params.class_count} classes")


def backward_from_logit_grad(bag: BagLike, params: AggregatorParams, dlogits) -> Gradients:
    """Reverse pass through head and aggregation for a given dL/dlogits."""
    cache = _forward(bag, params)
    g = np.asarray(dlogits, dtype=np.float64).reshape(-1)
    if g.size != params.class_count:
        raise DimensionError(f"{g.size} logit gradients for {params.class_count} classes")

    grads = Gradients.zeros_like(params)
    grads.head_weights = np.outer(g, cache.embedding)
    grads.head_bias = g.copy()
    if params.kind == "mean":
        return grads

    ds = params.head_weights.T @ g
    h = cache.regions @ ds
    dz = cache.weights * (h - cache.weights @ h)
    grads.attention_v = cache.regions.T @ (dz * (1.0 - cache.tanh ** 2) * cache.gate)
    grads.attention_u = cache.regions.T @ (dz * cache.tanh * cache.gate * (1.0 - cache.gate))
    return grads


def loss_grad_logits(bag: BagLike, target: int,
                     params: AggregatorParams) -> Tuple[float, Gradients, np.ndarray]:
    """Cross-entropy of global class ``target``, its gradient and the logits it was computed from."""
    check_target(target, params)
    logits = logits_array(_forward(bag, params).embedding, params)
    loss = float(special.logsumexp(logits) - logits[target])
    dlogits = special.softmax(logits)
    dlogits[target] -= 1.0
    return loss, backward_from_logit_grad(bag, params, dlogits), logits


def loss_and_grad(bag: BagLike, target: int, params: AggregatorParams) -> Tuple[float, Gradients]:
    """Cross-entropy of global class ``target`` and its gradient."""
    loss, grads, _ = loss_grad_logits(bag, target, params)
    return loss, grads


def loss(bag: BagLike, target: int, params: AggregatorParams) -> float:
    check_target(target, params)
    logits = logits_array(aggregate(bag, params), params)
    return float(special.logsumexp(logits) - logits[target])


def backward(bag: BagLike, y: GlobalLabel, params: AggregatorParams) -> Gradients:
    """Exact gradient of cross_entropy(forward_logits(aggregate(bag))) at label y."""
    return loss_and_grad(bag, y.global_id, params)[1]


def sgd_step(params: AggregatorParams, grads: Gradients, learning_rate: float) -> AggregatorParams:
    """params - learning_rate * grads, as a new parameter object."""
    if not learning_rate > 0:
        raise DomainError(f"learning rate must be positive, got {learning_rate}")
    if grads.head_weights.shape != params.head_weights.shape \
            or grads.attention_v.shape != params.attention_v.shape:
        raise StateError(
            f"gradients of shape {grads.head_weights.shape} for parameters of shape "
            f"{params.head_weights.shape}"
        )
    if not grads.is_finite():
        raise DivergenceError("non-finite gradient")
    return AggregatorParams(
        params.kind,
        params.attention_v - learning_rate * grads.attention_v,
        params.attention_u - learning_rate * grads.attention_u,
        params.head_weights - learning_rate * grads.head_weights,
        params.head_bias - learning_rate * grads.head_bias,
    )


def grow_head(params: AggregatorParams, new_class_count: int) -> AggregatorParams:
    """Append zero-initialized head rows; existing rows are copied bit for bit."""
    if new_class_count < 0:
        raise DomainError(f"cannot grow the head by {new_class_count} classes")
    if new_class_count == 0:
        return params.copy()
    logger.debug("growing head from %d to %d classes",
                 params.class_count, params.class_count + new_class_count)
    return AggregatorParams(
        params.kind,
        params.attention_v.copy(),
        params.attention_u.copy(),
        np.vstack([params.head_weights, np.zeros((new_class_count, params.dim))]),
        np.concatenate([params.head_bias, np.zeros(new_class_count)]),
    )
