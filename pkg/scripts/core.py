"""
Vector math and prediction primitives shared by every module.

Embeddings are 1-D numpy arrays; every accumulation is carried out in float64
regardless of how the inputs are stored. All functions are pure.
"""
from dataclasses import dataclass
from itertools import accumulate
from typing import NamedTuple, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy import special

from scripts.error_handling import (
    DimensionError, DomainError, InvalidScoreError, LabelError, StateError
)
from scripts.logger import get_logger

logger = get_logger(__name__)

EmbeddingVector = npt.NDArray[np.float64]

SIMILARITY_MODES = ("cosine", "dot")


@dataclass(frozen=True)
class GlobalLabel:
    """A class identified both inside its task and in the accumulated label space."""
    task_index: int
    local_class: int
    global_id: int


class LabelSpace:
    """
    Bijection between (task_index, local_class) and global class ids.

    The global id of a class is the number of classes in all prior tasks plus
    its local index.
    """

    def __init__(self, class_counts: Sequence[int]):
        counts = [int(c) for c in class_counts]
        if any(c < 1 for c in counts):
            raise DomainError(f"class counts must be positive, got {counts}")
        self.class_counts: Tuple[int, ...] = tuple(counts)
        self.offsets: Tuple[int, ...] = tuple(accumulate([0] + counts[:-1])) if counts else ()
        self._labels = tuple(
            GlobalLabel(task, local, self.offsets[task] + local)
            for task, count in enumerate(counts)
            for local in range(count)
        )

    @property
    def n_tasks(self) -> int:
        return len(self.class_counts)

    @property
    def total_classes(self) -> int:
        return len(self._labels)

    def label(self, task_index: int, local_class: int) -> GlobalLabel:
        if not 0 <= task_index < self.n_tasks:
            raise StateError(f"unknown task {task_index}")
        if not 0 <= local_class < self.class_counts[task_index]:
            raise LabelError(
                f"local class {local_class} outside task {task_index} "
                f"({self.class_counts[task_index]} classes)"
            )
        return self._labels[self.offsets[task_index] + local_class]

    def from_global(self, global_id: int) -> GlobalLabel:
        if not 0 <= global_id < self.total_classes:
            raise LabelError(f"global id {global_id} outside [0, {self.total_classes})")
        return self._labels[global_id]

    def task_slice(self, task_index: int) -> slice:
        if not 0 <= task_index < self.n_tasks:
            raise StateError(f"unknown task {task_index}")
        start = self.offsets[task_index]
        return slice(start, start + self.class_counts[task_index])

    def task_labels(self, task_index: int) -> Tuple[GlobalLabel, ...]:
        return self._labels[self.task_slice(task_index)]

    def class_count_up_to(self, stage: int) -> int:
        """Number of classes accumulated after tasks 0..stage."""
        return sum(self.class_counts[:stage + 1])

    def labels_up_to(self, stage: int) -> Tuple[GlobalLabel, ...]:
        return self._labels[:self.class_count_up_to(stage)]


@dataclass(frozen=True)
class ScoreVector:
    """Scores over an ordered candidate class set."""
    scores: np.ndarray
    candidates: Tuple[GlobalLabel, ...]

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if len(scores) != len(self.candidates):
            raise DimensionError(
                f"{len(scores)} scores for {len(self.candidates)} candidates"
            )

    def __len__(self) -> int:
        return len(self.candidates)

    def score_of(self, label: GlobalLabel) -> float:
        for i, candidate in enumerate(self.candidates):
            if candidate.global_id == label.global_id:
                return float(self.scores[i])
        raise LabelError(f"class {label.global_id} is not a candidate")


class Normalized(NamedTuple):
    """Result of an L2 normalization; ``degenerate`` marks a zero input."""
    vector: EmbeddingVector
    degenerate: bool


def as_embedding(values) -> EmbeddingVector:
    """Convert to a finite 1-D float64 vector."""
    vector = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(vector)):
        raise DomainError("embedding contains NaN or Inf")
    return vector


def l2_normalize(v, what: str = "vector") -> Normalized:
    """
    Scale a vector to unit Euclidean norm.

    A zero vector is returned unchanged, flagged as degenerate and logged at
    WARNING under the name ``what``; the caller decides how to treat it.
    """
    vector = as_embedding(v)
    norm = np.linalg.norm(vector)
    if norm == 0.0:
        logger.warning("degenerate %s: zero vector (dim=%d)", what, vector.size)
        return Normalized(vector.copy(), True)
    return Normalized(vector / norm, False)


def _check_same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; 0 when either vector is zero."""
    a = as_embedding(a)
    b = as_embedding(b)
    _check_same_length(a, b)
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    value = float(np.dot(a, b) / (norm_a * norm_b))
    return min(1.0, max(-1.0, value))


def similarity_scores(s, prototypes: np.ndarray, mode: str = "cosine") -> np.ndarray:
    """
    Score one embedding against every row of a prototype matrix.

    ``cosine`` normalizes both sides; ``dot`` takes the raw product of the
    embedding with the (already unit-norm) prototypes.
    """
    s = as_embedding(s)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if prototypes.ndim != 2 or prototypes.shape[1] != s.size:
        raise DimensionError(
            f"prototype matrix of shape {prototypes.shape} for an embedding of length {s.size}"
        )
    if mode == "dot":
        return prototypes @ s
    if mode != "cosine":
        raise DomainError(f"unknown similarity mode '{mode}'")

    norm_s = np.linalg.norm(s)
    row_norms = np.linalg.norm(prototypes, axis=1)
    scores = np.zeros(prototypes.shape[0], dtype=np.float64)
    if norm_s == 0.0:
        return scores
    valid = row_norms > 0.0
    scores[valid] = (prototypes[valid] @ s) / (row_norms[valid] * norm_s)
    return np.clip(scores, -1.0, 1.0)


def softmax_array(logits, temperature: float = 1.0) -> np.ndarray:
    """Max-shifted softmax over a 1-D array."""
    values = np.asarray(logits, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise DomainError("softmax of an empty score vector")
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    return special.softmax(values / temperature)


def softmax(logits: ScoreVector, temperature: float = 1.0) -> ScoreVector:
    """Probabilities over the same candidates as ``logits``."""
    return ScoreVector(softmax_array(logits.scores, temperature), logits.candidates)


def argmax_tiebreak(scores: ScoreVector) -> GlobalLabel:
    """The candidate with the highest score; exact ties go to the smallest global id."""
    values = scores.scores
    if values.size == 0:
        raise DomainError("argmax of an empty score vector")
    if np.any(np.isnan(values)):
        raise InvalidScoreError("score vector contains NaN")
    best = values.max()
    winners = [scores.candidates[i] for i in np.flatnonzero(values == best)]
    return min(winners, key=lambda label: label.global_id)
