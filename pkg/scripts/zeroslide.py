"""
Training-free lifelong classification with a growing prototype bank.

Each arriving task contributes one unit prototype per class. A slide is
embedded with the frozen aggregator and classified by its most similar
prototype, either over the whole bank (CLASS-IL) or over its own task's
prototypes (TASK-IL). Nothing is ever trained.
"""
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from scripts.aggregator import FrozenAggregator
from scripts.core import GlobalLabel, ScoreVector, argmax_tiebreak, similarity_scores
from scripts.datagen import SlideBag, TaskDataset, TaskPrototypeSpec, average_variants
from scripts.error_handling import ConsistencyError, DomainError, StateError
from scripts.evaluation import AccuracyMatrix, ConfidenceRecord, evaluate_row
from scripts.logger import get_logger

logger = get_logger(__name__)

UNIT_NORM_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class TaskPrototypes:
    """Unit prototypes of one task, one row per local class."""
    task_index: int
    prototypes: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.prototypes, dtype=np.float64, ndmin=2)
        if matrix.shape[0] == 0:
            raise DomainError(f"task {self.task_index} has no prototypes")
        norms = np.linalg.norm(matrix, axis=1)
        bad = (np.abs(norms - 1.0) > UNIT_NORM_TOLERANCE) & (norms != 0.0)
        if np.any(bad):
            raise DomainError(f"task {self.task_index}: prototypes must be unit norm, got norms {norms[bad]}")
        matrix.setflags(write=False)
        object.__setattr__(self, "prototypes", matrix)

    @classmethod
    def from_spec(cls, spec: TaskPrototypeSpec) -> "TaskPrototypes":
        return cls(spec.task_index, np.stack([p.vector for p in average_variants(spec)]))

    @property
    def class_count(self) -> int:
        return self.prototypes.shape[0]


@dataclass(frozen=True)
class PrototypeBank:
    """Append-only sequence of task prototypes; global ids follow bank order."""
    entries: Tuple[TaskPrototypes, ...] = ()

    @property
    def size(self) -> int:
        return sum(entry.class_count for entry in self.entries)

    @property
    def task_indices(self) -> Tuple[int, ...]:
        return tuple(entry.task_index for entry in self.entries)

    @cached_property
    def matrix(self) -> np.ndarray:
        if not self.entries:
            raise StateError("the prototype bank is empty")
        matrix = np.vstack([entry.prototypes for entry in self.entries])
        matrix.setflags(write=False)
        return matrix

    @cached_property
    def labels(self) -> Tuple[GlobalLabel, ...]:
        labels = []
        for entry in self.entries:
            offset = len(labels)
            labels.extend(GlobalLabel(entry.task_index, j, offset + j) for j in range(entry.class_count))
        return tuple(labels)

    @cached_property
    def _slices(self) -> Dict[int, slice]:
        slices, start = {}, 0
        for entry in self.entries:
            slices[entry.task_index] = slice(start, start + entry.class_count)
            start += entry.class_count
        return slices

    def task_slice(self, task_index: int) -> slice:
        if task_index not in self._slices:
            raise StateError(f"task {task_index} is not in the prototype bank")
        return self._slices[task_index]


def extend_bank(bank: PrototypeBank, task_prototypes: TaskPrototypes) -> PrototypeBank:
    """A new bank with one more task; the old bank is left untouched."""
    if task_prototypes.task_index in bank.task_indices:
        raise StateError(f"task {task_prototypes.task_index} is already in the bank")
    if bank.entries and task_prototypes.task_index < bank.task_indices[-1]:
        raise StateError(
            f"task {task_prototypes.task_index} arrives after task {bank.task_indices[-1]}"
        )
    logger.debug("bank grows by %d prototypes for task %d",
                 task_prototypes.class_count, task_prototypes.task_index)
    return PrototypeBank(bank.entries + (task_prototypes,))


def predict_class_il(s, bank: PrototypeBank, mode: str = "cosine") -> Tuple[GlobalLabel, ScoreVector]:
    """Most similar prototype over every accumulated class."""
    if not bank.entries:
        raise StateError("cannot predict with an empty prototype bank")
    scores = ScoreVector(similarity_scores(s, bank.matrix, mode), bank.labels)
    return argmax_tiebreak(scores), scores


def predict_task_il(s, bank: PrototypeBank, task_index: int,
                    mode: str = "cosine") -> Tuple[GlobalLabel, ScoreVector]:
    """Most similar prototype among one task's classes."""
    part = bank.task_slice(task_index)
    scores = ScoreVector(similarity_scores(s, bank.matrix[part], mode), bank.labels[part])
    return argmax_tiebreak(scores), scores


class BankScorer:
    """Scores slides against a prototype bank through the frozen aggregator."""

    def __init__(self, bank: PrototypeBank, frozen: FrozenAggregator, mode: str = "cosine",
                 embedding_cache: Optional[Dict[str, np.ndarray]] = None):
        self.bank = bank
        self.frozen = frozen
        self.mode = mode
        self.score_kind = "cosine" if mode == "cosine" else "dot"
        self._embeddings = embedding_cache if embedding_cache is not None else {}

    def embed(self, bag: SlideBag) -> np.ndarray:
        embedding = self._embeddings.get(bag.slide_id)
        if embedding is None:
            embedding = self.frozen.aggregate(bag)
            if not np.any(embedding):
                logger.warning("slide %s aggregates to the zero vector", bag.slide_id)
            self._embeddings[bag.slide_id] = embedding
        return embedding

    def class_il_scores(self, bag: SlideBag) -> ScoreVector:
        return predict_class_il(self.embed(bag), self.bank, self.mode)[1]

    def task_il_scores(self, bag: SlideBag, task_index: int) -> ScoreVector:
        return predict_task_il(self.embed(bag), self.bank, task_index, self.mode)[1]

    def confidence(self, class_il: ScoreVector, label: GlobalLabel) -> float:
        return class_il.score_of(label)


@dataclass
class ZeroSlideResult:
    ci: AccuracyMatrix
    ti: AccuracyMatrix
    records: List[ConfidenceRecord] = field(default_factory=list)
    bank: PrototypeBank = field(default_factory=PrototypeBank)


def run_zeroslide(sequence: Sequence[TaskDataset], prototype_specs: Sequence[TaskPrototypeSpec],
                  frozen: FrozenAggregator = FrozenAggregator(), mode: str = "cosine") -> ZeroSlideResult:
    """
    Grow the bank task by task and evaluate every seen task after each arrival.

    Performs no parameter updates.
    """
    if len(prototype_specs) < len(sequence):
        raise ConsistencyError(
            f"prototypes cover {len(prototype_specs)} tasks, the sequence has {len(sequence)}"
        )
    n = len(sequence)
    result = ZeroSlideResult(AccuracyMatrix(n), AccuracyMatrix(n))
    embeddings: Dict[str, np.ndarray] = {}
    for stage, (task, spec) in enumerate(zip(sequence, prototype_specs)):
        if spec.class_count != task.class_count:
            raise ConsistencyError(
                f"task {task.task_index}: {spec.class_count} prototype classes for "
                f"{task.class_count} data classes"
            )
        result.bank = extend_bank(result.bank, TaskPrototypes.from_spec(spec))
        logger.info("task %d arrives: %d prototypes in the bank", task.task_index, result.bank.size)

        scorer = BankScorer(result.bank, frozen, mode, embeddings)
        ci_row, ti_row, records = evaluate_row(scorer, sequence, stage)
        result.ci.set_row(stage, ci_row)
        result.ti.set_row(stage, ti_row)
        result.records.extend(records)
    return result
