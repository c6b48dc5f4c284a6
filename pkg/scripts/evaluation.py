"""
Accuracy matrices, continual-learning metrics and the confidence study.

a[k][i] is the test accuracy on task i after finishing task k (i <= k). The
CLASS-IL matrix scores over every class accumulated so far, the TASK-IL
matrix only over the classes of the task a slide belongs to.
"""
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from scripts.core import GlobalLabel, ScoreVector, argmax_tiebreak
from scripts.datagen import SlideBag, TaskDataset
from scripts.error_handling import DataError, DomainError, StateError
from scripts.logger import get_logger

logger = get_logger(__name__)

SCORE_KINDS = ("cosine", "dot", "softmax_prob")
QUANTILE_METHOD = "linear"


class AccuracyMatrix:
    """Lower-triangular accuracy table filled one row per finished task."""

    def __init__(self, n_tasks: int):
        if n_tasks < 1:
            raise DomainError(f"an accuracy matrix needs at least one task, got {n_tasks}")
        self.n_tasks = n_tasks
        self._rows: List[Optional[np.ndarray]] = [None] * n_tasks

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        matrix = cls(len(rows))
        for k, row in enumerate(rows):
            matrix.set_row(k, row)
        return matrix

    def set_row(self, stage: int, values) -> None:
        if not 0 <= stage < self.n_tasks:
            raise StateError(f"stage {stage} outside a {self.n_tasks}-task matrix")
        row = np.asarray(values, dtype=np.float64).reshape(-1)
        if row.size != stage + 1:
            raise StateError(f"row {stage} needs {stage + 1} entries, got {row.size}")
        if np.any(~np.isfinite(row)) or np.any(row < 0.0) or np.any(row > 1.0):
            raise DomainError(f"row {stage} has entries outside [0, 1]: {row.tolist()}")
        self._rows[stage] = row

    def row(self, stage: int) -> np.ndarray:
        row = self._rows[stage]
        if row is None:
            raise StateError(f"row {stage} has not been evaluated")
        return row

    def entry(self, stage: int, task: int) -> float:
        if task > stage:
            raise StateError(f"a[{stage}][{task}] is undefined (task after stage)")
        return float(self.row(stage)[task])

    @property
    def is_complete(self) -> bool:
        return all(row is not None for row in self._rows)

    def rows(self) -> List[np.ndarray]:
        return [self.row(k) for k in range(self.n_tasks)]

    def diagonal(self) -> np.ndarray:
        return np.array([self.entry(i, i) for i in range(self.n_tasks)])

    def final_row(self) -> np.ndarray:
        return self.row(self.n_tasks - 1)

    def column(self, task: int) -> np.ndarray:
        """Accuracy on one task across stages task..n-1."""
        return np.array([self.entry(k, task) for k in range(task, self.n_tasks)])

    def entries(self) -> List[Tuple[int, int, float]]:
        """(stage, task, value) for every defined entry, row-major."""
        return [(k, i, float(v)) for k in range(self.n_tasks) for i, v in enumerate(self.row(k))]

    def __eq__(self, other):
        if not isinstance(other, AccuracyMatrix):
            return NotImplemented
        return (self.n_tasks == other.n_tasks
                and all((a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))
                        for a, b in zip(self._rows, other._rows)))

    def __repr__(self):
        return f"AccuracyMatrix({[None if r is None else r.tolist() for r in self._rows]})"


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    masked_acc: float
    macc: float
    bwt: Optional[float]
    forgetting: Optional[float]
    final_accuracies: Tuple[float, ...]
    masked_final_accuracies: Tuple[float, ...]
    no_positive_transfer: bool

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {
            "acc": self.acc,
            "masked_acc": self.masked_acc,
            "macc": self.macc,
            "bwt": self.bwt,
            "forgetting": self.forgetting,
        }


@dataclass(frozen=True)
class ConfidenceRecord:
    """Score a model gave to the true class of one test slide at one stage."""
    eval_task: int
    train_stage: int
    slide_id: str
    true_label: GlobalLabel
    score: float
    score_kind: str

    def __post_init__(self):
        if self.score_kind not in SCORE_KINDS:
            raise DomainError(f"unknown score kind '{self.score_kind}'")
        if self.score_kind == "softmax_prob" and not 0.0 <= self.score <= 1.0:
            raise DomainError(f"probability {self.score} outside [0, 1]")
        if self.score_kind == "cosine" and not -1.0 <= self.score <= 1.0:
            raise DomainError(f"cosine {self.score} outside [-1, 1]")


@dataclass(frozen=True)
class ConfidenceSummary:
    eval_task: int
    score_kind: str
    count: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    mean: float


class SlideScorer(Protocol):
    """What evaluate_row needs from a trained model or a prototype bank."""

    score_kind: str

    def class_il_scores(self, bag: SlideBag) -> ScoreVector:
        ...

    def task_il_scores(self, bag: SlideBag, task_index: int) -> ScoreVector:
        ...

    def confidence(self, class_il: ScoreVector, label: GlobalLabel) -> float:
        ...


def evaluate_row(scorer: SlideScorer, tasks_seen: Sequence[TaskDataset],
                 stage: int) -> Tuple[np.ndarray, np.ndarray, List[ConfidenceRecord]]:
    """
    Evaluate every task 0..stage on its test split.

    Returns the CLASS-IL row, the TASK-IL row and one confidence record per
    test slide.
    """
    if stage >= len(tasks_seen):
        raise DataError(f"stage {stage} but only {len(tasks_seen)} tasks are available")
    ci_row = np.zeros(stage + 1)
    ti_row = np.zeros(stage + 1)
    records: List[ConfidenceRecord] = []
    for i in range(stage + 1):
        task = tasks_seen[i]
        if not task.test:
            raise DataError(f"task {task.task_index} has no test split")
        ci_hits = ti_hits = 0
        for bag in task.test:
            class_il = scorer.class_il_scores(bag)
            task_il = scorer.task_il_scores(bag, task.task_index)
            ci_hits += argmax_tiebreak(class_il).global_id == bag.label.global_id
            ti_hits += argmax_tiebreak(task_il).global_id == bag.label.global_id
            records.append(ConfidenceRecord(
                task.task_index, stage, bag.slide_id, bag.label,
                scorer.confidence(class_il, bag.label), scorer.score_kind,
            ))
        ci_row[i] = ci_hits / len(task.test)
        ti_row[i] = ti_hits / len(task.test)
    logger.debug("stage %d: CLASS-IL %s, TASK-IL %s",
                 stage, np.round(ci_row, 4).tolist(), np.round(ti_row, 4).tolist())
    return ci_row, ti_row, records


def no_positive_transfer(ci: AccuracyMatrix) -> bool:
    """True when no task's accuracy ever exceeds its just-learned value."""
    return all(ci.entry(k, i) <= ci.entry(i, i)
               for i in range(ci.n_tasks) for k in range(i + 1, ci.n_tasks))


def compute_metrics(ci: AccuracyMatrix, ti: AccuracyMatrix) -> MetricsReport:
    """
    ACC and MASKED ACC average the final rows; mACC averages the row means.

    BWT and Forgetting average over the first n - 1 tasks and are None for a
    single task.
    """
    if not (ci.is_complete and ti.is_complete):
        raise StateError("metrics need complete accuracy matrices")
    if ci.n_tasks != ti.n_tasks:
        raise StateError(f"CLASS-IL matrix has {ci.n_tasks} tasks, TASK-IL has {ti.n_tasks}")

    n = ci.n_tasks
    final = ci.final_row()
    masked_final = ti.final_row()
    macc = float(np.mean([ci.row(k).mean() for k in range(n)]))

    bwt = forgetting = None
    if n >= 2:
        diagonal = ci.diagonal()
        bwt = float(np.sum(final[:n - 1] - diagonal[:n - 1]) / (n - 1))
        best = np.array([ci.column(i).max() for i in range(n - 1)])
        forgetting = float(np.sum(best - final[:n - 1]) / (n - 1))

    return MetricsReport(
        acc=float(final.mean()),
        masked_acc=float(masked_final.mean()),
        macc=macc,
        bwt=bwt,
        forgetting=forgetting,
        final_accuracies=tuple(float(v) for v in final),
        masked_final_accuracies=tuple(float(v) for v in masked_final),
        no_positive_transfer=no_positive_transfer(ci),
    )


def confidence_summary(records: Sequence[ConfidenceRecord],
                       stage: Optional[int] = None) -> List[ConfidenceSummary]:
    """
    Five-number summary plus mean of true-label scores per (task, score kind).

    ``stage`` restricts the records to one evaluation stage. Quantiles use
    numpy's inclusive linear interpolation.
    """
    groups: Dict[Tuple[int, str], List[float]] = defaultdict(list)
    for record in records:
        if stage is None or record.train_stage == stage:
            groups[(record.eval_task, record.score_kind)].append(record.score)
    if not groups:
        raise DomainError("no confidence records to summarize")

    return [summarize_scores(task, kind, scores) for (task, kind), scores in sorted(groups.items())]


def summarize_scores(eval_task: int, score_kind: str, scores: Sequence[float]) -> ConfidenceSummary:
    values = np.asarray(scores, dtype=np.float64)
    if values.size == 0:
        raise DomainError(f"no scores for task {eval_task}")
    q0, q1, q2, q3, q4 = np.quantile(values, [0.0, 0.25, 0.5, 0.75, 1.0], method=QUANTILE_METHOD)
    return ConfidenceSummary(eval_task, score_kind, int(values.size), float(q0), float(q1),
                             float(q2), float(q3), float(q4), float(values.mean()))
