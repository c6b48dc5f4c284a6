"""
Training-based lifelong learners.

Every trainer runs ``epochs`` shuffled passes of per-slide SGD over the
train split of one task. Each trainer seed is split into two independent
streams: one shuffles the epochs, the other drives replay sampling and
reservoir decisions. All methods consume the shuffle stream the same way, so
a rehearsal method whose replay terms vanish reproduces fine-tuning bit for
bit.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from scripts import aggregator
from scripts.aggregator import AggregatorParams, Gradients
from scripts.buffers import ReplayBuffer, ReplayItemDer, buro_sample, buro_store, reservoir_insert, sample_items
from scripts.core import GlobalLabel, LabelSpace, ScoreVector, argmax_tiebreak
from scripts.datagen import SlideBag, TaskDataset, with_split
from scripts.error_handling import DataError, DivergenceError, DomainError, StateError
from scripts.evaluation import AccuracyMatrix, ConfidenceRecord, evaluate_row
from scripts.logger import get_logger

logger = get_logger(__name__)

TRAINED_METHODS = ("finetune", "ewc", "derpp", "buro")
CHECKPOINT_MODES = ("best_val", "last")

# Called with (params, bag, target, replay_rng) -> (loss, new params, logits before the update)
StepFn = Callable[[AggregatorParams, SlideBag, int, np.random.Generator],
                  Tuple[float, AggregatorParams, np.ndarray]]
# Called with (epoch, params) after every epoch
EpochFn = Callable[[int, AggregatorParams], None]


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 63-bit seed for a (seed, key...) path."""
    state = np.random.SeedSequence([seed, *keys]).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def rng_streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """(shuffle stream, replay stream) of one trainer seed."""
    shuffle, replay = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(shuffle), np.random.default_rng(replay)


def _check_head(params: AggregatorParams, task: TaskDataset) -> None:
    top = max((bag.label.global_id for bag in task.train), default=-1)
    if top >= params.class_count:
        raise StateError(
            f"head has {params.class_count} classes but task {task.task_index} needs class {top}"
        )


def train_loss(params: AggregatorParams, task: TaskDataset) -> float:
    """Mean cross-entropy over the train split."""
    return float(np.mean([aggregator.loss(bag, bag.label.global_id, params) for bag in task.train]))


def _train_loop(params: AggregatorParams, task: TaskDataset, epochs: int, seed: int,
                step: StepFn, on_step: Optional[Callable] = None,
                loss_history: Optional[List[float]] = None,
                replay_rng: Optional[np.random.Generator] = None,
                on_epoch: Optional[EpochFn] = None) -> AggregatorParams:
    if epochs < 0:
        raise DomainError(f"epochs must be non-negative, got {epochs}")
    if epochs > 0 and not task.train:
        raise DomainError(f"task {task.task_index} has an empty train split")
    _check_head(params, task)
    shuffle_rng, own_replay_rng = rng_streams(seed)
    if replay_rng is None:
        replay_rng = own_replay_rng

    for epoch in range(epochs):
        losses = []
        for position, index in enumerate(shuffle_rng.permutation(len(task.train))):
            bag = task.train[index]
            try:
                loss, new_params, logits = step(params, bag, bag.label.global_id, replay_rng)
                if not np.isfinite(loss):
                    raise DivergenceError("non-finite loss")
            except DivergenceError as error:
                raise DivergenceError(error.args[0], task.task_index, epoch, position) from error
            if on_step is not None:
                on_step(bag, logits, replay_rng)
            params = new_params
            losses.append(loss)
        logger.debug("task %d epoch %d: mean step loss %.6f", task.task_index, epoch, np.mean(losses))
        if loss_history is not None:
            loss_history.append(train_loss(params, task))
        if on_epoch is not None:
            on_epoch(epoch, params)
    return params


# Fine-tuning

def _plain_step(lr: float) -> StepFn:
    def step(params, bag, target, _rng):
        loss, grads, logits = aggregator.loss_grad_logits(bag, target, params)
        return loss, aggregator.sgd_step(params, grads, lr), logits
    return step


def train_finetune(model: AggregatorParams, task: TaskDataset, epochs: int, lr: float, seed: int,
                   loss_history: Optional[List[float]] = None,
                   on_epoch: Optional[EpochFn] = None) -> AggregatorParams:
    """Plain per-slide SGD on cross-entropy."""
    return _train_loop(model, task, epochs, seed, _plain_step(lr), loss_history=loss_history, on_epoch=on_epoch)


# EWC

@dataclass(eq=False)
class EwcState:
    """Anchor parameters and diagonal Fisher of the previous task (empty before the first)."""
    lambda_: float = 100.0
    anchor: Optional[AggregatorParams] = None
    fisher: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.lambda_ < 0:
            raise DomainError(f"EWC lambda must be non-negative, got {self.lambda_}")
        if (self.anchor is None) != (self.fisher is None):
            raise StateError("EWC anchor and Fisher must be set together")
        if self.fisher is not None:
            self.fisher = np.asarray(self.fisher, dtype=np.float64).reshape(-1)
            if self.fisher.size != self.anchor.size:
                raise StateError(f"Fisher of size {self.fisher.size} for {self.anchor.size} parameters")
            if np.any(self.fisher < 0):
                raise StateError("Fisher diagonal must be non-negative")

    @property
    def is_empty(self) -> bool:
        return self.anchor is None


def _anchored_values(params: AggregatorParams, class_count: int) -> np.ndarray:
    """Current values of the coordinates that existed when the anchor was taken."""
    return np.concatenate([params.attention_v, params.attention_u,
                           params.head_weights[:class_count].reshape(-1),
                           params.head_bias[:class_count]])


def _check_anchor(params: AggregatorParams, state: EwcState) -> None:
    if params.dim != state.anchor.dim or params.class_count < state.anchor.class_count \
            or params.kind != state.anchor.kind:
        raise StateError(
            f"parameters (dim {params.dim}, {params.class_count} classes) do not extend the "
            f"anchor (dim {state.anchor.dim}, {state.anchor.class_count} classes)"
        )


def ewc_penalty(params: AggregatorParams, state: EwcState) -> float:
    """(lambda / 2) sum F (theta - theta*)^2 over anchored coordinates."""
    if state.is_empty:
        return 0.0
    _check_anchor(params, state)
    drift = _anchored_values(params, state.anchor.class_count) - state.anchor.flat()
    return float(0.5 * state.lambda_ * np.sum(state.fisher * drift ** 2))


def _scatter_anchored(values: np.ndarray, params: AggregatorParams, class_count: int) -> Gradients:
    d = params.dim
    grads = Gradients.zeros_like(params)
    grads.attention_v = values[:d].copy()
    grads.attention_u = values[d:2 * d].copy()
    grads.head_weights[:class_count] = values[2 * d:2 * d + class_count * d].reshape(class_count, d)
    grads.head_bias[:class_count] = values[2 * d + class_count * d:]
    return grads


def ewc_penalty_grad(params: AggregatorParams, state: EwcState) -> Gradients:
    """lambda F (theta - theta*) on anchored coordinates, zero elsewhere."""
    if state.is_empty:
        return Gradients.zeros_like(params)
    _check_anchor(params, state)
    c = state.anchor.class_count
    drift = _anchored_values(params, c) - state.anchor.flat()
    return _scatter_anchored(state.lambda_ * state.fisher * drift, params, c)


def ewc_loss_and_grad(bag: SlideBag, target: int, params: AggregatorParams,
                      state: EwcState) -> Tuple[float, Gradients]:
    """Cross-entropy plus the EWC penalty, with the explicit composite gradient."""
    loss, grads = aggregator.loss_and_grad(bag, target, params)
    return loss + ewc_penalty(params, state), grads + ewc_penalty_grad(params, state)


def estimate_fisher_diag(model: AggregatorParams, task: TaskDataset) -> np.ndarray:
    """Empirical Fisher: mean squared gradient of the true-label log-likelihood over the train split."""
    if not task.train:
        raise DomainError(f"task {task.task_index} has an empty train split")
    fisher = np.zeros(model.size)
    for bag in task.train:
        fisher += aggregator.backward(bag, bag.label, model).flat() ** 2
    return fisher / len(task.train)


def _ewc_step(lr: float, state: EwcState) -> StepFn:
    if state.is_empty:
        return _plain_step(lr)
    c = state.anchor.class_count
    anchor = state.anchor.flat()
    shrink = lr * state.lambda_ * state.fisher

    def step(params, bag, target, _rng):
        _check_anchor(params, state)
        loss, grads, logits = aggregator.loss_grad_logits(bag, target, params)
        moved = aggregator.sgd_step(params, grads, lr)
        # exact minimizer of the quadratic penalty around the plain SGD step
        pulled = (_anchored_values(moved, c) + shrink * anchor) / (1.0 + shrink)
        flat = moved.flat()
        d = moved.dim
        flat[:2 * d] = pulled[:2 * d]
        flat[2 * d:2 * d + c * d] = pulled[2 * d:2 * d + c * d]
        head_bias_start = 2 * d + moved.class_count * d
        flat[head_bias_start:head_bias_start + c] = pulled[2 * d + c * d:]
        return loss + ewc_penalty(params, state), moved.with_flat(flat), logits
    return step


def train_ewc(model: AggregatorParams, task: TaskDataset, state: EwcState, epochs: int, lr: float,
              seed: int, loss_history: Optional[List[float]] = None,
              on_epoch: Optional[EpochFn] = None) -> Tuple[AggregatorParams, EwcState]:
    """
    SGD on cross-entropy with the quadratic penalty applied as a proximal step.

    Afterwards the anchor moves to the trained parameters and the Fisher is
    re-estimated on this task.
    """
    model = _train_loop(model, task, epochs, seed, _ewc_step(lr, state), loss_history=loss_history,
                        on_epoch=on_epoch)
    new_state = EwcState(state.lambda_, model.copy(), estimate_fisher_diag(model, task))
    logger.debug("task %d: Fisher mean %.3e, max %.3e",
                 task.task_index, new_state.fisher.mean(), new_state.fisher.max())
    return model, new_state


# DER++

def derpp_composite(params: AggregatorParams, bag: SlideBag, target: int,
                    distill_items: Sequence[ReplayItemDer], label_items: Sequence[ReplayItemDer],
                    alpha: float, beta: float) -> Tuple[float, Gradients, np.ndarray]:
    """
    Current cross-entropy plus alpha * logit MSE on ``distill_items`` plus
    beta * cross-entropy on ``label_items``; replay terms are averaged over
    their items. Returns the loss, its gradient and the current logits.
    """
    if alpha < 0 or beta < 0:
        raise DomainError(f"alpha and beta must be non-negative, got {alpha}, {beta}")
    loss, grads, logits = aggregator.loss_grad_logits(bag, target, params)

    if alpha > 0 and distill_items:
        weight = alpha / len(distill_items)
        for item in distill_items:
            replay_logits = aggregator.logits_array(aggregator.aggregate(item.bag, params), params)
            length = min(item.stored_logits.size, replay_logits.size)
            diff = replay_logits[:length] - item.stored_logits[:length]
            loss += weight * float(np.mean(diff ** 2))
            dlogits = np.zeros_like(replay_logits)
            dlogits[:length] = weight * 2.0 * diff / length
            grads = grads + aggregator.backward_from_logit_grad(item.bag, params, dlogits)

    if beta > 0 and label_items:
        weight = beta / len(label_items)
        for item in label_items:
            replay_loss, replay_grads = aggregator.loss_and_grad(item.bag, item.label.global_id, params)
            loss += weight * replay_loss
            grads = grads + replay_grads.scaled(weight)
    return loss, grads, logits


def _sampled_derpp(params: AggregatorParams, bag: SlideBag, target: int, buffer: ReplayBuffer, alpha: float,
                   beta: float, rng: np.random.Generator,
                   replay_items: int) -> Tuple[float, Gradients, np.ndarray]:
    distill = sample_items(buffer, replay_items, rng) if alpha > 0 and not buffer.is_empty() else []
    labelled = sample_items(buffer, replay_items, rng) if beta > 0 and not buffer.is_empty() else []
    return derpp_composite(params, bag, target, distill, labelled, alpha, beta)


def derpp_loss(params: AggregatorParams, bag: SlideBag, buffer: ReplayBuffer, alpha: float, beta: float,
               rng: np.random.Generator, replay_items: int = 1) -> Tuple[float, Gradients]:
    """DER++ loss with replay items drawn from the buffer; replay terms are zero for an empty buffer."""
    loss, grads, _ = _sampled_derpp(params, bag, bag.label.global_id, buffer, alpha, beta, rng, replay_items)
    return loss, grads


def train_derpp(model: AggregatorParams, task: TaskDataset, buffer: ReplayBuffer, alpha: float, beta: float,
                epochs: int, lr: float, seed: int, replay_items: int = 1,
                loss_history: Optional[List[float]] = None,
                on_epoch: Optional[EpochFn] = None) -> Tuple[AggregatorParams, ReplayBuffer]:
    """
    Per step: DER++ loss, SGD step, then offer the slide to the reservoir
    together with the logits of that step's forward pass.
    """
    if replay_items < 1:
        raise DomainError(f"replay_items must be positive, got {replay_items}")

    def step(params, bag, target, rng):
        loss, grads, logits = _sampled_derpp(params, bag, target, buffer, alpha, beta, rng, replay_items)
        return loss, aggregator.sgd_step(params, grads, lr), logits

    def store(bag, logits, rng):
        reservoir_insert(buffer, ReplayItemDer(bag, logits.copy()), rng)

    model = _train_loop(model, task, epochs, seed, step, on_step=store, loss_history=loss_history,
                        on_epoch=on_epoch)
    logger.debug("task %d: DER++ buffer %d/%d after %d offers",
                 task.task_index, len(buffer), buffer.capacity, buffer.seen_count)
    return model, buffer


# BuRo

def train_buro(model: AggregatorParams, task: TaskDataset, buffer: ReplayBuffer, replay_weight: float,
               epochs: int, lr: float, seed: int, regions_per_bag: int = 8,
               loss_history: Optional[List[float]] = None,
               on_epoch: Optional[EpochFn] = None) -> Tuple[AggregatorParams, ReplayBuffer]:
    """
    Per step: cross-entropy on the slide plus replay_weight times the
    cross-entropy of a recombined bag from the region buffer. After the task
    every train slide's regions are offered to the buffer.
    """
    if replay_weight < 0:
        raise DomainError(f"replay_weight must be non-negative, got {replay_weight}")
    replay = replay_weight > 0 and not buffer.is_empty()

    def step(params, bag, target, rng):
        loss, grads, logits = aggregator.loss_grad_logits(bag, target, params)
        if replay:
            mixed = buro_sample(buffer, regions_per_bag, rng)
            replay_loss, replay_grads = aggregator.loss_and_grad(mixed, mixed.label.global_id, params)
            loss += replay_weight * replay_loss
            grads = grads + replay_grads.scaled(replay_weight)
        return loss, aggregator.sgd_step(params, grads, lr), logits

    _, replay_rng = rng_streams(seed)
    model = _train_loop(model, task, epochs, seed, step, loss_history=loss_history, replay_rng=replay_rng,
                        on_epoch=on_epoch)
    for bag in task.train:
        buro_store(buffer, bag, replay_rng)
    logger.debug("task %d: region buffer %d/%d after %d offers",
                 task.task_index, len(buffer), buffer.capacity, buffer.seen_count)
    return model, buffer


# Scoring and the task sequence

class ModelScorer:
    """Scores slides with a trained model: softmax confidence over the accumulated classes."""

    score_kind = "softmax_prob"

    def __init__(self, params: AggregatorParams, label_space: LabelSpace, stage: int):
        self.params = params
        self.candidates = label_space.labels_up_to(stage)
        if params.class_count != len(self.candidates):
            raise StateError(
                f"head has {params.class_count} classes, stage {stage} accumulates {len(self.candidates)}"
            )
        self.label_space = label_space
        self._logits: Dict[str, np.ndarray] = {}

    def _logits_of(self, bag: SlideBag) -> np.ndarray:
        logits = self._logits.get(bag.slide_id)
        if logits is None:
            logits = aggregator.logits_array(aggregator.aggregate(bag, self.params), self.params)
            self._logits[bag.slide_id] = logits
        return logits

    def class_il_scores(self, bag: SlideBag) -> ScoreVector:
        return ScoreVector(self._logits_of(bag), self.candidates)

    def task_il_scores(self, bag: SlideBag, task_index: int) -> ScoreVector:
        part = self.label_space.task_slice(task_index)
        return ScoreVector(self._logits_of(bag)[part], self.label_space.task_labels(task_index))

    def confidence(self, class_il: ScoreVector, label: GlobalLabel) -> float:
        probabilities = special.softmax(class_il.scores)
        return float(probabilities[[c.global_id for c in class_il.candidates].index(label.global_id)])


class BestValidation:
    """
    Epoch-end hook that keeps the parameters with the highest CLASS-IL
    accuracy on a validation split. Ties go to the later epoch.
    """

    def __init__(self, validation: Sequence[SlideBag], label_space: LabelSpace, stage: int):
        self.validation = list(validation)
        self.label_space = label_space
        self.stage = stage
        self.best: Optional[AggregatorParams] = None
        self.best_epoch: Optional[int] = None
        self.best_accuracy = -np.inf
        self.last_epoch: Optional[int] = None

    def __call__(self, epoch: int, params: AggregatorParams) -> None:
        self.last_epoch = epoch
        if not self.validation:
            return
        scorer = ModelScorer(params, self.label_space, self.stage)
        hits = sum(argmax_tiebreak(scorer.class_il_scores(bag)).global_id == bag.label.global_id
                   for bag in self.validation)
        accuracy = hits / len(self.validation)
        if accuracy >= self.best_accuracy:
            self.best, self.best_epoch, self.best_accuracy = params.copy(), epoch, accuracy

    def select(self, trained: AggregatorParams) -> AggregatorParams:
        """The best checkpoint, or ``trained`` when that is the last epoch or nothing was scored."""
        if self.best is None or self.best_epoch == self.last_epoch:
            return trained
        return self.best


@dataclass(frozen=True)
class TrainerSettings:
    """Hyperparameters of one training-based method."""
    epochs: int = 10
    lr: float = 0.05
    ewc_lambda: float = 100.0
    alpha: float = 0.5
    beta: float = 0.5
    replay_items: int = 1
    replay_weight: float = 1.0
    buffer_capacity: int = 30
    regions_per_bag: int = 8
    aggregator: str = "gated_attention"
    checkpoint: str = "best_val"


@dataclass
class MethodRun:
    method: str
    ci: AccuracyMatrix
    ti: AccuracyMatrix
    records: List[ConfidenceRecord] = field(default_factory=list)
    params: Optional[AggregatorParams] = None
    buffer: Optional[ReplayBuffer] = None
    # per task, the epoch whose parameters were kept
    selected_epochs: List[Optional[int]] = field(default_factory=list)


def run_method_sequence(method: str, tasks: Sequence[TaskDataset], settings: TrainerSettings,
                        seed: int) -> MethodRun:
    """
    Run one training-based method over a task sequence.

    Before each task the head grows by the task's classes; the trainer sees
    only the train split. With ``checkpoint = "best_val"`` the parameters
    of the epoch with the best accuracy on the task's validation split are
    kept (the last epoch when the split is empty). Afterwards every seen
    task is evaluated.
    """
    if method not in TRAINED_METHODS:
        raise DomainError(f"unknown training method '{method}'")
    if settings.checkpoint not in CHECKPOINT_MODES:
        raise DomainError(f"unknown checkpoint mode '{settings.checkpoint}'")
    if not tasks:
        raise DomainError("empty task sequence")
    first_slides = tasks[0].all_slides()
    if not first_slides:
        raise DataError(f"task {tasks[0].task_index} has no slides")

    label_space = LabelSpace([task.class_count for task in tasks])
    dim = first_slides[0].dim
    params = aggregator.init_params(dim, settings.aggregator, rng=np.random.default_rng(derive_seed(seed, 0)))
    ewc_state = EwcState(settings.ewc_lambda)
    buffer = None
    if method == "derpp":
        buffer = ReplayBuffer(settings.buffer_capacity, "der")
    elif method == "buro":
        buffer = ReplayBuffer(settings.buffer_capacity, "region")

    n = len(tasks)
    run = MethodRun(method, AccuracyMatrix(n), AccuracyMatrix(n), buffer=buffer)
    for stage, task in enumerate(tasks):
        params = aggregator.grow_head(params, task.class_count)
        train_only = with_split(task, val=[], test=[])
        task_seed = derive_seed(seed, stage + 1)
        validation = task.val if settings.checkpoint == "best_val" else []
        selector = BestValidation(validation, label_space, stage)
        if method == "finetune":
            trained = train_finetune(params, train_only, settings.epochs, settings.lr, task_seed,
                                     on_epoch=selector)
        elif method == "ewc":
            trained, ewc_state = train_ewc(params, train_only, ewc_state, settings.epochs, settings.lr, task_seed,
                                           on_epoch=selector)
        elif method == "derpp":
            trained, buffer = train_derpp(params, train_only, buffer, settings.alpha, settings.beta,
                                          settings.epochs, settings.lr, task_seed, settings.replay_items,
                                          on_epoch=selector)
        else:
            trained, buffer = train_buro(params, train_only, buffer, settings.replay_weight,
                                         settings.epochs, settings.lr, task_seed, settings.regions_per_bag,
                                         on_epoch=selector)

        params = selector.select(trained)
        if params is not trained:
            logger.info("%s task %d: keeping epoch %d (validation accuracy %.4f)",
                        method, task.task_index, selector.best_epoch, selector.best_accuracy)
            if method == "ewc":
                ewc_state = EwcState(settings.ewc_lambda, params.copy(), estimate_fisher_diag(params, train_only))
        run.selected_epochs.append(selector.best_epoch if params is not trained else selector.last_epoch)

        ci_row, ti_row, records = evaluate_row(ModelScorer(params, label_space, stage), tasks, stage)
        run.ci.set_row(stage, ci_row)
        run.ti.set_row(stage, ti_row)
        run.records.extend(records)
        logger.info("%s task %d done: CLASS-IL mean %.4f, TASK-IL mean %.4f",
                    method, task.task_index, ci_row.mean(), ti_row.mean())
    run.params = params
    run.buffer = buffer
    return run
