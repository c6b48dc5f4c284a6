"""
Synthetic multi-task slide-bag datasets, fold splitting and class prototypes.

Generated sequences mimic a chain of organ-specific subtyping tasks: every
class has a mean direction on the unit sphere, every patch is that mean plus
isotropic Gaussian noise, and every region embedding is the mean of its
patches. The same seed always produces the same bytes.
"""
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from scripts.core import GlobalLabel, LabelSpace, Normalized, l2_normalize
from scripts.error_handling import (
    DataError, DomainError, InfeasibleSeparationError, StratificationError
)
from scripts.logger import get_logger

logger = get_logger(__name__)

STORAGE_DTYPE = np.float32

# Six organ/subtype tasks; used for names when the configured class counts match
TASK_CATALOGUE: Tuple[Tuple[str, Tuple[str, ...]], ...] = (
    ("BRCA", ("invasive ductal carcinoma", "invasive lobular carcinoma")),
    ("RCC", ("clear cell renal cell carcinoma", "papillary renal cell carcinoma",
             "chromophobe renal cell carcinoma")),
    ("NSCLC", ("lung adenocarcinoma", "lung squamous cell carcinoma")),
    ("ESCA", ("esophageal adenocarcinoma", "esophageal squamous cell carcinoma")),
    ("TGCT", ("seminoma", "non-seminomatous germ cell tumor")),
    ("CESC", ("cervical squamous cell carcinoma", "endocervical adenocarcinoma")),
)
DEFAULT_CLASS_COUNTS = tuple(len(classes) for _, classes in TASK_CATALOGUE)


@dataclass(frozen=True)
class TaskSpec:
    """Shape and naming of one task in a sequence."""
    task_index: int
    class_count: int
    slides_per_class: int
    class_names: Tuple[str, ...] = ()
    name: str = ""

    def __post_init__(self):
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(
                f"task{self.task_index}_class{j}" for j in range(self.class_count)
            ))
        if not self.name:
            object.__setattr__(self, "name", f"task{self.task_index}")
        if len(self.class_names) != self.class_count:
            raise DomainError(
                f"task {self.task_index}: {len(self.class_names)} names for "
                f"{self.class_count} classes"
            )

    def validate(self) -> None:
        """Constraints on tasks that are generated rather than ingested."""
        if self.class_count < 2:
            raise DomainError(f"task {self.task_index} needs at least 2 classes")
        if self.slides_per_class < 4:
            raise DomainError(
                f"task {self.task_index} needs at least 4 slides per class "
                "for a train/val/test split"
            )


def default_task_specs(class_counts: Sequence[int] = DEFAULT_CLASS_COUNTS,
                       slides_per_class: int = 40) -> Tuple[TaskSpec, ...]:
    """Task specs named after the organ/subtype catalogue where the counts line up."""
    specs = []
    for index, count in enumerate(class_counts):
        names: Tuple[str, ...] = ()
        title = ""
        if index < len(TASK_CATALOGUE) and len(TASK_CATALOGUE[index][1]) == count:
            title, names = TASK_CATALOGUE[index]
        specs.append(TaskSpec(index, int(count), int(slides_per_class), names, title))
    return tuple(specs)


@dataclass(eq=False)
class SlideBag:
    """
    One slide: a set of regions, each with its own embedding and patch grid.

    ``region_embeddings`` has shape (regions, dim) and ``patches`` has shape
    (regions, patches_per_region, dim); both are stored as float32.
    """
    slide_id: str
    label: GlobalLabel
    region_embeddings: np.ndarray
    patches: np.ndarray

    def __post_init__(self):
        self.region_embeddings = np.ascontiguousarray(self.region_embeddings, dtype=STORAGE_DTYPE)
        self.patches = np.ascontiguousarray(self.patches, dtype=STORAGE_DTYPE)
        if self.region_embeddings.ndim != 2 or self.region_embeddings.shape[0] < 1:
            raise DomainError(f"slide {self.slide_id} needs at least one region")
        if self.patches.ndim != 3 or self.patches.shape[0] != self.region_embeddings.shape[0] \
                or self.patches.shape[2] != self.region_embeddings.shape[1]:
            raise DomainError(
                f"slide {self.slide_id}: patches {self.patches.shape} do not match "
                f"regions {self.region_embeddings.shape}"
            )

    @property
    def n_regions(self) -> int:
        return self.region_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.region_embeddings.shape[1]

    @property
    def patches_per_region(self) -> int:
        return self.patches.shape[1]

    def region_matrix(self) -> np.ndarray:
        """Region embeddings as a float64 matrix."""
        return self.region_embeddings.astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, SlideBag):
            return NotImplemented
        return (self.slide_id == other.slide_id
                and self.label == other.label
                and np.array_equal(self.region_embeddings, other.region_embeddings)
                and np.array_equal(self.patches, other.patches))


@dataclass(eq=False)
class TaskDataset:
    """One task with disjoint train/val/test splits."""
    spec: TaskSpec
    train: List[SlideBag]
    val: List[SlideBag]
    test: List[SlideBag]
    class_means: Optional[np.ndarray] = None

    def __post_init__(self):
        ids = [bag.slide_id for bag in self.all_slides()]
        if len(ids) != len(set(ids)):
            raise DomainError(f"task {self.spec.task_index}: splits share slide ids")

    @property
    def task_index(self) -> int:
        return self.spec.task_index

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    def all_slides(self) -> List[SlideBag]:
        return [*self.train, *self.val, *self.test]

    def __eq__(self, other):
        if not isinstance(other, TaskDataset):
            return NotImplemented
        return (self.task_index == other.task_index
                and self.class_count == other.class_count
                and self.train == other.train
                and self.val == other.val
                and self.test == other.test)


@dataclass(eq=False)
class TaskPrototypeSpec:
    """Prototype variant embeddings of one task: one (variants, dim) float32 array per class."""
    task_index: int
    variants: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.variants = [np.atleast_2d(np.asarray(v, dtype=STORAGE_DTYPE)) for v in self.variants]
        dims = {v.shape[1] for v in self.variants}
        if len(dims) > 1:
            raise DomainError(f"task {self.task_index}: prototype variants of dims {sorted(dims)}")

    @property
    def class_count(self) -> int:
        return len(self.variants)

    def __eq__(self, other):
        if not isinstance(other, TaskPrototypeSpec):
            return NotImplemented
        return (self.task_index == other.task_index
                and len(self.variants) == len(other.variants)
                and all(np.array_equal(a, b) for a, b in zip(self.variants, other.variants)))


@dataclass(frozen=True)
class SyntheticConfig:
    """Everything that determines a generated task sequence and its prototypes."""
    tasks: Tuple[TaskSpec, ...] = field(default_factory=default_task_specs)
    dim: int = 64
    regions_per_slide: int = 8
    patches_per_region: int = 16
    class_separation: float = 0.5
    patch_noise_sigma: float = 0.05
    prototype_noise_sigma: float = 0.15
    prototype_variants: int = 4
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    seed: int = 0
    prototype_seed: int = 1
    max_resample_attempts: int = 10000

    def validate(self) -> None:
        if self.dim < 2:
            raise DomainError(f"dim must be at least 2, got {self.dim}")
        if not self.tasks:
            raise DomainError("at least one task is required")
        for spec in self.tasks:
            spec.validate()
        if self.regions_per_slide < 1 or self.patches_per_region < 1:
            raise DomainError("regions_per_slide and patches_per_region must be positive")
        if self.patch_noise_sigma < 0 or self.prototype_noise_sigma < 0:
            raise DomainError("noise sigmas must be non-negative")
        if not 0.0 <= self.class_separation <= 2.0:
            raise DomainError(f"class_separation must lie in [0, 2], got {self.class_separation}")
        if self.prototype_variants < 1:
            raise DomainError("at least one prototype variant per class is required")
        if not (0 < self.train_fraction < 1 and 0 <= self.val_fraction < 1
                and self.train_fraction + self.val_fraction < 1):
            raise DomainError("train/val fractions must leave room for a test split")

    @property
    def label_space(self) -> LabelSpace:
        return LabelSpace([spec.class_count for spec in self.tasks])


def _draw_class_means(rng: np.random.Generator, n_classes: int, dim: int,
                      separation: float, max_attempts: int) -> np.ndarray:
    """Unit directions with pairwise cosine at most 1 - separation, stored at float32 precision."""
    cap = 1.0 - separation
    means = np.zeros((n_classes, dim), dtype=np.float64)
    for k in range(n_classes):
        for attempt in range(1, max_attempts + 1):
            candidate = rng.standard_normal(dim)
            candidate = candidate / np.linalg.norm(candidate)
            candidate = candidate.astype(STORAGE_DTYPE).astype(np.float64)
            if k == 0 or np.max(means[:k] @ candidate / np.linalg.norm(means[:k], axis=1)
                                / np.linalg.norm(candidate)) <= cap:
                means[k] = candidate
                if attempt > 1:
                    logger.debug("class mean %d accepted after %d draws", k, attempt)
                break
        else:
            raise InfeasibleSeparationError(
                f"could not place class {k + 1} of {n_classes} in dim {dim} with "
                f"pairwise cosine <= {cap:.3f} after {max_attempts} draws",
                attempts=max_attempts,
            )
    return means


def _split_counts(n: int, train_fraction: float, val_fraction: float) -> Tuple[int, int, int]:
    n_train = max(1, int(round(train_fraction * n)))
    n_val = int(round(val_fraction * n))
    n_test = n - n_train - n_val
    if n_test < 1:
        n_val = max(0, n_val - (1 - n_test))
        n_test = n - n_train - n_val
    return n_train, n_val, n_test


def generate_task_sequence(config: SyntheticConfig) -> List[TaskDataset]:
    """
    Generate a task sequence from a synthetic configuration.

    Class means are drawn first for every class of every task, then slides
    task by task and class by class; that draw order is part of the
    determinism contract.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    label_space = config.label_space
    means = _draw_class_means(rng, label_space.total_classes, config.dim,
                              config.class_separation, config.max_resample_attempts)

    datasets = []
    shape = (config.regions_per_slide, config.patches_per_region, config.dim)
    for spec in config.tasks:
        train, val, test = [], [], []
        for local in range(spec.class_count):
            label = label_space.label(spec.task_index, local)
            mean = means[label.global_id]
            bags = []
            for index in range(spec.slides_per_class):
                patches = (mean + config.patch_noise_sigma * rng.standard_normal(shape)).astype(STORAGE_DTYPE)
                regions = patches.astype(np.float64).mean(axis=1).astype(STORAGE_DTYPE)
                bags.append(SlideBag(f"t{spec.task_index}-c{local}-{index:04d}", label, regions, patches))

            order = rng.permutation(len(bags))
            n_train, n_val, _ = _split_counts(len(bags), config.train_fraction, config.val_fraction)
            train.extend(bags[i] for i in order[:n_train])
            val.extend(bags[i] for i in order[n_train:n_train + n_val])
            test.extend(bags[i] for i in order[n_train + n_val:])

        task_means = means[label_space.task_slice(spec.task_index)].copy()
        datasets.append(TaskDataset(spec, train, val, test, class_means=task_means))
        logger.debug("generated task %d (%s): %d/%d/%d slides",
                     spec.task_index, spec.name, len(train), len(val), len(test))

    logger.info("generated %d tasks, %d classes, dim %d (seed %d)",
                len(datasets), label_space.total_classes, config.dim, config.seed)
    return datasets


def split_folds(task: TaskDataset, n_folds: int, seed: int) -> List[TaskDataset]:
    """
    Stratified folds over all slides of a task.

    Fold f tests on its own slides, validates on fold (f + 1) mod n when
    n >= 3 and trains on the rest; the test sets of all folds partition the
    task's slides.
    """
    if n_folds < 2:
        raise DomainError(f"n_folds must be at least 2, got {n_folds}")

    by_class: Dict[int, List[SlideBag]] = {}
    for bag in sorted(task.all_slides(), key=lambda b: b.slide_id):
        by_class.setdefault(bag.label.global_id, []).append(bag)

    rng = np.random.default_rng(seed)
    folds: List[List[SlideBag]] = [[] for _ in range(n_folds)]
    for global_id in sorted(by_class):
        bags = by_class[global_id]
        if len(bags) < n_folds:
            raise StratificationError(
                f"task {task.task_index}, class {global_id}: {len(bags)} slides "
                f"for {n_folds} folds"
            )
        for position, index in enumerate(rng.permutation(len(bags))):
            folds[position % n_folds].append(bags[index])

    result = []
    for f in range(n_folds):
        val_fold = (f + 1) % n_folds if n_folds >= 3 else None
        train = [bag for g in range(n_folds) if g not in (f, val_fold) for bag in folds[g]]
        val = list(folds[val_fold]) if val_fold is not None else []
        result.append(TaskDataset(task.spec, train, val, list(folds[f]), class_means=task.class_means))
    return result


def class_centroids(task: TaskDataset) -> np.ndarray:
    """Per-class mean of the train split's mean-of-regions embeddings."""
    sums: Dict[int, List[np.ndarray]] = {}
    for bag in task.train:
        sums.setdefault(bag.label.local_class, []).append(bag.region_matrix().mean(axis=0))
    missing = [c for c in range(task.class_count) if c not in sums]
    if missing:
        raise DataError(
            f"task {task.task_index}: no class means and no train slides for classes {missing}"
        )
    return np.stack([np.mean(sums[c], axis=0) for c in range(task.class_count)])


def synthesize_prototypes(tasks: Sequence[TaskDataset], config: SyntheticConfig) -> List[TaskPrototypeSpec]:
    """
    Stand-in for text-encoded class prompts: noisy, normalized copies of each class mean.

    Tasks without generated class means (ingested data) use their train-split
    class centroids instead.
    """
    if config.prototype_noise_sigma < 0:
        raise DomainError("prototype_noise_sigma must be non-negative")
    if config.prototype_variants < 1:
        raise DomainError("at least one prototype variant per class is required")

    rng = np.random.default_rng(config.prototype_seed)
    specs = []
    for task in tasks:
        means = task.class_means if task.class_means is not None else class_centroids(task)
        per_class = []
        for local in range(task.class_count):
            mean = np.asarray(means[local], dtype=np.float64)
            variants = []
            for _ in range(config.prototype_variants):
                noisy = mean + config.prototype_noise_sigma * rng.standard_normal(mean.size)
                normalized = l2_normalize(noisy, f"prototype variant of task {task.task_index} class {local}")
                variants.append(normalized.vector)
            per_class.append(np.stack(variants))
        specs.append(TaskPrototypeSpec(task.task_index, per_class))
    return specs


def average_variants(spec: TaskPrototypeSpec) -> List[Normalized]:
    """One unit prototype per class: the normalized arithmetic mean of its variants."""
    prototypes = []
    for local, variants in enumerate(spec.variants):
        variants = np.asarray(variants, dtype=np.float64)
        if variants.ndim != 2 or variants.size == 0:
            raise DomainError(f"task {spec.task_index} class {local} has no variants")
        averaged = l2_normalize(variants.mean(axis=0), f"averaged prototype of task {spec.task_index} class {local}")
        prototypes.append(averaged)
    return prototypes


def with_split(task: TaskDataset, **splits) -> TaskDataset:
    """Copy of a task with some splits replaced."""
    return replace(task, **splits)
