"""
Experiment orchestration: one job per (method variant, fold, seed) triple.

Each triple writes only its own directory under ``runs/``; the parent process
is the single writer of the consolidated CSV files and of the manifest.
Failures are recorded per triple and never abort the sweep.
"""
import csv
import hashlib
import io
import json
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from scripts.aggregator import FrozenAggregator
from scripts.config import MethodVariant, RunPlan, normalize_config
from scripts.datagen import (
    TaskDataset, TaskPrototypeSpec, generate_task_sequence, split_folds, synthesize_prototypes
)
from scripts.embedding_io import (
    check_prototypes_match, load_embedding_file, load_prototype_file, write_buffer_file,
    write_embedding_file, write_model_file, write_prototype_file
)
from scripts.error_handling import EXIT_OK, EXIT_PARTIAL, with_error_handling
from scripts.evaluation import AccuracyMatrix, ConfidenceRecord, MetricsReport, compute_metrics
from scripts.logger import get_logger
from scripts.progress import ProgressReporter
from scripts.trainers import derive_seed, run_method_sequence
from scripts.version import __version__, check_version_compatibility, get_version_info, same_major_version
from scripts.zeroslide import run_zeroslide

logger = get_logger(__name__)

PathLike = Union[str, Path]

METRIC_FIELDS = ["acc", "masked_acc", "macc", "bwt", "forgetting"]
RESULT_KEY_FIELDS = ["method", "buffer_capacity", "seed", "fold"]
CONFIDENCE_FIELDS = ["method", "buffer_capacity", "fold", "seed", "eval_task", "train_stage",
                     "slide_id", "true_global_class", "score", "score_kind"]

RESULTS_FILE = "results.csv"
CONFIDENCE_FILE = "confidence.csv"
RUN_RESULT_FILE = "result.csv"
MANIFEST_FILE = "manifest.json"
NORMALIZED_CONFIG_FILE = "config.normalized"
EMBEDDINGS_FILE = "embeddings.zslb"
PROTOTYPES_FILE = "prototypes.zslp"

STATUS_COMPLETE = "complete"
STATUS_FAILED = "failed"


@dataclass(frozen=True)
class Triple:
    variant: MethodVariant
    fold: int
    seed: int

    @property
    def key(self) -> str:
        return f"{self.variant.name}_fold{self.fold}_seed{self.seed}"

    @property
    def method(self) -> str:
        return self.variant.method


@dataclass
class TripleJob:
    """Everything one worker process needs; pickled to the pool."""
    triple: Triple
    sequence: List[TaskDataset]
    prototypes: Optional[List[TaskPrototypeSpec]]
    similarity: str
    run_dir: str


@dataclass
class TripleOutcome:
    key: str
    status: str
    message: str = ""
    files: Dict[str, str] = field(default_factory=dict)


@dataclass
class RunArtifact:
    output_dir: Path
    results_csv: Path
    confidence_csv: Path
    manifest: Path
    outcomes: Dict[str, TripleOutcome]
    recomputed: List[str] = field(default_factory=list)

    @property
    def failed(self) -> List[str]:
        return [key for key, outcome in self.outcomes.items() if outcome.status != STATUS_COMPLETE]

    @property
    def exit_code(self) -> int:
        return EXIT_PARTIAL if self.failed else EXIT_OK


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def text_sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _format_number(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def matrix_fields(n_tasks: int) -> List[str]:
    names = []
    for prefix in ("a_ci", "a_ti"):
        names.extend(f"{prefix}_{k}_{i}" for k in range(n_tasks) for i in range(k + 1))
    return names


def result_row(triple: Triple, metrics: MetricsReport, ci: AccuracyMatrix, ti: AccuracyMatrix) -> Dict[str, str]:
    row = {
        "method": triple.method,
        "buffer_capacity": "" if triple.variant.buffer_capacity is None else str(triple.variant.buffer_capacity),
        "seed": str(triple.seed),
        "fold": str(triple.fold),
    }
    for name, value in metrics.as_dict().items():
        row[name] = _format_number(value)
    for prefix, matrix in (("a_ci", ci), ("a_ti", ti)):
        for k, i, value in matrix.entries():
            row[f"{prefix}_{k}_{i}"] = _format_number(value)
    return row


def confidence_rows(triple: Triple, records: Sequence[ConfidenceRecord]) -> List[Dict[str, str]]:
    capacity = "" if triple.variant.buffer_capacity is None else str(triple.variant.buffer_capacity)
    return [{
        "method": triple.method,
        "buffer_capacity": capacity,
        "fold": str(triple.fold),
        "seed": str(triple.seed),
        "eval_task": str(record.eval_task),
        "train_stage": str(record.train_stage),
        "slide_id": record.slide_id,
        "true_global_class": str(record.true_label.global_id),
        "score": _format_number(record.score),
        "score_kind": record.score_kind,
    } for record in records]


def _csv_text(fieldnames: Sequence[str], rows: Sequence[Dict[str, str]]) -> str:
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return out.getvalue()


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def _run_triple(job: TripleJob) -> TripleOutcome:
    triple = job.triple
    run_dir = Path(job.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in run_dir.iterdir():
        stale.unlink()

    params = buffer = None
    if triple.method == "zeroslide":
        result = run_zeroslide(job.sequence, job.prototypes, FrozenAggregator(), job.similarity)
        ci, ti, records = result.ci, result.ti, result.records
    else:
        run = run_method_sequence(triple.method, job.sequence, triple.variant.settings,
                                  derive_seed(triple.seed, triple.fold))
        ci, ti, records = run.ci, run.ti, run.records
        params, buffer = run.params, run.buffer

    metrics = compute_metrics(ci, ti)
    fields = RESULT_KEY_FIELDS + METRIC_FIELDS + matrix_fields(ci.n_tasks)
    _write_text(run_dir / RUN_RESULT_FILE,
                _csv_text(fields, [result_row(triple, metrics, ci, ti)]))
    _write_text(run_dir / CONFIDENCE_FILE, _csv_text(CONFIDENCE_FIELDS, confidence_rows(triple, records)))
    if params is not None:
        write_model_file(params, run_dir / "model.zslm")
    if buffer is not None:
        write_buffer_file(buffer, run_dir / "buffer.zslr", params.dim)

    files = {path.name: file_sha256(path) for path in sorted(run_dir.iterdir())}
    logger.info("%s complete: ACC %.4f, MASKED ACC %.4f", triple.key, metrics.acc, metrics.masked_acc)
    return TripleOutcome(triple.key, STATUS_COMPLETE, "", files)


def execute_triple(job: TripleJob) -> TripleOutcome:
    """
    Run one triple and write its directory.

    Errors are logged and returned as a failed outcome so they never cross
    the process boundary as exceptions.
    """
    key = job.triple.key

    def failed(error: Exception) -> TripleOutcome:
        return TripleOutcome(key, STATUS_FAILED, f"{type(error).__name__}: {error}")

    return with_error_handling(_run_triple, key, fallback=failed)(job)


def load_inputs(plan: RunPlan) -> Tuple[List[TaskDataset], Optional[List[TaskPrototypeSpec]]]:
    """
    Task sequence and shared prototype specs of a plan.

    Prototypes are shared across folds when they come from a file or from
    generated class means. Ingested data without a prototype file returns
    ``None``; ``fold_prototypes`` then builds them per fold.
    """
    config = plan.synthetic_config()
    if plan.get("data.source") == "file":
        tasks = load_embedding_file(plan.get("data.path"))
    else:
        tasks = generate_task_sequence(config)

    prototypes = None
    if "zeroslide" in plan.methods:
        if plan.get("prototypes.source") == "file":
            prototypes = load_prototype_file(plan.get("prototypes.path"))
        elif all(task.class_means is not None for task in tasks):
            prototypes = synthesize_prototypes(tasks, config)
        if prototypes is not None:
            check_prototypes_match(tasks, prototypes)
    return tasks, prototypes


def fold_prototypes(plan: RunPlan, sequences: Sequence[Sequence[TaskDataset]],
                    shared: Optional[List[TaskPrototypeSpec]]) -> List[Optional[List[TaskPrototypeSpec]]]:
    """
    Prototype specs for each fold.

    Without shared specs, class centroids come from each fold's own train
    split, so no fold ever builds prototypes from its test slides.
    """
    if "zeroslide" not in plan.methods or shared is not None:
        return [shared] * len(sequences)
    config = plan.synthetic_config()
    per_fold = []
    for sequence in sequences:
        specs = synthesize_prototypes(sequence, config)
        check_prototypes_match(sequence, specs)
        per_fold.append(specs)
    logger.info("no class means or prototype file: using train-split centroids of each fold")
    return per_fold


def fold_sequences(tasks: Sequence[TaskDataset], n_folds: int, seed: int) -> List[List[TaskDataset]]:
    """Per fold, the sequence of every task's fold split."""
    per_task = [split_folds(task, n_folds, derive_seed(seed, task.task_index)) for task in tasks]
    return [[folds[f] for folds in per_task] for f in range(n_folds)]


def plan_triples(plan: RunPlan) -> List[Triple]:
    """Triples in canonical order: plan method order, capacity, fold, seed."""
    return [Triple(variant, fold, seed)
            for variant in plan.variants()
            for fold in range(plan.n_folds)
            for seed in plan.seeds]


def load_manifest(path: PathLike) -> Optional[dict]:
    path = Path(path)
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        logger.warning("ignoring unreadable manifest %s: %s", path, e)
        return None


def _is_intact(entry: Optional[dict], run_dir: Path) -> bool:
    if not entry or entry.get("status") != STATUS_COMPLETE or not entry.get("files"):
        return False
    for name, digest in entry["files"].items():
        path = run_dir / name
        if not path.is_file() or file_sha256(path) != digest:
            return False
    return True


def _consolidate(output_dir: Path, triples: Sequence[Triple],
                 outcomes: Dict[str, TripleOutcome]) -> Tuple[Path, Path]:
    result_lines: List[str] = []
    confidence_lines: List[str] = []
    for triple in triples:
        if outcomes[triple.key].status != STATUS_COMPLETE:
            continue
        run_dir = output_dir / "runs" / triple.key
        for name, lines in ((RUN_RESULT_FILE, result_lines), (CONFIDENCE_FILE, confidence_lines)):
            text = (run_dir / name).read_text(encoding="utf-8").splitlines(keepends=True)
            if not lines:
                lines.extend(text)
            else:
                lines.extend(text[1:])
    results_path = output_dir / RESULTS_FILE
    confidence_path = output_dir / CONFIDENCE_FILE
    _write_text(results_path, "".join(result_lines))
    _write_text(confidence_path, "".join(confidence_lines))
    return results_path, confidence_path


def run_experiment(plan: RunPlan, output_dir: Optional[PathLike] = None, workers: Optional[int] = None,
                   resume: bool = False, quiet: bool = False) -> RunArtifact:
    """
    Execute every triple of a plan and consolidate the results.

    With ``resume`` a triple is skipped when the manifest records it complete
    and all of its files still hash to the recorded values.
    """
    output_dir = Path(output_dir or plan.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    workers = workers or plan.workers

    normalized = normalize_config(plan)
    config_hash = text_sha256(normalized)
    _write_text(output_dir / NORMALIZED_CONFIG_FILE, normalized)

    previous = load_manifest(output_dir / MANIFEST_FILE) if resume else None
    if previous is not None:
        written_by = previous.get("version", "")
        if not same_major_version(written_by) or not check_version_compatibility(written_by):
            logger.warning("manifest written by version %s cannot be resumed by %s; rerunning every triple",
                           written_by, __version__)
            previous = None
        elif previous.get("config_sha256") != config_hash:
            logger.warning("configuration changed since the last run; rerunning every triple")
            previous = None

    triples = plan_triples(plan)
    outcomes: Dict[str, TripleOutcome] = {}
    pending: List[Triple] = []
    for triple in triples:
        entry = (previous or {}).get("triples", {}).get(triple.key)
        if _is_intact(entry, output_dir / "runs" / triple.key):
            outcomes[triple.key] = TripleOutcome(triple.key, STATUS_COMPLETE, entry.get("message", ""),
                                                 dict(entry["files"]))
        else:
            pending.append(triple)
    if resume and len(pending) < len(triples):
        logger.info("resuming: %d of %d triples already complete", len(triples) - len(pending), len(triples))

    if pending:
        tasks, prototypes = load_inputs(plan)
        sequences = fold_sequences(tasks, plan.n_folds, plan.get("data.seed"))
        per_fold = fold_prototypes(plan, sequences, prototypes)
        jobs = [TripleJob(triple, sequences[triple.fold], per_fold[triple.fold], plan.similarity,
                          str(output_dir / "runs" / triple.key)) for triple in pending]
        with ProgressReporter(len(jobs), "triples", quiet=quiet) as progress:
            if workers > 1 and len(jobs) > 1:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    futures = [pool.submit(execute_triple, job) for job in jobs]
                    for future in as_completed(futures):
                        outcome = future.result()
                        outcomes[outcome.key] = outcome
                        progress.advance(message=outcome.key)
            else:
                for job in jobs:
                    outcome = execute_triple(job)
                    outcomes[outcome.key] = outcome
                    progress.advance(message=outcome.key)

    results_path, confidence_path = _consolidate(output_dir, triples, outcomes)
    version_info = get_version_info()
    manifest = {
        "version": version_info["full_version"],
        "formats": version_info["formats"],
        "config_sha256": config_hash,
        "triples": {
            triple.key: {
                "method": triple.method,
                "buffer_capacity": triple.variant.buffer_capacity,
                "fold": triple.fold,
                "seed": triple.seed,
                **{k: v for k, v in asdict(outcomes[triple.key]).items() if k != "key"},
            }
            for triple in triples
        },
        "consolidated": {
            RESULTS_FILE: file_sha256(results_path),
            CONFIDENCE_FILE: file_sha256(confidence_path),
            NORMALIZED_CONFIG_FILE: config_hash,
        },
    }
    manifest_path = output_dir / MANIFEST_FILE
    _write_text(manifest_path, json.dumps(manifest, sort_keys=True, indent=2) + "\n")

    artifact = RunArtifact(output_dir, results_path, confidence_path, manifest_path, outcomes,
                           [triple.key for triple in pending])
    if artifact.failed:
        logger.error("%d of %d triples failed: %s", len(artifact.failed), len(triples), ", ".join(artifact.failed))
    logger.info("wrote %s, %s and %s", results_path, confidence_path, manifest_path)
    return artifact


def generate_inputs(plan: RunPlan, output_dir: PathLike) -> Tuple[Path, Path]:
    """Write the plan's synthetic task sequence and prototypes as ZSLB/ZSLP files."""
    output_dir = Path(output_dir)
    config = plan.synthetic_config()
    tasks = generate_task_sequence(config)
    prototypes = synthesize_prototypes(tasks, config)
    embeddings_path = output_dir / EMBEDDINGS_FILE
    prototypes_path = output_dir / PROTOTYPES_FILE
    write_embedding_file(tasks, embeddings_path)
    write_prototype_file(prototypes, prototypes_path)
    return embeddings_path, prototypes_path
