"""
Summary table and confidence boxplots for a results directory.

Reads the consolidated ``results.csv`` and ``confidence.csv`` written by
``run_experiment`` and writes ``summary.txt`` plus one
``confidence_<variant>.svg`` per method variant.
"""
import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from scripts.error_handling import ReportError
from scripts.evaluation import AccuracyMatrix, ConfidenceSummary, no_positive_transfer, summarize_scores
from scripts.logger import get_logger
from scripts.workers import CONFIDENCE_FILE, METRIC_FIELDS, RESULTS_FILE

logger = get_logger(__name__)

SUMMARY_FILE = "summary.txt"
METRIC_TITLES = {
    "acc": "ACC",
    "masked_acc": "MASKED ACC",
    "macc": "mACC",
    "bwt": "BWT",
    "forgetting": "Forgetting",
}
LOWER_IS_BETTER = ("forgetting",)
IDENTITY_TOLERANCE = 1e-12

SVG_WIDTH, SVG_HEIGHT = 800, 400
# matplotlib writes SVG in points, 72 per inch.
SVG_FIGSIZE = (SVG_WIDTH / 72.0, SVG_HEIGHT / 72.0)
SVG_HASHSALT = "zeroslide-bench"


@dataclass
class Dispersion:
    mean: Optional[float]
    std: Optional[float]
    stderr: Optional[float]
    count: int


@dataclass
class VariantSummary:
    name: str
    runs: int
    metrics: Dict[str, Dispersion] = field(default_factory=dict)


@dataclass
class ReportArtifact:
    summary: Path
    plots: List[Path]
    variants: List[VariantSummary]


def dispersion(values: Sequence[Optional[float]]) -> Dispersion:
    """
    Mean, sample standard deviation and standard error of the present values.

    std and stderr are None for a single value; everything is None when no
    value is present.
    """
    present = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if present.size == 0:
        return Dispersion(None, None, None, 0)
    mean = float(present.mean())
    if present.size < 2:
        return Dispersion(mean, None, None, 1)
    std = float(present.std(ddof=1))
    return Dispersion(mean, std, std / math.sqrt(present.size), int(present.size))


def _parse_optional(text: str) -> Optional[float]:
    return None if text == "" else float(text)


def variant_name(row: Dict[str, str]) -> str:
    capacity = row.get("buffer_capacity", "")
    return f"{row['method']}@{capacity}" if capacity else row["method"]


def read_csv(path: Path) -> List[Dict[str, str]]:
    if not path.is_file():
        raise ReportError(f"missing {path}")
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def ci_matrix(row: Dict[str, str]) -> AccuracyMatrix:
    """Rebuild the CLASS-IL matrix of one run from its a_ci_k_i columns."""
    n = 0
    while f"a_ci_{n}_{n}" in row:
        n += 1
    return AccuracyMatrix.from_rows([[float(row[f"a_ci_{k}_{i}"]) for i in range(k + 1)] for k in range(n)])


def check_dominance(rows: Sequence[Dict[str, str]]) -> None:
    """Every run must have MASKED ACC >= ACC, compared exactly."""
    for row in rows:
        acc, masked = float(row["acc"]), float(row["masked_acc"])
        if masked < acc:
            raise ReportError(f"{variant_name(row)} fold {row['fold']} seed {row['seed']}: "
                              f"MASKED ACC {masked!r} < ACC {acc!r}")


def check_forgetting_identity(rows: Sequence[Dict[str, str]]) -> Tuple[int, int]:
    """
    Count runs where Forgetting == -BWT among those with no positive transfer.

    Returns (holding, applicable).
    """
    holding = applicable = 0
    for row in rows:
        bwt, forgetting = _parse_optional(row["bwt"]), _parse_optional(row["forgetting"])
        if bwt is None or forgetting is None or not no_positive_transfer(ci_matrix(row)):
            continue
        applicable += 1
        if abs(forgetting + bwt) <= IDENTITY_TOLERANCE:
            holding += 1
        else:
            logger.warning("%s fold %s seed %s: Forgetting %r != -BWT %r despite no positive transfer",
                           variant_name(row), row["fold"], row["seed"], forgetting, bwt)
    logger.info("Forgetting == -BWT holds for %d of %d runs without positive transfer", holding, applicable)
    return holding, applicable


def summarize_variants(rows: Sequence[Dict[str, str]]) -> List[VariantSummary]:
    grouped: Dict[str, List[Dict[str, str]]] = defaultdict(list)
    for row in rows:
        grouped[variant_name(row)].append(row)
    summaries = []
    for name, runs in grouped.items():
        summary = VariantSummary(name, len(runs))
        for metric in METRIC_FIELDS:
            summary.metrics[metric] = dispersion([_parse_optional(run[metric]) for run in runs])
        if len(runs) == 1:
            logger.warning("%s: single run, dispersion unavailable", name)
        summaries.append(summary)
    return summaries


def rank_marks(summaries: Sequence[VariantSummary], metric: str) -> Dict[str, str]:
    """'*' for the best mean of a column, '+' for the second best value if there is one; ties share a mark."""
    means = sorted({s.metrics[metric].mean for s in summaries if s.metrics[metric].mean is not None},
                   reverse=metric not in LOWER_IS_BETTER)
    marks = {}
    for s in summaries:
        mean = s.metrics[metric].mean
        if mean is None:
            continue
        if mean == means[0]:
            marks[s.name] = "*"
        elif len(means) > 1 and mean == means[1]:
            marks[s.name] = "+"
    return marks


def _format_cell(d: Dispersion, mark: str) -> str:
    if d.mean is None:
        return "-"
    if d.std is None:
        return f"{d.mean:.4f} ± - (se -){mark}"
    return f"{d.mean:.4f} ± {d.std:.4f} (se {d.stderr:.4f}){mark}"


def format_summary(summaries: Sequence[VariantSummary], run_count: int) -> str:
    header = ["method", "runs"] + [METRIC_TITLES[m] for m in METRIC_FIELDS]
    marks = {metric: rank_marks(summaries, metric) for metric in METRIC_FIELDS}
    table = [header] + [
        [s.name, str(s.runs)] + [_format_cell(s.metrics[m], marks[m].get(s.name, "")) for m in METRIC_FIELDS]
        for s in summaries
    ]
    widths = [max(len(line[i]) for line in table) for i in range(len(header))]

    lines = [
        "ZeroSlide benchmark summary",
        f"{run_count} runs, {len(summaries)} method variants",
        "cells: mean ± std (se stderr); std is the sample standard deviation (ddof = 1), "
        "stderr = std / sqrt(runs); '-' when unavailable",
        "'*' best and '+' second best per column; higher is better except Forgetting",
        "buffer capacity (method@capacity) counts total buffer items",
        "trained methods use plain SGD with harness defaults; absolute accuracies are not "
        "comparable to published results",
        "",
    ]
    for line in table:
        lines.append("  ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip())
    return "\n".join(lines) + "\n"


def final_stage_summaries(rows: Sequence[Dict[str, str]]) -> Dict[str, List[ConfidenceSummary]]:
    """Per variant, one summary per task from the records of the last evaluation stage."""
    by_variant: Dict[str, List[Dict[str, str]]] = defaultdict(list)
    for row in rows:
        by_variant[variant_name(row)].append(row)
    result = {}
    for name, records in by_variant.items():
        final_stage = max(int(r["train_stage"]) for r in records)
        groups: Dict[Tuple[int, str], List[float]] = defaultdict(list)
        for r in records:
            if int(r["train_stage"]) == final_stage:
                groups[(int(r["eval_task"]), r["score_kind"])].append(float(r["score"]))
        result[name] = [summarize_scores(task, kind, scores) for (task, kind), scores in sorted(groups.items())]
    return result


def plot_confidence(name: str, summaries: Sequence[ConfidenceSummary], path: Path) -> Path:
    """One box per task: min/max whiskers, quartile box, median line, mean marker."""
    stats = [{
        "label": f"task {s.eval_task}",
        "whislo": s.minimum,
        "q1": s.q1,
        "med": s.median,
        "q3": s.q3,
        "whishi": s.maximum,
        "mean": s.mean,
        "fliers": [],
    } for s in summaries]
    kind = summaries[0].score_kind if summaries else ""

    with matplotlib.rc_context({"svg.hashsalt": SVG_HASHSALT, "svg.fonttype": "path"}):
        fig = Figure(figsize=SVG_FIGSIZE)
        ax = fig.add_subplot(1, 1, 1)
        ax.bxp(stats, showmeans=True, showfliers=False)
        ax.set_title(f"{name}: true-label confidence after the final task")
        ax.set_xlabel("task")
        ax.set_ylabel(kind)
        ax.grid(axis="y", alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def emit_report(results_dir: Union[str, Path]) -> ReportArtifact:
    """
    Write the summary table and confidence plots of a results directory.

    Raises ReportError when there are no results or when a run violates
    MASKED ACC >= ACC.
    """
    results_dir = Path(results_dir)
    rows = read_csv(results_dir / RESULTS_FILE)
    if not rows:
        raise ReportError(f"{results_dir / RESULTS_FILE} has no completed runs")

    check_dominance(rows)
    check_forgetting_identity(rows)
    summaries = summarize_variants(rows)

    summary_path = results_dir / SUMMARY_FILE
    summary_path.write_text(format_summary(summaries, len(rows)), encoding="utf-8")
    logger.info("wrote %s", summary_path)

    plots = []
    confidence_rows = read_csv(results_dir / CONFIDENCE_FILE)
    for name, task_summaries in final_stage_summaries(confidence_rows).items():
        path = plot_confidence(name, task_summaries, results_dir / f"confidence_{name}.svg")
        plots.append(path)
        logger.info("wrote %s", path)
    return ReportArtifact(summary_path, plots, summaries)
