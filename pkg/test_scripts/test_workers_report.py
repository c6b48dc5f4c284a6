"""
Tests for the experiment runner, the report and the command-line verbs.
"""
import csv
import json
import re
import shutil
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np
from matplotlib.axes import Axes

from main import main
from scripts.config import parse_config_text
from scripts.datagen import class_centroids, generate_task_sequence
from scripts.embedding_io import write_embedding_file
from scripts.error_handling import EXIT_CONFIG, EXIT_FORMAT, EXIT_OK, EXIT_PARTIAL, ReportError
from scripts.evaluation import summarize_scores
from scripts.report import (
    SUMMARY_FILE, Dispersion, VariantSummary, dispersion, emit_report, plot_confidence, rank_marks
)
from scripts.workers import (
    CONFIDENCE_FILE, MANIFEST_FILE, METRIC_FIELDS, NORMALIZED_CONFIG_FILE, RESULT_KEY_FIELDS, RESULTS_FILE,
    RUN_RESULT_FILE, fold_prototypes, fold_sequences, load_inputs, matrix_fields, plan_triples, run_experiment
)

TINY_PLAN = """
[data]
dim = 8
tasks = 2, 2
slides_per_class = 6
regions_per_slide = 2
patches_per_region = 2

[run]
methods = finetune, derpp, zeroslide
seeds = 0, 1
n_folds = 2

[finetune]
epochs = 1
lr = 0.1

[derpp]
buffer_capacity = 4
"""


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


class RunTestCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.out = Path(self.tmp) / "results"
        self.plan = parse_config_text(TINY_PLAN)

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


class TestRunExperiment(RunTestCase):

    def test_results_layout(self):
        artifact = run_experiment(self.plan, self.out, quiet=True)
        self.assertEqual(artifact.exit_code, EXIT_OK)
        self.assertEqual(len(artifact.outcomes), 3 * 2 * 2)

        with open(artifact.results_csv, newline="", encoding="utf-8") as f:
            header = next(csv.reader(f))
        self.assertEqual(header, RESULT_KEY_FIELDS + METRIC_FIELDS + matrix_fields(2))

        rows = read_rows(artifact.results_csv)
        keys = [(r["method"], r["buffer_capacity"], r["fold"], r["seed"]) for r in rows]
        expected = [(t.method, "" if t.variant.buffer_capacity is None else str(t.variant.buffer_capacity),
                     str(t.fold), str(t.seed)) for t in plan_triples(self.plan)]
        self.assertEqual(keys, expected)
        for row in rows:
            self.assertGreaterEqual(float(row["masked_acc"]), float(row["acc"]))

        confidence = read_rows(artifact.confidence_csv)
        self.assertEqual({r["score_kind"] for r in confidence if r["method"] == "zeroslide"}, {"cosine"})
        self.assertEqual({r["score_kind"] for r in confidence if r["method"] == "derpp"}, {"softmax_prob"})

    def test_run_directories(self):
        run_experiment(self.plan, self.out, quiet=True)
        runs = self.out / "runs"
        self.assertEqual(sorted(p.name for p in (runs / "derpp@4_fold0_seed0").iterdir()),
                         ["buffer.zslr", CONFIDENCE_FILE, "model.zslm", RUN_RESULT_FILE])
        self.assertEqual(sorted(p.name for p in (runs / "zeroslide_fold1_seed1").iterdir()),
                         [CONFIDENCE_FILE, RUN_RESULT_FILE])

    def test_manifest(self):
        artifact = run_experiment(self.plan, self.out, quiet=True)
        manifest = json.loads(artifact.manifest.read_text(encoding="utf-8"))
        self.assertEqual(set(manifest), {"version", "formats", "config_sha256", "triples", "consolidated"})
        entry = manifest["triples"]["finetune_fold1_seed0"]
        self.assertEqual(entry["status"], "complete")
        self.assertEqual((entry["method"], entry["fold"], entry["seed"]), ("finetune", 1, 0))
        self.assertIsNone(entry["buffer_capacity"])
        self.assertIn(RUN_RESULT_FILE, entry["files"])
        self.assertEqual(set(manifest["consolidated"]), {RESULTS_FILE, CONFIDENCE_FILE, NORMALIZED_CONFIG_FILE})
        self.assertTrue((self.out / NORMALIZED_CONFIG_FILE).is_file())

    def test_rerun_is_byte_identical(self):
        run_experiment(self.plan, self.out, quiet=True)
        first = {name: (self.out / name).read_bytes() for name in (RESULTS_FILE, CONFIDENCE_FILE, MANIFEST_FILE)}
        other = Path(self.tmp) / "again"
        run_experiment(self.plan, other, quiet=True)
        for name, content in first.items():
            self.assertEqual((other / name).read_bytes(), content, name)

    def test_pool_matches_serial(self):
        serial = run_experiment(self.plan, self.out, quiet=True)
        pooled = run_experiment(self.plan, Path(self.tmp) / "pooled", workers=2, quiet=True)
        self.assertEqual(pooled.results_csv.read_bytes(), serial.results_csv.read_bytes())


class TestIngestedPrototypes(RunTestCase):

    def test_centroids_come_from_each_fold_train_split(self):
        path = Path(self.tmp) / "embeddings.zslb"
        write_embedding_file(generate_task_sequence(self.plan.synthetic_config()), path)
        text = TINY_PLAN.replace("[data]\n", f"[data]\nsource = file\npath = {path.as_posix()}\n")
        plan = parse_config_text(text + "\n[prototypes]\nvariants = 1\nnoise_sigma = 0.0\n")

        tasks, shared = load_inputs(plan)
        self.assertIsNone(shared)
        sequences = fold_sequences(tasks, plan.n_folds, plan.get("data.seed"))
        per_fold = fold_prototypes(plan, sequences, shared)
        for sequence, specs in zip(sequences, per_fold):
            for task, spec in zip(sequence, specs):
                centroids = class_centroids(task)
                for local in range(task.class_count):
                    expected = centroids[local] / np.linalg.norm(centroids[local])
                    np.testing.assert_allclose(spec.variants[local][0], expected, atol=1e-6)
        self.assertFalse(np.allclose(per_fold[0][0].variants[0], per_fold[1][0].variants[0]))

        artifact = run_experiment(plan, self.out, quiet=True)
        self.assertEqual(artifact.exit_code, EXIT_OK)

    def test_generated_means_are_shared(self):
        tasks, shared = load_inputs(self.plan)
        sequences = fold_sequences(tasks, self.plan.n_folds, self.plan.get("data.seed"))
        per_fold = fold_prototypes(self.plan, sequences, shared)
        self.assertIsNotNone(shared)
        self.assertTrue(all(specs is shared for specs in per_fold))


class TestResume(RunTestCase):

    def test_resume_skips_intact_triples(self):
        run_experiment(self.plan, self.out, quiet=True)
        results = (self.out / RESULTS_FILE).read_bytes()
        artifact = run_experiment(self.plan, self.out, resume=True, quiet=True)
        self.assertEqual(artifact.recomputed, [])
        self.assertEqual((self.out / RESULTS_FILE).read_bytes(), results)

    def test_resume_reruns_damaged_triple(self):
        run_experiment(self.plan, self.out, quiet=True)
        results = (self.out / RESULTS_FILE).read_bytes()
        (self.out / "runs" / "derpp@4_fold1_seed0" / RUN_RESULT_FILE).unlink()
        artifact = run_experiment(self.plan, self.out, resume=True, quiet=True)
        self.assertEqual(artifact.recomputed, ["derpp@4_fold1_seed0"])
        self.assertEqual((self.out / RESULTS_FILE).read_bytes(), results)

    def test_changed_config_reruns_everything(self):
        run_experiment(self.plan, self.out, quiet=True)
        changed = parse_config_text(TINY_PLAN.replace("lr = 0.1", "lr = 0.2"))
        artifact = run_experiment(changed, self.out, resume=True, quiet=True)
        self.assertEqual(len(artifact.recomputed), 12)

    def test_manifest_from_other_versions_is_not_resumed(self):
        run_experiment(self.plan, self.out, quiet=True)
        manifest_path = self.out / MANIFEST_FILE
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        for written_by in ("2.0.0", "1.99.0", "not-a-version"):
            manifest["version"] = written_by
            manifest_path.write_text(json.dumps(manifest), encoding="utf-8")
            artifact = run_experiment(self.plan, self.out, resume=True, quiet=True)
            self.assertEqual(len(artifact.recomputed), 12, written_by)


class TestFailureIsolation(RunTestCase):

    def test_failed_triples_are_excluded(self):
        with patch("scripts.workers.run_zeroslide", side_effect=RuntimeError("boom")):
            artifact = run_experiment(self.plan, self.out, quiet=True)
        self.assertEqual(artifact.exit_code, EXIT_PARTIAL)
        self.assertEqual(len(artifact.failed), 4)
        self.assertNotIn("zeroslide", {r["method"] for r in read_rows(artifact.results_csv)})
        manifest = json.loads(artifact.manifest.read_text(encoding="utf-8"))
        entry = manifest["triples"]["zeroslide_fold0_seed0"]
        self.assertEqual(entry["status"], "failed")
        self.assertIn("boom", entry["message"])

    def test_resume_retries_failed_triples(self):
        with patch("scripts.workers.run_zeroslide", side_effect=RuntimeError("boom")):
            run_experiment(self.plan, self.out, quiet=True)
        artifact = run_experiment(self.plan, self.out, resume=True, quiet=True)
        self.assertEqual(len(artifact.recomputed), 4)
        self.assertEqual(artifact.exit_code, EXIT_OK)


class TestReport(RunTestCase):

    def test_summary_and_plots(self):
        run_experiment(self.plan, self.out, quiet=True)
        artifact = emit_report(self.out)
        text = (self.out / SUMMARY_FILE).read_text(encoding="utf-8")
        for name in ("finetune", "derpp@4", "zeroslide"):
            self.assertIn(name, text)
        self.assertIn("ddof = 1", text)
        self.assertEqual(len(artifact.plots), 3)
        for path in artifact.plots:
            svg = path.read_text(encoding="utf-8")
            self.assertRegex(svg, r'viewBox="0 0 800(\.0+)? 400(\.0+)?"')
            self.assertIsNone(re.search(r"<dc:date>", svg))

    def test_report_is_byte_stable(self):
        run_experiment(self.plan, self.out, quiet=True)
        first = emit_report(self.out)
        contents = [p.read_bytes() for p in first.plots] + [first.summary.read_bytes()]
        second = emit_report(self.out)
        self.assertEqual([p.read_bytes() for p in second.plots] + [second.summary.read_bytes()], contents)

    def test_dominance_violation(self):
        run_experiment(self.plan, self.out, quiet=True)
        rows = read_rows(self.out / RESULTS_FILE)
        rows[0]["acc"], rows[0]["masked_acc"] = "0.9", "0.1"
        with open(self.out / RESULTS_FILE, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        with self.assertRaises(ReportError):
            emit_report(self.out)

    def test_missing_or_empty_results(self):
        with self.assertRaises(ReportError):
            emit_report(self.out)
        self.out.mkdir(parents=True)
        (self.out / RESULTS_FILE).write_text("method,acc\n", encoding="utf-8")
        with self.assertRaises(ReportError):
            emit_report(self.out)


class TestReportHelpers(unittest.TestCase):

    def test_dispersion(self):
        d = dispersion([1.0, 2.0, 3.0, None])
        self.assertEqual(d.count, 3)
        self.assertAlmostEqual(d.mean, 2.0)
        self.assertAlmostEqual(d.std, 1.0)
        self.assertAlmostEqual(d.stderr, 1.0 / 3 ** 0.5)
        single = dispersion([0.4])
        self.assertEqual((single.mean, single.std, single.stderr), (0.4, None, None))
        self.assertEqual(dispersion([None]).count, 0)

    def test_rank_marks(self):
        def summary(name, acc, forgetting):
            return VariantSummary(name, 2, {"acc": Dispersion(acc, None, None, 2),
                                            "forgetting": Dispersion(forgetting, None, None, 2)})

        summaries = [summary("a", 0.9, 0.3), summary("b", 0.9, 0.1), summary("c", 0.5, 0.2)]
        self.assertEqual(rank_marks(summaries, "acc"), {"a": "*", "b": "*", "c": "+"})
        self.assertEqual(rank_marks(summaries, "forgetting"), {"b": "*", "c": "+"})
        self.assertEqual(rank_marks(summaries[:1], "acc"), {"a": "*"})
        self.assertEqual(rank_marks(summaries[:2], "acc"), {"a": "*", "b": "*"})
        self.assertEqual(rank_marks([summary("d", None, None)], "acc"), {})

    def test_boxes_are_drawn_at_summary_statistics(self):
        summaries = [summarize_scores(0, "softmax_prob", [0.1, 0.4, 0.5, 0.7, 0.95]),
                     summarize_scores(1, "softmax_prob", [0.2, 0.25, 0.9])]
        drawn = []
        original = Axes.bxp

        def recording_bxp(ax, stats, *args, **kwargs):
            artists = original(ax, stats, *args, **kwargs)
            drawn.append(artists)
            return artists

        with tempfile.TemporaryDirectory() as tmp, patch.object(Axes, "bxp", recording_bxp):
            plot_confidence("buro", summaries, Path(tmp) / "confidence_buro.svg")
        (artists,) = drawn
        for i, s in enumerate(summaries):
            np.testing.assert_allclose(artists["medians"][i].get_ydata(), [s.median, s.median])
            box = artists["boxes"][i].get_ydata()
            self.assertAlmostEqual(min(box), s.q1)
            self.assertAlmostEqual(max(box), s.q3)
            whiskers = np.concatenate([artists["whiskers"][2 * i].get_ydata(),
                                       artists["whiskers"][2 * i + 1].get_ydata()])
            self.assertAlmostEqual(whiskers.min(), s.minimum)
            self.assertAlmostEqual(whiskers.max(), s.maximum)
            np.testing.assert_allclose(artists["means"][i].get_ydata(), [s.mean])


class TestCommandLine(RunTestCase):

    def write_config(self, text):
        path = Path(self.tmp) / "plan.cfg"
        path.write_text(text, encoding="utf-8")
        return str(path)

    def test_generate_validate_run_report(self):
        config = self.write_config(TINY_PLAN)
        data = Path(self.tmp) / "data"
        self.assertEqual(main(["--quiet", "generate", "--config", config, "--out", str(data)]), EXIT_OK)
        self.assertEqual(main(["validate", str(data / "embeddings.zslb"), str(data / "prototypes.zslp")]),
                         EXIT_OK)
        self.assertEqual(main(["--quiet", "run", "--config", config, "--out", str(self.out)]), EXIT_OK)
        self.assertEqual(main(["--quiet", "run", "--config", config, "--out", str(self.out), "--resume"]),
                         EXIT_OK)
        self.assertEqual(main(["report", "--out", str(self.out)]), EXIT_OK)
        self.assertTrue((self.out / SUMMARY_FILE).is_file())

    def test_validate_rejects_junk(self):
        junk = Path(self.tmp) / "junk.zslb"
        junk.write_bytes(b"NOPE" + bytes(16))
        self.assertEqual(main(["validate", str(junk)]), EXIT_FORMAT)

    def test_bad_config(self):
        config = self.write_config(TINY_PLAN + "[derpp]\nbuffersize = 3\n")
        self.assertEqual(main(["run", "--config", config, "--out", str(self.out)]), EXIT_CONFIG)
        self.assertEqual(main(["run", "--config", str(Path(self.tmp) / "missing.cfg"),
                               "--out", str(self.out)]), EXIT_CONFIG)

    def test_bad_workers(self):
        config = self.write_config(TINY_PLAN)
        self.assertEqual(main(["run", "--config", config, "--out", str(self.out), "--workers", "0"]),
                         EXIT_CONFIG)


if __name__ == "__main__":
    unittest.main()
