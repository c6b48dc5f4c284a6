"""
End-to-end properties of the harness on small synthetic sequences.

These run the real trainers and the prototype bank; they are slower than the
unit tests (a couple of minutes in total).
"""
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np
from scipy import stats

from scripts import aggregator
from scripts.buffers import ReplayBuffer, ReplayItemDer, reservoir_insert
from scripts.config import parse_config_text
from scripts.core import LabelSpace
from scripts.datagen import (
    SlideBag, SyntheticConfig, default_task_specs, generate_task_sequence, synthesize_prototypes, with_split
)
from scripts.evaluation import AccuracyMatrix, compute_metrics, no_positive_transfer
from scripts.gradcheck import check_gradient
from scripts.report import check_dominance, read_csv
from scripts.trainers import (
    EwcState, TrainerSettings, derpp_composite, ewc_loss_and_grad, run_method_sequence, train_ewc
)
from scripts.workers import RESULTS_FILE, run_experiment
from scripts.zeroslide import run_zeroslide


def brute_force_metrics(rows):
    """Straight loops over a lower-triangular accuracy table."""
    n = len(rows)
    acc = sum(rows[n - 1][i] for i in range(n)) / n
    stage_means = []
    for k in range(n):
        total = 0.0
        for i in range(k + 1):
            total += rows[k][i]
        stage_means.append(total / (k + 1))
    macc = sum(stage_means) / n
    bwt = sum(rows[n - 1][i] - rows[i][i] for i in range(n - 1)) / (n - 1)
    forgetting = 0.0
    for i in range(n - 1):
        best = max(rows[k][i] for k in range(i, n))
        forgetting += best - rows[n - 1][i]
    return acc, macc, bwt, forgetting / (n - 1)


def random_bag(rng, space, dim, regions, global_id, index):
    patches = rng.standard_normal((regions, 2, dim))
    return SlideBag(f"g{index}", space.from_global(global_id), patches.mean(axis=1), patches)


def anchored_vector(params, class_count):
    return np.concatenate([params.attention_v, params.attention_u,
                           params.head_weights[:class_count].reshape(-1), params.head_bias[:class_count]])


class TestDominanceAndStability(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.config = SyntheticConfig()
        cls.tasks = generate_task_sequence(cls.config)
        cls.result = run_zeroslide(cls.tasks, synthesize_prototypes(cls.tasks, cls.config))

    def test_task_il_columns_are_constant(self):
        for i in range(len(self.tasks)):
            column = self.result.ti.column(i)
            self.assertTrue(np.all(column == column[0]), f"task {i}")
        self.assertEqual(compute_metrics(self.result.ti, self.result.ti).forgetting, 0.0)

    def test_forgetting_is_negative_bwt(self):
        metrics = compute_metrics(self.result.ci, self.result.ti)
        self.assertTrue(no_positive_transfer(self.result.ci))
        self.assertLessEqual(abs(metrics.forgetting + metrics.bwt), 1e-12)

    def test_masked_acc_dominates_acc(self):
        metrics = compute_metrics(self.result.ci, self.result.ti)
        self.assertGreaterEqual(metrics.masked_acc, metrics.acc)


class TestMetricsOracle(unittest.TestCase):

    ROWS = [[0.9], [0.8, 0.85], [0.7, 0.8, 0.9]]

    def test_hand_matrix(self):
        matrix = AccuracyMatrix.from_rows(self.ROWS)
        report = compute_metrics(matrix, matrix)
        self.assertAlmostEqual(report.acc, 0.8, delta=1e-9)
        self.assertAlmostEqual(report.macc, 0.841667, delta=1e-6)
        self.assertAlmostEqual(report.bwt, -0.125, delta=1e-9)
        self.assertAlmostEqual(report.forgetting, 0.125, delta=1e-9)

        acc, macc, bwt, forgetting = brute_force_metrics(self.ROWS)
        self.assertAlmostEqual(report.acc, acc, delta=1e-9)
        self.assertAlmostEqual(report.macc, macc, delta=1e-9)
        self.assertAlmostEqual(report.bwt, bwt, delta=1e-9)
        self.assertAlmostEqual(report.forgetting, forgetting, delta=1e-9)

    def test_best_accuracy_may_come_last(self):
        # task 0 peaks only after the final task, so it contributes no forgetting
        rows = [[0.5], [0.4, 0.8], [0.9, 0.6, 0.7]]
        matrix = AccuracyMatrix.from_rows(rows)
        report = compute_metrics(matrix, matrix)
        self.assertAlmostEqual(report.forgetting, 0.1, delta=1e-9)
        self.assertAlmostEqual(report.bwt, 0.1, delta=1e-9)
        self.assertFalse(report.no_positive_transfer)
        acc, macc, bwt, forgetting = brute_force_metrics(rows)
        self.assertAlmostEqual(report.acc, acc, delta=1e-9)
        self.assertAlmostEqual(report.macc, macc, delta=1e-9)
        self.assertAlmostEqual(report.bwt, bwt, delta=1e-9)
        self.assertAlmostEqual(report.forgetting, forgetting, delta=1e-9)


class TestGradientFidelity(unittest.TestCase):

    def test_random_instances(self):
        rng = np.random.default_rng(2024)
        for trial in range(100):
            dim = int(rng.integers(2, 9))
            regions = int(rng.integers(1, 5))
            classes = int(rng.integers(2, 5))
            space = LabelSpace([classes])
            params = aggregator.init_params(dim, "gated_attention", classes)
            params = params.with_flat(0.5 * rng.standard_normal(params.size))
            bags = [random_bag(rng, space, dim, regions, int(rng.integers(classes)), i) for i in range(3)]
            target = bags[0].label.global_id

            def check(objective, analytic, name):
                ok, error = check_gradient(objective, params.flat(), analytic.flat())
                self.assertTrue(ok, f"trial {trial} {name}: relative error {error:.2e}")

            _, grads = aggregator.loss_and_grad(bags[0], target, params)
            check(lambda flat: aggregator.loss(bags[0], target, params.with_flat(flat)), grads, "finetune")

            anchor_classes = int(rng.integers(1, classes + 1))
            anchor = aggregator.init_params(dim, "gated_attention", anchor_classes)
            anchor = anchor.with_flat(0.5 * rng.standard_normal(anchor.size))
            state = EwcState(float(rng.uniform(0.1, 10.0)), anchor, rng.random(anchor.size))
            _, grads = ewc_loss_and_grad(bags[0], target, params, state)
            check(lambda flat: ewc_loss_and_grad(bags[0], target, params.with_flat(flat), state)[0],
                  grads, "ewc")

            distill = [ReplayItemDer(bags[1], rng.standard_normal(int(rng.integers(1, classes + 1))))]
            label = [ReplayItemDer(bags[2], np.zeros(classes))]
            alpha, beta = float(rng.uniform(0, 1)), float(rng.uniform(0, 1))
            _, grads, _ = derpp_composite(params, bags[0], target, distill, label, alpha, beta)
            check(lambda flat: derpp_composite(params.with_flat(flat), bags[0], target, distill, label,
                                               alpha, beta)[0], grads, "derpp")


class TestEwcDrift(unittest.TestCase):

    def test_drift_shrinks_with_lambda(self):
        config = SyntheticConfig(tasks=default_task_specs([2, 2], 12), dim=16, regions_per_slide=4,
                                 patches_per_region=4, class_separation=0.3, seed=3)
        first, second = [with_split(task, val=[], test=[]) for task in generate_task_sequence(config)]
        drifts = []
        for lambda_ in (0.0, 1.0, 10.0, 100.0, 1000.0):
            initial = aggregator.init_params(16, "gated_attention", 2, rng=np.random.default_rng(0))
            anchor, state = train_ewc(initial, first, EwcState(lambda_), 3, 0.1, seed=1)
            grown = aggregator.grow_head(anchor, 2)
            moved, _ = train_ewc(grown, second, state, 3, 0.1, seed=2)
            drifts.append(float(np.linalg.norm(anchored_vector(moved, 2) - anchor.flat())))
        for weaker, stronger in zip(drifts, drifts[1:]):
            self.assertLessEqual(stronger, weaker + 1e-12, drifts)

    def test_strong_lambda_pins_informative_coordinates(self):
        config = SyntheticConfig(tasks=default_task_specs([2, 2], 12), dim=16, regions_per_slide=4,
                                 patches_per_region=4, class_separation=0.3, seed=3)
        first, second = [with_split(task, val=[], test=[]) for task in generate_task_sequence(config)]
        initial = aggregator.init_params(16, "gated_attention", 2, rng=np.random.default_rng(0))
        anchor, state = train_ewc(initial, first, EwcState(1e6), 1, 0.1, seed=1)
        moved, _ = train_ewc(aggregator.grow_head(anchor, 2), second, state, 3, 0.1, seed=2)
        # coordinates the first task's Fisher marks as informative
        informative = state.fisher >= 1e-2
        self.assertTrue(informative.any())
        drift = np.abs(anchored_vector(moved, 2) - anchor.flat())[informative]
        self.assertLess(drift.max(), 1e-3)


class TestReplayReducesForgetting(unittest.TestCase):

    SEEDS = range(20)

    def test_rehearsal_beats_finetune(self):
        settings = TrainerSettings(epochs=5, lr=0.1, buffer_capacity=30, regions_per_bag=4)
        forgetting = {"finetune": [], "derpp": [], "buro": []}
        for seed in self.SEEDS:
            config = SyntheticConfig(tasks=default_task_specs([2, 2, 2], 20), dim=16, regions_per_slide=4,
                                     patches_per_region=4, class_separation=0.2, seed=seed)
            tasks = generate_task_sequence(config)
            for method in forgetting:
                run = run_method_sequence(method, tasks, settings, seed)
                forgetting[method].append(compute_metrics(run.ci, run.ti).forgetting)

        baseline = np.array(forgetting["finetune"])
        for method in ("derpp", "buro"):
            values = np.array(forgetting[method])
            self.assertLess(values.mean(), baseline.mean(), method)
            self.assertGreaterEqual(np.mean(baseline - values > 0), 0.8, method)


class TestZeroShotSoundness(unittest.TestCase):

    def test_noise_free_prototypes(self):
        config = SyntheticConfig(dim=16, class_separation=0.5, patch_noise_sigma=0.05,
                                 prototype_noise_sigma=0.0, regions_per_slide=4, patches_per_region=8)
        tasks = generate_task_sequence(config)
        result = run_zeroslide(tasks, synthesize_prototypes(tasks, config))
        final = result.ci.final_row()
        self.assertEqual(final.size, 6)
        self.assertTrue(np.all(final >= 0.99), final)

        # nearest class mean over every class seen, on the same test slides
        means = np.concatenate([task.class_means for task in tasks])
        correct = total = 0
        for task in tasks:
            for bag in task.test:
                s = bag.region_matrix().mean(axis=0)
                correct += int(np.argmax(means @ s) == bag.label.global_id)
                total += 1
        self.assertGreaterEqual(correct / total, 0.99)


class TestBufferStatistics(unittest.TestCase):

    def test_reservoir_retention_is_uniform(self):
        rng = np.random.default_rng(5)
        counts = np.zeros(1000)
        for _ in range(5000):
            buffer = ReplayBuffer(10)
            for index in range(1000):
                reservoir_insert(buffer, index, rng)
            self.assertEqual(len(buffer), 10)
            self.assertEqual(buffer.seen_count, 1000)
            counts[buffer.items] += 1
        self.assertEqual(counts.sum(), 5000 * 10)
        self.assertGreater(stats.chisquare(counts).pvalue, 0.001)


class TestConfidenceStructure(unittest.TestCase):

    def test_prototype_cosine_below_trained_softmax(self):
        config = SyntheticConfig(tasks=default_task_specs([2, 2, 2], 12), dim=64, regions_per_slide=4,
                                 patches_per_region=4, seed=7)
        tasks = generate_task_sequence(config)
        zeroslide = run_zeroslide(tasks, synthesize_prototypes(tasks, config))
        prototype_scores = [r.score for r in zeroslide.records if r.train_stage == r.eval_task]
        self.assertEqual({r.score_kind for r in zeroslide.records}, {"cosine"})

        settings = TrainerSettings(epochs=15, lr=0.3, buffer_capacity=30, regions_per_bag=4)
        for method in ("finetune", "ewc", "derpp", "buro"):
            run = run_method_sequence(method, tasks, settings, seed=0)
            self.assertEqual({r.score_kind for r in run.records}, {"softmax_prob"})
            trained_scores = [r.score for r in run.records if r.train_stage == r.eval_task]
            self.assertLess(np.median(prototype_scores), np.median(trained_scores), method)


class TestDeterminismAndIdempotence(unittest.TestCase):

    PLAN = """
[data]
dim = 8
tasks = 2, 2, 2
slides_per_class = 6
regions_per_slide = 2
patches_per_region = 2

[run]
methods = finetune, ewc, derpp, buro, zeroslide
seeds = 0, 1
n_folds = 2

[finetune]
epochs = 2
"""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_identical_plans_give_identical_bytes(self):
        plan = parse_config_text(self.PLAN)
        first = run_experiment(plan, self.tmp / "a", quiet=True)
        second = run_experiment(parse_config_text(self.PLAN), self.tmp / "b", quiet=True)
        self.assertEqual(first.results_csv.read_bytes(), second.results_csv.read_bytes())
        self.assertEqual(first.confidence_csv.read_bytes(), second.confidence_csv.read_bytes())
        check_dominance(read_csv(self.tmp / "a" / RESULTS_FILE))

        resumed = run_experiment(plan, self.tmp / "a", resume=True, quiet=True)
        self.assertEqual(resumed.recomputed, [])
        self.assertEqual(resumed.results_csv.read_bytes(), second.results_csv.read_bytes())


if __name__ == "__main__":
    unittest.main()
