"""
Tests for the prototype bank classifier.
"""
import unittest

import numpy as np

from scripts.core import GlobalLabel
from scripts.datagen import (
    SyntheticConfig, TaskPrototypeSpec, default_task_specs, generate_task_sequence, synthesize_prototypes
)
from scripts.error_handling import ConsistencyError, DomainError, StateError
from scripts.zeroslide import (
    BankScorer, PrototypeBank, TaskPrototypes, extend_bank, predict_class_il, predict_task_il, run_zeroslide
)
from scripts.aggregator import FrozenAggregator


def eye_task(task_index: int, rows) -> TaskPrototypes:
    return TaskPrototypes(task_index, np.eye(4)[list(rows)])


class TestPrototypeBank(unittest.TestCase):

    def setUp(self):
        self.bank = extend_bank(extend_bank(PrototypeBank(), eye_task(0, [0, 1])), eye_task(1, [2, 3]))

    def test_labels_follow_arrival_order(self):
        self.assertEqual(self.bank.size, 4)
        self.assertEqual(self.bank.labels[2], GlobalLabel(1, 0, 2))
        self.assertEqual(self.bank.task_slice(1), slice(2, 4))

    def test_extend_leaves_old_bank_untouched(self):
        first = extend_bank(PrototypeBank(), eye_task(0, [0, 1]))
        extend_bank(first, eye_task(1, [2]))
        self.assertEqual(first.size, 2)

    def test_bank_is_read_only(self):
        with self.assertRaises(ValueError):
            self.bank.matrix[0, 0] = 5.0

    def test_duplicate_and_out_of_order(self):
        with self.assertRaises(StateError):
            extend_bank(self.bank, eye_task(1, [0]))
        with self.assertRaises(StateError):
            extend_bank(extend_bank(PrototypeBank(), eye_task(2, [0])), eye_task(1, [1]))

    def test_prototypes_must_be_unit(self):
        with self.assertRaises(DomainError):
            TaskPrototypes(0, np.array([[2.0, 0.0]]))

    def test_from_spec_averages_variants(self):
        spec = TaskPrototypeSpec(0, [np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 0.0]])])
        prototypes = TaskPrototypes.from_spec(spec)
        np.testing.assert_allclose(prototypes.prototypes[0], [np.sqrt(0.5), np.sqrt(0.5)])


class TestPrediction(unittest.TestCase):

    def setUp(self):
        self.bank = extend_bank(extend_bank(PrototypeBank(), eye_task(0, [0, 1])), eye_task(1, [2, 3]))

    def test_class_il_picks_most_similar(self):
        label, scores = predict_class_il([0.1, 0.0, 0.9, 0.2], self.bank)
        self.assertEqual(label.global_id, 2)
        self.assertEqual(len(scores), 4)

    def test_task_il_restricted_to_task(self):
        label, scores = predict_task_il([0.1, 0.0, 0.9, 0.2], self.bank, 0)
        self.assertEqual(label.global_id, 0)
        self.assertEqual([c.global_id for c in scores.candidates], [0, 1])

    def test_ties_go_to_smallest_id(self):
        label, _ = predict_class_il([0.0, 1.0, 1.0, 0.0], self.bank)
        self.assertEqual(label.global_id, 1)

    def test_dot_mode_matches_cosine_ranking_for_unit_inputs(self):
        s = np.array([0.3, 0.1, 0.5, 0.2])
        cosine_label, _ = predict_class_il(s, self.bank, "cosine")
        dot_label, dot_scores = predict_class_il(s, self.bank, "dot")
        self.assertEqual(cosine_label, dot_label)
        np.testing.assert_allclose(dot_scores.scores, s)

    def test_errors(self):
        with self.assertRaises(StateError):
            predict_class_il([1.0, 0.0], PrototypeBank())
        with self.assertRaises(StateError):
            predict_task_il([1.0, 0.0, 0.0, 0.0], self.bank, 5)

    def test_scorer_caches_embeddings(self):
        cache = {}
        scorer = BankScorer(self.bank, FrozenAggregator(), embedding_cache=cache)
        tasks = generate_task_sequence(SyntheticConfig(tasks=default_task_specs([2], 4), dim=4,
                                                       regions_per_slide=2, patches_per_region=2))
        bag = tasks[0].test[0]
        scorer.class_il_scores(bag)
        self.assertIn(bag.slide_id, cache)
        self.assertEqual(scorer.score_kind, "cosine")


class TestRunZeroSlide(unittest.TestCase):

    def setUp(self):
        self.config = SyntheticConfig(tasks=default_task_specs([2, 3, 2], 8), dim=16, regions_per_slide=3,
                                      patches_per_region=4, seed=5, prototype_noise_sigma=0.0)
        self.tasks = generate_task_sequence(self.config)
        self.specs = synthesize_prototypes(self.tasks, self.config)

    def test_matrices_complete_and_accurate(self):
        result = run_zeroslide(self.tasks, self.specs)
        self.assertTrue(result.ci.is_complete)
        self.assertEqual(result.bank.size, 7)
        np.testing.assert_array_equal(result.ci.final_row(), np.ones(3))

    def test_task_il_is_constant_over_stages(self):
        result = run_zeroslide(self.tasks, self.specs)
        for i in range(3):
            column = result.ti.column(i)
            self.assertTrue(np.all(column == column[0]))

    def test_task_il_dominates_class_il(self):
        specs = synthesize_prototypes(self.tasks, SyntheticConfig(
            tasks=self.config.tasks, dim=16, prototype_noise_sigma=1.0, prototype_seed=9))
        result = run_zeroslide(self.tasks, specs)
        for k in range(3):
            self.assertTrue(np.all(result.ti.row(k) >= result.ci.row(k)))

    def test_records_one_per_test_slide_and_stage(self):
        result = run_zeroslide(self.tasks, self.specs)
        expected = sum(len(self.tasks[i].test) for k in range(3) for i in range(k + 1))
        self.assertEqual(len(result.records), expected)
        self.assertTrue(all(r.score_kind == "cosine" and -1.0 <= r.score <= 1.0 for r in result.records))

    def test_deterministic(self):
        first = run_zeroslide(self.tasks, self.specs)
        second = run_zeroslide(self.tasks, self.specs)
        self.assertEqual(first.ci, second.ci)
        self.assertEqual(first.ti, second.ti)

    def test_missing_prototypes(self):
        with self.assertRaises(ConsistencyError):
            run_zeroslide(self.tasks, self.specs[:2])
        with self.assertRaises(ConsistencyError):
            run_zeroslide(self.tasks, [self.specs[1], self.specs[0], self.specs[2]])


if __name__ == "__main__":
    unittest.main()
