import unittest
from unittest import mock

import numpy as np
from numpy.testing import assert_array_equal

from memprobe import (
    CandidateSet,
    ContinualRun,
    FusionConfig,
    InvalidConfig,
    InvalidPlan,
    InvalidProtocol,
    KnnModel,
    ScenarioAborted,
    ShapeMismatch,
    StageReport,
    SynthConfig,
    TaskDataset,
    flexible_inference_eval,
    gen_synthetic,
    plan_scenario,
    relative_to_zeroshot,
    run_scenario,
    transfer_avg_last,
    transfer_avg_last_matrix,
    zeroshot_predict_batch,
)


def zeroshot_accuracy(task):
    cand = CandidateSet(task.labels.label_ids, task.labels)
    return float(np.mean(zeroshot_predict_batch(task.test_x, cand) == task.test_y))


def stage_report(index, accuracies):
    tasks = [{"task": name, "kind": "target", "metrics": {"accuracy": acc}} for name, acc in accuracies.items()]
    return StageReport(index, tasks, float(np.mean(list(accuracies.values()))), None, None, None, 0.0, 0.0)


class SyntheticTest(unittest.TestCase):
    def test_noise_free_is_perfect(self):
        task = gen_synthetic(SynthConfig(dim=16, classes=8, per_class_train=2, per_class_test=5,
                                         intra_class_sigma=0.0, text_offset_sigma=0.0))
        self.assertEqual(zeroshot_accuracy(task), 1.0)

    def test_heavy_noise_is_chance(self):
        task = gen_synthetic(SynthConfig(dim=16, classes=10, per_class_train=0, per_class_test=100,
                                         intra_class_sigma=50.0, text_offset_sigma=0.0, seed=3))
        self.assertAlmostEqual(zeroshot_accuracy(task), 0.1, delta=0.05)

    def test_default_task_is_hard_but_learnable(self):
        acc = zeroshot_accuracy(gen_synthetic(SynthConfig()))
        self.assertGreater(acc, 0.3)
        self.assertLess(acc, 0.98)

    def test_deterministic(self):
        a, b = gen_synthetic(SynthConfig(seed=9)), gen_synthetic(SynthConfig(seed=9))
        assert_array_equal(a.train_x, b.train_x)
        assert_array_equal(a.test_x, b.test_x)
        assert_array_equal(a.labels.text_embeddings, b.labels.text_embeddings)
        self.assertFalse(np.array_equal(a.train_x, gen_synthetic(SynthConfig(seed=10)).train_x))

    def test_validation(self):
        self.assertRaises(InvalidConfig, SynthConfig, classes=0)
        self.assertRaises(InvalidConfig, SynthConfig, intra_class_sigma=-1.0)
        labels = gen_synthetic(SynthConfig(classes=2, dim=4)).labels
        self.assertRaises(ShapeMismatch, TaskDataset, "t", labels, np.ones((3, 4)), [0, 1], np.ones((0, 4)), [])
        self.assertRaises(InvalidConfig, TaskDataset, "t", labels, np.ones((1, 4)), [5], np.ones((0, 4)), [])


class PlanTest(unittest.TestCase):
    def test_data_incremental_fractions(self):
        task = gen_synthetic(SynthConfig(dim=8, classes=10, per_class_train=100, per_class_test=0))
        plan = plan_scenario([task], "data", seed=1)
        self.assertEqual([len(s.rows[0]) for s in plan.stages], [20, 40, 80, 160, 320, 640, 1000])
        for before, after in zip(plan.stages, plan.stages[1:]):
            assert_array_equal(after.rows[0][:len(before.rows[0])], before.rows[0])
        same = plan_scenario([task], "data", seed=1)
        assert_array_equal(same.stages[2].rows[0], plan.stages[2].rows[0])

    def test_class_incremental_steps(self):
        task = gen_synthetic(SynthConfig(dim=8, classes=10, per_class_train=3, per_class_test=0))
        plan = plan_scenario([task], "class", seed=2)
        seen = [np.unique(task.train_y[s.rows[0]]).size for s in plan.stages]
        self.assertEqual(seen, [2, 4, 6, 8, 10])

    def test_task_incremental(self):
        tasks = [gen_synthetic(SynthConfig(dim=8, classes=3, per_class_train=2 + i, per_class_test=0,
                                           seed=i, name=f"t{i}")) for i in range(3)]
        plan = plan_scenario(tasks, "task")
        self.assertEqual(len(plan.stages), 3)
        self.assertEqual([[len(s.rows[t]) for t in range(3)] for s in plan.stages],
                         [[6, 0, 0], [6, 9, 0], [6, 9, 12]])

    def test_invalid_plans(self):
        task = gen_synthetic(SynthConfig(dim=8, classes=3, per_class_train=2, per_class_test=0))
        self.assertRaises(InvalidPlan, plan_scenario, [], "data")
        self.assertRaises(InvalidPlan, plan_scenario, [task], "task")
        self.assertRaises(InvalidPlan, plan_scenario, [task], "class")
        self.assertRaises(InvalidPlan, plan_scenario, [task], "online")


class ScenarioTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.target = gen_synthetic(SynthConfig(classes=10, per_class_train=50, per_class_test=30, seed=11, name="target"))
        cls.other = gen_synthetic(SynthConfig(classes=10, per_class_train=0, per_class_test=30, seed=12, name="other"))

    def test_zero_shot_never_changes(self):
        plan = plan_scenario([self.target], "data")
        reports = run_scenario(plan, "zs", FusionConfig(mode="zs"), [self.other])
        self.assertEqual(len({r.target_avg for r in reports}), 1)
        self.assertEqual(len({r.zeroshot_avg for r in reports}), 1)
        self.assertAlmostEqual(reports[0].target_avg, zeroshot_accuracy(self.target))

    def test_linear_probe_improves_with_data(self):
        plan = plan_scenario([self.target], "data")
        reports = run_scenario(plan, "linprobe", FusionConfig(mode="aim-emb"), [self.other])
        self.assertGreaterEqual(reports[-1].target_avg, reports[0].target_avg)
        self.assertGreater(reports[-1].target_avg, zeroshot_accuracy(self.target))
        self.assertEqual(reports[-1].unseen_acc, None)

    def test_exemplar_only_misses_unseen_classes(self):
        plan = plan_scenario([self.target], "class")
        first = run_scenario(plan, "linprobe", FusionConfig(mode="exemplar"))[0]
        self.assertLess(first.unseen_acc, 1.0 / 10)
        self.assertGreater(first.seen_acc, 0.5)

    def test_zero_shot_task_is_preserved(self):
        tasks = [self.target, gen_synthetic(SynthConfig(classes=10, per_class_train=20, per_class_test=30,
                                                        seed=13, name="second"))]
        plan = plan_scenario(tasks, "task")
        baseline = run_scenario(plan, "zs", FusionConfig(mode="zs"), [self.other])
        reports = run_scenario(plan, "knn", FusionConfig(mode="aim-emb"), [self.other])
        for r, b in zip(reports, baseline):
            self.assertAlmostEqual(r.zeroshot_avg, b.zeroshot_avg, delta=0.015)
        rel = relative_to_zeroshot(reports, baseline)
        self.assertEqual([row["stage"] for row in rel], [0, 1])
        self.assertAlmostEqual(rel[0]["target_rel"], reports[0].target_avg / baseline[0].target_avg)

    def test_failed_stage_keeps_finished_reports(self):
        plan = plan_scenario([self.target], "data")
        with mock.patch.object(KnnModel, "fit", side_effect=[None, RuntimeError("disk full")]):
            with self.assertRaises(ScenarioAborted) as ctx:
                run_scenario(plan, "knn", FusionConfig(mode="aim-prob"))
        self.assertEqual(ctx.exception.stage_index, 1)
        self.assertEqual(len(ctx.exception.reports), 1)
        self.assertIsInstance(ctx.exception.__cause__, RuntimeError)

    def test_report_round_trip(self):
        report = run_scenario(plan_scenario([self.target], "class"), "knn", FusionConfig(mode="avg-prob"))[0]
        self.assertEqual(StageReport.from_dict(report.to_dict()), report)


class ContinualLearningCurveTest(unittest.TestCase):
    """Learning curves on the default synthetic task, where zero-shot sits near 70%."""

    @classmethod
    def setUpClass(cls):
        cls.task = gen_synthetic(SynthConfig(name="target"))
        cls.zero_shot = zeroshot_accuracy(cls.task)

    def test_zero_shot_baseline(self):
        self.assertAlmostEqual(self.zero_shot, 0.7, delta=0.05)

    def test_data_incremental_linear_model_beats_zero_shot(self):
        reports = run_scenario(plan_scenario([self.task], "data", seed=0), "linprobe", FusionConfig(mode="aim-emb"))
        self.assertGreaterEqual(reports[-1].target_avg, self.zero_shot + 0.10)

    def test_class_incremental_unseen_accuracy(self):
        plan = plan_scenario([self.task], "class", seed=0)
        first = plan.stages[0]
        covered = np.unique(self.task.train_y[first.rows[0]])
        unseen = ~np.isin(self.task.test_y, covered)
        cand = CandidateSet(self.task.labels.label_ids, self.task.labels)
        predicted = zeroshot_predict_batch(self.task.test_x[unseen], cand)
        zero_shot_unseen = float(np.mean(predicted == self.task.test_y[unseen]))

        exemplar = ContinualRun(plan, "linprobe", FusionConfig(mode="exemplar")).run_stage(first)
        aim = ContinualRun(plan, "linprobe", FusionConfig(mode="aim-emb")).run_stage(first)
        self.assertLess(exemplar.unseen_acc, 1.0 / 20 + 0.02)
        self.assertGreater(exemplar.seen_acc, 0.5)
        self.assertGreaterEqual(aim.unseen_acc, 0.5 * zero_shot_unseen)


class FlexibleInferenceTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tasks = [gen_synthetic(SynthConfig(dim=32, classes=25, per_class_train=4, per_class_test=3,
                                               seed=20 + i, name=f"t{i}")) for i in range(2)]
        cls.pool = gen_synthetic(SynthConfig(dim=32, classes=150, per_class_train=0, per_class_test=2,
                                             seed=30, name="pool"))
        cls.plan = plan_scenario(cls.tasks, "task")

    def trained(self, method, mode):
        run = ContinualRun(self.plan, method, FusionConfig(mode=mode), [self.pool])
        run.run()
        return run

    def test_zero_shot_protocol_matches_plain_zero_shot(self):
        report = flexible_inference_eval(self.trained("zs", "zs"), "zs")
        self.assertAlmostEqual(report.target_acc, np.mean([zeroshot_accuracy(t) for t in self.tasks]))
        self.assertAlmostEqual(report.zeroshot_acc, zeroshot_accuracy(self.pool))

    def test_union_with_zero_shot_labels(self):
        report = flexible_inference_eval(self.trained("knn", "aim-emb"), "union-zs", seed=4)
        labels = report.splits[0]["labels"]
        self.assertEqual(len(labels), 25 + 25 + 100)
        self.assertEqual(len(set(labels)), len(labels))
        self.assertAlmostEqual(report.average, (report.target_acc + report.zeroshot_acc) / 2)

    def test_mix_splits_partition_target_labels(self):
        run = self.trained("knn", "aim-prob")
        report = flexible_inference_eval(run, "mix-zs", seed=5)
        self.assertEqual(len(report.splits), 5)
        self.assertTrue(all(len(s["target_labels"]) == 10 for s in report.splits))
        self.assertTrue(all(len(s["zeroshot_labels"]) == 100 for s in report.splits))
        merged = sorted(label for s in report.splits for label in s["target_labels"])
        self.assertEqual(merged, list(range(50)))
        again = flexible_inference_eval(run, "mix-zs", seed=5)
        self.assertEqual(again.to_dict(), report.to_dict())

    def test_errors(self):
        run = self.trained("zs", "zs")
        self.assertRaises(InvalidProtocol, flexible_inference_eval, run, "everything")
        data_run = ContinualRun(plan_scenario(self.tasks[:1], "data"), "zs")
        self.assertRaises(InvalidPlan, flexible_inference_eval, data_run, "union")


class MetricsTest(unittest.TestCase):
    def test_two_task_matrix(self):
        transfer, avg, last = transfer_avg_last_matrix([[0.5, 0.5], [1.0, 0.5]])
        self.assertAlmostEqual(transfer, 0.5)
        self.assertAlmostEqual(avg, 0.625)
        self.assertAlmostEqual(last, 0.75)

    def test_constant_rows(self):
        _, avg, last = transfer_avg_last_matrix([[0.7, 0.4, 0.1]] * 3)
        self.assertAlmostEqual(avg, last)
        transfer, avg, last = transfer_avg_last_matrix(np.full((3, 3), 0.6))
        self.assertAlmostEqual(transfer, 0.6)
        self.assertAlmostEqual(avg, 0.6)
        self.assertAlmostEqual(last, 0.6)

    def test_from_reports(self):
        reports = [stage_report(0, {"a": 0.5, "b": 0.5}), stage_report(1, {"a": 1.0, "b": 0.5})]
        self.assertEqual(transfer_avg_last(reports, ["a", "b"]), (0.5, 0.625, 0.75))
        self.assertIsNone(transfer_avg_last([stage_report(0, {"a": 0.9})], ["a"])[0])

    def test_shape_errors(self):
        self.assertRaises(ShapeMismatch, transfer_avg_last_matrix, np.ones((2, 3)))
        reports = [stage_report(0, {"a": 0.5})]
        self.assertRaises(ShapeMismatch, transfer_avg_last, reports, ["a", "b"])
        self.assertRaises(ShapeMismatch, transfer_avg_last, reports, ["b"])
        self.assertRaises(ShapeMismatch, relative_to_zeroshot, reports, [])


if __name__ == '__main__':
    unittest.main()
