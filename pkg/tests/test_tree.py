import os
import unittest
from unittest import mock

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from memprobe import (
    ClusterTree,
    EmptyStore,
    EmptyTree,
    ExemplarStore,
    InvalidConfig,
    LabelTable,
    LeafTrainingError,
    LinProbeModel,
    SynthConfig,
    TreeConfig,
    TreeProbeModel,
    UntrainedLeaf,
    gen_synthetic,
    make_rng,
    normalize_rows,
    tree_insert,
    two_means,
)


def grow(points, labels=None, psi=4, seed=0):
    store = ExemplarStore()
    labels = np.zeros(len(points), dtype=np.int64) if labels is None else labels
    tree = ClusterTree(TreeConfig(node_capacity_psi=psi, seed=seed), store)
    for p in store.extend(points, labels):
        tree.insert(int(p))
    return store, tree


def descend(tree, node_id, v):
    node = tree.nodes[node_id]
    if node.is_leaf:
        return node_id
    left, right = tree.nodes[node.left], tree.nodes[node.right]
    score = [s.vector_sum @ v / np.linalg.norm(s.vector_sum) for s in (left, right)]
    return descend(tree, node.left if score[0] >= score[1] else node.right, v)


def positions_below(tree, node_id):
    node = tree.nodes[node_id]
    if node.is_leaf:
        return list(node.positions)
    return positions_below(tree, node.left) + positions_below(tree, node.right)


class TwoMeansTest(unittest.TestCase):
    def test_separates_blobs(self):
        rng = make_rng(30)
        a = normalize_rows(np.array([1.0, 0.0, 0.0]) + 0.05 * rng.standard_normal((6, 3)))
        b = normalize_rows(np.array([0.0, 1.0, 0.0]) + 0.05 * rng.standard_normal((6, 3)))
        assign = two_means(np.vstack([a, b]).astype(np.float64), seed=1, max_iters=100, tolerance=1e-6)
        self.assertEqual(len(set(assign[:6])), 1)
        self.assertEqual(len(set(assign[6:])), 1)
        self.assertNotEqual(assign[0], assign[6])

    def test_both_clusters_non_empty(self):
        X = make_rng(31).standard_normal((2, 5))
        assign = two_means(X, seed=0, max_iters=5, tolerance=0.0)
        self.assertEqual(sorted(assign.tolist()), [0, 1])


class ClusterTreeTest(unittest.TestCase):
    def test_capacity_forces_split(self):
        store, tree = grow(normalize_rows(make_rng(32).standard_normal((5, 8))), psi=4)
        self.assertEqual(len(tree.leaves), 2)
        self.assertEqual(sorted(p for leaf in tree.leaves for p in leaf.positions), list(range(5)))
        self.assertTrue(all(leaf.size <= 4 for leaf in tree.leaves))

    def test_large_capacity_keeps_one_leaf(self):
        store, tree = grow(normalize_rows(make_rng(33).standard_normal((50, 8))), psi=1000)
        self.assertEqual(len(tree.leaves), 1)
        self.assertEqual(tree.leaves[0].positions, list(range(50)))

    def test_two_blobs_split_evenly(self):
        rng = make_rng(34)
        a = np.array([1.0, 0.0, 0.0]) + 0.05 * rng.standard_normal((5, 3))
        b = np.array([0.0, 0.0, 1.0]) + 0.05 * rng.standard_normal((5, 3))
        points = np.vstack([a, b[:4], b[4:]])
        store, tree = grow(points, psi=9)
        self.assertEqual(sorted(leaf.size for leaf in tree.leaves), [5, 5])
        groups = sorted(sorted(leaf.positions) for leaf in tree.leaves)
        self.assertEqual(groups, [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]])

    def test_identical_points_split_in_halves(self):
        with self.assertLogs("memprobe.memprobe_tree", level="WARNING"):
            store, tree = grow(np.tile([0.6, 0.8], (5, 1)), psi=4)
        # equal centroids send the new point left
        self.assertEqual([leaf.size for leaf in tree.leaves], [3, 2])

    def test_gaussian_clusters_conserve_everything(self):
        rng = make_rng(35)
        centers = normalize_rows(rng.standard_normal((4, 16)))
        points = normalize_rows(np.repeat(centers, 500, axis=0) + 0.3 * rng.standard_normal((2000, 16)))
        points = points[rng.permutation(2000)]
        store, tree = grow(points, psi=300)

        self.assertGreaterEqual(len(tree.leaves), 7)
        self.assertTrue(all(leaf.size <= 300 for leaf in tree.leaves))
        self.assertEqual(sorted(positions_below(tree, tree.root)), list(range(2000)))
        for node in tree.nodes:
            below = positions_below(tree, node.node_id)
            self.assertEqual(node.count, len(below))
            assert_allclose(node.vector_sum, store.embeddings[below].astype(np.float64).sum(axis=0), atol=1e-8)
        for position, leaf_id in tree.leaf_of.items():
            self.assertIn(position, tree.nodes[leaf_id].positions)

        for q in normalize_rows(rng.standard_normal((40, 16))).astype(np.float64):
            self.assertEqual(tree.nearest_leaf(q), descend(tree, tree.root, q))

    def test_functional_insert(self):
        store = ExemplarStore(3)
        tree = ClusterTree(TreeConfig(node_capacity_psi=2), store)
        e = store.append(np.array([1.0, 0.0, 0.0]), 1)
        self.assertIs(tree_insert(tree, e), tree)
        self.assertEqual(tree.leaf_of, {0: tree.root})

    def test_errors(self):
        tree = ClusterTree(TreeConfig(), ExemplarStore())
        self.assertRaises(EmptyTree, tree.nearest_leaf, np.ones(3))
        self.assertRaises(InvalidConfig, TreeConfig, node_capacity_psi=1)
        self.assertRaises(InvalidConfig, TreeConfig, kmeans_max_iters=0)


class RetrainTest(unittest.TestCase):
    def setUp(self):
        rng = make_rng(36)
        self.points = normalize_rows(rng.standard_normal((60, 8)))
        self.labels = rng.integers(0, 3, size=60)

    def test_nothing_dirty_is_a_no_op(self):
        store, tree = grow(self.points, self.labels, psi=20)
        self.assertEqual(tree.retrain_dirty(), len(tree.leaves))
        self.assertEqual(tree.retrain_dirty(), 0)

    def test_batch_matches_incremental(self):
        _, batch = grow(self.points, self.labels, psi=20)
        batch.retrain_dirty()

        store = ExemplarStore()
        step = ClusterTree(TreeConfig(node_capacity_psi=20), store)
        for p in store.extend(self.points, self.labels):
            step.insert(int(p))
            step.retrain_dirty()

        self.assertEqual(len(batch.nodes), len(step.nodes))
        for a, b in zip(batch.leaves, step.leaves):
            self.assertEqual(a.positions, b.positions)
            assert_array_equal(a.classifier.class_labels, b.classifier.class_labels)
            assert_allclose(a.classifier.weights, b.classifier.weights, atol=1e-12)
            assert_allclose(a.classifier.bias, b.classifier.bias, atol=1e-12)

    def test_thread_pool_matches_serial(self):
        _, serial = grow(self.points, self.labels, psi=20)
        serial.retrain_dirty()
        _, pooled = grow(self.points, self.labels, psi=20)
        with mock.patch.dict(os.environ, {"MEMPROBE_THREADS": "4"}):
            self.assertEqual(pooled.retrain_dirty(), len(pooled.leaves))
        for a, b in zip(serial.leaves, pooled.leaves):
            assert_array_equal(a.classifier.weights, b.classifier.weights)

    def test_training_failure_names_the_leaf(self):
        _, tree = grow(self.points, self.labels, psi=1000)
        with mock.patch("memprobe.memprobe_tree.train", side_effect=ValueError("boom")):
            with self.assertRaises(LeafTrainingError) as ctx:
                tree.retrain_dirty()
        self.assertEqual(ctx.exception.leaf_id, tree.root)


class TreeProbeModelTest(unittest.TestCase):
    def setUp(self):
        rng = make_rng(37)
        self.table = LabelTable([f"c{i}" for i in range(4)], rng.standard_normal((4, 12)))
        centers = self.table.text_embeddings.astype(np.float64)
        y = rng.integers(0, 4, size=50)
        self.X = normalize_rows(centers[y] + 0.5 * rng.standard_normal((50, 12)))
        self.y = y
        self.queries = normalize_rows(rng.standard_normal((30, 12)))

    def test_single_leaf_equals_linear_probe(self):
        tree_model = TreeProbeModel(self.table, TreeConfig(node_capacity_psi=1000, k=5))
        lin_model = LinProbeModel(self.table)
        for model in (tree_model, lin_model):
            model.add(self.X, self.y)
            model.fit()
        for a, b in zip(tree_model.predict_batch(self.queries), lin_model.predict_batch(self.queries)):
            assert_array_equal(a.distribution.support, b.distribution.support)
            assert_allclose(a.distribution.probs, b.distribution.probs, atol=1e-9)
            self.assertEqual(a.argmax_label, b.argmax_label)

    def test_large_capacity_matches_one_global_classifier_on_synthetic_task(self):
        task = gen_synthetic(SynthConfig(dim=64, classes=20, per_class_train=100, per_class_test=20, seed=5))
        tree_model = TreeProbeModel(task.labels, TreeConfig(node_capacity_psi=10 ** 6))
        lin_model = LinProbeModel(task.labels)
        for model in (tree_model, lin_model):
            model.add(task.train_x, task.train_y)
            model.fit()
        self.assertEqual(len(tree_model.tree.leaves), 1)
        queries = normalize_rows(task.test_x)
        self.assertEqual(queries.shape[0], 400)
        for a, b in zip(tree_model.predict_batch(queries), lin_model.predict_batch(queries)):
            assert_array_equal(a.distribution.support, b.distribution.support)
            assert_allclose(a.distribution.probs, b.distribution.probs, atol=1e-9)

    def test_agreeing_neighbours_give_the_text_embedding(self):
        rng = make_rng(38)
        blob_a = normalize_rows(np.eye(12)[0] + 0.05 * rng.standard_normal((20, 12)))
        blob_b = normalize_rows(np.eye(12)[1] + 0.05 * rng.standard_normal((20, 12)))
        # alternate the blobs so the first split sees both
        points = np.empty((40, 12), dtype=np.float32)
        points[0::2], points[1::2] = blob_a, blob_b
        labels = np.tile([1, 3], 20)
        model = TreeProbeModel(self.table, TreeConfig(node_capacity_psi=8, k=5))
        model.add(points, labels)
        model.fit()
        self.assertGreater(len(model.tree.leaves), 2)
        out = model.predict(np.eye(12)[0])
        self.assertEqual(out.argmax_label, 1)
        assert_allclose(out.embedding, self.table.text_embedding(1), atol=1e-7)

    def test_nearest_leaf_only_matches_a_classifier_trained_on_that_leaf(self):
        cfg = TreeConfig(node_capacity_psi=12, k=5, ensemble=False)
        model = TreeProbeModel(self.table, cfg)
        model.add(self.X, self.y)
        model.fit()
        routed = set()
        for q, out in zip(self.queries, model.predict_batch(self.queries)):
            leaf = model.tree.nodes[model.tree.nearest_leaf(q)]
            routed.add(leaf.node_id)
            reference = LinProbeModel(self.table, cfg.train_cfg)
            reference.add(model.store.embeddings[leaf.positions], model.store.labels[leaf.positions])
            reference.fit()
            want = reference.predict(q)
            assert_array_equal(out.distribution.support, want.distribution.support)
            assert_allclose(out.distribution.probs, want.distribution.probs, atol=1e-6)
            self.assertEqual(out.argmax_label, want.argmax_label)
            assert_allclose(out.embedding, want.embedding)
        self.assertGreater(len(routed), 1)

    def test_prediction_is_a_distribution_over_covered_labels(self):
        model = TreeProbeModel(self.table, TreeConfig(node_capacity_psi=10, k=7))
        model.add(self.X, self.y)
        model.fit()
        self.assertGreater(len(model.tree.leaves), 1)
        for out in model.predict_batch(self.queries, candidates=[1, 2]):
            assert_array_equal(out.distribution.support, sorted(set(self.y.tolist())))
            self.assertAlmostEqual(float(out.distribution.probs.sum()), 1.0, places=9)
            self.assertIn(out.argmax_label, (1, 2))
            self.assertAlmostEqual(float(np.linalg.norm(out.embedding.astype(np.float64))), 1.0, places=5)

    def test_untrained_and_empty(self):
        self.assertRaises(EmptyStore, TreeProbeModel(self.table).predict, self.queries[0])
        model = TreeProbeModel(self.table, TreeConfig(node_capacity_psi=10))
        model.add(self.X, self.y)
        self.assertRaises(UntrainedLeaf, model.predict, self.queries[0])
        model.fit()
        model.predict(self.queries[0])


if __name__ == '__main__':
    unittest.main()
