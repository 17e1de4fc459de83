import math
import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch
from hypothesis import given, settings, strategies as st

from ..core import *
from ..tripletnet import *
from ..classifier import decide
from ..metrics import *
from .fixtures import random_records, stub_manifest


def _error_rates(records, threshold):
    reals = [r.score for r in records if r.label == Label.REAL]
    fakes = [r.score for r in records if r.label == Label.FAKE]
    fpr = sum(s >= threshold for s in reals) / len(reals)
    fnr = sum(s < threshold for s in fakes) / len(fakes)
    return fpr, fnr, min(len(reals), len(fakes))


def _trapezoid(points):
    points = np.array(points)
    return float(np.sum(np.diff(points[:, 0]) * (points[1:, 1] + points[:-1, 1]) / 2))


class MetricOracleTestCase(unittest.TestCase):
    def test_auc_matches_pairwise(self):
        rng = np.random.default_rng(2024)
        for index in range(200):
            records = random_records(rng, ties=index % 2 == 0)
            with self.subTest(index=index):
                self.assertAlmostEqual(auc(records), pairwise_auc(records), delta=1e-12)
                self.assertAlmostEqual(_trapezoid(roc_curve(records)), pairwise_auc(records),
                                       delta=1e-12)

    def test_eer_fixed_point(self):
        rng = np.random.default_rng(2025)
        for index in range(200):
            records = random_records(rng)
            value, threshold = eer(records)
            fpr, fnr, smaller = _error_rates(records, threshold)
            with self.subTest(index=index):
                self.assertLessEqual(abs(fpr - fnr), 1 / smaller + 1e-12)
                self.assertAlmostEqual(value, (fpr + fnr) / 2, delta=1e-12)

    def test_roc_monotone(self):
        rng = np.random.default_rng(2026)
        for index in range(50):
            points = roc_curve(random_records(rng, ties=True))
            self.assertEqual(points[0], (0.0, 0.0))
            self.assertEqual(points[-1], (1.0, 1.0))
            for (x0, y0), (x1, y1) in zip(points, points[1:]):
                self.assertLessEqual(x0, x1)
                self.assertLessEqual(y0, y1)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 50), min_size=1, max_size=20),
           st.lists(st.integers(0, 50), min_size=1, max_size=20))
    def test_auc_monotone_invariance(self, reals, fakes):
        def records(transform):
            return ([ScoreRecord("r", Label.REAL, transform(k / 50)) for k in reals] +
                    [ScoreRecord("f", Label.FAKE, transform(k / 50)) for k in fakes])
        original = auc(records(lambda x: x))
        self.assertEqual(auc(records(lambda x: (x + 1) ** 2 / 4)), original)
        self.assertAlmostEqual(auc(records(lambda x: 1 - x)), 1 - original, delta=1e-12)


class DistanceTestCase(unittest.TestCase):
    def test_distances(self):
        rng = np.random.default_rng(11)
        for a, p, n in rng.normal(scale=3, size=(1000, 3, 2)):
            ta, tp, tn = (torch.from_numpy(x) for x in (a, p, n))
            d = triplet_distances(ta, tp, tn)
            self.assertGreaterEqual(float(d.d_neg), 0)
            self.assertGreaterEqual(float(d.d_pos), 0)
            self.assertAlmostEqual(float(d.d_neg), math.sqrt((a[0] - n[0]) ** 2 +
                                                             (a[1] - n[1]) ** 2), delta=1e-12)
            self.assertAlmostEqual(float(d.d_pos), math.sqrt((a[0] - p[0]) ** 2 +
                                                             (a[1] - p[1]) ** 2), delta=1e-12)
            swapped = triplet_distances(ta, tn, tp)
            self.assertEqual((float(swapped.d_neg), float(swapped.d_pos)),
                             (float(d.d_pos), float(d.d_neg)))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 20), st.floats(0, 20), st.floats(0, 5))
    def test_loss_ranges(self, d_neg, d_pos, margin):
        d = TripletDistances(d_neg, d_pos)
        ratio = loss_softmax_ratio(d)
        self.assertTrue(0 < ratio < 1)
        hinge = loss_margin(d, margin)
        self.assertGreaterEqual(hinge, 0)
        self.assertEqual(hinge == 0, d_pos - d_neg + margin <= 0)

    def test_isometry(self):
        rng = np.random.default_rng(12)
        for points in rng.normal(size=(200, 3, 2)):
            angle = rng.uniform(0, 2 * math.pi)
            rotation = np.array([[math.cos(angle), -math.sin(angle)],
                                 [math.sin(angle), math.cos(angle)]])
            if rng.random() < 0.5:
                rotation = rotation @ np.diag([1.0, -1.0])
            moved = points @ rotation.T + rng.normal(size=2)
            for kind in LossKind:
                config = RunConfig(loss_kind=kind)
                before = triplet_loss(self.distances(points), config)
                after = triplet_loss(self.distances(moved), config)
                self.assertAlmostEqual(before, after, delta=1e-12)

    @staticmethod
    def distances(points):
        a, p, n = points
        return TripletDistances(float(np.linalg.norm(a - n)), float(np.linalg.norm(a - p)))

    def test_anchor_class_frequency(self):
        triplets = sample_triplets(stub_manifest(10, 10), 10000, seed=99)
        fakes = sum(t.anchor.label == Label.FAKE for t in triplets)
        self.assertLessEqual(abs(fakes - 5000), 3 * math.sqrt(10000 * 0.25))
        for triplet in triplets[:500]:
            self.assertNotEqual(triplet.anchor.id, triplet.positive.id)
            self.assertEqual(triplet.anchor.label, triplet.positive.label)
            self.assertNotEqual(triplet.anchor.label, triplet.negative.label)


class GradientTestCase(unittest.TestCase):
    step = 1e-5

    def loss(self, points, kind, margin):
        d = DistanceTestCase.distances(points)
        if kind == LossKind.MARGIN:
            return loss_margin(d, margin)
        return loss_softmax_ratio(d)

    def autograd(self, points, kind, margin):
        tensors = [torch.tensor(x, dtype=torch.float64, requires_grad=True) for x in points]
        d = triplet_distances(*tensors)
        loss = loss_margin(d, margin) if kind == LossKind.MARGIN else loss_softmax_ratio(d)
        loss.backward()
        return np.stack([t.grad.numpy() for t in tensors])

    def central_differences(self, points, kind, margin):
        grad = np.zeros_like(points)
        for index in np.ndindex(points.shape):
            up, down = points.copy(), points.copy()
            up[index] += self.step
            down[index] -= self.step
            grad[index] = (self.loss(up, kind, margin) -
                           self.loss(down, kind, margin)) / (2 * self.step)
        return grad

    def test_gradients(self):
        rng = np.random.default_rng(13)
        margin = 0.2
        checked = 0
        for points in rng.normal(size=(100, 3, 2)):
            for kind in LossKind:
                d = DistanceTestCase.distances(points)
                if kind == LossKind.MARGIN and abs(d.d_pos - d.d_neg + margin) < 1e-3:
                    continue
                numeric = self.central_differences(points, kind, margin)
                automatic = self.autograd(points, kind, margin)
                analytic = np.stack(loss_gradient(*points, loss_kind=kind, margin=margin))
                np.testing.assert_allclose(automatic, numeric, rtol=1e-4, atol=1e-8)
                np.testing.assert_allclose(analytic, automatic, rtol=1e-10, atol=1e-12)
                checked += 1
        self.assertGreater(checked, 190)


class ClassifierPropertyTestCase(unittest.TestCase):
    def test_shift_invariance(self):
        # Dyadic logits and integer shifts keep every sum exact.
        rng = np.random.default_rng(14)
        for _ in range(1000):
            a, b = rng.integers(-2 ** 12, 2 ** 12, size=2) / 256
            c = float(rng.integers(-1000, 1000))
            self.assertEqual(decide((a, b)), decide((a + c, b + c)))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-15, 15), st.floats(-15, 15))
    def test_score_complement(self, a, b):
        label, score = decide((a, b))
        self.assertTrue(0 < score < 1)
        self.assertAlmostEqual(score + decide((b, a))[1], 1.0, delta=1e-12)
        self.assertEqual(label, Label.FAKE if b > a else Label.REAL)


class CorePropertyTestCase(unittest.TestCase):
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(Label), st.sampled_from(Split)), max_size=40))
    def test_split_counts_total(self, cells):
        samples = [Sample("s{}".format(i), "s.png", label, "d", split)
                   for i, (label, split) in enumerate(cells)]
        counts = split_counts(Manifest(samples, "d"))
        self.assertEqual(sum(n for per_label in counts.values() for n in per_label.values()),
                         len(samples))

    @settings(max_examples=50, deadline=None)
    @given(st.builds(
        RunConfig,
        embedding_dim=st.integers(1, 16),
        stage1_lr=st.floats(1e-8, 1.0),
        stage1_batch=st.integers(1, 64),
        stage1_epochs=st.integers(0, 100),
        stage2_momentum=st.floats(0.0, 0.99),
        loss_kind=st.sampled_from(LossKind),
        margin=st.floats(0.0, 10.0),
        dropout_rate=st.floats(0.0, 0.9),
        backbone=st.sampled_from(BackboneKind),
        seed=st.integers(0, 2 ** 64 - 1)))
    def test_config_round_trip(self, config):
        with tempfile.TemporaryDirectory() as tmp:
            path = save_config(config, Path(tmp) / "run.cfg")
            self.assertEqual(load_config(path), config)
            self.assertEqual(load_config(save_config(load_config(path), path)), config)
