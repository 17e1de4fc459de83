import csv
import logging
import math
import pickle
import tempfile
import unittest
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import *
from .tripletnet import EmbeddingPoint


__all__ = [
    "ClassifierSpec", "ClassificationNetwork", "ClassifierParams", "FeatureRow",
    "classifier_forward", "classifier_logits", "decide", "predict", "train_classifier",
    "save_features", "load_features", "save_classifier", "load_classifier",
]


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassifierSpec:
    input_dim:   int   = 2
    leaky_slope: float = 0.01

    # Sizes are output widths; there is deliberately no activation between 128 and 256.
    layers = (
        ("linear", 2),
        ("relu", None),
        ("linear", 128),
        ("linear", 256),
        ("relu", None),
        ("linear", 128),
        ("relu", None),
        ("linear", 2),
        ("leaky_relu", None),
    )

    @property
    def linear_shapes(self):
        shapes = []
        width = self.input_dim
        for kind, size in self.layers:
            if kind == "linear":
                shapes.append((size, width))
                width = size
        return shapes


class ClassificationNetwork(nn.Sequential):
    def __init__(self, spec):
        modules = []
        width = spec.input_dim
        for kind, size in spec.layers:
            if kind == "linear":
                modules.append(nn.Linear(width, size))
                width = size
            elif kind == "relu":
                modules.append(nn.ReLU())
            elif kind == "leaky_relu":
                modules.append(nn.LeakyReLU(spec.leaky_slope))
            else:
                assert False, kind
        super().__init__(*modules)
        self.spec = spec

    def linears(self):
        return [module for module in self if isinstance(module, nn.Linear)]

    def trace(self, x):
        """Output width of every layer for input ``x``."""
        widths = []
        for module in self:
            x = module(x)
            widths.append(x.shape[-1])
        return widths


@dataclass(frozen=True, eq=False)
class ClassifierParams:
    spec: ClassifierSpec
    weights: tuple  # ((weight, bias), ...) per linear layer, float64 arrays

    OUTPUT_BIAS = 0.01

    def __post_init__(self):
        weights = tuple((np.asarray(w, np.float64), np.asarray(b, np.float64))
                        for w, b in self.weights)
        shapes = self.spec.linear_shapes
        if len(weights) != len(shapes):
            raise ShapeError("expected {} linear layers, got {}".format(len(shapes), len(weights)))
        for (w, b), shape in zip(weights, shapes):
            if w.shape != shape or b.shape != shape[:1]:
                raise ShapeError("layer shapes {} / {} do not match {}"
                                 .format(w.shape, b.shape, shape))
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError("classifier parameters must be finite")
        object.__setattr__(self, "weights", weights)

    def __eq__(self, other):
        if not isinstance(other, ClassifierParams):
            return NotImplemented
        return self.spec == other.spec and all(
            np.array_equal(w1, w2) and np.array_equal(b1, b2)
            for (w1, b1), (w2, b2) in zip(self.weights, other.weights))

    @classmethod
    def zeros(cls, spec):
        return cls(spec, [(np.zeros(shape), np.zeros(shape[0])) for shape in spec.linear_shapes])

    @classmethod
    def initialize(cls, spec, seed):
        """
        Uniform fan-in scaled weights, with He gain for every layer feeding a ReLU and unit
        gain for the layer without an activation, and zero hidden biases. The output layer
        starts at zero weights with biases of ``OUTPUT_BIAS``, so both logits begin on the
        identity side of the leaky ReLU and the first updates follow the difference of the
        class means.
        """
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            network = ClassificationNetwork(spec).double()
            modules = list(network)
            with torch.no_grad():
                for index, module in enumerate(modules):
                    if not isinstance(module, nn.Linear):
                        continue
                    if module is modules[-2]:
                        nn.init.zeros_(module.weight)
                        nn.init.constant_(module.bias, cls.OUTPUT_BIAS)
                        continue
                    feeds_relu = isinstance(modules[index + 1], nn.ReLU)
                    nn.init.kaiming_uniform_(module.weight,
                                             nonlinearity="relu" if feeds_relu else "linear")
                    nn.init.zeros_(module.bias)
        return cls.from_network(network)

    @classmethod
    def from_network(cls, network):
        return cls(network.spec, [(m.weight.detach().double().numpy().copy(),
                                   m.bias.detach().double().numpy().copy())
                                  for m in network.linears()])

    def to_network(self):
        network = ClassificationNetwork(self.spec).double()
        with torch.no_grad():
            for module, (w, b) in zip(network.linears(), self.weights):
                module.weight.copy_(torch.from_numpy(w))
                module.bias.copy_(torch.from_numpy(b))
        return network

    def network(self):
        network = self.__dict__.get("_network")
        if network is None:
            network = self.to_network().eval()
            object.__setattr__(self, "_network", network)
        return network


def classifier_logits(params, points):
    points = np.asarray(points, np.float64)
    if points.ndim != 2 or points.shape[1] != params.spec.input_dim:
        raise ShapeError("expected points of dimension {}, got shape {}"
                         .format(params.spec.input_dim, points.shape))
    with torch.no_grad():
        return params.network()(torch.from_numpy(points)).numpy()


def classifier_forward(params, point):
    logits = classifier_logits(params, [point.coords])[0]
    return float(logits[0]), float(logits[1])


def decide(logits):
    """Label and fake score for a pair of logits; equal logits are REAL."""
    real, fake = (float(x) for x in logits)
    label = Label.FAKE if fake > real else Label.REAL
    score = float(torch.softmax(torch.tensor([real, fake], dtype=torch.float64), dim=0)[1])
    return label, score


def predict(params, point):
    return decide(classifier_forward(params, point))


def train_classifier(features, config):
    """
    SGD on the cross-entropy of the softmaxed logits; ``features`` is a sequence of
    ``(EmbeddingPoint, Label)``. Every epoch is one pass over a fresh shuffle in batches of
    ``config.stage2_batch``. Returns the parameters and the mean loss of every epoch.
    """
    labels = np.array([int(label) for _, label in features], np.int64)
    if len(set(labels.tolist())) < 2:
        raise SingleClassError("classifier training needs both real and fake examples")
    points = np.array([point.coords for point, _ in features], np.float64)
    spec = ClassifierSpec(points.shape[1], config.leaky_slope)
    params = ClassifierParams.initialize(spec, config.seed)
    history = []
    if config.stage2_epochs == 0:
        return params, history

    network = params.to_network().train()
    optimizer = torch.optim.SGD(network.parameters(), lr=config.stage2_lr,
                                momentum=config.stage2_momentum)
    generator = torch.Generator().manual_seed(config.seed)
    x, y = torch.from_numpy(points), torch.from_numpy(labels)
    for epoch in range(config.stage2_epochs):
        order = torch.randperm(len(y), generator=generator)
        total = 0.0
        for start in range(0, len(y), config.stage2_batch):
            index = order[start:start + config.stage2_batch]
            loss = F.cross_entropy(network(x[index]), y[index])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(index)
        history.append(total / len(y))
        logger.debug("stage 2 epoch %d/%d: mean cross-entropy %.6f",
                     epoch + 1, config.stage2_epochs, history[-1])
    if history:
        logger.info("stage 2 finished after %d epochs, final loss %.6f", len(history), history[-1])
    return ClassifierParams.from_network(network), history


class FeatureRow(NamedTuple):
    id: str
    point: EmbeddingPoint
    label: Label


def save_features(path, rows):
    rows = list(rows)
    dim = rows[0].point.dim if rows else 0
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id"] + ["e{}".format(i + 1) for i in range(dim)] + ["label"])
        for row in rows:
            if row.point.dim != dim:
                raise ShapeError("mixed embedding dimensions in feature rows")
            writer.writerow([row.id] + [repr(c) for c in row.point.coords] + [int(row.label)])
    return path


def load_features(path):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "id" or header[-1] != "label" or len(header) < 3:
            raise ManifestHeaderError("{} is not a feature file".format(path), row=1)
        rows = []
        for number, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ManifestError("expected {} columns".format(len(header)), row=number)
            try:
                rows.append(FeatureRow(row[0], EmbeddingPoint(float(c) for c in row[1:-1]),
                                       Label(int(row[-1]))))
            except ValueError as error:
                raise ManifestError(str(error), row=number) from None
    return rows


_CLASSIFIER_FORMAT = "triplet-forensics/classifier"


def save_classifier(path, params, config, history=()):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format":  _CLASSIFIER_FORMAT,
        "version": 1,
        "spec":    {"input_dim": params.spec.input_dim, "leaky_slope": params.spec.leaky_slope},
        "weights": [(torch.from_numpy(w), torch.from_numpy(b)) for w, b in params.weights],
        "config":  config.to_dict(),
        "seed":    config.seed,
        "history": [float(x) for x in history],
    }, path)
    return path


def load_classifier(path):
    try:
        checkpoint = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, ValueError, pickle.UnpicklingError) as error:
        raise CheckpointError("cannot read classifier checkpoint {}: {}".format(path, error)) \
            from None
    if not isinstance(checkpoint, dict) or checkpoint.get("format") != _CLASSIFIER_FORMAT:
        raise CheckpointError("{} is not a classifier checkpoint".format(path))
    spec = ClassifierSpec(**checkpoint["spec"])
    params = ClassifierParams(spec, [(w.numpy(), b.numpy()) for w, b in checkpoint["weights"]])
    return params, checkpoint


class TestCase(unittest.TestCase):
    def test_zero_network(self):
        params = ClassifierParams.zeros(ClassifierSpec())
        self.assertEqual(classifier_forward(params, EmbeddingPoint((0.3, -2.0))), (0.0, 0.0))

    def test_final_bias_leaky(self):
        spec = ClassifierSpec(2, 0.01)
        weights = list(ClassifierParams.zeros(spec).weights)
        weights[-1] = (weights[-1][0], np.array([1.0, -1.0]))
        logits = classifier_forward(ClassifierParams(spec, weights), EmbeddingPoint((5.0, 5.0)))
        self.assertEqual(logits[0], 1.0)
        self.assertAlmostEqual(logits[1], -0.01, places=15)

    def test_layer_by_layer(self):
        spec = ClassifierSpec(2, 0.01)
        rng = np.random.default_rng(4)
        params = ClassifierParams(spec, [
            (rng.standard_normal(shape), rng.standard_normal(shape[0]))
            for shape in spec.linear_shapes])
        x = np.array([0.7, -1.3])
        (w1, b1), (w2, b2), (w3, b3), (w4, b4), (w5, b5) = params.weights
        relu = lambda v: np.maximum(v, 0)
        h = relu(w1 @ x + b1)
        h = w2 @ h + b2
        h = relu(w3 @ h + b3)
        h = relu(w4 @ h + b4)
        h = w5 @ h + b5
        expected = np.where(h > 0, h, 0.01 * h)
        np.testing.assert_allclose(classifier_forward(params, EmbeddingPoint(x)), expected,
                                   rtol=1e-12, atol=1e-12)

    def test_trace_widths(self):
        network = ClassificationNetwork(ClassifierSpec(2))
        self.assertEqual(network.trace(torch.zeros(1, 2)), [2, 2, 128, 256, 256, 128, 128, 2, 2])

    def test_decide(self):
        self.assertEqual(decide((0.0, 0.0)), (Label.REAL, 0.5))
        label, score = decide((-5.0, 5.0))
        self.assertEqual(label, Label.FAKE)
        self.assertAlmostEqual(score, 1 / (1 + math.exp(-10)), places=15)
        self.assertAlmostEqual(score, 0.9999546, places=7)

    def test_forward_shape_mismatch(self):
        params = ClassifierParams.zeros(ClassifierSpec(2))
        with self.assertRaises(ShapeError):
            classifier_forward(params, EmbeddingPoint((1.0, 2.0, 3.0)))

    def clusters(self, seed=0, n=50):
        rng = np.random.default_rng(seed)
        features = []
        for label, center in ((Label.REAL, -2.0), (Label.FAKE, 2.0)):
            for point in np.full(2, center) + 0.1 * rng.standard_normal((n, 2)):
                features.append((EmbeddingPoint(point), label))
        return features

    def test_initial_output(self):
        params = ClassifierParams.initialize(ClassifierSpec(2), 6)
        np.testing.assert_array_equal(params.weights[-1][0], np.zeros((2, 128)))
        for point in (EmbeddingPoint((2.0, 2.0)), EmbeddingPoint((-2.0, -2.0))):
            self.assertEqual(classifier_forward(params, point), (0.01, 0.01))
        hidden = [w for w, _ in params.weights[:-1]]
        self.assertTrue(all(w.std() > 0 for w in hidden))

    def test_train_separable(self):
        # Default stage-2 hyperparameters, at most the default 50 epochs.
        for seed in range(5):
            with self.subTest(seed=seed):
                features = self.clusters(seed)
                params, history = train_classifier(features, RunConfig(seed=seed))
                self.assertEqual(len(history), 50)
                self.assertLess(history[-1], history[0])
                correct = sum(predict(params, point)[0] == label for point, label in features)
                self.assertEqual(correct, len(features))

    def test_train_zero_epochs(self):
        config = RunConfig(stage2_epochs=0, seed=5)
        params, history = train_classifier(self.clusters(), config)
        self.assertEqual(history, [])
        self.assertEqual(params, ClassifierParams.initialize(ClassifierSpec(2), 5))

    def test_train_deterministic(self):
        config = RunConfig(stage2_epochs=3, seed=8)
        first, history1 = train_classifier(self.clusters(), config)
        second, history2 = train_classifier(self.clusters(), config)
        self.assertEqual(first, second)
        self.assertEqual(history1, history2)

    def test_train_single_class(self):
        features = [(EmbeddingPoint((0.0, 0.0)), Label.REAL)] * 3
        with self.assertRaises(SingleClassError):
            train_classifier(features, RunConfig())

    def test_files_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            rows = [FeatureRow("a", EmbeddingPoint((0.1, 1 / 3)), Label.REAL),
                    FeatureRow("b", EmbeddingPoint((-2.5, 1e-17)), Label.FAKE)]
            self.assertEqual(load_features(save_features(Path(tmp) / "f.csv", rows)), rows)
            config = RunConfig(seed=2)
            params = ClassifierParams.initialize(ClassifierSpec(2), 2)
            path = save_classifier(Path(tmp) / "c.pt", params, config, [0.7])
            loaded, checkpoint = load_classifier(path)
            self.assertEqual(loaded, params)
            self.assertEqual(checkpoint["history"], [0.7])
