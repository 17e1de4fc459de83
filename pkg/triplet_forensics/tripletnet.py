import hashlib
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

from .core import *
from .backbones import *
from .data import ImageStore
from .metrics import silhouette


__all__ = [
    "BackboneSpec", "BACKBONES", "build_backbone", "EmbeddingPoint", "Triplet",
    "TripletDistances", "embed", "embed_batch", "triplet_distances", "triplet_forward",
    "loss_softmax_ratio", "loss_margin", "triplet_loss", "loss_gradient", "sample_triplets",
    "epoch_seed", "train_embedding", "parameter_digest", "save_backbone", "load_backbone",
]


logger = logging.getLogger(__name__)


BACKBONES = {
    BackboneKind.TINY_CONV:        TinyConvBackbone,
    BackboneKind.XCEPTION_ADAPTER: XceptionAdapterBackbone,
    BackboneKind.LINEAR:           LinearBackbone,
}


@dataclass(frozen=True)
class BackboneSpec:
    input_shape: tuple
    embedding_dim: int = 2
    kind: BackboneKind = BackboneKind.TINY_CONV
    dropout_rate: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        object.__setattr__(self, "kind", BackboneKind(self.kind))

    @classmethod
    def from_config(cls, config):
        return cls((config.crop_size, config.crop_size, 3), config.embedding_dim,
                   config.backbone, config.dropout_rate)

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "embedding_dim": self.embedding_dim,
                "kind": self.kind.value, "dropout_rate": self.dropout_rate}


def build_backbone(spec, seed=0, pretrained=None):
    """
    A freshly initialised backbone for ``spec``; ``pretrained`` names a weight file for
    backbones with a ``load_pretrained`` method.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        backbone = BACKBONES[spec.kind](spec.input_shape, spec.embedding_dim, spec.dropout_rate)
    backbone.spec = spec
    if pretrained is not None:
        if not hasattr(backbone, "load_pretrained"):
            raise ConfigError("the {} backbone takes no pretrained weights"
                              .format(spec.kind.value))
        backbone.load_pretrained(pretrained)
    return backbone


@dataclass(frozen=True)
class EmbeddingPoint:
    coords: tuple

    def __post_init__(self):
        coords = tuple(float(c) for c in self.coords)
        if not coords or not all(math.isfinite(c) for c in coords):
            raise ValueError("embedding coordinates must be finite, got {!r}".format(coords))
        object.__setattr__(self, "coords", coords)

    @property
    def dim(self):
        return len(self.coords)


@dataclass(frozen=True)
class Triplet:
    anchor: Sample
    positive: Sample
    negative: Sample

    def __post_init__(self):
        if self.anchor.label != self.positive.label or self.anchor.label == self.negative.label:
            raise ValueError("triplet needs label(anchor) == label(positive) != label(negative)")


class TripletDistances(NamedTuple):
    """Both components of the triplet network output, in its order: negative first."""
    d_neg: float
    d_pos: float


def _image_batch(backbone, images):
    batch = torch.as_tensor(np.stack([np.asarray(image, np.float32) for image in images]))
    if tuple(batch.shape[1:]) != backbone.input_shape:
        raise ShapeError("image shape {} does not match backbone input {}"
                         .format(tuple(batch.shape[1:]), backbone.input_shape))
    return batch.permute(0, 3, 1, 2).contiguous()


def embed_batch(backbone, images):
    """Evaluation-mode embeddings of a sequence of (H, W, C) images, as an (N, E) array."""
    training = backbone.training
    backbone.eval()
    try:
        with torch.no_grad():
            device = next(backbone.parameters()).device
            return backbone(_image_batch(backbone, images).to(device)).double().cpu().numpy()
    finally:
        backbone.train(training)


def embed(backbone, image):
    return EmbeddingPoint(embed_batch(backbone, [image])[0])


def triplet_distances(anchor, positive, negative):
    return TripletDistances(d_neg=torch.linalg.vector_norm(anchor - negative, dim=-1),
                            d_pos=torch.linalg.vector_norm(anchor - positive, dim=-1))


def triplet_forward(backbone, anchor, negative, positive):
    points = torch.from_numpy(embed_batch(backbone, [anchor, negative, positive]))
    d = triplet_distances(points[0], points[2], points[1])
    return TripletDistances(float(d.d_neg), float(d.d_pos))


def _as_tensors(d):
    if isinstance(d.d_neg, torch.Tensor):
        return d.d_neg, d.d_pos, False
    return (torch.tensor(float(d.d_neg), dtype=torch.float64),
            torch.tensor(float(d.d_pos), dtype=torch.float64), True)


def loss_softmax_ratio(d):
    d_neg, d_pos, scalar = _as_tensors(d)
    # softmax subtracts the maximum before exponentiating.
    ratio = torch.softmax(torch.stack([d_pos, d_neg], dim=-1), dim=-1)[..., 0]
    loss = ratio ** 2
    return float(loss) if scalar else loss


def loss_margin(d, margin):
    assert margin >= 0
    d_neg, d_pos, scalar = _as_tensors(d)
    loss = torch.clamp(d_pos - d_neg + margin, min=0)
    return float(loss) if scalar else loss


def triplet_loss(d, config):
    if config.loss_kind == LossKind.MARGIN:
        return loss_margin(d, config.margin)
    return loss_softmax_ratio(d)


def loss_gradient(anchor, positive, negative, loss_kind=LossKind.SOFTMAX_RATIO, margin=0.2):
    """
    Analytic gradient of the triplet loss with respect to the three embedding points.

    Subgradients: zero at the hinge kink, and no contribution from a distance whose two
    points coincide.
    """
    a = np.asarray(anchor, np.float64)
    p = np.asarray(positive, np.float64)
    n = np.asarray(negative, np.float64)
    d_pos = float(np.linalg.norm(a - p))
    d_neg = float(np.linalg.norm(a - n))

    if LossKind(loss_kind) == LossKind.MARGIN:
        active = d_pos - d_neg + margin > 0
        dl_dpos, dl_dneg = (1.0, -1.0) if active else (0.0, 0.0)
    else:
        s = loss_softmax_ratio(TripletDistances(d_neg, d_pos)) ** 0.5
        dl_dpos = 2 * s * s * (1 - s)
        dl_dneg = -dl_dpos

    u_pos = (a - p) / d_pos if d_pos > 0 else np.zeros_like(a)
    u_neg = (a - n) / d_neg if d_neg > 0 else np.zeros_like(a)
    grad_anchor   = dl_dpos * u_pos + dl_dneg * u_neg
    grad_positive = -dl_dpos * u_pos
    grad_negative = -dl_dneg * u_neg
    return grad_anchor, grad_positive, grad_negative


def sample_triplets(manifest, count, seed):
    """
    Draw ``count`` triplets from the TRAIN split: anchors uniformly over all TRAIN samples,
    positives uniformly from the anchor's class excluding the anchor, negatives uniformly
    from the other class.
    """
    if count == 0:
        return []
    train = manifest.select(split=Split.TRAIN).samples
    by_label = {label: [s for s in train if s.label == label] for label in Label}
    for label, members in by_label.items():
        if len(members) < 2:
            raise SingleClassError("need at least two TRAIN samples labeled {} to draw a "
                                   "positive distinct from the anchor, found {}"
                                   .format(label.name, len(members)))

    positions = {s.id: i for members in by_label.values() for i, s in enumerate(members)}
    rng = np.random.default_rng(seed)
    anchors = rng.integers(0, len(train), size=count)
    triplets = []
    for index in anchors:
        anchor = train[index]
        same = by_label[anchor.label]
        other = by_label[Label(1 - anchor.label)]
        anchor_position = positions[anchor.id]
        position = int(rng.integers(0, len(same) - 1))
        if position >= anchor_position:
            position += 1
        negative = other[int(rng.integers(0, len(other)))]
        triplets.append(Triplet(anchor, same[position], negative))
    return triplets


def epoch_seed(seed, stage, epoch):
    return int(np.random.SeedSequence([seed, stage, epoch]).generate_state(1, np.uint64)[0])


def train_embedding(manifest, backbone, config, images=None):
    """
    Train ``backbone`` with SGD on freshly sampled triplets; an epoch is one triplet per
    TRAIN sample, in batches of ``config.stage1_batch`` triplets. Returns the backbone and
    the mean loss of every epoch.
    """
    history = []
    if config.stage1_epochs == 0:
        return backbone, history

    images = images or ImageStore(manifest, config.crop_size)
    n_train = len(manifest.select(split=Split.TRAIN))
    steps = max(1, math.ceil(n_train / config.stage1_batch))
    device = torch.device(env_device())
    backbone.to(device)
    optimizer = torch.optim.SGD(backbone.parameters(), lr=config.stage1_lr,
                                momentum=config.stage1_momentum)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        backbone.train()
        for epoch in range(config.stage1_epochs):
            triplets = sample_triplets(manifest, steps * config.stage1_batch,
                                       epoch_seed(config.seed, 1, epoch))
            total = 0.0
            for step in range(steps):
                batch = triplets[step * config.stage1_batch:(step + 1) * config.stage1_batch]
                samples = ([t.anchor for t in batch] + [t.positive for t in batch] +
                           [t.negative for t in batch])
                points = backbone(images.batch(samples).to(device))
                anchor, positive, negative = points.split(len(batch))
                loss = triplet_loss(triplet_distances(anchor, positive, negative), config).mean()
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item()
            history.append(total / steps)
            logger.info("stage 1 epoch %d/%d: mean triplet loss %.6f",
                        epoch + 1, config.stage1_epochs, history[-1])
    backbone.eval()
    return backbone, history


def parameter_digest(module):
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


_BACKBONE_FORMAT = "triplet-forensics/backbone"


def save_backbone(path, backbone, config, history=(), trainer="triplet", extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format":     _BACKBONE_FORMAT,
        "version":    1,
        "spec":       backbone.spec.to_dict(),
        "state_dict": {k: v.detach().cpu() for k, v in backbone.state_dict().items()},
        "config":     config.to_dict(),
        "seed":       config.seed,
        "history":    [float(x) for x in history],
        "trainer":    trainer,
        **(extra or {}),
    }, path)
    return path


def load_backbone(path):
    """Returns ``(backbone, checkpoint)``; the backbone is in evaluation mode."""
    try:
        checkpoint = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, ValueError, pickle.UnpicklingError) as error:
        raise CheckpointError("cannot read backbone checkpoint {}: {}".format(path, error)) \
            from None
    if not isinstance(checkpoint, dict) or checkpoint.get("format") != _BACKBONE_FORMAT:
        raise CheckpointError("{} is not a backbone checkpoint".format(path))
    spec = BackboneSpec(**checkpoint["spec"])
    backbone = build_backbone(spec)
    backbone.load_state_dict(checkpoint["state_dict"])
    backbone.eval()
    return backbone, checkpoint


class _ArrayImages:
    def __init__(self, arrays):
        self.arrays = arrays

    def batch(self, samples):
        array = np.stack([self.arrays[s.id] for s in samples])
        return torch.from_numpy(array).permute(0, 3, 1, 2).contiguous()


class TestCase(unittest.TestCase):
    def linear_backbone(self, weight, input_shape=(1, 2, 1)):
        backbone = build_backbone(BackboneSpec(input_shape, len(weight), BackboneKind.LINEAR, 0.0))
        with torch.no_grad():
            backbone.head[1].weight.copy_(torch.tensor(weight))
            backbone.head[1].bias.zero_()
        return backbone

    def test_embed_zero_weights(self):
        backbone = build_backbone(BackboneSpec((16, 16, 3)))
        with torch.no_grad():
            for parameter in backbone.parameters():
                parameter.zero_()
        image = np.random.default_rng(0).uniform(size=(16, 16, 3))
        self.assertEqual(embed(backbone, image).coords, (0.0, 0.0))

    def test_embed_deterministic(self):
        backbone = build_backbone(BackboneSpec((16, 16, 3)), seed=3)
        image = np.random.default_rng(1).uniform(size=(16, 16, 3))
        self.assertEqual(embed(backbone, image), embed(backbone, image.copy()))

    def test_embed_linear(self):
        backbone = self.linear_backbone([[1.0, 2.0], [-3.0, 0.5]])
        point = embed(backbone, np.array([[[0.25], [0.5]]]))
        self.assertAlmostEqual(point.coords[0], 1.0 * 0.25 + 2.0 * 0.5, places=6)
        self.assertAlmostEqual(point.coords[1], -3.0 * 0.25 + 0.5 * 0.5, places=6)

    def test_embed_shape_mismatch(self):
        backbone = build_backbone(BackboneSpec((16, 16, 3)))
        with self.assertRaises(ShapeError):
            embed(backbone, np.zeros((8, 8, 3)))

    def test_triplet_forward_345(self):
        backbone = self.linear_backbone([[1.0, 0.0], [0.0, 1.0]])
        pixels = lambda x, y: np.array([[[x], [y]]])
        d = triplet_forward(backbone, pixels(0, 0), pixels(3, 4), pixels(1, 0))
        self.assertAlmostEqual(d.d_neg, 5.0, places=6)
        self.assertAlmostEqual(d.d_pos, 1.0, places=6)
        d = triplet_forward(backbone, pixels(1, 2), pixels(3, 4), pixels(1, 2))
        self.assertEqual(d.d_pos, 0.0)

    def test_loss_softmax_ratio(self):
        self.assertAlmostEqual(loss_softmax_ratio(TripletDistances(1.5, 1.5)), 0.25, places=15)
        self.assertLess(loss_softmax_ratio(TripletDistances(100.0, 0.0)), 1e-80)
        e = math.e
        self.assertAlmostEqual(loss_softmax_ratio(TripletDistances(0.0, 1.0)),
                               (e / (1 + e)) ** 2, places=12)
        self.assertAlmostEqual(loss_softmax_ratio(TripletDistances(0.0, 1.0)), 0.534447, places=6)

    def test_loss_margin(self):
        self.assertEqual(loss_margin(TripletDistances(2.0, 1.0), 1.0), 0.0)
        self.assertAlmostEqual(loss_margin(TripletDistances(0.7, 0.7), 0.3), 0.3, places=15)
        self.assertAlmostEqual(loss_margin(TripletDistances(1.0, 2.5), 0.2), 1.7, places=12)

    def test_gradient_inactive_hinge(self):
        grads = loss_gradient([0, 0], [0.1, 0], [5, 0], LossKind.MARGIN, 0.2)
        for grad in grads:
            self.assertTrue((grad == 0).all())

    def test_gradient_mirror(self):
        ga, gp, gn = loss_gradient([0, 0], [1, 2], [-1, -2], LossKind.SOFTMAX_RATIO)
        # Reflecting the positive through the anchor gives the negative; their gradients agree,
        # so the descent directions are mirror images.
        np.testing.assert_allclose(gp, gn, rtol=0, atol=1e-15)
        np.testing.assert_allclose(ga + gp + gn, np.zeros(2), rtol=0, atol=1e-15)

    def test_sample_triplets(self):
        samples = [Sample("r", "r.png", Label.REAL, "toy", Split.TRAIN),
                   Sample("f", "f.png", Label.FAKE, "toy", Split.TRAIN)]
        manifest = Manifest(samples, "toy")
        self.assertEqual(sample_triplets(manifest, 0, 1), [])
        with self.assertRaises(SingleClassError):
            sample_triplets(manifest, 1, 1)

    def test_sample_triplets_labels(self):
        samples = [Sample("{}{}".format(label.name, i), "x.png", label, "toy", Split.TRAIN)
                   for label in Label for i in range(3)]
        triplets = sample_triplets(Manifest(samples, "toy"), 200, 5)
        self.assertEqual(triplets, sample_triplets(Manifest(samples, "toy"), 200, 5))
        for triplet in triplets:
            self.assertNotEqual(triplet.anchor, triplet.positive)
            self.assertEqual(triplet.anchor.label, triplet.positive.label)
            self.assertNotEqual(triplet.anchor.label, triplet.negative.label)

    def test_train_zero_epochs(self):
        backbone = build_backbone(BackboneSpec((16, 16, 3)), seed=1)
        before = parameter_digest(backbone)
        trained, history = train_embedding(Manifest((), "empty"), backbone,
                                           RunConfig(stage1_epochs=0, crop_size=16))
        self.assertEqual(history, [])
        self.assertEqual(parameter_digest(trained), before)

    def test_tiny_filter_norm(self):
        backbone = build_backbone(BackboneSpec((16, 16, 3)), seed=2)
        convs = [m for m in backbone.modules() if isinstance(m, torch.nn.Conv2d)]
        self.assertEqual([conv.out_channels for conv in convs], [8, 16, 32])
        for conv in convs:
            norms = conv.weight.detach().flatten(1).norm(dim=1)
            np.testing.assert_allclose(norms.numpy(), TinyConvBackbone.filter_norm, rtol=1e-5)

    def test_tiny_pooled_features_standardised(self):
        backbone = build_backbone(BackboneSpec((16, 16, 3)), seed=2).train()
        rng = np.random.default_rng(3)
        images = rng.uniform(size=(12, 3, 16, 16)) * rng.uniform(0.2, 1.0, size=(12, 1, 1, 1))
        with torch.no_grad():
            features = backbone.features(torch.as_tensor(images, dtype=torch.float32))
        self.assertEqual(tuple(features.shape), (12, 32))
        features = features.numpy()
        np.testing.assert_allclose(features.mean(0), 0.0, atol=1e-4)
        std = features.std(0)
        self.assertTrue((std <= 1 + 1e-4).all())
        self.assertTrue((std > 0.5).all())

    def test_training_separates_train_split(self):
        # Pixel 0 carries the label, pixel 1 is a larger nuisance.
        rng = np.random.default_rng(6)
        samples, arrays = [], {}
        for label, level in ((Label.REAL, 0.2), (Label.FAKE, 0.8)):
            for i in range(20):
                sample = Sample("{}{}".format(label.name, i), "x.png", label, "toy", Split.TRAIN)
                samples.append(sample)
                arrays[sample.id] = np.array(
                    [[[level + 0.05 * rng.standard_normal()], [3.0 * rng.uniform()]]],
                    np.float32)
        manifest = Manifest(samples, "toy")
        images = _ArrayImages(arrays)
        backbone = build_backbone(BackboneSpec((1, 2, 1), 2, BackboneKind.LINEAR, 0.0), seed=1)

        def score():
            points = embed_batch(backbone, [arrays[s.id] for s in samples])
            return silhouette(points, [s.label for s in samples])

        before = score()
        config = RunConfig(stage1_lr=0.1, stage1_epochs=100, crop_size=1, seed=3)
        backbone, history = train_embedding(manifest, backbone, config, images)
        self.assertLess(history[-1], history[0])
        self.assertGreater(score(), max(before, 0.5))

    def test_xception_adapter_head(self):
        backbone = build_backbone(BackboneSpec((64, 64, 3), 2, BackboneKind.XCEPTION_ADAPTER))
        self.assertEqual([type(m).__name__ for m in backbone.head], ["Dropout", "Linear"])
        self.assertEqual(backbone.head[1].out_features, 2)
        self.assertEqual(backbone.feature_dim, 2048)
        self.assertEqual(type(backbone.net).__name__, "Xception")
        self.assertEqual(embed(backbone, np.zeros((64, 64, 3))).dim, 2)

    def test_xception_pretrained(self):
        backbone = build_backbone(BackboneSpec((64, 64, 3), 2, BackboneKind.XCEPTION_ADAPTER))
        conv1 = backbone.net.conv1.weight
        with tempfile.TemporaryDirectory() as tmp:
            weights = torch.full_like(conv1, 0.125)
            path = Path(tmp) / "xception.pth"
            torch.save({"module.conv1.weight": weights, "fc.weight": torch.zeros(1000, 2048),
                        "stray.weight": torch.zeros(3)}, path)
            head = backbone.head[1].weight.detach().clone()
            missing, unused = backbone.load_pretrained(path)
            self.assertTrue(torch.equal(backbone.net.conv1.weight.detach(), weights))
            self.assertTrue(torch.equal(backbone.head[1].weight.detach(), head))
            self.assertNotIn("conv1.weight", missing)
            self.assertEqual(unused, ["stray.weight"])

            torch.save({"fc.weight": torch.zeros(1000, 2048), "other.bias": torch.zeros(4)},
                       path)
            with self.assertRaises(CheckpointError):
                backbone.load_pretrained(path)
            with self.assertRaises(CheckpointError):
                backbone.load_pretrained(Path(tmp) / "missing.pth")

    def test_pretrained_needs_support(self):
        with self.assertRaises(ConfigError):
            build_backbone(BackboneSpec((16, 16, 3)), pretrained="weights.pth")

    def test_checkpoint_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = RunConfig(crop_size=16, seed=9)
            backbone = build_backbone(BackboneSpec.from_config(config), seed=9)
            path = save_backbone(Path(tmp) / "b.pt", backbone, config, [0.5, 0.25])
            loaded, checkpoint = load_backbone(path)
            self.assertEqual(parameter_digest(loaded), parameter_digest(backbone))
            self.assertEqual(checkpoint["history"], [0.5, 0.25])
            self.assertEqual(checkpoint["spec"]["kind"], "tiny_conv")
            self.assertEqual(checkpoint["seed"], 9)
