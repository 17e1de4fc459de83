import enum
import json
import logging
import math
import tempfile
import unittest
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .core import *
from .backbones import BackboneClassifier
from .data import ImageStore, SyntheticSpec, generate_synthetic
from .tripletnet import *
from .classifier import *
from .metrics import *


__all__ = [
    "PipelineMode", "ExperimentPlan", "load_plan", "RunLayout", "AblationResult",
    "run_stage1", "run_extract", "run_stage2", "score_samples", "run_eval", "run_pipeline",
    "train_backbone_classifier", "run_baseline", "run_ablation", "run_cross", "run_methods",
]


logger = logging.getLogger(__name__)


class PipelineMode(enum.Enum):
    TRIPLET_PIPELINE = "triplet_pipeline"
    BACKBONE_ONLY    = "backbone_only"


@dataclass(frozen=True)
class ExperimentPlan:
    train_manifest: Manifest
    eval_manifests: tuple
    config: RunConfig = field(default_factory=RunConfig)
    mode: PipelineMode = PipelineMode.TRIPLET_PIPELINE
    output_dir: Path = Path("run")

    def __post_init__(self):
        object.__setattr__(self, "eval_manifests", tuple(self.eval_manifests))
        object.__setattr__(self, "mode", PipelineMode(self.mode))
        object.__setattr__(self, "output_dir", Path(self.output_dir))
        if not self.eval_manifests:
            raise ConfigError("an experiment plan needs at least one evaluation manifest")

    @property
    def train_name(self):
        return self.train_manifest.dataset_name


_PLAN_KEYS = ("train_manifest", "eval_manifests", "mode", "output_dir")


def load_plan(path):
    """
    Read an experiment plan: the configuration file format, plus the keys ``train_manifest``,
    ``eval_manifests`` (comma separated, defaults to the training manifest), ``mode`` and
    ``output_dir``. Relative paths are taken from the plan's directory.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as error:
        raise ConfigError("cannot read plan {}: {}".format(path, error)) from None
    entries = parse_key_values(text, source=str(path))
    plan_entries = {key: entries.pop(key) for key in _PLAN_KEYS if key in entries}
    if "train_manifest" not in plan_entries:
        raise ConfigError("{}: plan has no train_manifest".format(path))

    base = path.parent
    train = load_manifest(base / plan_entries["train_manifest"])
    evals = [load_manifest(base / name.strip())
             for name in plan_entries.get("eval_manifests", "").split(",") if name.strip()]
    mode = plan_entries.get("mode", PipelineMode.TRIPLET_PIPELINE.value).lower()
    for member in PipelineMode:
        if mode in (member.value, member.name.lower()):
            break
    else:
        raise ConfigError("{}: unknown mode {!r}".format(path, mode))
    return ExperimentPlan(train, evals or [train], config_from_mapping(entries), member,
                          base / plan_entries.get("output_dir", "run"))


def _slug(name):
    return name.replace("/", "-").replace("\\", "-")


class RunLayout:
    """File names of a run directory."""
    subdirs = ("checkpoints", "features", "scores", "reports", "logs")

    def __init__(self, root):
        self.root = Path(root)

    def create(self):
        for subdir in self.subdirs:
            (self.root / subdir).mkdir(parents=True, exist_ok=True)
        return self

    def backbone(self, train, variant="triplet"):
        suffix = "backbone" if variant == "triplet" else variant
        return self.root / "checkpoints" / "{}.{}.pt".format(_slug(train), suffix)

    def classifier(self, train):
        return self.root / "checkpoints" / "{}.classifier.pt".format(_slug(train))

    def features(self, train, test, split):
        return self.root / "features" / "{}__{}.{}.csv".format(_slug(train), _slug(test),
                                                               split.value)

    def scores(self, train, test, variant="triplet"):
        suffix = "" if variant == "triplet" else "." + variant
        return self.root / "scores" / "{}__{}{}.csv".format(_slug(train), _slug(test), suffix)

    def report(self, train, test, variant="triplet"):
        suffix = "" if variant == "triplet" else "." + variant
        return self.root / "reports" / "{}__{}{}.json".format(_slug(train), _slug(test), suffix)

    def table(self, name):
        return self.root / "reports" / "{}.txt".format(name)

    def history(self, train):
        return self.root / "logs" / "{}.history.json".format(_slug(train))

    def record_history(self, train, stage, history):
        path = self.history(train)
        data = json.loads(path.read_text()) if path.exists() else {}
        data[stage] = [float(x) for x in history]
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


_BATCH = 64


def _images(manifest, crop_size, samples):
    images = ImageStore(manifest, crop_size)
    images.preload(samples)
    return images


def _new_backbone(config):
    spec = BackboneSpec.from_config(config)
    pretrained = env_pretrained() if spec.kind is BackboneKind.XCEPTION_ADAPTER else None
    return build_backbone(spec, config.seed, pretrained)


def run_stage1(plan):
    if plan.mode is not PipelineMode.TRIPLET_PIPELINE:
        raise ConfigError("stage 1 is part of the triplet pipeline, not {}"
                          .format(plan.mode.value))
    config = plan.config
    layout = RunLayout(plan.output_dir).create()
    backbone = _new_backbone(config)
    images = _images(plan.train_manifest, config.crop_size,
                     plan.train_manifest.select(split=Split.TRAIN).samples)
    backbone, history = train_embedding(plan.train_manifest, backbone, config, images)
    layout.record_history(plan.train_name, "stage1", history)
    path = save_backbone(layout.backbone(plan.train_name), backbone, config, history)
    logger.info("stage 1 checkpoint %s (parameters %s)", path, parameter_digest(backbone)[:16])
    return path


def run_extract(plan, checkpoint, manifest, split=None, path=None):
    """
    Embed the samples of ``manifest`` (only ``split`` if given) with the backbone in
    ``checkpoint``, in evaluation mode, and write a feature file in manifest order.
    """
    backbone, _ = load_backbone(checkpoint)
    if backbone.spec.embedding_dim != plan.config.embedding_dim:
        raise ShapeError("checkpoint embeds into {} dimensions, the configuration asks for {}"
                         .format(backbone.spec.embedding_dim, plan.config.embedding_dim))
    samples = manifest.samples if split is None else manifest.select(split=split).samples
    images = _images(manifest, backbone.input_shape[0], samples)
    rows = []
    for start in range(0, len(samples), _BATCH):
        chunk = samples[start:start + _BATCH]
        points = embed_batch(backbone, [images[s] for s in chunk])
        rows += [FeatureRow(s.id, EmbeddingPoint(p), s.label) for s, p in zip(chunk, points)]
    if path is None:
        path = RunLayout(plan.output_dir).features(
            plan.train_name, manifest.dataset_name, split or Split.TEST)
    save_features(path, rows)
    logger.info("extracted %d feature rows to %s", len(rows), path)
    return Path(path)


def run_stage2(plan, features):
    """
    Train the classifier on a feature file. Every row must be a TRAIN sample of the plan's
    training manifest; anything else raises ``SplitError``.
    """
    rows = load_features(features)
    train_ids = {s.id for s in plan.train_manifest.select(split=Split.TRAIN)}
    outside = [row.id for row in rows if row.id not in train_ids]
    if outside:
        raise SplitError("{} has {} rows that are not TRAIN samples of {}, e.g. {!r}"
                         .format(features, len(outside), plan.train_name, outside[0]))
    params, history = train_classifier([(row.point, row.label) for row in rows], plan.config)
    layout = RunLayout(plan.output_dir).create()
    layout.record_history(plan.train_name, "stage2", history)
    return save_classifier(layout.classifier(plan.train_name), params, plan.config, history)


def score_samples(manifest, scorer):
    """
    Score the TEST split of ``manifest`` with ``scorer(manifest, samples)``, which returns one
    fake score per sample.
    """
    samples = manifest.select(split=Split.TEST).samples
    labels = {s.label for s in samples}
    if len(labels) < 2:
        raise SingleClassError("TEST split of {} lacks {} samples".format(
            manifest.dataset_name,
            " and ".join(l.name for l in Label if l not in labels)))
    scores = list(scorer(manifest, samples))
    if len(scores) != len(samples):
        raise ShapeError("scorer returned {} scores for {} samples"
                         .format(len(scores), len(samples)))
    return [ScoreRecord(s.id, s.label, float(score)) for s, score in zip(samples, scores)]


def _pipeline_scorer(backbone, params):
    def scorer(manifest, samples):
        images = _images(manifest, backbone.input_shape[0], samples)
        scores = []
        for start in range(0, len(samples), _BATCH):
            chunk = samples[start:start + _BATCH]
            logits = classifier_logits(params, embed_batch(backbone, [images[s] for s in chunk]))
            scores += [decide(pair)[1] for pair in logits]
        return scores
    return scorer


def _finish_eval(records, scores_path, report_path, **names):
    save_scores(scores_path, records)
    report = evaluate(records)
    if report_path is not None:
        save_report(report_path, report, **names)
    logger.info("%s on %s: AUC %.4f, EER %.4f", names.get("train", "?"), names.get("test", "?"),
                report.auc, report.eer)
    return report


def run_eval(backbone_checkpoint, classifier_checkpoint, manifest, *, scores_path,
             report_path=None, train=None):
    """Score every TEST sample by embedding and classifying it. Returns ``(report, scores)``."""
    backbone, _ = load_backbone(backbone_checkpoint)
    params, _ = load_classifier(classifier_checkpoint)
    records = score_samples(manifest, _pipeline_scorer(backbone, params))
    report = _finish_eval(records, scores_path, report_path, test=manifest.dataset_name,
                          **({"train": train} if train else {}))
    return report, Path(scores_path)


def _train_triplet(plan, layout):
    backbone = run_stage1(plan)
    features = run_extract(plan, backbone, plan.train_manifest, split=Split.TRAIN,
                           path=layout.features(plan.train_name, plan.train_name, Split.TRAIN))
    return backbone, run_stage2(plan, features)


def _evaluate_triplet(plan, layout, backbone, classifier, manifest, test=None):
    train = plan.train_name
    test = test or manifest.dataset_name
    run_extract(plan, backbone, manifest, split=Split.TEST,
                path=layout.features(train, test, Split.TEST))
    report, _ = run_eval(backbone, classifier, manifest, scores_path=layout.scores(train, test),
                         report_path=layout.report(train, test), train=train)
    return report


def run_pipeline(plan):
    """Both stages on the training manifest, then evaluation on every evaluation manifest."""
    if plan.mode is PipelineMode.BACKBONE_ONLY:
        return run_baseline(plan)
    layout = RunLayout(plan.output_dir).create()
    backbone, classifier = _train_triplet(plan, layout)
    return {(plan.train_name, manifest.dataset_name):
            _evaluate_triplet(plan, layout, backbone, classifier, manifest)
            for manifest in plan.eval_manifests}


def train_backbone_classifier(manifest, backbone, config, images=None):
    """
    Train ``backbone`` together with a linear two-logit layer on its pooled features using
    cross-entropy, on the stage 1 schedule: the same epochs, learning rate, momentum and
    number of steps per epoch. A step sees as many images as a stage 1 step, three per
    triplet, drawn from back-to-back shuffles of the TRAIN split so every batch is full.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = BackboneClassifier(backbone)
    history = []
    if config.stage1_epochs == 0:
        return model, history

    train = manifest.select(split=Split.TRAIN).samples
    if len({s.label for s in train}) < 2:
        raise SingleClassError("baseline training needs real and fake TRAIN samples")
    images = images or ImageStore(manifest, config.crop_size)
    steps = max(1, math.ceil(len(train) / config.stage1_batch))
    per_step = 3 * config.stage1_batch
    shuffles = math.ceil(steps * per_step / len(train))
    device = torch.device(env_device())
    model.to(device)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.stage1_lr,
                                momentum=config.stage1_momentum)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model.train()
        for epoch in range(config.stage1_epochs):
            rng = np.random.default_rng(epoch_seed(config.seed, 3, epoch))
            order = np.concatenate([rng.permutation(len(train)) for _ in range(shuffles)])
            total = 0.0
            for step in range(steps):
                batch = [train[i] for i in order[step * per_step:(step + 1) * per_step]]
                labels = torch.tensor([int(s.label) for s in batch], device=device)
                loss = F.cross_entropy(model(images.batch(batch).to(device)), labels)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item()
            history.append(total / steps)
            logger.info("baseline epoch %d/%d: mean cross-entropy %.6f",
                        epoch + 1, config.stage1_epochs, history[-1])
    model.eval()
    return model.cpu(), history


def _baseline_scorer(model):
    def scorer(manifest, samples):
        images = _images(manifest, model.backbone.input_shape[0], samples)
        scores = []
        model.eval()
        with torch.no_grad():
            for start in range(0, len(samples), _BATCH):
                logits = model(images.batch(samples[start:start + _BATCH])).double()
                scores += [decide(pair)[1] for pair in logits.tolist()]
        return scores
    return scorer


def run_baseline(plan):
    """The backbone trained directly as a classifier, evaluated on every evaluation manifest."""
    config = plan.config
    layout = RunLayout(plan.output_dir).create()
    train = plan.train_name
    backbone = _new_backbone(config)
    images = _images(plan.train_manifest, config.crop_size,
                     plan.train_manifest.select(split=Split.TRAIN).samples)
    model, history = train_backbone_classifier(plan.train_manifest, backbone, config, images)
    layout.record_history(train, "baseline", history)
    save_backbone(layout.backbone(train, "baseline"), model.backbone, config, history,
                  trainer="baseline",
                  extra={"logits": {k: v.detach().cpu()
                                    for k, v in model.logits.state_dict().items()}})
    results = {}
    for manifest in plan.eval_manifests:
        test = manifest.dataset_name
        records = score_samples(manifest, _baseline_scorer(model))
        results[(train, test)] = _finish_eval(
            records, layout.scores(train, test, "baseline"),
            layout.report(train, test, "baseline"), train=train, test=test)
    return results


@dataclass(frozen=True)
class AblationResult:
    triplet:  dict
    baseline: dict

    def to_dict(self):
        cells = []
        for (train, test), report in self.triplet.items():
            baseline = self.baseline[(train, test)]
            cells.append({
                "train": train, "test": test,
                "triplet":  {"auc": report.auc, "accuracy_at_half": report.accuracy_at_half},
                "baseline": {"auc": baseline.auc, "accuracy_at_half": baseline.accuracy_at_half},
            })
        return {"cells": cells}


def run_ablation(plan):
    """Run both modes on the same plan, data and seed."""
    triplet = run_pipeline(replace(plan, mode=PipelineMode.TRIPLET_PIPELINE))
    baseline = run_baseline(replace(plan, mode=PipelineMode.BACKBONE_ONLY))
    result = AblationResult(triplet, baseline)
    path = RunLayout(plan.output_dir).root / "reports" / "ablation.json"
    path.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    return result


def run_cross(plans):
    """Train one pipeline per plan and tabulate every (train, test) AUC."""
    results = {}
    for plan in plans:
        results.update(run_pipeline(plan))
    table = cross_matrix(results)
    if plans:
        path = RunLayout(plans[0].output_dir).create().table("cross")
        path.write_text(table)
    return table, results


def run_methods(plan):
    """
    Train on the whole training manifest, then evaluate on each manipulation method's test
    fakes against all test reals, and on their combination.
    """
    layout = RunLayout(plan.output_dir).create()
    backbone, classifier = _train_triplet(plan, layout)
    reports = {}
    for method, manifest in split_by_method(plan.train_manifest).items():
        if not manifest.select(split=Split.TEST, label=Label.FAKE).samples:
            logger.warning("method %s has no TEST fakes, skipped", method)
            continue
        reports[method] = _evaluate_triplet(plan, layout, backbone, classifier, manifest,
                                            test=manifest.dataset_name)
    table = method_table(reports)
    layout.table("methods").write_text(table)
    return table, reports


class TestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.manifest = generate_synthetic(SyntheticSpec(10, 10, image_size=16, seed=1),
                                           self.tmp / "data")
        self.config = RunConfig(crop_size=16, stage1_epochs=1, stage2_epochs=2, seed=4)

    def tearDown(self):
        self._tmp.cleanup()

    def plan(self, name="run", **kwargs):
        return ExperimentPlan(self.manifest, [self.manifest],
                              replace(self.config, **kwargs), output_dir=self.tmp / name)

    def test_plan_needs_eval(self):
        with self.assertRaises(ConfigError):
            ExperimentPlan(self.manifest, [])

    def test_load_plan(self):
        (self.tmp / "plan.cfg").write_text(
            "train_manifest = data/manifest.csv\n"
            "mode = backbone_only\n"
            "stage1_epochs = 3\n")
        plan = load_plan(self.tmp / "plan.cfg")
        self.assertEqual(plan.mode, PipelineMode.BACKBONE_ONLY)
        self.assertEqual(plan.config.stage1_epochs, 3)
        self.assertEqual(plan.eval_manifests, (plan.train_manifest,))
        self.assertEqual(plan.output_dir, self.tmp / "run")

    def test_stage1_history(self):
        path = run_stage1(self.plan(stage1_epochs=0))
        _, checkpoint = load_backbone(path)
        self.assertEqual(checkpoint["history"], [])
        path = run_stage1(self.plan(stage1_epochs=2))
        self.assertEqual(len(load_backbone(path)[1]["history"]), 2)

    def test_extract(self):
        plan = self.plan()
        checkpoint = run_stage1(plan)
        first = run_extract(plan, checkpoint, self.manifest, path=self.tmp / "a.csv")
        second = run_extract(plan, checkpoint, self.manifest, path=self.tmp / "b.csv")
        self.assertEqual(first.read_bytes(), second.read_bytes())
        rows = load_features(first)
        self.assertEqual([r.id for r in rows], [s.id for s in self.manifest])
        self.assertEqual(len(first.read_text().splitlines()[1].split(",")), 2 + 2)

    def test_extract_duplicate(self):
        plan = self.plan()
        checkpoint = run_stage1(plan)
        sample = self.manifest.samples[0]
        manifest = Manifest([sample, self.manifest.samples[1], sample], "dup",
                            root=self.manifest.root)
        rows = load_features(run_extract(plan, checkpoint, manifest, path=self.tmp / "d.csv"))
        np.testing.assert_allclose(rows[0].point.coords, rows[2].point.coords, atol=1e-9)

    def test_extract_dimension_mismatch(self):
        checkpoint = run_stage1(self.plan())
        with self.assertRaises(ShapeError):
            run_extract(self.plan(embedding_dim=3), checkpoint, self.manifest)

    def test_stage_separation(self):
        plan = self.plan()
        layout = RunLayout(plan.output_dir).create()
        checkpoint = run_stage1(plan)
        before = parameter_digest(load_backbone(checkpoint)[0])
        features = run_extract(plan, checkpoint, self.manifest, split=Split.TRAIN,
                               path=layout.features("a", "a", Split.TRAIN))
        run_stage2(plan, features)
        self.assertEqual(parameter_digest(load_backbone(checkpoint)[0]), before)

    def test_stage2_rejects_test_features(self):
        plan = self.plan()
        checkpoint = run_stage1(plan)
        features = run_extract(plan, checkpoint, self.manifest, split=Split.TEST,
                               path=self.tmp / "test.csv")
        with self.assertRaises(SplitError):
            run_stage2(plan, features)
        features = run_extract(plan, checkpoint, self.manifest, split=None,
                               path=self.tmp / "all.csv")
        with self.assertRaises(SplitError):
            run_stage2(plan, features)
        self.assertFalse(RunLayout(plan.output_dir).classifier(plan.train_name).exists())

    def test_baseline_full_batches(self):
        # 16 TRAIN samples do not divide into batches of 5 triplets.
        config = replace(self.config, stage1_batch=5, stage1_epochs=2)
        backbone = build_backbone(BackboneSpec.from_config(config), config.seed)
        model, history = train_backbone_classifier(self.manifest, backbone, config)
        self.assertEqual(len(history), 2)
        self.assertTrue(all(math.isfinite(loss) for loss in history))

    def test_oracle_scorer(self):
        records = score_samples(self.manifest, lambda m, samples: [float(s.label) for s in samples])
        report = evaluate(records)
        self.assertEqual((report.auc, report.eer), (1.0, 0.0))

    def test_single_class_test_split(self):
        samples = [s for s in self.manifest
                   if s.split == Split.TRAIN or s.label == Label.REAL]
        manifest = Manifest(samples, "reals", root=self.manifest.root)
        with self.assertRaises(SingleClassError):
            score_samples(manifest, lambda m, samples: [0.5] * len(samples))

    def test_pipeline_deterministic(self):
        first = run_pipeline(self.plan("one"))
        second = run_pipeline(self.plan("two"))
        self.assertEqual(first, second)
        layout1, layout2 = RunLayout(self.tmp / "one"), RunLayout(self.tmp / "two")
        name = self.manifest.dataset_name
        self.assertEqual(layout1.scores(name, name).read_bytes(),
                         layout2.scores(name, name).read_bytes())
        self.assertAlmostEqual(pairwise_auc(load_scores(layout1.scores(name, name))),
                               first[(name, name)].auc, delta=1e-12)

    def test_ablation_pairs(self):
        result = run_ablation(self.plan())
        self.assertEqual(set(result.triplet), set(result.baseline))
        cells = json.loads((self.tmp / "run" / "reports" / "ablation.json").read_text())["cells"]
        self.assertEqual(len(cells), 1)

    def test_methods(self):
        table, reports = run_methods(self.plan())
        self.assertEqual(list(reports), ["warp_patch", "Combination"])
        self.assertEqual(table.splitlines()[0].split(), ["metric", "warp_patch", "Combination"])
        self.assertTrue((self.tmp / "run" / "reports" / "methods.txt").exists())

    def test_cross_single(self):
        table, results = run_cross([self.plan()])
        self.assertEqual(list(results), [("synthetic", "synthetic")])
        self.assertEqual(len(table.splitlines()), 3)
        self.assertTrue(table.splitlines()[1].endswith("*"))
