import contextlib
import io
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

import cv2
import numpy as np
from sklearn.linear_model import LogisticRegression

from ..core import *
from ..data import *
from ..tripletnet import BackboneSpec, build_backbone, embed_batch, load_backbone, parameter_digest
from ..classifier import load_features
from ..metrics import *
from ..pipeline import *
from ..cli import cmd_dispatch, cmd_plot
from .fixtures import StubDetector, ThreadRecordingDetector, FailingDetector, write_video


def _quiet(argv):
    with contextlib.redirect_stdout(io.StringIO()) as out, \
            contextlib.redirect_stderr(io.StringIO()):
        status = cmd_dispatch(argv)
    return status, out.getvalue()


class IngestTestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def ingest(self, n_frames, stride, detector=None, name="v"):
        video = write_video(self.tmp / "{}.avi".format(name), n_frames)
        return ingest_video(video, detector or StubDetector(), crop_size=32, frame_stride=stride,
                            out_dir=self.tmp / "out", label=Label.FAKE, dataset="d",
                            split=Split.TRAIN, method="m")

    def test_stride(self):
        samples = self.ingest(10, 5)
        self.assertEqual([s.id for s in samples], ["v_f0", "v_f5"])
        for sample in samples:
            image = cv2.imread(str(self.tmp / "out" / sample.image_path))
            self.assertEqual(image.shape, (32, 32, 3))

    def test_stride_index_set(self):
        samples = self.ingest(30, 7)
        expected = ["v_f{}".format(i) for i in range(30) if i % 7 == 0]
        self.assertEqual([s.id for s in samples], expected)
        self.assertEqual(expected, ["v_f0", "v_f7", "v_f14", "v_f21", "v_f28"])

    def test_skipped_frame_logged(self):
        with self.assertLogs("triplet_forensics.data", "INFO") as logs:
            samples = self.ingest(10, 5, StubDetector(misses={1}))
        self.assertEqual([s.id for s in samples], ["v_f0"])
        self.assertTrue(any("frame 5 skipped" in line for line in logs.output))

    def test_detector_failure(self):
        with self.assertRaises(DetectorError) as context:
            self.ingest(10, 5, FailingDetector(at_call=1))
        self.assertEqual(context.exception.frame, 5)

    def test_undecodable(self):
        (self.tmp / "bad.avi").write_bytes(b"not a video")
        with self.assertRaises(VideoError):
            ingest_video(self.tmp / "bad.avi", StubDetector(), out_dir=self.tmp / "out",
                         label=Label.REAL, dataset="d", split=Split.TEST)

    def test_video_list(self):
        write_video(self.tmp / "b.avi", 6)
        write_video(self.tmp / "a.avi", 6)
        (self.tmp / "videos.csv").write_text(
            "path,label,split,method\n"
            "b.avi,1,test,Deepfakes\n"
            "a.avi,0,train,\n")
        manifest = ingest_videos(load_video_list(self.tmp / "videos.csv"), StubDetector,
                                 self.tmp / "out", dataset="d", crop_size=16, frame_stride=5,
                                 workers=1)
        self.assertEqual([s.id for s in manifest], ["a_f0", "a_f5", "b_f0", "b_f5"])
        self.assertEqual({s.split for s in manifest if s.id.startswith("a")}, {Split.TRAIN})
        self.assertEqual({s.method for s in manifest if s.id.startswith("b")}, {"Deepfakes"})
        self.assertEqual(load_manifest(self.tmp / "out" / "manifest.csv"), manifest)

    def test_detector_per_thread(self):
        names = ["v{}".format(i) for i in range(8)]
        for name in names:
            write_video(self.tmp / "{}.avi".format(name), 6)
        (self.tmp / "videos.csv").write_text(
            "path,label,split\n" + "".join("{}.avi,0,train\n".format(n) for n in names))
        detectors = []

        def factory():
            detector = ThreadRecordingDetector()
            detectors.append(detector)
            return detector

        manifest = ingest_videos(load_video_list(self.tmp / "videos.csv"), factory,
                                 self.tmp / "out", dataset="d", crop_size=16, frame_stride=5,
                                 workers=4)
        self.assertEqual(len(manifest), 16)
        self.assertTrue(1 <= len(detectors) <= 4)
        for detector in detectors:
            self.assertEqual(len(detector.threads), 1)
        self.assertEqual(sum(detector.calls for detector in detectors), 16)

    def test_cli_ingest_log(self):
        write_video(self.tmp / "a.avi", 6)
        (self.tmp / "videos.csv").write_text("path,label,split\na.avi,0,train\n")
        status, _ = _quiet(["ingest", "--videos", str(self.tmp / "videos.csv"),
                            "--out", str(self.tmp / "out"), "--dataset", "d",
                            "--detector", "center", "--crop-size", "16"])
        self.assertEqual(status, 0)
        log = (self.tmp / "out" / "logs" / "ingest.log").read_text()
        self.assertIn("crop margin 1.30", log)


class DeskTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls._tmp = tempfile.TemporaryDirectory()
        cls.tmp = Path(cls._tmp.name)
        cls.manifest = generate_synthetic(
            SyntheticSpec(100, 100, image_size=64, artifact_kind=ArtifactKind.WARP_PATCH,
                          artifact_strength=0.5, seed=7), cls.tmp / "data")
        cls.config = RunConfig(crop_size=64, seed=7)
        cls.plan = ExperimentPlan(cls.manifest, [cls.manifest], cls.config,
                                  output_dir=cls.tmp / "run")
        cls.results = run_pipeline(cls.plan)
        cls.layout = RunLayout(cls.tmp / "run")
        cls.name = cls.manifest.dataset_name

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()

    def test_detection_quality(self):
        report = self.results[(self.name, self.name)]
        self.assertGreaterEqual(report.auc, 0.95)
        self.assertLessEqual(report.eer, 0.10)
        self.assertEqual((report.n_real, report.n_fake), (20, 20))

    def test_score_file_matches_report(self):
        records = load_scores(self.layout.scores(self.name, self.name))
        report = self.results[(self.name, self.name)]
        self.assertAlmostEqual(pairwise_auc(records), report.auc, delta=1e-12)
        self.assertEqual(evaluate(records), report)
        self.assertEqual(load_report(self.layout.report(self.name, self.name)), report)

    def test_stage1_history(self):
        _, checkpoint = load_backbone(self.layout.backbone(self.name))
        history = checkpoint["history"]
        self.assertEqual(len(history), 10)
        self.assertLess(history[-1], history[0])

    def test_train_embeddings_separate(self):
        rows = load_features(self.layout.features(self.name, self.name, Split.TRAIN))
        self.assertEqual(len(rows), 160)
        points = np.array([row.point.coords for row in rows])
        labels = [row.label for row in rows]
        trained = silhouette(points, labels)

        untrained = build_backbone(BackboneSpec.from_config(self.config), self.config.seed)
        images = ImageStore(self.manifest, self.config.crop_size)
        train = self.manifest.select(split=Split.TRAIN).samples
        initial = embed_batch(untrained, [images[s] for s in train])
        self.assertGreater(trained, silhouette(initial, [s.label for s in train]))
        self.assertGreater(trained, 0.2)

        logistic = LogisticRegression().fit(points, [int(label) for label in labels])
        records = [ScoreRecord(row.id, row.label, float(score))
                   for row, score in zip(rows, logistic.decision_function(points))]
        self.assertGreaterEqual(pairwise_auc(records), 0.95)

    def test_deterministic(self):
        again = run_pipeline(replace(self.plan, output_dir=self.tmp / "again"))
        self.assertEqual(again, self.results)
        other = RunLayout(self.tmp / "again")
        for path in (self.layout.scores(self.name, self.name),
                     self.layout.features(self.name, self.name, Split.TRAIN),
                     self.layout.history(self.name)):
            self.assertEqual(path.read_bytes(), (other.root / path.relative_to(self.layout.root))
                             .read_bytes())
        self.assertEqual(parameter_digest(load_backbone(self.layout.backbone(self.name))[0]),
                         parameter_digest(load_backbone(other.backbone(self.name))[0]))

    def test_plot(self):
        features = self.layout.features(self.name, self.name, Split.TEST)
        self.assertEqual(len(load_features(features)), 40)
        score = cmd_plot(features, self.tmp / "plot" / "test")
        self.assertGreater(score, 0.2)
        first = (self.tmp / "plot" / "test.svg").read_bytes()
        cmd_plot(features, self.tmp / "plot" / "test")
        self.assertEqual((self.tmp / "plot" / "test.svg").read_bytes(), first)
        self.assertEqual(len((self.tmp / "plot" / "test.csv").read_text().splitlines()), 41)


class AblationDeskTestCase(unittest.TestCase):
    seeds = (7, 8, 9)

    @classmethod
    def setUpClass(cls):
        cls._tmp = tempfile.TemporaryDirectory()
        cls.tmp = Path(cls._tmp.name)
        cls.manifest = generate_synthetic(SyntheticSpec(100, 100, seed=7), cls.tmp / "data")
        cls.results = {}
        for seed in cls.seeds:
            plan = ExperimentPlan(cls.manifest, [cls.manifest], RunConfig(crop_size=64, seed=seed),
                                  output_dir=cls.tmp / "seed-{}".format(seed))
            cls.results[seed] = run_ablation(plan)

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()

    def aucs(self, seed):
        result = self.results[seed]
        key = ("synthetic", "synthetic")
        return result.triplet[key].auc, result.baseline[key].auc

    def test_direction(self):
        triplet, baseline = zip(*(self.aucs(seed) for seed in self.seeds))
        for seed, t, b in zip(self.seeds, triplet, baseline):
            with self.subTest(seed=seed):
                self.assertGreaterEqual(t, b - 0.02)
        self.assertGreaterEqual(sum(triplet) / len(triplet), sum(baseline) / len(baseline))

    def test_deterministic(self):
        plan = ExperimentPlan(self.manifest, [self.manifest], RunConfig(crop_size=64, seed=7),
                              output_dir=self.tmp / "repeat")
        self.assertEqual(run_ablation(plan).to_dict(), self.results[7].to_dict())


class CrossDeskTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls._tmp = tempfile.TemporaryDirectory()
        cls.tmp = Path(cls._tmp.name)
        cls.manifests = [
            generate_synthetic(SyntheticSpec(100, 100, artifact_kind=kind, seed=seed,
                                             dataset=kind.value), cls.tmp / kind.value)
            for kind, seed in ((ArtifactKind.WARP_PATCH, 7), (ArtifactKind.NOISE_PATCH, 8))
        ]
        config = RunConfig(crop_size=64, seed=7)
        plans = [ExperimentPlan(m, cls.manifests, config, output_dir=cls.tmp / "run")
                 for m in cls.manifests]
        cls.table, cls.results = run_cross(plans)

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()

    def test_complete(self):
        names = [m.dataset_name for m in self.manifests]
        self.assertEqual(set(self.results), {(a, b) for a in names for b in names})
        self.assertNotIn(" - ", self.table)
        for name in names:
            self.assertGreaterEqual(self.results[(name, name)].auc, 0.9)

    def test_table(self):
        self.assertEqual(self.table, cross_matrix(self.results))
        lines = self.table.splitlines()
        self.assertEqual(lines[0].split()[-2:], ["warp_patch", "noise_patch"])
        self.assertTrue(lines[1].split()[1].endswith("*"))
        self.assertTrue(lines[2].split()[2].endswith("*"))
        self.assertEqual(lines[-1], "* intra-dataset")

    def test_cli_cross(self):
        status, output = _quiet(["--seed", "7", "--config", str(self.write_config()), "cross",
                                 "--manifests",
                                 *(str(self.tmp / m.dataset_name / "manifest.csv")
                                   for m in self.manifests),
                                 "--out", str(self.tmp / "cli")])
        self.assertEqual(status, 0)
        self.assertEqual(output, self.table)

    def write_config(self):
        return save_config(RunConfig(crop_size=64, seed=7), self.tmp / "run.cfg")
