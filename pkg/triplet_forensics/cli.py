import argparse
import contextlib
import csv
import functools
import io
import logging
import sys
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

from .core import *
from .data import *
from .tripletnet import EmbeddingPoint, load_backbone
from .classifier import FeatureRow, load_features, save_features
from .metrics import silhouette
from .pipeline import *


__all__ = ["cmd_plot", "cmd_dispatch", "main"]


logger = logging.getLogger(__name__)


def _claim(path, overwrite):
    """Refuse to replace an existing output unless ``--overwrite`` was given."""
    path = Path(path)
    taken = path.exists() and (not path.is_dir() or any(path.iterdir()))
    if taken and not overwrite:
        raise OutputExistsError("{} already exists; pass --overwrite to replace it".format(path))
    return path


def _run_config(args):
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def _attach_ingest_log(out_dir):
    path = Path(out_dir) / "logs" / "ingest.log"
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    data_logger = logging.getLogger("triplet_forensics.data")
    data_logger.addHandler(handler)
    data_logger.setLevel(logging.INFO)
    return handler


def cmd_ingest(args):
    out = _claim(args.out, args.overwrite)
    config = _run_config(args)
    handler = _attach_ingest_log(out)
    try:
        manifest = ingest_videos(
            load_video_list(args.videos), functools.partial(make_detector, args.detector), out,
            dataset=args.dataset, crop_size=args.crop_size or config.crop_size,
            frame_stride=args.frame_stride, margin=args.margin, workers=args.workers)
    finally:
        logging.getLogger("triplet_forensics.data").removeHandler(handler)
        handler.close()
    print("{} samples written to {}".format(len(manifest), out / "manifest.csv"))


def cmd_synth(args):
    out = _claim(args.out, args.overwrite)
    spec = SyntheticSpec(args.n_real, args.n_fake, args.image_size, ArtifactKind(args.artifact),
                         args.strength, _run_config(args).seed, args.dataset)
    manifest = generate_synthetic(spec, out)
    print("{} samples written to {}".format(len(manifest), out / "manifest.csv"))


def _plan(args, manifest, evals=None, output_dir=None):
    return ExperimentPlan(manifest, evals or [manifest], _run_config(args),
                          output_dir=output_dir or args.out)


def cmd_train(args):
    plan = _plan(args, load_manifest(args.manifest))
    _claim(RunLayout(args.out).backbone(plan.train_name), args.overwrite)
    print(run_stage1(plan))


def cmd_extract(args):
    out = _claim(args.out, args.overwrite)
    manifest = load_manifest(args.manifest)
    _, checkpoint = load_backbone(args.checkpoint)
    config = replace(_run_config(args), embedding_dim=checkpoint["spec"]["embedding_dim"])
    plan = ExperimentPlan(manifest, [manifest], config, output_dir=out.parent)
    split = None if args.split == "all" else Split(args.split)
    print(run_extract(plan, args.checkpoint, manifest, split=split, path=out))


def cmd_classify(args):
    plan = _plan(args, load_manifest(args.manifest))
    _claim(RunLayout(args.out).classifier(plan.train_name), args.overwrite)
    print(run_stage2(plan, args.features))


def cmd_eval(args):
    _claim(args.scores, args.overwrite)
    if args.report:
        _claim(args.report, args.overwrite)
    report, _ = run_eval(args.backbone, args.classifier, load_manifest(args.manifest),
                         scores_path=args.scores, report_path=args.report)
    print("AUC {:.6f}  EER {:.6f}  threshold {:.6f}  accuracy@0.5 {:.6f}".format(
        report.auc, report.eer, report.eer_threshold, report.accuracy_at_half))


def cmd_cross(args):
    out = _claim(args.out, args.overwrite)
    manifests = [load_manifest(path) for path in args.manifests]
    names = [m.dataset_name for m in manifests]
    if len(set(names)) != len(names):
        raise ConfigError("cross evaluation needs distinct dataset names, got {}"
                          .format(", ".join(names)))
    plans = [_plan(args, manifest, manifests, out) for manifest in manifests]
    table, _ = run_cross(plans)
    sys.stdout.write(table)


def cmd_methods(args):
    out = _claim(args.out, args.overwrite)
    table, _ = run_methods(_plan(args, load_manifest(args.manifest), output_dir=out))
    sys.stdout.write(table)


def cmd_ablate(args):
    out = _claim(args.out, args.overwrite)
    manifest = load_manifest(args.manifest)
    seeds = [int(seed) for seed in args.seeds.split(",")] if args.seeds else \
            [_run_config(args).seed]
    config = _run_config(args)
    totals = {"triplet": [], "baseline": []}
    for seed in seeds:
        plan = ExperimentPlan(manifest, [manifest], replace(config, seed=seed),
                              output_dir=out / "seed-{}".format(seed))
        result = run_ablation(plan)
        for (train, test), report in result.triplet.items():
            baseline = result.baseline[(train, test)]
            totals["triplet"].append(report.auc)
            totals["baseline"].append(baseline.auc)
            print("seed {}  {} -> {}  triplet AUC {:.4f} acc {:.4f}  "
                  "backbone-only AUC {:.4f} acc {:.4f}".format(
                      seed, train, test, report.auc, report.accuracy_at_half,
                      baseline.auc, baseline.accuracy_at_half))
    for mode, values in totals.items():
        print("mean {} AUC {:.4f}".format(mode, sum(values) / len(values)))


def cmd_plot(features, out):
    """
    Write ``<out>.csv`` with the points and labels of a 2-dimensional feature file and
    ``<out>.svg`` with their scatter plot. Returns the silhouette coefficient of the real and
    fake groups.
    """
    rows = load_features(features)
    if rows and rows[0].point.dim != 2:
        raise ShapeError("plotting needs 2-dimensional features, {} has {}; reducing "
                         "dimensionality is not supported".format(features, rows[0].point.dim))
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out.with_suffix(".csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["e1", "e2", "label"])
        for row in rows:
            writer.writerow([repr(row.point.coords[0]), repr(row.point.coords[1]),
                             int(row.label)])

    import matplotlib
    matplotlib.use("Agg")
    from matplotlib.figure import Figure

    with matplotlib.rc_context({"svg.hashsalt": "triplet-forensics", "svg.fonttype": "none"}):
        figure = Figure(figsize=(5, 5))
        axes = figure.add_subplot()
        for label, color in ((Label.REAL, "tab:blue"), (Label.FAKE, "tab:red")):
            points = [row.point.coords for row in rows if row.label == label]
            if points:
                xs, ys = zip(*points)
                axes.scatter(xs, ys, s=8, c=color, label=label.name.lower())
        axes.set_xlabel("e1")
        axes.set_ylabel("e2")
        axes.legend()
        figure.savefig(out.with_suffix(".svg"), format="svg", metadata={"Date": None})

    return silhouette([row.point.coords for row in rows], [row.label for row in rows])


def _cmd_plot(args):
    _claim(Path(args.out).with_suffix(".svg"), args.overwrite)
    _claim(Path(args.out).with_suffix(".csv"), args.overwrite)
    print("silhouette {:.4f}".format(cmd_plot(args.features, args.out)))


def _add_global_flags(parser, suppress=False):
    def default(value):
        return argparse.SUPPRESS if suppress else value
    parser.add_argument("--seed", type=int, default=default(None),
                        help="seed for every random choice (default: config seed, 0)")
    parser.add_argument("--config", type=Path, default=default(None),
                        help="run configuration file (key = value lines)")
    parser.add_argument("--overwrite", action="store_true", default=default(False),
                        help="replace existing outputs instead of failing")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False),
                        help="log debug messages")


def _parser():
    parser = argparse.ArgumentParser(
        prog="triplet-forensics",
        description="Face manipulation detection with triplet-trained embeddings.")
    _add_global_flags(parser)
    # Global flags are accepted after the command name too.
    common = argparse.ArgumentParser(add_help=False)
    _add_global_flags(common, suppress=True)
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    p = commands.add_parser("ingest", parents=[common],
                            help="crop faces out of a list of videos")
    p.add_argument("--videos", type=Path, required=True,
                   help="CSV with columns path,label,split[,method]")
    p.add_argument("--out", type=Path, required=True, help="dataset directory to create")
    p.add_argument("--dataset", required=True, help="dataset name written into the manifest")
    p.add_argument("--detector", choices=sorted(DETECTORS), default="haar",
                   help="face detector (default: haar)")
    p.add_argument("--crop-size", type=int, default=None,
                   help="crop side in pixels (default: config crop_size)")
    p.add_argument("--stride", "--frame-stride", dest="frame_stride", type=int, default=5,
                   help="keep every N-th frame")
    p.add_argument("--margin", type=float, default=1.3, help="crop margin around the face box")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel videos (default: $TRIPLET_FORENSICS_WORKERS or 4)")
    p.set_defaults(handler=cmd_ingest)

    p = commands.add_parser("synth", parents=[common],
                            help="generate a synthetic real/fake dataset")
    p.add_argument("--n-real", type=int, required=True)
    p.add_argument("--n-fake", type=int, required=True)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--artifact", choices=[kind.value for kind in ArtifactKind],
                   default=ArtifactKind.WARP_PATCH.value)
    p.add_argument("--strength", type=float, default=0.5, help="artifact blend in (0, 1]")
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_synth)

    p = commands.add_parser("train", parents=[common],
                            help="stage 1: train the embedding network")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("extract", parents=[common],
                            help="embed the samples of a manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="train")
    p.add_argument("--out", type=Path, required=True, help="feature CSV to write")
    p.set_defaults(handler=cmd_extract)

    p = commands.add_parser("classify", parents=[common],
                            help="stage 2: train the classifier on features")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True,
                   help="training manifest; every feature row must be one of its TRAIN samples")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.set_defaults(handler=cmd_classify)

    p = commands.add_parser("eval", parents=[common],
                            help="score the TEST split and report AUC/EER")
    p.add_argument("--backbone", type=Path, required=True)
    p.add_argument("--classifier", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--scores", type=Path, required=True, help="score CSV to write")
    p.add_argument("--report", type=Path, default=None, help="JSON report to write")
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser("cross", parents=[common],
                            help="train on each dataset, test on all of them")
    p.add_argument("--manifests", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.set_defaults(handler=cmd_cross)

    p = commands.add_parser("methods", parents=[common],
                            help="evaluate each manipulation method of a dataset separately")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.set_defaults(handler=cmd_methods)

    p = commands.add_parser("ablate", parents=[common],
                            help="triplet pipeline against the plain backbone")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--seeds", default=None, help="comma separated seeds (default: --seed)")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.set_defaults(handler=cmd_ablate)

    p = commands.add_parser("plot", parents=[common],
                            help="scatter plot of 2-dimensional features")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True,
                   help="output prefix; .svg and .csv are appended")
    p.set_defaults(handler=_cmd_plot)
    return parser


def cmd_dispatch(argv):
    """Run one command; returns 0 on success, 1 on failure and 2 on a usage error."""
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as error:
        return error.code if isinstance(error.code, int) else 2

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.handler(args)
    except (TripletForensicsError, OSError, ValueError) as error:
        logger.error("%s", error)
        return 1
    return 0


def main():
    return cmd_dispatch(sys.argv[1:])


class TestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def run_cli(self, *argv):
        with contextlib.redirect_stdout(io.StringIO()) as out, \
                contextlib.redirect_stderr(io.StringIO()):
            status = cmd_dispatch([str(arg) for arg in argv])
        return status, out.getvalue()

    def features(self, name, points, labels):
        rows = [FeatureRow("p{}".format(i), EmbeddingPoint(point), label)
                for i, (point, label) in enumerate(zip(points, labels))]
        return save_features(self.tmp / name, rows)

    def test_synth(self):
        status, _ = self.run_cli("synth", "--n-real", 5, "--n-fake", 5, "--image-size", 16,
                                 "--seed", 7, "--out", self.tmp / "d")
        self.assertEqual(status, 0)
        self.assertEqual(len(load_manifest(self.tmp / "d" / "manifest.csv")), 10)

    def test_refuses_overwrite(self):
        args = ["--seed", 7, "synth", "--n-real", 2, "--n-fake", 2, "--image-size", 16,
                "--out", self.tmp / "d"]
        self.assertEqual(self.run_cli(*args)[0], 0)
        first = (self.tmp / "d" / "manifest.csv").read_bytes()
        self.assertEqual(self.run_cli(*args)[0], 1)
        self.assertEqual(self.run_cli("--overwrite", *args)[0], 0)
        self.assertEqual((self.tmp / "d" / "manifest.csv").read_bytes(), first)

    def test_usage_errors(self):
        self.assertEqual(self.run_cli("eval", "--backbone", "b.pt", "--classifier", "c.pt",
                                      "--manifest", "m.csv")[0], 2)
        self.assertEqual(self.run_cli("frobnicate")[0], 2)
        self.assertEqual(self.run_cli("synth", "--n-real", 1, "--bogus")[0], 2)

    def test_help(self):
        status, output = self.run_cli("--help")
        self.assertEqual(status, 0)
        for flag in ("--seed", "--config", "--overwrite", "--verbose"):
            self.assertIn(flag, output)

    def test_runtime_error(self):
        self.assertEqual(self.run_cli("synth", "--n-real", 0, "--n-fake", 0,
                                      "--out", self.tmp / "d")[0], 1)

    def test_plot_clusters(self):
        points = [(1.0 + 0.01 * i, 0.0) for i in range(10)] + \
                 [(-1.0 - 0.01 * i, 0.0) for i in range(10)]
        labels = [Label.REAL] * 10 + [Label.FAKE] * 10
        features = self.features("f.csv", points, labels)
        self.assertGreater(cmd_plot(features, self.tmp / "plot"), 0.9)
        self.assertTrue((self.tmp / "plot.svg").exists())
        with open(self.tmp / "plot.csv", newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["e1", "e2", "label"])
        self.assertEqual(rows[1], ["1.0", "0.0", "0"])

    def test_plot_singletons(self):
        features = self.features("f.csv", [(0.0, 1.0), (1.0, 0.0)], [Label.REAL, Label.FAKE])
        self.assertEqual(cmd_plot(features, self.tmp / "plot"), 0.0)
        status, output = self.run_cli("--overwrite", "plot", "--features", features,
                                      "--out", self.tmp / "plot")
        self.assertEqual(status, 0)
        self.assertIn("silhouette 0.0000", output)

    def test_plot_dimension(self):
        features = self.features("f.csv", [(0.0, 1.0, 2.0), (1.0, 0.0, 2.0)],
                                 [Label.REAL, Label.FAKE])
        with self.assertRaises(ShapeError):
            cmd_plot(features, self.tmp / "plot")
        self.assertEqual(self.run_cli("plot", "--features", features,
                                      "--out", self.tmp / "plot")[0], 1)

    def small_run(self):
        manifest = generate_synthetic(SyntheticSpec(10, 10, image_size=16, seed=1),
                                      self.tmp / "data")
        config = save_config(RunConfig(crop_size=16, stage1_epochs=1, stage2_epochs=2, seed=4),
                             self.tmp / "run.cfg")
        return manifest, config

    def test_methods(self):
        manifest, config = self.small_run()
        status, output = self.run_cli("--config", config, "methods",
                                      "--manifest", self.tmp / "data" / "manifest.csv",
                                      "--out", self.tmp / "run")
        self.assertEqual(status, 0)
        self.assertEqual(output.splitlines()[0].split(), ["metric", "warp_patch", "Combination"])
        self.assertEqual(output, (self.tmp / "run" / "reports" / "methods.txt").read_text())

    def test_classify_needs_train_features(self):
        manifest, config = self.small_run()
        manifest_path = self.tmp / "data" / "manifest.csv"
        self.assertEqual(self.run_cli("--config", config, "train", "--manifest", manifest_path,
                                      "--out", self.tmp / "run")[0], 0)
        checkpoint = RunLayout(self.tmp / "run").backbone(manifest.dataset_name)
        for split in ("test", "train"):
            self.assertEqual(self.run_cli("--config", config, "extract",
                                          "--checkpoint", checkpoint,
                                          "--manifest", manifest_path, "--split", split,
                                          "--out", self.tmp / "{}.csv".format(split))[0], 0)
        classify = ["--config", config, "classify", "--manifest", manifest_path,
                    "--out", self.tmp / "run", "--features"]
        self.assertEqual(self.run_cli(*classify, self.tmp / "test.csv")[0], 1)
        classifier = RunLayout(self.tmp / "run").classifier(manifest.dataset_name)
        self.assertFalse(classifier.exists())
        self.assertEqual(self.run_cli(*classify, self.tmp / "train.csv")[0], 0)
        self.assertTrue(classifier.exists())
