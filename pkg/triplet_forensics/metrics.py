import csv
import json
import logging
import math
import tempfile
import unittest
from dataclasses import dataclass, asdict
from decimal import Decimal, ROUND_HALF_UP
from pathlib import Path

import numpy as np
from scipy.stats import rankdata
from sklearn import metrics as sk_metrics

from .core import *


__all__ = [
    "ScoreRecord", "EvalReport",
    "auc", "pairwise_auc", "eer", "roc_curve", "evaluate", "cross_matrix", "method_table",
    "silhouette", "save_scores", "load_scores", "save_report", "load_report",
]


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoreRecord:
    id:    str
    label: Label
    score: float

    def __post_init__(self):
        object.__setattr__(self, "label", Label(self.label))
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError("score of {!r} is {!r}, expected a value in [0, 1]"
                             .format(self.id, self.score))


@dataclass(frozen=True)
class EvalReport:
    auc:              float
    eer:              float
    eer_threshold:    float
    accuracy_at_half: float
    n_real:           int
    n_fake:           int

    def to_dict(self):
        return asdict(self)


def _split(records):
    scores = np.array([r.score for r in records], np.float64)
    fake = np.array([r.label == Label.FAKE for r in records], bool)
    n_fake = int(fake.sum())
    n_real = len(records) - n_fake
    if n_fake == 0 or n_real == 0:
        raise SingleClassError("metrics need at least one real and one fake record, got "
                               "{} real and {} fake".format(n_real, n_fake))
    return scores, fake, n_real, n_fake


def auc(records):
    """Mann-Whitney statistic with ties counted as half."""
    scores, fake, n_real, n_fake = _split(records)
    ranks = rankdata(scores)
    return float((ranks[fake].sum() - n_fake * (n_fake + 1) / 2) / (n_fake * n_real))


def pairwise_auc(records):
    _split(records)
    fakes = [r.score for r in records if r.label == Label.FAKE]
    reals = [r.score for r in records if r.label == Label.REAL]
    wins = sum(1.0 if f > r else 0.5 if f == r else 0.0 for f in fakes for r in reals)
    return wins / (len(fakes) * len(reals))


def _rates(scores, fake, n_real, n_fake, threshold):
    flagged = scores >= threshold
    fpr = np.count_nonzero(flagged & ~fake) / n_real
    fnr = np.count_nonzero(~flagged & fake) / n_fake
    return fpr, fnr


def eer(records):
    """
    Equal error rate over the thresholds given by the distinct scores, a record being
    flagged FAKE when its score is at least the threshold. Returns ``(eer, threshold)`` at the
    smallest threshold minimizing ``|FPR - FNR|``, with the EER taken as their midpoint.
    """
    scores, fake, n_real, n_fake = _split(records)
    best = None
    for threshold in np.unique(scores):
        fpr, fnr = _rates(scores, fake, n_real, n_fake, threshold)
        gap = abs(fpr - fnr)
        if best is None or gap < best[0]:
            best = (gap, (fpr + fnr) / 2, float(threshold))
    return best[1], best[2]


def roc_curve(records):
    scores, fake, _, _ = _split(records)
    fpr, tpr, _ = sk_metrics.roc_curve(fake.astype(int), scores, drop_intermediate=False)
    return [(float(x), float(y)) for x, y in zip(fpr, tpr)]


def evaluate(records):
    records = list(records)
    scores, fake, n_real, n_fake = _split(records)
    eer_value, threshold = eer(records)
    # A score of exactly 0.5 comes from equal logits, which decide as REAL.
    accuracy = float(np.count_nonzero((scores > 0.5) == fake) / len(records))
    report = EvalReport(auc(records), eer_value, threshold, accuracy, n_real, n_fake)
    logger.debug("%d real and %d fake records: AUC %.6f, EER %.6f at %.6f",
                 n_real, n_fake, report.auc, report.eer, report.eer_threshold)
    return report


def _percent(value):
    return str((Decimal(str(value)) * 100).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def _render(rows, footnote=None):
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()
             for row in rows]
    if footnote:
        lines.append(footnote)
    return "\n".join(lines) + "\n"


def cross_matrix(results):
    """
    Render ``{(train_dataset, test_dataset): EvalReport}`` as an AUC(%) table with training
    sets as rows and test sets as columns. Intra-dataset cells are marked with ``*``.
    """
    trains, tests = [], []
    for train, test in results:
        if train not in trains:
            trains.append(train)
        if test not in tests:
            tests.append(test)
    rows = [["train \\ test"] + tests]
    for train in trains:
        row = [train]
        for test in tests:
            report = results.get((train, test))
            if report is None:
                row.append("-")
            else:
                row.append(_percent(report.auc) + ("*" if train == test else ""))
        rows.append(row)
    footnote = "* intra-dataset" if any(t in tests for t in trains) else None
    return _render(rows, footnote)


def method_table(reports):
    """Per-method AUC(%) and EER, methods as columns, for ``{method: EvalReport}``."""
    methods = list(reports)
    rows = [["metric"] + methods,
            ["AUC (%)"] + [_percent(reports[m].auc) for m in methods],
            ["EER"] + ["{:.4g}".format(reports[m].eer) for m in methods]]
    return _render(rows)


def silhouette(points, labels):
    """Silhouette coefficient of the label groups; 0 when every group is a singleton."""
    points = np.asarray(points, np.float64)
    labels = np.asarray([int(label) for label in labels])
    n_labels = len(np.unique(labels))
    if n_labels < 2 or len(points) <= n_labels:
        return 0.0
    return float(sk_metrics.silhouette_score(points, labels))


def save_scores(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id", "label", "score"])
        for record in records:
            writer.writerow([record.id, int(record.label), repr(record.score)])
    return path


def load_scores(path):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        if next(reader, None) != ["id", "label", "score"]:
            raise ManifestHeaderError("{} is not a score file".format(path), row=1)
        records = []
        for number, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ManifestError("expected 3 columns, got {}".format(len(row)), row=number)
            try:
                records.append(ScoreRecord(row[0], Label(int(row[1])), float(row[2])))
            except ValueError as error:
                raise ManifestError(str(error), row=number) from None
    return records


def save_report(path, report, **extra):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({**extra, **report.to_dict()}, indent=2, sort_keys=True) + "\n")
    return path


def load_report(path):
    data = json.loads(Path(path).read_text())
    return EvalReport(**{name: data[name] for name in EvalReport.__dataclass_fields__})


def _records(reals, fakes):
    return ([ScoreRecord("r{}".format(i), Label.REAL, s) for i, s in enumerate(reals)] +
            [ScoreRecord("f{}".format(i), Label.FAKE, s) for i, s in enumerate(fakes)])


class TestCase(unittest.TestCase):
    def test_auc_examples(self):
        self.assertEqual(auc(_records([0.1, 0.4], [0.35, 0.8])), 0.75)
        self.assertEqual(auc(_records([0.1, 0.2], [0.7, 0.9])), 1.0)
        self.assertEqual(auc(_records([0.3, 0.3], [0.3, 0.3, 0.3])), 0.5)
        self.assertEqual(pairwise_auc(_records([0.1, 0.4], [0.35, 0.8])), 0.75)

    def test_single_class(self):
        for function in (auc, pairwise_auc, eer, roc_curve, evaluate):
            with self.subTest(function=function.__name__):
                with self.assertRaises(SingleClassError):
                    function(_records([0.1, 0.2], []))

    def test_eer_examples(self):
        self.assertEqual(eer(_records([0.1, 0.2], [0.7, 0.9]))[0], 0.0)
        self.assertEqual(eer(_records([0.9], [0.1])), (1.0, 0.9))
        self.assertEqual(eer(_records([0.2, 0.6], [0.4, 0.8])), (0.5, 0.6))

    def test_roc_examples(self):
        self.assertEqual(roc_curve(_records([0.1], [0.9])), [(0, 0), (0, 1), (1, 1)])
        self.assertEqual(roc_curve(_records([0.5, 0.5], [0.5])), [(0, 0), (1, 1)])

    def test_roc_area(self):
        rng = np.random.default_rng(20)
        records = _records(rng.random(10), rng.random(10))
        points = np.array(roc_curve(records))
        area = float(np.sum(np.diff(points[:, 0]) * (points[1:, 1] + points[:-1, 1]) / 2))
        self.assertAlmostEqual(area, pairwise_auc(records), delta=1e-12)

    def test_evaluate(self):
        report = evaluate(_records([0.1, 0.5, 0.6], [0.55, 0.9]))
        self.assertEqual((report.n_real, report.n_fake), (3, 2))
        self.assertAlmostEqual(report.accuracy_at_half, 4 / 5)
        self.assertAlmostEqual(report.auc, 5 / 6)

    def test_cross_matrix_empty(self):
        self.assertEqual(cross_matrix({}), "train \\ test\n")

    def test_cross_matrix_single(self):
        report = EvalReport(0.999, 0.0, 0.5, 1.0, 1, 1)
        table = cross_matrix({("A", "A"): report})
        self.assertEqual(table.splitlines(),
                         ["train \\ test  A", "A             99.9*", "* intra-dataset"])

    def test_cross_matrix_rounding(self):
        values = {("A", "A"): 0.8765, ("A", "B"): 0.12345, ("A", "C"): 0.9995,
                  ("B", "A"): 0.5, ("B", "B"): 0.0005, ("B", "C"): 0.25,
                  ("C", "A"): 1.0, ("C", "B"): 0.33333, ("C", "C"): 0.0}
        table = cross_matrix({key: EvalReport(v, 0.0, 0.5, 1.0, 1, 1)
                              for key, v in values.items()})
        cells = [line.split()[1:] for line in table.splitlines()[1:4]]
        self.assertEqual(cells, [["87.7*", "12.3", "100.0"],
                                 ["50.0", "0.1*", "25.0"],
                                 ["100.0", "33.3", "0.0*"]])

    def test_cross_matrix_missing(self):
        report = EvalReport(0.9, 0.1, 0.5, 0.9, 1, 1)
        table = cross_matrix({("A", "A"): report, ("B", "C"): report})
        self.assertEqual(table.splitlines()[1].split(), ["A", "90.0*", "-"])
        self.assertEqual(table.splitlines()[2].split(), ["B", "-", "90.0"])

    def test_method_table(self):
        table = method_table({"Deepfakes": EvalReport(0.99985, 0.000947, 0.5, 1.0, 1, 1),
                              "Combination": EvalReport(0.9, 0.1, 0.5, 0.9, 1, 1)})
        lines = table.splitlines()
        self.assertEqual(lines[0].split(), ["metric", "Deepfakes", "Combination"])
        self.assertEqual(lines[1].split(), ["AUC", "(%)", "100.0", "90.0"])
        self.assertEqual(lines[2].split(), ["EER", "0.000947", "0.1"])

    def test_silhouette(self):
        points = [(1.0, 0.0)] * 10 + [(-1.0, 0.0)] * 10
        points = np.array(points) + np.linspace(0, 0.05, 20)[:, None]
        labels = [Label.REAL] * 10 + [Label.FAKE] * 10
        self.assertGreater(silhouette(points, labels), 0.9)
        self.assertEqual(silhouette([(0.0, 0.0), (1.0, 1.0)], [Label.REAL, Label.FAKE]), 0.0)

    def test_score_record_range(self):
        with self.assertRaises(ValueError):
            ScoreRecord("x", Label.REAL, 1.5)
        with self.assertRaises(ValueError):
            ScoreRecord("x", Label.REAL, float("nan"))

    def test_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            records = _records([0.1, 1 / 3], [0.7])
            self.assertEqual(load_scores(save_scores(Path(tmp) / "s.csv", records)), records)
            report = evaluate(records)
            path = save_report(Path(tmp) / "r.json", report, train="A", test="B")
            self.assertEqual(load_report(path), report)
            self.assertEqual(json.loads(path.read_text())["train"], "A")
