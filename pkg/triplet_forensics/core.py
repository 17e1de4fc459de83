import csv
import enum
import io
import math
import os
import tempfile
import unittest
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from pathlib import Path


__all__ = [
    "TripletForensicsError", "ManifestError", "ManifestNotFoundError", "ManifestHeaderError",
    "DuplicateSampleError", "LabelValueError", "ConfigError", "ShapeError", "SingleClassError",
    "EmptyDatasetError", "VideoError", "DetectorError", "ImageError", "CheckpointError",
    "OutputExistsError", "SplitError",
    "Label", "Split", "LossKind", "BackboneKind", "Sample", "Manifest", "RunConfig",
    "MANIFEST_HEADER", "PAPER_SPLIT_COUNTS",
    "load_manifest", "dumps_manifest", "save_manifest", "split_counts", "split_by_method",
    "parse_key_values", "load_config", "save_config", "config_from_mapping",
    "env_device", "env_workers", "env_pretrained",
]


class TripletForensicsError(Exception):
    pass


class ManifestError(TripletForensicsError):
    def __init__(self, message, *, row=None):
        if row is not None:
            message = "row {}: {}".format(row, message)
        super().__init__(message)
        self.row = row


class ManifestNotFoundError(ManifestError, FileNotFoundError):
    pass


class ManifestHeaderError(ManifestError):
    pass


class DuplicateSampleError(ManifestError):
    def __init__(self, sample_id, *, row=None):
        super().__init__("duplicate sample id {!r}".format(sample_id), row=row)
        self.sample_id = sample_id


class LabelValueError(ManifestError):
    pass


class ConfigError(TripletForensicsError, ValueError):
    pass


class ShapeError(TripletForensicsError, ValueError):
    pass


class SingleClassError(TripletForensicsError, ValueError):
    pass


class SplitError(TripletForensicsError, ValueError):
    pass


class EmptyDatasetError(TripletForensicsError, ValueError):
    pass


class VideoError(TripletForensicsError):
    pass


class DetectorError(TripletForensicsError):
    def __init__(self, message, *, frame):
        super().__init__("frame {}: {}".format(frame, message))
        self.frame = frame


class ImageError(TripletForensicsError):
    pass


class CheckpointError(TripletForensicsError):
    pass


class OutputExistsError(TripletForensicsError):
    pass


class Label(enum.IntEnum):
    REAL = 0
    FAKE = 1


class Split(enum.Enum):
    TRAIN = "train"
    TEST  = "test"


class LossKind(enum.Enum):
    SOFTMAX_RATIO = "softmax_ratio"
    MARGIN        = "margin"


class BackboneKind(enum.Enum):
    TINY_CONV        = "tiny_conv"
    XCEPTION_ADAPTER = "xception_adapter"
    LINEAR           = "linear"


MANIFEST_HEADER = ("id", "image_path", "label", "dataset", "split", "method")

# Face crops per split in the three benchmark corpora.
PAPER_SPLIT_COUNTS = {
    "FF++": {
        (Split.TRAIN, Label.REAL): 115556, (Split.TRAIN, Label.FAKE): 108935,
        (Split.TEST,  Label.REAL):  20393, (Split.TEST,  Label.FAKE):  20473,
    },
    "UADFV": {
        (Split.TRAIN, Label.REAL):  10100, (Split.TRAIN, Label.FAKE):   9761,
        (Split.TEST,  Label.REAL):   1783, (Split.TEST,  Label.FAKE):   1723,
    },
    "Celeb-DF": {
        (Split.TRAIN, Label.REAL): 172187, (Split.TRAIN, Label.FAKE): 165884,
        (Split.TEST,  Label.REAL):  30386, (Split.TEST,  Label.FAKE):  29259,
    },
}

PRISTINE = "pristine"


@dataclass(frozen=True)
class Sample:
    id: str
    image_path: str
    label: Label
    dataset: str
    split: Split
    method: str = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("sample id must be non-empty")
        if not self.image_path:
            raise ValueError("sample {!r} has an empty image path".format(self.id))
        object.__setattr__(self, "label", Label(self.label))
        object.__setattr__(self, "split", Split(self.split))
        if self.method == "":
            object.__setattr__(self, "method", None)
        if self.method is not None and self.label == Label.REAL and self.method != PRISTINE:
            raise ValueError("real sample {!r} carries manipulation method {!r}"
                             .format(self.id, self.method))


@dataclass(frozen=True)
class Manifest:
    samples: tuple
    dataset_name: str
    root: Path = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def resolve(self, sample):
        path = Path(sample.image_path)
        if self.root is not None and not path.is_absolute():
            path = self.root / path
        return path

    def select(self, split=None, label=None, method=None):
        samples = [s for s in self.samples
                   if (split is None or s.split == split)
                   and (label is None or s.label == label)
                   and (method is None or s.method == method)]
        return replace(self, samples=samples)

    @property
    def methods(self):
        seen = []
        for sample in self.samples:
            if sample.label == Label.FAKE and sample.method and sample.method not in seen:
                seen.append(sample.method)
        return seen


def _parse_row(number, row):
    sample_id, image_path, label, dataset, split, method = row
    try:
        label = Label(int(label))
    except ValueError:
        raise LabelValueError("label {!r} is not 0 or 1 (sample {!r})".format(label, sample_id),
                              row=number) from None
    try:
        split = Split(split.lower())
    except ValueError:
        raise ManifestError("split {!r} is not 'train' or 'test'".format(split),
                            row=number) from None
    try:
        return Sample(sample_id, image_path, label, dataset, split, method or None)
    except ValueError as error:
        raise ManifestError(str(error), row=number) from None


def load_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise ManifestNotFoundError("manifest {} does not exist".format(path))

    try:
        samples = _read_manifest_rows(path)
    except UnicodeDecodeError as error:
        raise ManifestError("manifest {} is not UTF-8 text: {}".format(path, error)) from None

    datasets = {s.dataset for s in samples}
    dataset_name = datasets.pop() if len(datasets) == 1 else path.stem
    return Manifest(samples, dataset_name, root=path.parent)


def _read_manifest_rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_HEADER:
            raise ManifestHeaderError("expected header {!r}, got {!r}"
                                      .format(",".join(MANIFEST_HEADER),
                                              None if header is None else ",".join(header)),
                                      row=1)
        samples = []
        seen = set()
        # Row numbers count the header as row 1.
        for number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError("expected {} columns, got {}"
                                    .format(len(MANIFEST_HEADER), len(row)), row=number)
            sample = _parse_row(number, row)
            if sample.id in seen:
                raise DuplicateSampleError(sample.id, row=number)
            seen.add(sample.id)
            samples.append(sample)
    return samples


def dumps_manifest(manifest):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for s in manifest.samples:
        writer.writerow([s.id, s.image_path, int(s.label), s.dataset, s.split.value,
                         s.method or ""])
    return buffer.getvalue()


def save_manifest(manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(dumps_manifest(manifest))
    return path


def split_counts(manifest):
    counts = Counter((s.split, s.label) for s in manifest.samples)
    return {split: {label: counts[split, label] for label in Label} for split in Split}


def split_by_method(manifest):
    """
    Per-method views of ``manifest``: every pristine sample plus the fakes of one
    manipulation method, followed by the whole manifest under ``"Combination"``.
    """
    reals = [s for s in manifest.samples if s.label == Label.REAL]
    views = {}
    for method in manifest.methods:
        fakes = [s for s in manifest.samples if s.label == Label.FAKE and s.method == method]
        views[method] = replace(manifest, samples=reals + fakes,
                                dataset_name="{}/{}".format(manifest.dataset_name, method))
    views["Combination"] = manifest
    return views


def _positive_int(value):
    return value >= 1


@dataclass(frozen=True)
class RunConfig:
    embedding_dim:   int      = 2
    stage1_lr:       float    = 4e-4
    stage1_batch:    int      = 12
    stage1_epochs:   int      = 10
    stage1_momentum: float    = 0.0
    stage2_lr:       float    = 3e-3
    stage2_momentum: float    = 0.1
    stage2_epochs:   int      = 50
    stage2_batch:    int      = 16
    loss_kind:       LossKind = LossKind.SOFTMAX_RATIO
    margin:          float    = 0.2
    dropout_rate:    float    = 0.5
    leaky_slope:     float    = 0.01
    crop_size:       int      = 299
    backbone:        BackboneKind = BackboneKind.TINY_CONV
    seed:            int      = 0

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        object.__setattr__(self, "backbone", BackboneKind(self.backbone))
        checks = [
            ("embedding_dim",   self.embedding_dim >= 1),
            ("stage1_lr",       self.stage1_lr > 0),
            ("stage1_batch",    self.stage1_batch >= 1),
            ("stage1_epochs",   self.stage1_epochs >= 0),
            ("stage1_momentum", self.stage1_momentum >= 0),
            ("stage2_lr",       self.stage2_lr > 0),
            ("stage2_momentum", self.stage2_momentum >= 0),
            ("stage2_epochs",   self.stage2_epochs >= 0),
            ("stage2_batch",    self.stage2_batch >= 1),
            ("margin",          self.margin >= 0),
            ("dropout_rate",    0 <= self.dropout_rate < 1),
            ("crop_size",       self.crop_size >= 1),
            ("seed",            0 <= self.seed < 2 ** 64),
        ]
        for name, ok in checks:
            value = getattr(self, name)
            if not ok or (isinstance(value, float) and not math.isfinite(value)):
                raise ConfigError("{} = {!r} is out of range".format(name, value))

    def to_dict(self):
        result = {}
        for f in fields(self):
            value = getattr(self, f.name)
            result[f.name] = value.value if isinstance(value, enum.Enum) else value
        return result


_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key, text):
    kind = _CONFIG_TYPES[key]
    try:
        if kind is int:
            return int(text, 10)
        if kind is float:
            return float(text)
        # Enumerations by value or by member name.
        lowered = text.lower()
        for member in kind:
            if lowered in (member.value, member.name.lower()):
                return member
        raise ValueError(text)
    except ValueError:
        raise ConfigError("{} = {!r} cannot be parsed".format(key, text)) from None


def parse_key_values(text, source="<config>"):
    entries = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("{}:{}: expected 'key = value'".format(source, number))
        key, value = (part.strip() for part in line.split("=", 1))
        if key in entries:
            raise ConfigError("{}:{}: key {!r} given twice".format(source, number, key))
        entries[key] = value
    return entries


def config_from_mapping(entries, base=None):
    unknown = sorted(set(entries) - set(_CONFIG_TYPES))
    if unknown:
        raise ConfigError("unknown config key(s): {}".format(", ".join(unknown)))
    values = {key: _parse_value(key, text) for key, text in entries.items()}
    try:
        return replace(base or RunConfig(), **values)
    except (TypeError, ValueError) as error:
        if isinstance(error, ConfigError):
            raise
        raise ConfigError(str(error)) from None


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as error:
        raise ConfigError("cannot read config {}: {}".format(path, error)) from None
    return config_from_mapping(parse_key_values(text, source=str(path)))


def save_config(config, path):
    lines = []
    for key, value in config.to_dict().items():
        lines.append("{} = {!r}".format(key, value) if isinstance(value, float)
                     else "{} = {}".format(key, value))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def env_device():
    return os.environ.get("TRIPLET_FORENSICS_DEVICE", "cpu")


def env_workers():
    return int(os.environ.get("TRIPLET_FORENSICS_WORKERS", "4"))


def env_pretrained():
    return os.environ.get("TRIPLET_FORENSICS_PRETRAINED") or None


class TestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def write(self, name, text):
        path = self.tmp / name
        path.write_text(text, encoding="utf-8")
        return path

    def test_load_manifest_counts(self):
        path = self.write("m.csv",
            "id,image_path,label,dataset,split,method\n"
            "r0,r0.png,0,toy,train,pristine\n"
            "r1,r1.png,0,toy,train,\n"
            "f0,f0.png,1,toy,train,DeepFake\n"
            "f1,f1.png,1,toy,train,NeuralTexture\n")
        manifest = load_manifest(path)
        self.assertEqual([s.id for s in manifest], ["r0", "r1", "f0", "f1"])
        self.assertEqual(manifest.dataset_name, "toy")
        counts = split_counts(manifest)
        self.assertEqual(counts[Split.TRAIN], {Label.REAL: 2, Label.FAKE: 2})
        self.assertEqual(counts[Split.TEST], {Label.REAL: 0, Label.FAKE: 0})

    def test_load_manifest_errors(self):
        with self.assertRaises(ManifestNotFoundError):
            load_manifest(self.tmp / "missing.csv")
        with self.assertRaises(ManifestHeaderError):
            load_manifest(self.write("h.csv", "id,path,label\n"))
        with self.assertRaises(DuplicateSampleError) as caught:
            load_manifest(self.write("d.csv",
                "id,image_path,label,dataset,split,method\n"
                "a,a.png,0,toy,train,\n"
                "a,b.png,1,toy,test,DeepFake\n"))
        self.assertEqual(caught.exception.sample_id, "a")
        self.assertIn("'a'", str(caught.exception))
        self.assertEqual(caught.exception.row, 3)
        with self.assertRaises(LabelValueError) as caught:
            load_manifest(self.write("l.csv",
                "id,image_path,label,dataset,split,method\n"
                "x,x.png,2,toy,train,\n"))
        self.assertIn("'x'", str(caught.exception))

    def test_load_manifest_not_utf8(self):
        path = self.tmp / "latin1.csv"
        path.write_bytes(b"id,image_path,label,dataset,split,method\n"
                         b"caf\xe9,c.png,0,toy,train,\n")
        with self.assertRaises(ManifestError) as caught:
            load_manifest(path)
        self.assertIn("UTF-8", str(caught.exception))
        self.assertIsNone(caught.exception.__cause__)

    def test_manifest_round_trip(self):
        text = ("id,image_path,label,dataset,split,method\n"
                "b,imgs/b.png,1,FF++,test,Face2Face\n"
                "a,imgs/a.png,0,FF++,train,\n")
        manifest = load_manifest(self.write("m.csv", text))
        self.assertEqual(dumps_manifest(manifest), text)
        save_manifest(manifest, self.tmp / "copy.csv")
        self.assertEqual((self.tmp / "copy.csv").read_bytes(), text.encode())
        self.assertEqual(manifest.resolve(manifest.samples[0]), self.tmp / "imgs/b.png")

    def test_split_counts_empty(self):
        counts = split_counts(Manifest((), "empty"))
        self.assertEqual(sum(sum(row.values()) for row in counts.values()), 0)

    def test_split_counts_ff_table(self):
        expected = PAPER_SPLIT_COUNTS["FF++"]
        samples = []
        for (split, label), count in expected.items():
            samples.extend(Sample("{}{}{}".format(split.value, int(label), i), "x.png", label,
                                  "FF++", split)
                           for i in range(count))
        counts = split_counts(Manifest(samples, "FF++"))
        for (split, label), count in expected.items():
            self.assertEqual(counts[split][label], count)

    def test_split_counts_uadfv_from_csv(self):
        lines = ["id,image_path,label,dataset,split,method"]
        for (split, label), count in PAPER_SPLIT_COUNTS["UADFV"].items():
            lines.extend("{}{}_{},i.png,{},UADFV,{},".format(split.value, int(label), i,
                                                           int(label), split.value)
                         for i in range(count))
        counts = split_counts(load_manifest(self.write("u.csv", "\n".join(lines) + "\n")))
        self.assertEqual(counts[Split.TRAIN][Label.REAL], 10100)
        self.assertEqual(counts[Split.TRAIN][Label.FAKE], 9761)
        self.assertEqual(counts[Split.TEST][Label.REAL], 1783)
        self.assertEqual(counts[Split.TEST][Label.FAKE], 1723)

    def test_split_by_method(self):
        manifest = Manifest([
            Sample("r", "r.png", Label.REAL, "FF++", Split.TEST),
            Sample("d", "d.png", Label.FAKE, "FF++", Split.TEST, "DeepFake"),
            Sample("n", "n.png", Label.FAKE, "FF++", Split.TEST, "NeuralTexture"),
        ], "FF++")
        views = split_by_method(manifest)
        self.assertEqual(list(views), ["DeepFake", "NeuralTexture", "Combination"])
        self.assertEqual([s.id for s in views["DeepFake"]], ["r", "d"])
        self.assertIs(views["Combination"], manifest)

    def test_sample_method_rule(self):
        Sample("r", "r.png", Label.REAL, "d", Split.TRAIN, PRISTINE)
        with self.assertRaises(ValueError):
            Sample("r", "r.png", Label.REAL, "d", Split.TRAIN, "DeepFake")
        with self.assertRaises(ValueError):
            Sample("r", "", Label.REAL, "d", Split.TRAIN)

    def test_load_config_defaults(self):
        config = load_config(self.write("empty.cfg", ""))
        self.assertEqual(config, RunConfig())
        self.assertEqual(config.stage1_lr, 4e-4)
        self.assertEqual(config.stage1_batch, 12)
        self.assertEqual(config.stage1_epochs, 10)
        self.assertEqual(config.stage2_lr, 3e-3)
        self.assertEqual(config.stage2_momentum, 0.1)

    def test_load_config_override(self):
        config = load_config(self.write("e.cfg", "# override\nembedding_dim = 3\n"))
        self.assertEqual(config, replace(RunConfig(), embedding_dim=3))
        config = load_config(self.write("k.cfg", "loss_kind = MARGIN\n"))
        self.assertEqual(config.loss_kind, LossKind.MARGIN)

    def test_load_config_errors(self):
        with self.assertRaises(ConfigError):
            load_config(self.write("m.cfg", "margin = -1\n"))
        with self.assertRaises(ConfigError):
            load_config(self.write("u.cfg", "learning_rate = 1\n"))
        with self.assertRaises(ConfigError):
            load_config(self.write("p.cfg", "stage1_lr = fast\n"))
        with self.assertRaises(ConfigError):
            load_config(self.write("n.cfg", "stage2_lr = -3e-3\n"))

    def test_config_save_load(self):
        config = RunConfig(embedding_dim=4, stage1_lr=1e-3 / 3, loss_kind=LossKind.MARGIN,
                           seed=2 ** 64 - 1)
        path = save_config(config, self.tmp / "c.cfg")
        self.assertEqual(load_config(path), config)
