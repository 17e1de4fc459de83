import csv
import enum
import logging
import math
import tempfile
import threading
import unittest
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch

from .core import *
from .detectors import *


__all__ = [
    "DETECTORS", "make_detector", "expand_box", "VideoEntry", "load_video_list",
    "ingest_video", "ingest_videos",
    "ArtifactKind", "SyntheticSpec", "generate_synthetic",
    "load_image", "ImageStore",
]


logger = logging.getLogger(__name__)


DETECTORS = {
    HaarCascadeDetector.name: HaarCascadeDetector,
    DlibDetector.name:        DlibDetector,
    CenterDetector.name:      CenterDetector,
}


def make_detector(name):
    try:
        return DETECTORS[name]()
    except KeyError:
        raise ValueError("unknown detector {!r}, expected one of {}"
                         .format(name, ", ".join(sorted(DETECTORS)))) from None


def expand_box(box, margin, width, height):
    """Square box of side ``margin`` times the longer edge of ``box``, kept inside the frame."""
    x, y, w, h = box
    side = min(max(1, int(round(max(w, h) * margin))), width, height)
    x0 = int(round(x + w / 2 - side / 2))
    y0 = int(round(y + h / 2 - side / 2))
    x0 = min(max(x0, 0), width - side)
    y0 = min(max(y0, 0), height - side)
    return Box(x0, y0, side, side)


@dataclass(frozen=True)
class VideoEntry:
    path: Path
    label: Label
    split: Split
    method: str = None


def load_video_list(path):
    """Read a ``path,label,split,method`` CSV; relative video paths resolve next to it."""
    path = Path(path)
    try:
        return _read_video_rows(path)
    except UnicodeDecodeError as error:
        raise ManifestError("video list {} is not UTF-8 text: {}".format(path, error)) from None


def _read_video_rows(path):
    entries = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or \
                not {"path", "label", "split"} <= set(reader.fieldnames):
            raise ManifestHeaderError("video list needs columns path,label,split[,method]",
                                      row=1)
        for number, row in enumerate(reader, start=2):
            video = Path(row["path"])
            if not video.is_absolute():
                video = path.parent / video
            try:
                entries.append(VideoEntry(video, Label(int(row["label"])),
                                          Split(row["split"].lower()), row.get("method") or None))
            except ValueError as error:
                raise ManifestError(str(error), row=number) from None
    return entries


def ingest_video(video_path, detector, crop_size=299, frame_stride=5, *, out_dir, label,
                 dataset, split, method=None, margin=1.3):
    """
    Crop the top-ranked face out of every ``frame_stride``-th frame of a video.

    Crops are written to ``<out_dir>/crops/<video-stem>_f<frame>.png``; the returned samples
    refer to them relative to ``out_dir``.
    """
    assert frame_stride >= 1
    video_path = Path(video_path)
    crop_dir = Path(out_dir) / "crops"
    crop_dir.mkdir(parents=True, exist_ok=True)
    label = Label(label)
    if label == Label.REAL and method is None:
        method = "pristine"

    capture = cv2.VideoCapture(str(video_path))
    if not capture.isOpened():
        raise VideoError("cannot decode video {}".format(video_path))

    samples = []
    index = 0
    try:
        while True:
            ok, frame = capture.read()
            if not ok:
                break
            if index % frame_stride == 0:
                image = cv2.cvtColor(frame, cv2.COLOR_BGR2RGB)
                try:
                    boxes = detector.detect(image)
                except Exception as error:
                    raise DetectorError("{} failed on {}: {}".format(
                        type(detector).__name__, video_path, error), frame=index) from error
                if not boxes:
                    logger.info("%s: frame %d skipped, no face detected", video_path, index)
                else:
                    height, width = image.shape[:2]
                    x, y, w, h = expand_box(boxes[0], margin, width, height)
                    crop = cv2.resize(frame[y:y + h, x:x + w], (crop_size, crop_size),
                                      interpolation=cv2.INTER_LINEAR)
                    sample_id = "{}_f{}".format(video_path.stem, index)
                    target = crop_dir / "{}.png".format(sample_id)
                    if not cv2.imwrite(str(target), crop):
                        raise OSError("cannot write crop {}".format(target))
                    samples.append(Sample(sample_id, "crops/{}.png".format(sample_id), label,
                                          dataset, split, method))
            index += 1
    finally:
        capture.release()

    if index == 0:
        raise VideoError("video {} has no frames".format(video_path))
    logger.info("%s: %d frames, %d crops (stride %d, margin %.2f)",
                video_path, index, len(samples), frame_stride, margin)
    return samples


def ingest_videos(entries, detector_factory, out_dir, *, dataset, crop_size=299,
                  frame_stride=5, margin=1.3, workers=None):
    """
    Ingest every video of ``entries`` on a thread pool. ``detector_factory`` is called with no
    arguments once per worker thread; detectors are never shared between threads.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = sorted(entries, key=lambda entry: str(entry.path))
    logger.info("ingesting %d videos into %s, crop margin %.2f", len(entries), out_dir, margin)
    local = threading.local()

    def ingest(entry):
        detector = getattr(local, "detector", None)
        if detector is None:
            detector = local.detector = detector_factory()
        return ingest_video(entry.path, detector, crop_size, frame_stride, out_dir=out_dir,
                            label=entry.label, dataset=dataset, split=entry.split,
                            method=entry.method, margin=margin)

    with ThreadPoolExecutor(max_workers=workers or env_workers()) as pool:
        per_video = list(pool.map(ingest, entries))

    samples = [sample for video_samples in per_video for sample in video_samples]
    seen = set()
    for sample in samples:
        if sample.id in seen:
            raise DuplicateSampleError(sample.id)
        seen.add(sample.id)
    manifest = Manifest(samples, dataset, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest


class ArtifactKind(enum.Enum):
    WARP_PATCH  = "warp_patch"
    BLUR_PATCH  = "blur_patch"
    NOISE_PATCH = "noise_patch"


@dataclass(frozen=True)
class SyntheticSpec:
    n_real: int
    n_fake: int
    image_size: int = 64
    artifact_kind: ArtifactKind = ArtifactKind.WARP_PATCH
    artifact_strength: float = 0.5
    seed: int = 0
    dataset: str = "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "artifact_kind", ArtifactKind(self.artifact_kind))
        if self.n_real < 0 or self.n_fake < 0:
            raise ValueError("sample counts must be non-negative")
        if not 0 < self.artifact_strength <= 1:
            raise ValueError("artifact strength must be in (0, 1]")
        if self.image_size < 16:
            raise ValueError("image size must be at least 16 pixels")


def _base_face(rng, size):
    coarse = rng.uniform(0.15, 0.85, size=(6, 6, 3)).astype(np.float32)
    image = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)

    center = (int(size * rng.uniform(0.45, 0.55)), int(size * rng.uniform(0.45, 0.55)))
    axes = (int(size * rng.uniform(0.22, 0.28)), int(size * rng.uniform(0.30, 0.36)))
    mask = np.zeros((size, size), np.float32)
    cv2.ellipse(mask, center, axes, 0, 0, 360, 1.0, -1)
    mask = cv2.GaussianBlur(mask, (0, 0), size / 40)[..., None]
    skin = rng.uniform((0.55, 0.40, 0.30), (0.85, 0.70, 0.60)).astype(np.float32)
    image = image * (1 - mask) + (0.25 * image + 0.75 * skin) * mask

    eye_y = center[1] - axes[1] // 3
    for dx in (-axes[0] // 2, axes[0] // 2):
        cv2.circle(image, (center[0] + dx, eye_y), max(1, size // 24), (0.1, 0.1, 0.1), -1)
    return np.clip(image, 0, 1)


def _apply_artifact(rng, image, kind, strength):
    size = image.shape[0]
    side = int(size * rng.uniform(0.30, 0.45))
    x = int(rng.integers(int(size * 0.15), int(size * 0.85) - side + 1))
    y = int(rng.integers(int(size * 0.15), int(size * 0.85) - side + 1))
    patch = np.ascontiguousarray(image[y:y + side, x:x + side])

    if kind == ArtifactKind.WARP_PATCH:
        # Affine warp at reduced resolution with mismatched illumination, pasted back without
        # blending the border.
        angle = float(rng.uniform(10, 25) * rng.choice((-1, 1)))
        matrix = cv2.getRotationMatrix2D((side / 2, side / 2), angle, 1.3)
        warped = cv2.warpAffine(patch, matrix, (side, side), borderMode=cv2.BORDER_REFLECT)
        low = max(2, side // 4)
        warped = cv2.resize(cv2.resize(warped, (low, low), interpolation=cv2.INTER_AREA),
                            (side, side), interpolation=cv2.INTER_NEAREST)
        altered = warped * rng.uniform(0.65, 0.85, size=3).astype(np.float32)
    elif kind == ArtifactKind.BLUR_PATCH:
        altered = cv2.GaussianBlur(patch, (0, 0), 2.5)
    elif kind == ArtifactKind.NOISE_PATCH:
        altered = patch + 0.3 * rng.standard_normal(patch.shape).astype(np.float32)
    else:
        assert False, kind

    image = image.copy()
    image[y:y + side, x:x + side] = (1 - strength) * patch + strength * altered
    return np.clip(image, 0, 1)


def _train_count(n):
    return int(math.floor(0.8 * n + 0.5))


def generate_synthetic(spec, out_dir):
    """
    Write a deterministic desk-scale dataset: textured "faces", and the same kind of faces
    with ``spec.artifact_kind`` applied to an interior patch. The first 80% of each class
    (by index) is TRAIN, the rest TEST.
    """
    if spec.n_real + spec.n_fake == 0:
        raise EmptyDatasetError("empty dataset")
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    samples = []
    for label, count in ((Label.REAL, spec.n_real), (Label.FAKE, spec.n_fake)):
        n_train = _train_count(count)
        prefix = "real" if label == Label.REAL else "fake"
        for index in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, int(label), index]))
            image = _base_face(rng, spec.image_size)
            if label == Label.FAKE:
                image = _apply_artifact(rng, image, spec.artifact_kind, spec.artifact_strength)
                method = spec.artifact_kind.value
            else:
                method = "pristine"
            sample_id = "{}_{:05d}".format(prefix, index)
            relative = "images/{}.png".format(sample_id)
            pixels = np.round(image * 255).astype(np.uint8)
            if not cv2.imwrite(str(out_dir / relative), cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR)):
                raise OSError("cannot write {}".format(out_dir / relative))
            split = Split.TRAIN if index < n_train else Split.TEST
            samples.append(Sample(sample_id, relative, label, spec.dataset, split, method))

    manifest = Manifest(samples, spec.dataset, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.csv")
    logger.info("wrote %d real and %d fake %s images to %s", spec.n_real, spec.n_fake,
                spec.artifact_kind.value, out_dir)
    return manifest


def load_image(path, crop_size):
    """RGB float32 array of shape (crop_size, crop_size, 3) with values in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise ImageError("cannot read image {}".format(path))
    image = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0
    if image.shape[:2] != (crop_size, crop_size):
        image = cv2.resize(image, (crop_size, crop_size), interpolation=cv2.INTER_LINEAR)
    return image


class ImageStore:
    """Caches the decoded images of a manifest by sample id."""
    def __init__(self, manifest, crop_size):
        self.manifest  = manifest
        self.crop_size = crop_size
        self._images   = {}

    def __getitem__(self, sample):
        image = self._images.get(sample.id)
        if image is None:
            image = load_image(self.manifest.resolve(sample), self.crop_size)
            self._images[sample.id] = image
        return image

    def preload(self, samples, workers=None):
        missing = [s for s in dict((s.id, s) for s in samples).values()
                   if s.id not in self._images]
        with ThreadPoolExecutor(max_workers=workers or env_workers()) as pool:
            images = pool.map(lambda s: load_image(self.manifest.resolve(s), self.crop_size),
                              missing)
            for sample, image in zip(missing, images):
                self._images[sample.id] = image

    def batch(self, samples):
        array = np.stack([self[s] for s in samples])
        return torch.from_numpy(array).permute(0, 3, 1, 2).contiguous()


class TestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def write_png(self, name, pixels):
        path = self.tmp / name
        cv2.imwrite(str(path), pixels)
        return path

    def test_load_image_extremes(self):
        black = load_image(self.write_png("black.png", np.zeros((5, 7, 3), np.uint8)), 8)
        self.assertEqual(black.shape, (8, 8, 3))
        self.assertTrue((black == 0).all())
        white = load_image(self.write_png("white.png", np.full((8, 8, 3), 255, np.uint8)), 8)
        self.assertTrue((white == 1).all())

    def test_load_image_bilinear(self):
        board = np.array([[0, 255], [255, 0]], np.uint8)
        image = load_image(self.write_png("board.png", np.repeat(board[..., None], 3, 2)), 4)

        # Half-pixel centers, clamped at the border.
        def source(i):
            return min(max((i + 0.5) * 2 / 4 - 0.5, 0.0), 1.0)
        values = np.array([[0.0, 1.0], [1.0, 0.0]])
        for i in range(4):
            for j in range(4):
                fy, fx = source(i), source(j)
                expected = (values[0, 0] * (1 - fy) * (1 - fx) + values[0, 1] * (1 - fy) * fx +
                            values[1, 0] * fy * (1 - fx) + values[1, 1] * fy * fx)
                for c in range(3):
                    self.assertAlmostEqual(float(image[i, j, c]), expected, places=6)

    def test_load_image_corrupt(self):
        path = self.tmp / "broken.png"
        path.write_bytes(b"not a png")
        with self.assertRaises(ImageError):
            load_image(path, 8)

    def test_synthetic_split(self):
        manifest = generate_synthetic(SyntheticSpec(50, 50, seed=7), self.tmp / "d")
        counts = split_counts(manifest)
        self.assertEqual(counts[Split.TRAIN], {Label.REAL: 40, Label.FAKE: 40})
        self.assertEqual(counts[Split.TEST], {Label.REAL: 10, Label.FAKE: 10})
        for sample in manifest:
            self.assertEqual(load_image(manifest.resolve(sample), 64).shape, (64, 64, 3))

    def test_synthetic_empty(self):
        with self.assertRaisesRegex(EmptyDatasetError, "empty dataset"):
            generate_synthetic(SyntheticSpec(0, 0), self.tmp / "e")

    def test_synthetic_deterministic(self):
        for kind in ArtifactKind:
            spec = SyntheticSpec(3, 3, artifact_kind=kind, seed=11)
            first  = generate_synthetic(spec, self.tmp / kind.value / "a")
            second = generate_synthetic(spec, self.tmp / kind.value / "b")
            self.assertEqual((self.tmp / kind.value / "a/manifest.csv").read_bytes(),
                             (self.tmp / kind.value / "b/manifest.csv").read_bytes())
            for s1, s2 in zip(first, second):
                self.assertEqual(first.resolve(s1).read_bytes(), second.resolve(s2).read_bytes())

    def test_expand_box(self):
        self.assertEqual(expand_box(Box(40, 40, 20, 10), 1.3, 100, 100), Box(37, 32, 26, 26))
        self.assertEqual(expand_box(Box(0, 0, 20, 20), 1.3, 100, 100), Box(0, 0, 26, 26))
        self.assertEqual(expand_box(Box(0, 0, 90, 90), 1.3, 100, 60), Box(15, 0, 60, 60))

    def test_center_detector(self):
        boxes = CenterDetector(0.5).detect(np.zeros((40, 60, 3), np.uint8))
        self.assertEqual(boxes, [Box(20, 10, 20, 20)])
