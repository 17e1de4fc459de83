import threading

import cv2
import numpy as np

from ..core import *
from ..detectors import Box, FaceDetector
from ..metrics import ScoreRecord


__all__ = ["StubDetector", "ThreadRecordingDetector", "FailingDetector", "write_video",
           "random_records", "stub_manifest"]


class StubDetector(FaceDetector):
    """Returns the same box for every frame, except for the calls numbered in ``misses``."""
    name = "stub"

    def __init__(self, box=Box(8, 8, 24, 24), misses=()):
        self.box    = box
        self.misses = set(misses)
        self.calls  = 0

    def detect(self, image):
        call, self.calls = self.calls, self.calls + 1
        if call in self.misses:
            return []
        return self._finish([self.box], image)


class ThreadRecordingDetector(StubDetector):
    """A stub detector that remembers the identity of every thread it was called from."""
    def __init__(self):
        super().__init__()
        self.threads = set()

    def detect(self, image):
        self.threads.add(threading.get_ident())
        return super().detect(image)


class FailingDetector(FaceDetector):
    name = "failing"

    def __init__(self, at_call):
        self.at_call = at_call
        self.calls   = 0

    def detect(self, image):
        call, self.calls = self.calls, self.calls + 1
        if call == self.at_call:
            raise RuntimeError("model crashed")
        return [Box(0, 0, 4, 4)]


def write_video(path, n_frames, width=64, height=48, fps=10):
    """Motion-JPEG AVI whose frame ``i`` is a gray level ramp shifted by ``i``."""
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), fps, (width, height))
    assert writer.isOpened(), "OpenCV cannot write MJPG video"
    try:
        ramp = np.tile(np.arange(width, dtype=np.uint8)[None, :, None] * 3, (height, 1, 3))
        for index in range(n_frames):
            writer.write(((ramp.astype(np.int32) + 5 * index) % 256).astype(np.uint8))
    finally:
        writer.release()
    return path


def random_records(rng, max_per_class=15, ties=False):
    n_real = int(rng.integers(1, max_per_class + 1))
    n_fake = int(rng.integers(1, max_per_class + 1))
    if ties:
        scores = rng.integers(0, 8, size=n_real + n_fake) / 7
    else:
        scores = rng.random(n_real + n_fake)
    labels = [Label.REAL] * n_real + [Label.FAKE] * n_fake
    return [ScoreRecord("s{}".format(i), label, float(score))
            for i, (label, score) in enumerate(zip(labels, scores))]


def stub_manifest(n_real, n_fake, split=Split.TRAIN, dataset="stub"):
    """A manifest whose image paths do not exist; enough for sampling and counting."""
    samples = ([Sample("r{}".format(i), "r{}.png".format(i), Label.REAL, dataset, split)
                for i in range(n_real)] +
               [Sample("f{}".format(i), "f{}.png".format(i), Label.FAKE, dataset, split, "m")
                for i in range(n_fake)])
    return Manifest(samples, dataset)
