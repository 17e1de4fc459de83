from .common import FaceDetector


__all__ = ["CenterDetector"]


class CenterDetector(FaceDetector):
    # Material that is already roughly face-centered, e.g. pre-cropped clips.
    name = "center"

    def __init__(self, fraction=0.6):
        assert 0 < fraction <= 1
        self.fraction = fraction

    def detect(self, image):
        height, width = image.shape[:2]
        side = max(1, int(min(width, height) * self.fraction))
        return self._finish([((width - side) // 2, (height - side) // 2, side, side)], image)
