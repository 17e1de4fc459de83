import os

import cv2
import numpy as np

from .common import FaceDetector


__all__ = ["HaarCascadeDetector"]


class HaarCascadeDetector(FaceDetector):
    name = "haar"

    def __init__(self, cascade_path=None, min_size=30):
        if cascade_path is None:
            cascade_path = os.environ.get("HAAR_CASCADE",
                os.path.join(cv2.data.haarcascades, "haarcascade_frontalface_default.xml"))
        self.cascade = cv2.CascadeClassifier(cascade_path)
        if self.cascade.empty():
            raise EnvironmentError("Could not load the face cascade {}. Specify the path "
                "explicitly via the HAAR_CASCADE environment variable".format(cascade_path))
        self.min_size = min_size

    def detect(self, image):
        gray = cv2.cvtColor(image, cv2.COLOR_RGB2GRAY)
        boxes, _, weights = self.cascade.detectMultiScale3(gray, scaleFactor=1.1,
            minNeighbors=5, minSize=(self.min_size, self.min_size), outputRejectLevels=True)
        if len(boxes) == 0:
            return []
        order = np.argsort(-np.asarray(weights).ravel(), kind="stable")
        return self._finish([tuple(boxes[i]) for i in order], image)
