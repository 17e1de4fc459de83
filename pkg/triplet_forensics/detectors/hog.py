from .common import FaceDetector


__all__ = ["DlibDetector"]


class DlibDetector(FaceDetector):
    """dlib's HOG frontal face detector; needs the optional ``dlib`` dependency."""
    name = "dlib"

    def __init__(self, upsample=1):
        try:
            import dlib
        except ImportError:
            raise EnvironmentError("Could not import dlib. Install it with "
                "`pip install triplet-forensics[dlib]` or pick another detector") from None
        self.detector = dlib.get_frontal_face_detector()
        self.upsample = upsample

    def detect(self, image):
        rects, scores, _ = self.detector.run(image, self.upsample, 0.0)
        ranked = sorted(zip(scores, range(len(rects))), key=lambda pair: (-pair[0], pair[1]))
        boxes = []
        for _, index in ranked:
            rect = rects[index]
            boxes.append((rect.left(), rect.top(), rect.width(), rect.height()))
        return self._finish(boxes, image)
