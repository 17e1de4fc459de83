from typing import NamedTuple


__all__ = ["Box", "FaceDetector", "clip_box"]


class Box(NamedTuple):
    x: int
    y: int
    w: int
    h: int


def clip_box(box, width, height):
    x0 = min(max(int(box[0]), 0), width)
    y0 = min(max(int(box[1]), 0), height)
    x1 = min(max(int(box[0] + box[2]), 0), width)
    y1 = min(max(int(box[1] + box[3]), 0), height)
    return Box(x0, y0, x1 - x0, y1 - y0)


class FaceDetector:
    """
    Finds faces in an RGB ``uint8`` image of shape (H, W, 3).

    ``detect`` returns axis-aligned boxes inside the image, most confident first, and must be
    deterministic for a fixed image.
    """
    name = None

    def detect(self, image):
        raise NotImplementedError # :nocov:

    def _finish(self, boxes, image):
        height, width = image.shape[:2]
        boxes = [clip_box(box, width, height) for box in boxes]
        return [box for box in boxes if box.w > 0 and box.h > 0]
