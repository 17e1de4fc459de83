from torch import nn

from .common import Backbone


__all__ = ["LinearBackbone"]


class LinearBackbone(Backbone):
    # Flattened pixels straight into the head; used where embeddings must be computable by hand.
    kind = "linear"

    def __init__(self, input_shape, embedding_dim=2, dropout_rate=0.0):
        super().__init__(input_shape, embedding_dim, dropout_rate)
        height, width, channels = self.input_shape
        self.flatten = nn.Flatten()
        self._add_head(height * width * channels)

    def features(self, x):
        return self.flatten(x)
