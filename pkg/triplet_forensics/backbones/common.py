from torch import nn


__all__ = ["Backbone", "BackboneClassifier"]


class Backbone(nn.Module):
    """
    Feature extraction network mapping an image batch (N, C, H, W) to embeddings (N, E).

    Subclasses provide ``features`` (a pooled feature vector per image) and call
    ``_add_head`` with its width; the head is always dropout followed by one linear layer.
    ``input_shape`` is (H, W, C), the layout images are loaded in.
    """
    kind = None

    def __init__(self, input_shape, embedding_dim, dropout_rate):
        super().__init__()
        assert len(input_shape) == 3
        assert embedding_dim >= 1
        self.input_shape   = tuple(int(n) for n in input_shape)
        self.embedding_dim = embedding_dim
        self.dropout_rate  = dropout_rate

    def _add_head(self, feature_dim):
        self.feature_dim = feature_dim
        self.head = nn.Sequential(
            nn.Dropout(self.dropout_rate),
            nn.Linear(feature_dim, self.embedding_dim),
        )

    def features(self, x):
        raise NotImplementedError # :nocov:

    def forward(self, x):
        return self.head(self.features(x))


class BackboneClassifier(nn.Module):
    """Pooled backbone features followed by a linear two-logit layer, without any triplet stage."""
    def __init__(self, backbone):
        super().__init__()
        self.backbone = backbone
        self.logits   = nn.Linear(backbone.feature_dim, 2)

    def forward(self, x):
        return self.logits(self.backbone.features(x))
