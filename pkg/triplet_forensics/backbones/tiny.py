import torch
from torch import nn

from .common import Backbone


__all__ = ["TinyConvBackbone"]


def _ConvBlock(in_channels, out_channels):
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(),
    )


class TinyConvBackbone(Backbone):
    """
    Three stride-2 convolution blocks of widths 8, 16 and 32, global average pooling and the
    dropout plus linear head.

    The pooled features are standardised per channel before the head, so embeddings start out
    with unit-scale spread whatever the contrast of the input. Every convolution is followed by
    batch normalisation, which makes its output independent of the filter norm; filters start
    with an L2 norm of ``filter_norm``, which sets how fast their direction moves under the
    small stage-1 learning rate.
    """
    kind   = "tiny_conv"
    widths = (8, 16, 32)
    filter_norm = 0.05

    def __init__(self, input_shape, embedding_dim=2, dropout_rate=0.5):
        super().__init__(input_shape, embedding_dim, dropout_rate)
        channels = self.input_shape[2]
        blocks = []
        for width in self.widths:
            blocks.append(_ConvBlock(channels, width))
            channels = width
        self.blocks = nn.Sequential(*blocks)
        self.pool   = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(),
                                    nn.BatchNorm1d(channels, affine=False))
        self._add_head(channels)
        self._scale_filters()

    @torch.no_grad()
    def _scale_filters(self):
        for module in self.blocks.modules():
            if isinstance(module, nn.Conv2d):
                weight = module.weight
                norms = weight.flatten(1).norm(dim=1).clamp_min(1e-12)
                weight.mul_((self.filter_norm / norms).view(-1, 1, 1, 1))

    def features(self, x):
        return self.pool(self.blocks(x))
