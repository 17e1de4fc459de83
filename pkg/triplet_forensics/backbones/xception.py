import logging

import timm
import torch

from ..core import CheckpointError
from .common import Backbone


__all__ = ["XceptionAdapterBackbone", "xception_model_name"]


logger = logging.getLogger(__name__)


def xception_model_name():
    # timm 0.9 renamed its port of the original network to `legacy_xception`.
    for name in ("legacy_xception", "xception"):
        if timm.is_model(name):
            return name
    raise EnvironmentError("timm {} provides no Xception model".format(timm.__version__))


class XceptionAdapterBackbone(Backbone):
    """
    timm's Xception with its classification layer replaced by dropout and a linear map to the
    embedding. The network is created without weights; ``load_pretrained`` brings them in from
    a local file.
    """
    kind = "xception_adapter"

    def __init__(self, input_shape, embedding_dim=2, dropout_rate=0.5):
        super().__init__(input_shape, embedding_dim, dropout_rate)
        # num_classes=0 leaves the globally pooled 2048-wide features as the output.
        self.net = timm.create_model(xception_model_name(), pretrained=False, num_classes=0,
                                     in_chans=self.input_shape[2])
        self._add_head(self.net.num_features)

    def features(self, x):
        return self.net(x)

    def load_pretrained(self, path):
        """
        Copy the tensors of an Xception checkpoint into the network, leaving the head alone.

        Tensors are matched by name (with any ``module.`` or ``net.`` prefix removed) and
        shape. Returns the names of network tensors that kept their initial values and of
        checkpoint tensors that were not used. Raises ``CheckpointError`` if the file cannot be
        read or if not a single tensor matched.
        """
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError, ValueError) as error:
            raise CheckpointError("cannot read pretrained weights {}: {}"
                                  .format(path, error)) from None
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        if not isinstance(state, dict):
            raise CheckpointError("pretrained weights {} are not a state dict".format(path))

        own = self.net.state_dict()
        matched, unused = {}, []
        for key, value in state.items():
            for prefix in ("module.", "net."):
                if key.startswith(prefix):
                    key = key[len(prefix):]
            if (key in own and isinstance(value, torch.Tensor) and
                    own[key].shape == value.shape):
                matched[key] = value
            elif not key.startswith(("head.", "fc.", "last_linear.")):
                unused.append(key)
        if not matched:
            raise CheckpointError("pretrained weights {} share no tensor with {}"
                                  .format(path, xception_model_name()))

        self.net.load_state_dict(matched, strict=False)
        missing = [key for key in own if key not in matched]
        logger.info("loaded %d of %d tensors from %s", len(matched), len(own), path)
        if missing:
            logger.warning("pretrained weights %s lack %d tensors, e.g. %s",
                           path, len(missing), missing[0])
        if unused:
            logger.warning("pretrained weights %s have %d unused tensors, e.g. %s",
                           path, len(unused), unused[0])
        return missing, unused
