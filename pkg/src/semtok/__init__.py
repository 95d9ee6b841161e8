"""Budget-driven token selection for a small vision transformer sent over a noisy channel."""
from .channel import ChannelSpec
from .tensor import Tensor, no_grad
from .transformer import Model, ModelConfig

__version__ = "0.1.0"
__all__ = ["ChannelSpec", "Model", "ModelConfig", "Tensor", "no_grad"]
