"""Small numpy CNN with hourglass attention masks and activation heatmaps."""

from .errors import ConfigError, FormatError, ShapeError, TrainingDiverged, UsageError
from .gradcheck import grad_check
from .net import (AttentionModuleSpec, HourglassSpec, MaskHeadSpec, MaskMode, NetworkSpec,
                  StagePlacement, build_network, place_attention)
from .tensor import Tensor, backward, no_grad, precision

__version__ = "0.1.0"
