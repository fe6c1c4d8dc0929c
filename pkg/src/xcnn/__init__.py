"""Cross-modal convolutional networks (X-CNNs) in NumPy.

Superlayers process the Y, U and V channels separately and exchange
feature maps through 1x1 cross-connections after every pooling stage.
"""

from .graph import PRESETS, build, build_preset, count_params, preset_spec
from .tensor import Tape, Tensor

__all__ = ["PRESETS", "Tape", "Tensor", "build", "build_preset", "count_params", "preset_spec"]
__version__ = "0.1.0"
