"""Vision transformer with on-the-fly per-group context tokens.

Pure-numpy implementation: a small reverse-mode autodiff core, a
pre-norm ViT backbone, context-inference variants (mean pooling, linear
heads, detached and layerwise forms, deep sets, oracle table, EMA,
in-context patches), a synthetic grouped-shift benchmark, and training,
evaluation, and analysis utilities.
"""

from .tensor import Tensor, Tape, backward, stop_gradient

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "backward", "stop_gradient", "__version__"]
