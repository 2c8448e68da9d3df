"""Desk-scale two-stage region/image instruction tuning.

Subpackages cover the autograd tensor core, multi-head attention, the
two-way region interaction module, LoRA adapters, the toy multimodal
stack, data handling, the two-stage training harness, caption metrics,
and a command-line front end.
"""

from .tensor import Tensor, backward, precision

__all__ = ["Tensor", "backward", "precision"]
__version__ = "0.1.0"
