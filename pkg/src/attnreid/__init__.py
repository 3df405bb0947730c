"""Attention-aware embedding learning for person re-identification.

Training adds two removable supervision branches to a small convolutional
embedding network: a holistic branch that predicts the body mask from
low-level features and a partial branch that predicts grouped keypoint
heatmaps from disjoint channel groups. Inference uses the backbone and
embedding head only.
"""

from .tensor import Tape, Tensor

__all__ = ["Tensor", "Tape"]
__version__ = "0.1.0"
