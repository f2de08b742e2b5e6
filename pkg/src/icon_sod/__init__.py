"""Integrity-aware salient object detection, desk scale.

A small dense-tensor autodiff engine carries a full saliency decoder
(diverse feature aggregation, shared channel enhancement, capsule
part-whole verification with EM routing), trained with a cooperative
BCE + IoU loss and scored by the standard saliency metric suite plus the
false-negative ratio.  See the README for the CLI and file formats.
"""

from .network import IconConfig, IconParams, PredictionSet, icon_forward, infer, init_params
from .tensor import Tensor, no_grad

__all__ = [
    "IconConfig",
    "IconParams",
    "PredictionSet",
    "Tensor",
    "icon_forward",
    "infer",
    "init_params",
    "no_grad",
]
