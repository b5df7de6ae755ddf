"""Top-down feature transformers: learned, controllable spatial transforms of CNN feature maps."""

__version__ = "0.1.0"

from .affine import TransformParams, bilinear_warp, make_affine
from .autodiff import Tensor, backward, gradcheck, no_grad
from .backbone import Backbone, train_backbone
from .core import Tft, TftConfig, style_forward, tft_forward
from .data import ThetaRanges, load_idx, read_pgm, write_pgm
from .pipelines import (InversionConfig, TrainConfig, feature_loss, flow_field, internal_augment_finetune,
                        invert_features, mspe, train_tft, tv_regularizer)

__all__ = [
    "Backbone", "InversionConfig", "Tensor", "Tft", "TftConfig", "ThetaRanges", "TrainConfig",
    "TransformParams", "backward", "bilinear_warp", "feature_loss", "flow_field", "gradcheck",
    "internal_augment_finetune", "invert_features", "load_idx", "make_affine", "mspe", "no_grad",
    "read_pgm", "style_forward", "tft_forward", "train_backbone", "train_tft", "tv_regularizer",
    "write_pgm",
]
