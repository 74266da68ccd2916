"""Out-of-domain GAN inversion via invertibility decomposition, desk scale.

A frozen miniature style-based generator and encoder, a trainable spatial
alignment and masking module that warps generator features toward encoder
features while predicting per-resolution invertibility masks, mask gathering
and blending of out-of-domain input pixels with generated content, and a
latent-direction editing pipeline.
"""

from .compose import Decomposition, blend, decompose
from .config import (FullConfig, LossConfig, NetConfig, SammConfig,
                     TrainConfig)
from .edit import EditDirection, apply_edit, fit_direction, invert_edit_blend
from .errors import (CheckpointError, DivergenceError, ShapeError,
                     ValidationError)
from .metrics import mask_iou, psnr, ssim
from .model import InversionModel, InversionOutputs
from .nets import FeaturePyramid, LatentCode
from .samm import (accumulate_mask, gather_masks, grid_sample,
                   iterative_align, upsample_mask)

__version__ = "0.1.0"

__all__ = [
    "Decomposition", "blend", "decompose",
    "FullConfig", "LossConfig", "NetConfig", "SammConfig", "TrainConfig",
    "EditDirection", "apply_edit", "fit_direction", "invert_edit_blend",
    "CheckpointError", "DivergenceError", "ShapeError", "ValidationError",
    "mask_iou", "psnr", "ssim",
    "InversionModel", "InversionOutputs",
    "FeaturePyramid", "LatentCode",
    "accumulate_mask", "gather_masks", "grid_sample", "iterative_align",
    "upsample_mask",
    "__version__",
]
