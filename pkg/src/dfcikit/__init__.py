"""Evaluation toolkit for human-centric generated video.

Motion consistency (DFCI), silhouette Dice consistency, classical frame
metrics, a pyramidal Horn-Schunck flow estimator and reference kernels for
token cross-attention and the body-mask weighted diffusion loss.
"""

from dfcikit.media_io import (
    FlowField,
    MaskSequence,
    MetricReport,
    VideoFrames,
    load_frame_sequence,
    load_mask_sequence,
    read_flo,
    read_report,
    write_flo,
    write_report,
)
from dfcikit.flow import FlowParams, endpoint_error, estimate_flow, to_luma, warp
from dfcikit.metrics import (
    DfciConfig,
    DfciResult,
    dfci,
    dfci_suite,
    dice,
    l1_metric,
    masked_psnr,
    psnr,
    silhouette_consistency,
    ssim,
)
from dfcikit.kernels import (
    facial_attention,
    masked_loss,
    masked_loss_grad,
    sampler_attention,
    softmax,
    token_layout,
)

__version__ = "0.1.0"

__all__ = [
    "DfciConfig",
    "DfciResult",
    "FlowField",
    "FlowParams",
    "MaskSequence",
    "MetricReport",
    "VideoFrames",
    "dfci",
    "dfci_suite",
    "dice",
    "endpoint_error",
    "estimate_flow",
    "facial_attention",
    "l1_metric",
    "load_frame_sequence",
    "load_mask_sequence",
    "masked_loss",
    "masked_loss_grad",
    "masked_psnr",
    "psnr",
    "read_flo",
    "read_report",
    "sampler_attention",
    "silhouette_consistency",
    "softmax",
    "ssim",
    "to_luma",
    "token_layout",
    "warp",
    "write_flo",
    "write_report",
]
