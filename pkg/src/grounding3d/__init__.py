"""Desk-scale numerics for monocular 3D visual grounding."""

from .attention import (
    AttentionParams,
    EncoderLayerParams,
    FFNParams,
    depth_encoder_layer,
    mhca,
    mhsa,
    visual_encoder_layer,
)
from .certainty import (
    MASK_TOKEN,
    CaptionRecord,
    CertaintyPartition,
    MaskPolicy,
    cosine_similarity,
    kmeans_1d_k2,
    mask_records,
    mask_caption,
    partition_certainty,
)
from .decouple import CoarseFeatures, DecoupleParams, coarse_decouple, decouple_features, reverse_cross_attention
# the evaluate() entry point stays in grounding3d.evaluate to keep the
# submodule name usable
from .evaluate import AccuracyTable, EvalSample, ScenarioLabel
from .geometry import Box2D, Box3D, CameraCalib, backproject_center, giou_2d, iou_2d, iou_3d, monte_carlo_iou3d, project_center
from .losses import (
    BoxRegression,
    LossBreakdown,
    LossWeights,
    OrientationBins,
    aggregate,
    depth_map_focal_loss,
    focal_loss,
    laplacian_depth_loss,
    multibin_loss,
    regression_losses,
    size3d_iou_loss,
)
from .pipeline import ProbeReport, SyntheticSample, ToyConfig, probe_decoupling, synth_generate, toy_forward, train_toy
from .tensor import GradTape, Tensor, backward, grad_check

__version__ = "0.1.0"
