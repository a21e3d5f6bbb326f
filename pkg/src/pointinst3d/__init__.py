"""Desk-scale 3D point-cloud instance segmentation with dynamic filters.

Pipeline: a toy point backbone votes per-point semantics and instance
centroids; homogeneous points are grouped by breadth-first search; a small
weight generator emits one flat convolution-parameter vector per cluster; a
category-gated 1x1-conv stack decodes each instance mask. Everything learned
runs on the bundled reverse-mode tensor engine.
"""

from .attention import AttentionConfig, init_mhsa_params, mhsa_forward
from .autodiff import ExpressionGraph, Tensor, backward, evaluate, gradient_check
from .backbone import (
    BackboneOutputs,
    ModelConfig,
    backbone_forward,
    bottleneck_transformer,
    encode_points,
    heads,
    init_model_params,
    semantic_labels,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .clustering import (
    Cluster,
    ClusteringConfig,
    cluster_bruteforce_oracle,
    cluster_homogeneous,
)
from .dynamic_head import (
    ClusterVoxelGrid,
    FilterLayout,
    FilterVector,
    decode_instance,
    generate_filters,
    param_count,
    position_embed,
    unpack_filters,
    voxelize_cluster,
)
from .grid import GridIndex, build_grid_index, radius_neighbors
from .losses import (
    LossBreakdown,
    assign_targets,
    centroid_loss,
    dice_loss,
    mask_loss,
    semantic_loss,
    total_loss,
)
from .metrics import (
    EvalReport,
    average_precision,
    boxes_from_masks,
    box_iou,
    coverage_metrics,
    detection_ap,
    evaluate_predictions,
    prec_rec_at50,
)
from .pipeline import (
    InstancePrediction,
    load_predictions,
    mask_iou,
    nms,
    run_inference,
    run_oracle_inference,
    save_predictions,
    score_instance,
)
from .scenes import (
    PointScene,
    SceneConfig,
    generate_scene,
    load_scene,
    oracle_predictions,
    save_scene,
)
from .train import TrainConfig, train

__version__ = "0.1.0"
