"""Point-supervised crowd detection toolkit.

Turns point-only annotations into trainable pseudo boxes, self-trains a
small detector with crowdedness-aware losses and confidence-gated
refinement, decodes center-heatmap predictions into boxes, and evaluates
detection/counting/localization quality.
"""

from .geometry import Box, SpatialIndex, iou, iou_matrix
from .pseudosize import LudaConfig, PseudoBox, crowdedness_factor, \
    generate_pseudo_boxes, initial_size, pseudo_boxes_for_scene, smoothed_size
from .raster import GaussianSpec, SupervisionMaps, render_center_heatmap, \
    render_offset_map, render_size_map, render_supervision
from .losses import FDReport, LossConfig, LossValue, combined_loss, \
    crowdedness_size_loss, finite_difference_check, focal_center_loss, \
    offset_loss, smooth_l1
from .refinement import BUCKET_LABELS, PseudoBoxStore, bucket_of
from .decode import DecodeConfig, count_from_detections, decode_detections, \
    extract_peaks, multiscale_merge, nms
from .metrics import MatchResult, MetricsReport, counting_errors, detection_ap, \
    localization_ap_mle, localization_match, nwpu_prf, threshold_search
from .detector import DetectorParams, OptimizerState, Prediction, backward, \
    forward, load_checkpoint, save_checkpoint, step
from .synth import PointScene, SceneSpec, generate_dataset, generate_scene, \
    load_annotations, read_pgm, render_image, save_annotations, split_scenes, \
    write_pgm
from .pipeline import OracleConfig, OracleModel, RunConfig, SimulationResult, \
    audit_pseudo_sizes, build_store, detect_scene, evaluate, simulate_refinement, \
    train, write_report
from . import errors

__version__ = "0.1.0"
