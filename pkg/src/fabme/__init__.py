"""Desk-scale fabric-defect detection toolkit: a dense-tensor core with
reverse-mode autodiff, 2-D selective-scan feature fusion, channel
attention, a YOLO-style detection graph, a tiling pipeline, mAP@0.5
evaluation, and a toy training loop."""

from fabme.tensor import ConvSpec, Tensor, grad_check, no_grad
from fabme.scan import ScanParams, cross_scan, selective_scan_1d, ss2d
from fabme.blocks import (
    C2F, C2FVMamba, C2FVMambaConfig, EMCA, EMCAConfig, SPPF, VSS, VSSConfig,
)
from fabme.graph import GraphSpec, build_graph, count_params, decode, variant_spec
from fabme.metrics import Detection, GroundTruth, iou, map50, match_and_ap
from fabme.train import TrainConfig, gen_synth_dataset

# the train() entry point lives at fabme.train.train; re-exporting it here
# would shadow the submodule attribute

__all__ = [
    "Tensor", "ConvSpec", "grad_check", "no_grad",
    "ScanParams", "cross_scan", "selective_scan_1d", "ss2d",
    "C2F", "C2FVMamba", "C2FVMambaConfig", "EMCA", "EMCAConfig",
    "SPPF", "VSS", "VSSConfig",
    "GraphSpec", "build_graph", "count_params", "decode", "variant_spec",
    "Detection", "GroundTruth", "iou", "map50", "match_and_ap",
    "TrainConfig", "gen_synth_dataset",
]
__version__ = "0.1.0"
