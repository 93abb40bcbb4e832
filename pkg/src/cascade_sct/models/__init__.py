from .checkpoint import Checkpoint
from .ssm import SelectiveSSM, selective_scan, ssm_scan
from .transformer import TransformerBottleneck
from .unet import (
    BackboneConfig,
    Bottleneck,
    ModelOutputs,
    SCTNet,
    TaskMode,
    UNetBackbone,
    config_digest,
    count_parameters,
    fuse_outputs,
)
from .vss3d import DropPath, VSS3DBlock, ss3d_refold, ss3d_unfold

__all__ = [
    "BackboneConfig",
    "Bottleneck",
    "Checkpoint",
    "DropPath",
    "ModelOutputs",
    "SCTNet",
    "SelectiveSSM",
    "TaskMode",
    "TransformerBottleneck",
    "UNetBackbone",
    "VSS3DBlock",
    "config_digest",
    "count_parameters",
    "fuse_outputs",
    "selective_scan",
    "ss3d_refold",
    "ss3d_unfold",
    "ssm_scan",
]
