"""Plain convolutional networks trained with activation blending and fused for deployment."""
__version__ = "0.1.0"

from .architecture import ArchSpec, Network, build, flop_breakdown, flop_count, param_count
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .fusion import FusionReport, calibrate_bn, fuse_network, verify_equivalence
from .training import TrainConfig, evaluate, fit, train_epoch

__all__ = [
    "ArchSpec", "Network", "build", "flop_breakdown", "flop_count", "param_count",
    "load_checkpoint", "load_into", "save_checkpoint",
    "FusionReport", "calibrate_bn", "fuse_network", "verify_equivalence",
    "TrainConfig", "evaluate", "fit", "train_epoch",
]
