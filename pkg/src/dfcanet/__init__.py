"""Feature-calibration CNN for iris presentation-attack detection.

Built on an in-package autograd engine; see the README for the CLI and the
test suite layout.
"""

from .errors import CheckpointError, DataError, NumericError, ShapeError
from .tensor import Tensor, no_grad, set_debug_checks
from .model import (
    BackboneConfig,
    ChannelAttention,
    DFCANet,
    DFCANetConfig,
    FCBlock,
    FCConv,
    FCConvConfig,
    IFCNet,
    MiniDenseBackbone,
    build_model,
    dump_feature_maps,
)
from .data import (
    AugmentConfig,
    ProtocolSpec,
    RelabelPolicy,
    SampleRecord,
    SynthConfig,
    decode_and_resize,
    load_manifest,
    make_protocol_splits,
    synth_generate,
)
from .metrics import MetricsReport, binary_metrics, confusion_matrix, det_curve
from .training import ArrayDataset, TrainConfig, evaluate, finetune, run_protocol, train

__version__ = "0.1.0"

__all__ = [
    "ArrayDataset", "AugmentConfig", "BackboneConfig", "ChannelAttention",
    "CheckpointError", "DataError", "DFCANet", "DFCANetConfig", "FCBlock",
    "FCConv", "FCConvConfig", "IFCNet", "MetricsReport", "MiniDenseBackbone",
    "NumericError", "ProtocolSpec", "RelabelPolicy", "SampleRecord",
    "ShapeError", "SynthConfig", "Tensor", "TrainConfig", "binary_metrics",
    "build_model", "confusion_matrix", "decode_and_resize", "det_curve",
    "dump_feature_maps", "evaluate", "finetune", "load_manifest",
    "make_protocol_splits", "no_grad", "run_protocol", "set_debug_checks",
    "synth_generate", "train",
]
