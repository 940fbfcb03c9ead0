"""Next-ViT CPU inference and verification engine built on numpy."""
from .analysis import (
    CostReport,
    EquivReport,
    check_equivalence,
    count_bn_nodes,
    count_flops,
    count_params,
    fold_batchnorm,
)
from .bench import BenchReport, bench_run
from .blocks import EMHSASpec, MHCASpec, NCBSpec, NTBSpec, block_forward
from .config import load_config, parse_config, render_config
from .errors import (
    BadMagic,
    DtypeUnsupported,
    DuplicateName,
    GroupMismatch,
    HeadMismatch,
    InvalidPattern,
    InvalidRatio,
    NextViTError,
    NonFinite,
    NotFoldable,
    NotOnTape,
    ParseError,
    ShapeMismatch,
    SignatureMismatch,
    TruncatedFile,
    UnknownKey,
    WeightFileError,
)
from .model import HybridPattern, ModelSpec, build_hybrid, build_variant, forward, init_params, shape_trace
from .tensor import Precision, Tape, Tensor, backward
from .weights import load_tensor, load_weights, save_tensor, save_weights

__version__ = "0.1.0"

__all__ = [
    "BadMagic",
    "BenchReport",
    "CostReport",
    "DtypeUnsupported",
    "DuplicateName",
    "EMHSASpec",
    "EquivReport",
    "GroupMismatch",
    "HeadMismatch",
    "HybridPattern",
    "InvalidPattern",
    "InvalidRatio",
    "MHCASpec",
    "ModelSpec",
    "NCBSpec",
    "NTBSpec",
    "NextViTError",
    "NonFinite",
    "NotFoldable",
    "NotOnTape",
    "ParseError",
    "Precision",
    "ShapeMismatch",
    "SignatureMismatch",
    "Tape",
    "Tensor",
    "TruncatedFile",
    "UnknownKey",
    "WeightFileError",
    "backward",
    "bench_run",
    "block_forward",
    "build_hybrid",
    "build_variant",
    "check_equivalence",
    "count_bn_nodes",
    "count_flops",
    "count_params",
    "fold_batchnorm",
    "forward",
    "init_params",
    "load_config",
    "load_tensor",
    "load_weights",
    "parse_config",
    "render_config",
    "save_tensor",
    "save_weights",
    "shape_trace",
]
