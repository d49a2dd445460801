"""cloudlower: a from-scratch cloud-detection network that compiles onto a
restricted set of whole-image 2-D operations, plus an Earth Engine client
script emitter for the compiled form.

Three layers, verified against each other:

  * reference engine: numpy forward pass over (channels, H, W) tensors
    (tensor.py, graph.py), trainable with hand-written gradients (trainer.py);
  * lowered form: the same network as a straight-line program over named
    image bands - select, per-band 2-D convolve, pointwise arithmetic, 2x2
    max reduce, nearest upsample (isa.py, lowering.py), interpreted here and
    equivalent to the reference within 1e-6 end to end;
  * deployment: a deterministic script generator targeting the Earth Engine
    code editor, with parameter tables and structural lint (gee.py).
"""

from .errors import (
    CloudLowerError,
    ConfigError,
    DimensionError,
    FormatError,
    LoweringError,
    NumericDomainError,
    ToleranceError,
    ValidationError,
)
from .graph import (
    ModelConfig,
    ParamSet,
    build_graph,
    forward,
    param_count,
    random_params,
    receptive_halo,
    registry_shapes,
)
from .isa import GridImage, Program, interpret, parse_program, program_stats, serialize_program
from .lowering import LoweredNetwork, lower_network
from .metrics import ConfusionMatrix, MetricReport, confusion, dilate, report, threshold_mask
from .params_io import export_params, import_params, read_model, write_model
from .raster import Raster, pad_to_multiple, read_mask, read_raster, tiled_infer, write_mask, write_raster
from .tensor import Tensor
from .trainer import LabeledPatch, TrainConfig, init_params, synth_dataset, train
from .gee import EmitOptions, EmittedBundle, emit, lint_script

__version__ = "0.1.0"

__all__ = [
    "CloudLowerError",
    "ConfigError",
    "ConfusionMatrix",
    "DimensionError",
    "EmitOptions",
    "EmittedBundle",
    "FormatError",
    "GridImage",
    "LabeledPatch",
    "LoweredNetwork",
    "LoweringError",
    "MetricReport",
    "ModelConfig",
    "NumericDomainError",
    "ParamSet",
    "Program",
    "Raster",
    "Tensor",
    "ToleranceError",
    "TrainConfig",
    "ValidationError",
    "build_graph",
    "confusion",
    "dilate",
    "emit",
    "export_params",
    "forward",
    "import_params",
    "init_params",
    "interpret",
    "lint_script",
    "lower_network",
    "pad_to_multiple",
    "param_count",
    "parse_program",
    "program_stats",
    "random_params",
    "read_mask",
    "read_model",
    "read_raster",
    "receptive_halo",
    "registry_shapes",
    "report",
    "serialize_program",
    "synth_dataset",
    "threshold_mask",
    "tiled_infer",
    "train",
    "write_mask",
    "write_model",
    "write_raster",
]
