"""Two-stream spatiotemporal fusion networks on a small numpy autodiff engine."""

from .archfile import Arch, ArchError, LayerSpec, load_arch, parse_arch
from .fusion import (FusionSpec, Init, Method, fuse, fuse_bilinear, fuse_cat, fuse_conv,
                     fuse_conv3d, fuse_max, fuse_sum, init_fusion_filter, init_fusion_filter3d)
from .network import (FusionPlacement, FusionPoint, Network, ParamReport, TemporalHead,
                      build_single_stream, build_two_stream, count_params, layer_output_shapes)
from .temporal import (ReceptiveField, SamplingPlan, conv3d_fusion_head, pool2d_head,
                       pool3d_head, receptive_field, stack_time)
from .tensor import Tensor, load_tensor, save_tensor, stop_gradient

__version__ = "0.1.0"

__all__ = [
    "Arch", "ArchError", "LayerSpec", "load_arch", "parse_arch",
    "FusionSpec", "Init", "Method", "fuse", "fuse_bilinear", "fuse_cat", "fuse_conv",
    "fuse_conv3d", "fuse_max", "fuse_sum", "init_fusion_filter", "init_fusion_filter3d",
    "FusionPlacement", "FusionPoint", "Network", "ParamReport", "TemporalHead",
    "build_single_stream", "build_two_stream", "count_params", "layer_output_shapes",
    "ReceptiveField", "SamplingPlan", "conv3d_fusion_head", "pool2d_head", "pool3d_head",
    "receptive_field", "stack_time",
    "Tensor", "load_tensor", "save_tensor", "stop_gradient",
]
