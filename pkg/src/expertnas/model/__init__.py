from .checkpoint import (
    CheckpointShapeError,
    clone,
    load_checkpoint,
    load_checkpoint_file,
    model_id,
    save_checkpoint,
    tensor_count,
)
from .network import (
    ArchitectureEncoding,
    ForwardResult,
    MoEModel,
    ModelConfig,
    RoutingTrace,
    backbone_params,
    count_params,
    ffn_params,
    model_forward,
    router_params,
)
from .switch import Expert, Router, SwitchFFNLayer, SwitchOutput, route, switch_ffn_forward

__all__ = [
    "ArchitectureEncoding",
    "CheckpointShapeError",
    "Expert",
    "ForwardResult",
    "MoEModel",
    "ModelConfig",
    "Router",
    "RoutingTrace",
    "SwitchFFNLayer",
    "SwitchOutput",
    "backbone_params",
    "clone",
    "count_params",
    "ffn_params",
    "load_checkpoint",
    "load_checkpoint_file",
    "model_forward",
    "model_id",
    "route",
    "router_params",
    "save_checkpoint",
    "switch_ffn_forward",
    "tensor_count",
]
