from .vit import (
    ViTConfig,
    ViTParams,
    cross_entropy,
    init_vit,
    param_shapes,
    patchify,
    vit_forward,
    vit_param_grads,
)

__all__ = [
    "ViTConfig",
    "ViTParams",
    "cross_entropy",
    "init_vit",
    "param_shapes",
    "patchify",
    "vit_forward",
    "vit_param_grads",
]
