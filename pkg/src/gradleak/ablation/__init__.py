from .masks import COMPONENTS, MaskSpec, layer_params, resolve_mask, thirds

__all__ = ["COMPONENTS", "MaskSpec", "layer_params", "resolve_mask", "thirds", "run_sweep"]


def __getattr__(name):
    if name == "run_sweep":
        from .sweep import run_sweep

        return run_sweep
    raise AttributeError(name)
