"""Which parameter gradients enter the matching loss."""

from __future__ import annotations

from dataclasses import dataclass

from ..models.vit import ViTConfig, param_shapes
from ..tensor import ContractError

MODES = ("all", "keep_full", "drop_layers", "keep_component")
COMPONENTS = ("MSA", "MLP")


@dataclass(frozen=True)
class MaskSpec:
    """Selection of gradient entries.

    ``layers`` are 1-based, inclusive transformer-layer numbers for
    ``drop_layers``; ``component`` is ``"MSA"`` or ``"MLP"`` for
    ``keep_component``. ``keep_component`` keeps only that component's
    projections: embeddings, norms and the head are excluded.
    """

    mode: str = "all"
    layers: tuple[int, ...] = ()
    component: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown mask mode {self.mode!r}; choose from {MODES}")
        if self.mode == "keep_component" and self.component not in COMPONENTS:
            raise ContractError(f"keep_component needs component in {COMPONENTS}")

    @classmethod
    def drop(cls, first: int, last: int) -> "MaskSpec":
        return cls("drop_layers", tuple(range(first, last + 1)))

    @classmethod
    def keep(cls, component: str) -> "MaskSpec":
        return cls("keep_component", component=component)

    def to_dict(self) -> dict:
        d: dict = {"mode": self.mode}
        if self.mode == "drop_layers":
            d["layers"] = list(self.layers)
        if self.mode == "keep_component":
            d["component"] = self.component
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        unknown = set(d) - {"mode", "layers", "component"}
        if unknown:
            raise ContractError(f"unknown mask keys {sorted(unknown)}")
        return cls(d.get("mode", "all"), tuple(d.get("layers", ())), d.get("component"))

    @property
    def label(self) -> str:
        if self.mode == "drop_layers":
            if not self.layers:
                return "all"
            return f"drop_layers_{min(self.layers)}-{max(self.layers)}"
        if self.mode == "keep_component":
            return f"keep_{self.component}"
        return "all"


def thirds(depth: int) -> list[tuple[int, ...]]:
    """Split layers 1..depth into three depth-proportional, contiguous groups."""
    bounds = [round(depth * i / 3) for i in range(4)]
    groups = [tuple(range(bounds[i] + 1, bounds[i + 1] + 1)) for i in range(3)]
    return [g for g in groups if g]


def layer_params(config: ViTConfig, layers) -> list[str]:
    prefixes = tuple(f"layers.{i}." for i in layers)
    return [n for n in param_shapes(config) if n.startswith(prefixes)]


def resolve_mask(spec: MaskSpec, config: ViTConfig) -> list[str]:
    """Parameter names included in the matching loss, in enumeration order."""
    names = list(param_shapes(config))
    if spec.mode in ("all", "keep_full"):
        chosen = names
    elif spec.mode == "drop_layers":
        bad = [i for i in spec.layers if not 1 <= i <= config.depth]
        if bad:
            raise ContractError(f"layers {bad} outside 1..{config.depth}")
        dropped = set(layer_params(config, spec.layers))
        chosen = [n for n in names if n not in dropped]
    else:
        tag = ".attn." if spec.component == "MSA" else ".mlp."
        chosen = [n for n in names if tag in n]
    if not chosen:
        raise ContractError(f"mask {spec.to_dict()} selects no parameters")
    return chosen
