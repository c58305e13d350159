"""What the victim shares: per-parameter gradients of one training step."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import archive
from . import tensor as T
from .ablation.masks import layer_params, thirds
from .models.vit import ViTConfig, ViTParams, cross_entropy, param_shapes, vit_forward
from .tensor import ContractError

DEFENSE_TARGETS = ("all", "msa_only", "last_third")


@dataclass
class GradientCapture:
    grads: dict[str, np.ndarray]
    victim_hash: str
    batch_size: int
    vit_config: dict = field(default_factory=dict)
    defense: dict = field(default_factory=lambda: {"sigma": 0.0, "target": "all", "seed": None})

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("a capture needs batch size >= 1")

    @property
    def sigma(self) -> float:
        return float(self.defense.get("sigma", 0.0))

    def norm(self) -> float:
        """l2 norm of all entries taken together."""
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def check_against(self, params: ViTParams) -> None:
        if params.fingerprint() != self.victim_hash:
            raise ContractError(
                f"capture was taken on victim {self.victim_hash}, attack got {params.fingerprint()}"
            )
        for name, arr in params.arrays.items():
            if name not in self.grads or self.grads[name].shape != arr.shape:
                raise ContractError(f"capture entry {name!r} missing or mis-shaped")

    def meta(self) -> dict:
        return {
            "kind": "gradient_capture",
            "victim_hash": self.victim_hash,
            "batch_size": self.batch_size,
            "vit_config": self.vit_config,
            "defense": self.defense,
        }

    def save(self, path) -> Path:
        return archive.save(path, {f"grad/{k}": v for k, v in self.grads.items()}, self.meta())

    @classmethod
    def load(cls, path) -> "GradientCapture":
        arrays, meta = archive.load(path)
        if meta.get("kind") != "gradient_capture":
            raise ContractError(f"{path} is not a gradient capture archive")
        grads = {k[len("grad/") :]: v.astype(np.float64) for k, v in arrays.items() if k.startswith("grad/")}
        return cls(grads, meta["victim_hash"], int(meta["batch_size"]), meta.get("vit_config", {}), meta["defense"])


def capture_gradients(params: ViTParams, x: np.ndarray, labels) -> GradientCapture:
    """Gradients of the batch-mean cross-entropy w.r.t. every victim parameter."""
    x = np.asarray(x, dtype=np.float64)
    w = params.tensors(requires_grad=True)
    with T.Tape() as tape:
        loss = cross_entropy(vit_forward(params, x, w), labels)
        tape.backward(loss)
    grads = {k: (t.grad.data if t.grad is not None else np.zeros(t.shape)) for k, t in w.items()}
    return GradientCapture(grads, params.fingerprint(), x.shape[0], params.config.to_dict())


def defense_targets(config: ViTConfig, target: str) -> list[str]:
    names = list(param_shapes(config))
    if target == "all":
        return names
    if target == "msa_only":
        return [n for n in names if ".attn." in n]
    if target == "last_third":
        last = thirds(config.depth)[-1]
        return [n for n in names if n in set(layer_params(config, last))]
    raise ContractError(f"unknown defense target {target!r}; choose from {DEFENSE_TARGETS}")


def apply_defense(capture: GradientCapture, sigma: float, target: str = "all", seed: int = 0) -> GradientCapture:
    """Add i.i.d. N(0, sigma^2) noise to the selected gradient entries."""
    if sigma < 0:
        raise ContractError("defense sigma must be non-negative")
    config = ViTConfig(**capture.vit_config) if capture.vit_config else None
    if config is None:
        raise ContractError("capture carries no victim config; cannot resolve defense target")
    chosen = set(defense_targets(config, target))
    rng = np.random.default_rng(seed)
    grads = {}
    for name, g in capture.grads.items():
        if name in chosen and sigma > 0:
            grads[name] = g + rng.normal(0.0, sigma, size=g.shape)
        else:
            grads[name] = g.copy()
    return replace(capture, grads=grads, defense={"sigma": float(sigma), "target": target, "seed": seed})
