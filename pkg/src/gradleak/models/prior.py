"""A small conv-BN-ReLU network whose batch-norm running statistics act as an image prior."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..optim import Adam
from ..tensor import ContractError, Tensor
from .vit import cross_entropy

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class PriorConfig:
    image_size: int = 16
    channels: int = 3
    widths: tuple[int, ...] = (8, 16, 16)
    strides: tuple[int, ...] = (1, 2, 2)
    num_classes: int = 8

    def __post_init__(self):
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ContractError("widths and strides must be non-empty and equally long")

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "channels": self.channels,
            "widths": list(self.widths),
            "strides": list(self.strides),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        return cls(d["image_size"], d["channels"], tuple(d["widths"]), tuple(d["strides"]), d["num_classes"])


@dataclass
class PriorStats:
    """Running mean/variance of each BN layer's input, in forward order."""

    means: list[np.ndarray]
    variances: list[np.ndarray]

    def __post_init__(self):
        if len(self.means) != len(self.variances):
            raise ContractError("one mean and one variance per BN layer")
        for v in self.variances:
            if np.any(v < 0):
                raise ContractError("BN running variance must be non-negative")

    def freeze(self) -> "PriorStats":
        for a in (*self.means, *self.variances):
            a.flags.writeable = False
        return self


@dataclass
class PriorCNN:
    config: PriorConfig
    params: dict[str, np.ndarray]
    stats: PriorStats
    history: list[float] = field(default_factory=list)

    @property
    def frozen(self) -> bool:
        return all(not a.flags.writeable for a in (*self.stats.means, *self.stats.variances))


def prior_param_shapes(cfg: PriorConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    cin = cfg.channels
    for i, cout in enumerate(cfg.widths, start=1):
        shapes[f"conv{i}.weight"] = (3, 3, cin, cout)
        shapes[f"bn{i}.weight"] = (cout,)
        shapes[f"bn{i}.bias"] = (cout,)
        cin = cout
    shapes["head.weight"] = (cin, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def init_prior(cfg: PriorConfig, seed: int = 0) -> PriorCNN:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in prior_param_shapes(cfg).items():
        if name.startswith("conv"):
            fan_in = shape[0] * shape[1] * shape[2]
            params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif name == "head.weight":
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        elif name.endswith("weight"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    stats = PriorStats([np.zeros(w) for w in cfg.widths], [np.ones(w) for w in cfg.widths])
    return PriorCNN(cfg, params, stats)


def _nearest_index(src: int, dst: int) -> np.ndarray:
    return np.minimum((np.arange(dst) * src) // dst, src - 1)


def resize_nearest(x: Tensor, size: int) -> Tensor:
    """Nearest-neighbour resample of [N,H,W,C] to [N,size,size,C]; gradients follow the index map."""
    h, w = x.shape[1], x.shape[2]
    if h == size and w == size:
        return x
    rows = _nearest_index(h, size)[:, None]
    cols = _nearest_index(w, size)[None, :]
    return T.getitem(x, (slice(None), rows, cols, slice(None)))


def _forward(prior: PriorCNN, x, weights, batch_mode: bool):
    """Run the conv stack; returns (features, logits, [(mu, var) per BN input])."""
    cfg = prior.config
    x = T.astensor(x)
    if x.ndim != 4 or x.shape[3] != cfg.channels:
        raise ContractError(f"prior expects [N,H,W,{cfg.channels}] input, got {x.shape}")
    if x.shape[0] == 0:
        raise ContractError("prior forward on an empty batch")
    h = resize_nearest(x, cfg.image_size)
    w = weights if weights is not None else {k: Tensor(v) for k, v in prior.params.items()}
    stats = []
    for i, stride in enumerate(cfg.strides, start=1):
        c = T.conv2d(h, w[f"conv{i}.weight"], stride=stride, padding=1)
        if batch_mode:
            mu, var = T.batch_stats(c)
            stats.append((mu, var))
        else:
            mu = Tensor(prior.stats.means[i - 1])
            var = Tensor(prior.stats.variances[i - 1])
        normed = (c - mu) / T.sqrt(var + BN_EPS)
        h = T.relu(normed * w[f"bn{i}.weight"] + w[f"bn{i}.bias"])
    feats = T.mean(h, (1, 2))
    logits = T.matmul(feats, w["head.weight"]) + w["head.bias"]
    return feats, logits, stats


def prior_forward_stats(prior: PriorCNN, x) -> list[tuple[Tensor, Tensor]]:
    """Batch mean and variance of every BN layer's input, differentiable in ``x``."""
    return _forward(prior, x, None, batch_mode=True)[2]


def prior_features(prior: PriorCNN, x) -> np.ndarray:
    """Penultimate (pooled) features using the stored running statistics."""
    with T.no_grad():
        feats, _, _ = _forward(prior, np.asarray(x, dtype=np.float64), None, batch_mode=False)
    return feats.data


def pretrain_prior(
    images: np.ndarray,
    labels,
    epochs: int = 5,
    seed: int = 0,
    config: PriorConfig | None = None,
    batch_size: int = 32,
    lr: float = 1e-2,
) -> PriorCNN:
    """Supervised training on toy images; BN running stats tracked by EMA and frozen at the end."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise ContractError("cannot pretrain the prior on an empty dataset")
    if config is None:
        config = PriorConfig(image_size=images.shape[1], channels=images.shape[3], num_classes=int(labels.max()) + 1)
    prior = init_prior(config, seed)
    names = list(prior.params)
    opt = Adam([prior.params[k].shape for k in names])
    rng = np.random.default_rng(seed)
    n = images.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if idx.size < 2:
                continue
            weights = {k: Tensor(prior.params[k], requires_grad=True) for k in names}
            with T.Tape() as tape:
                _, logits, stats = _forward(prior, images[idx], weights, batch_mode=True)
                loss = cross_entropy(logits, labels[idx])
                tape.backward(loss)
            losses.append(loss.item())
            for i, (mu, var) in enumerate(stats):
                prior.stats.means[i] = (1 - BN_MOMENTUM) * prior.stats.means[i] + BN_MOMENTUM * mu.data
                prior.stats.variances[i] = (1 - BN_MOMENTUM) * prior.stats.variances[i] + BN_MOMENTUM * var.data
            opt.step([prior.params[k] for k in names], [weights[k].grad.data for k in names], lr)
        prior.history.append(float(np.mean(losses)))
    prior.stats.freeze()
    return prior
