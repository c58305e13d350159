"""A small Vision Transformer classifier and its hand-derived parameter gradients.

``vit_forward`` is the ordinary forward pass; differentiating it with
:func:`gradleak.tensor.backward` gives the gradients a federated client
would share. ``vit_param_grads`` computes the same gradients as an explicit
forward graph, so an attacker can differentiate a gradient-matching loss with
respect to the input using a single reverse pass.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .. import tensor as T
from ..tensor import ContractError, Tensor

LN_EPS = T.LAYER_NORM_EPS
INIT_STD = 0.02


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 32
    depth: int = 3
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 8

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not isinstance(v, int) or v <= 0:
                raise ContractError(f"ViTConfig.{k} must be a positive int, got {v!r}")
        if self.image_size % self.patch_size:
            raise ContractError("patch_size must divide image_size")
        if self.embed_dim % self.heads:
            raise ContractError("heads must divide embed_dim")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in the fixed enumeration order."""
    d, hd = cfg.embed_dim, cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (cfg.seq_len, d),
    }
    for i in range(1, cfg.depth + 1):
        p = f"layers.{i}."
        shapes.update(
            {
                p + "ln1.weight": (d,),
                p + "ln1.bias": (d,),
                p + "attn.q.weight": (d, d),
                p + "attn.q.bias": (d,),
                p + "attn.k.weight": (d, d),
                p + "attn.k.bias": (d,),
                p + "attn.v.weight": (d, d),
                p + "attn.v.bias": (d,),
                p + "attn.out.weight": (d, d),
                p + "attn.out.bias": (d,),
                p + "ln2.weight": (d,),
                p + "ln2.bias": (d,),
                p + "mlp.fc1.weight": (d, hd),
                p + "mlp.fc1.bias": (hd,),
                p + "mlp.fc2.weight": (hd, d),
                p + "mlp.fc2.bias": (d,),
            }
        )
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    shapes["head.weight"] = (d, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


class ViTParams:
    """Victim weights keyed by parameter name, in enumeration order."""

    def __init__(self, config: ViTConfig, arrays: Mapping[str, np.ndarray]):
        shapes = param_shapes(config)
        if list(arrays) != list(shapes):
            missing = set(shapes) ^ set(arrays)
            raise ContractError(f"parameter names/order do not match config (diff: {sorted(missing)[:4]})")
        for name, shape in shapes.items():
            if tuple(np.shape(arrays[name])) != shape:
                raise ContractError(f"{name}: expected shape {shape}, got {np.shape(arrays[name])}")
        self.config = config
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    @property
    def names(self) -> list[str]:
        return list(self.arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def fingerprint(self) -> str:
        """Hash of the config and every weight; ties a gradient capture to its victim."""
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for k, v in self.arrays.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def copy(self) -> "ViTParams":
        return ViTParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_vit(cfg: ViTConfig, seed: int = 0) -> ViTParams:
    """Truncated-normal weights (std 0.02), unit norm gains, zeros elsewhere."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".weight") and len(shape) == 2:
            arrays[name] = _trunc_normal(rng, shape, INIT_STD)
        elif name.endswith(("ln1.weight", "ln2.weight")) or name == "norm.weight":
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    return ViTParams(cfg, arrays)


def patchify(x: Tensor, cfg: ViTConfig) -> Tensor:
    """[N,H,W,C] -> [N, num_patches, P*P*C], row-major over the patch grid."""
    n = x.shape[0]
    g, p, c = cfg.grid, cfg.patch_size, cfg.channels
    t = T.reshape(x, (n, g, p, g, p, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (n, g * g, p * p * c))


def _check_input(x: Tensor, cfg: ViTConfig) -> None:
    want = (cfg.image_size, cfg.image_size, cfg.channels)
    if x.ndim != 4 or x.shape[1:] != want or x.shape[0] < 1:
        raise ContractError(f"expected input [N,{want[0]},{want[1]},{want[2]}], got {x.shape}")


def _split_heads(t: Tensor, n: int, s: int, h: int, dh: int) -> Tensor:
    return T.transpose(T.reshape(t, (n, s, h, dh)), (0, 2, 1, 3))


def _merge_heads(t: Tensor, n: int, s: int, d: int) -> Tensor:
    return T.reshape(T.transpose(t, (0, 2, 1, 3)), (n, s, d))


def vit_forward(params: ViTParams, x, weights: Mapping[str, Tensor] | None = None) -> Tensor:
    """Class logits [N, K]. Pass ``weights`` to differentiate w.r.t. parameters."""
    cfg = params.config
    x = T.astensor(x)
    _check_input(x, cfg)
    w = weights if weights is not None else params.tensors()
    n, s, d, h, dh = x.shape[0], cfg.seq_len, cfg.embed_dim, cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)

    e = T.matmul(patchify(x, cfg), w["patch_embed.weight"]) + w["patch_embed.bias"]
    cls = T.reshape(w["cls_token"], (1, 1, d)) + T.Tensor(np.zeros((n, 1, d)))
    z = T.concat([cls, e], axis=1) + w["pos_embed"]
    for i in range(1, cfg.depth + 1):
        p = f"layers.{i}."
        a = T.layer_norm(z, w[p + "ln1.weight"], w[p + "ln1.bias"])
        q = _split_heads(T.matmul(a, w[p + "attn.q.weight"]) + w[p + "attn.q.bias"], n, s, h, dh)
        k = _split_heads(T.matmul(a, w[p + "attn.k.weight"]) + w[p + "attn.k.bias"], n, s, h, dh)
        v = _split_heads(T.matmul(a, w[p + "attn.v.weight"]) + w[p + "attn.v.bias"], n, s, h, dh)
        att = T.softmax(T.matmul(q, T.swapaxes(k, -1, -2)) * scale, axis=-1)
        o = _merge_heads(T.matmul(att, v), n, s, d)
        z = z + T.matmul(o, w[p + "attn.out.weight"]) + w[p + "attn.out.bias"]
        b = T.layer_norm(z, w[p + "ln2.weight"], w[p + "ln2.bias"])
        u = T.gelu(T.matmul(b, w[p + "mlp.fc1.weight"]) + w[p + "mlp.fc1.bias"])
        z = z + T.matmul(u, w[p + "mlp.fc2.weight"]) + w[p + "mlp.fc2.bias"]
    f = T.layer_norm(z[:, 0, :], w["norm.weight"], w["norm.bias"])
    return T.matmul(f, w["head.weight"]) + w["head.bias"]


def _onehot(labels: Sequence[int], k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= k):
        raise ContractError(f"labels must be a list of ints in [0, {k}), got {labels.tolist()}")
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits, labels: Sequence[int]) -> Tensor:
    """Batch mean of -log softmax(logits)[label]."""
    logits = T.astensor(logits)
    n, k = logits.shape
    oh = _onehot(labels, k)
    if oh.shape[0] != n:
        raise ContractError(f"got {oh.shape[0]} labels for a batch of {n}")
    return -T.sum(T.log_softmax(logits, axis=-1) * oh) / n


# --- explicit gradient graph ------------------------------------------------


def _ln_forward(z: Tensor, gain: Tensor, shift: Tensor):
    mu = T.mean(z, -1, keepdims=True)
    zc = z - mu
    inv = 1.0 / T.sqrt(T.mean(zc * zc, -1, keepdims=True) + LN_EPS)
    zhat = zc * inv
    return zhat * gain + shift, zhat, inv


def _ln_backward(dy: Tensor, gain: Tensor, zhat: Tensor, inv: Tensor):
    gx = dy * gain
    dz = inv * (gx - T.mean(gx, -1, keepdims=True) - zhat * T.mean(gx * zhat, -1, keepdims=True))
    lead = tuple(range(dy.ndim - 1))
    return dz, T.sum(dy * zhat, lead), T.sum(dy, lead)


def _gelu_prime(u: Tensor) -> Tensor:
    th = T.tanh((u + u * u * u * T.GELU_K) * T.GELU_C)
    return (th + 1.0) * 0.5 + u * (1.0 - th * th) * (T.GELU_C * 0.5) * (u * u * (3.0 * T.GELU_K) + 1.0)


def _flat(t: Tensor) -> Tensor:
    return T.reshape(t, (-1, t.shape[-1]))


def vit_param_grads(
    params: ViTParams, x, labels: Sequence[int], names: Iterable[str] | None = None
) -> dict[str, Tensor]:
    """d cross_entropy / d W for every parameter, as tensors differentiable in ``x``.

    ``names`` limits which weight gradients are materialized; the
    backpropagated signal still flows through every layer.
    """
    cfg = params.config
    x = T.astensor(x)
    _check_input(x, cfg)
    want = set(params.names if names is None else names)
    w = params.tensors()
    n, s, d, h, dh = x.shape[0], cfg.seq_len, cfg.embed_dim, cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    oh = _onehot(labels, cfg.num_classes)
    if oh.shape[0] != n:
        raise ContractError(f"got {oh.shape[0]} labels for a batch of {n}")
    out: dict[str, Tensor] = {}

    def emit(name, fn):
        if name in want:
            out[name] = fn()

    # forward, keeping what the reverse sweep needs
    patches = patchify(x, cfg)
    e = T.matmul(patches, w["patch_embed.weight"]) + w["patch_embed.bias"]
    cls = T.reshape(w["cls_token"], (1, 1, d)) + T.Tensor(np.zeros((n, 1, d)))
    z = T.concat([cls, e], axis=1) + w["pos_embed"]
    saved = []
    for i in range(1, cfg.depth + 1):
        p = f"layers.{i}."
        a, ahat, ainv = _ln_forward(z, w[p + "ln1.weight"], w[p + "ln1.bias"])
        q = _split_heads(T.matmul(a, w[p + "attn.q.weight"]) + w[p + "attn.q.bias"], n, s, h, dh)
        k = _split_heads(T.matmul(a, w[p + "attn.k.weight"]) + w[p + "attn.k.bias"], n, s, h, dh)
        v = _split_heads(T.matmul(a, w[p + "attn.v.weight"]) + w[p + "attn.v.bias"], n, s, h, dh)
        att = T.softmax(T.matmul(q, T.swapaxes(k, -1, -2)) * scale, axis=-1)
        o = _merge_heads(T.matmul(att, v), n, s, d)
        z = z + T.matmul(o, w[p + "attn.out.weight"]) + w[p + "attn.out.bias"]
        b, bhat, binv = _ln_forward(z, w[p + "ln2.weight"], w[p + "ln2.bias"])
        pre = T.matmul(b, w[p + "mlp.fc1.weight"]) + w[p + "mlp.fc1.bias"]
        u = T.gelu(pre)
        z = z + T.matmul(u, w[p + "mlp.fc2.weight"]) + w[p + "mlp.fc2.bias"]
        saved.append((a, ahat, ainv, q, k, v, att, o, b, bhat, binv, pre, u))
    f, fhat, finv = _ln_forward(z[:, 0, :], w["norm.weight"], w["norm.bias"])
    logits = T.matmul(f, w["head.weight"]) + w["head.bias"]

    # reverse sweep
    dlogits = (T.softmax(logits, axis=-1) - oh) * (1.0 / n)
    emit("head.weight", lambda: T.matmul(T.transpose(f), dlogits))
    emit("head.bias", lambda: T.sum(dlogits, 0))
    df = T.matmul(dlogits, T.transpose(w["head.weight"]))
    dcls, dgain, dshift = _ln_backward(df, w["norm.weight"], fhat, finv)
    emit("norm.weight", lambda: dgain)
    emit("norm.bias", lambda: dshift)
    dz = T.concat([T.reshape(dcls, (n, 1, d)), T.Tensor(np.zeros((n, s - 1, d)))], axis=1)

    for i in range(cfg.depth, 0, -1):
        p = f"layers.{i}."
        a, ahat, ainv, q, k, v, att, o, b, bhat, binv, pre, u = saved[i - 1]
        dz2 = _flat(dz)
        emit(p + "mlp.fc2.weight", lambda: T.matmul(T.transpose(_flat(u)), dz2))
        emit(p + "mlp.fc2.bias", lambda: T.sum(dz2, 0))
        dpre = T.matmul(dz, T.transpose(w[p + "mlp.fc2.weight"])) * _gelu_prime(pre)
        dpre2 = _flat(dpre)
        emit(p + "mlp.fc1.weight", lambda: T.matmul(T.transpose(_flat(b)), dpre2))
        emit(p + "mlp.fc1.bias", lambda: T.sum(dpre2, 0))
        db = T.matmul(dpre, T.transpose(w[p + "mlp.fc1.weight"]))
        dzb, dgain, dshift = _ln_backward(db, w[p + "ln2.weight"], bhat, binv)
        emit(p + "ln2.weight", lambda: dgain)
        emit(p + "ln2.bias", lambda: dshift)
        dz = dz + dzb

        dz2 = _flat(dz)
        emit(p + "attn.out.weight", lambda: T.matmul(T.transpose(_flat(o)), dz2))
        emit(p + "attn.out.bias", lambda: T.sum(dz2, 0))
        do = _split_heads(T.matmul(dz, T.transpose(w[p + "attn.out.weight"])), n, s, h, dh)
        datt = T.matmul(do, T.swapaxes(v, -1, -2))
        dv = T.matmul(T.swapaxes(att, -1, -2), do)
        dscore = att * (datt - T.sum(datt * att, -1, keepdims=True))
        dq = T.matmul(dscore, k) * scale
        dk = T.matmul(T.swapaxes(dscore, -1, -2), q) * scale
        a2 = _flat(a)
        da = None
        for nm, dh_ in (("q", dq), ("k", dk), ("v", dv)):
            dm = _merge_heads(dh_, n, s, d)
            dm2 = _flat(dm)
            emit(p + f"attn.{nm}.weight", lambda: T.matmul(T.transpose(a2), dm2))
            emit(p + f"attn.{nm}.bias", lambda: T.sum(dm2, 0))
            term = T.matmul(dm, T.transpose(w[p + f"attn.{nm}.weight"]))
            da = term if da is None else da + term
        dza, dgain, dshift = _ln_backward(da, w[p + "ln1.weight"], ahat, ainv)
        emit(p + "ln1.weight", lambda: dgain)
        emit(p + "ln1.bias", lambda: dshift)
        dz = dz + dza

    emit("pos_embed", lambda: T.sum(dz, 0))
    emit("cls_token", lambda: T.sum(dz[:, 0, :], 0))
    de2 = _flat(dz[:, 1:, :])
    emit("patch_embed.weight", lambda: T.matmul(T.transpose(_flat(patches)), de2))
    emit("patch_embed.bias", lambda: T.sum(de2, 0))
    return {k: out[k] for k in params.names if k in out}


def train_vit(
    params: ViTParams,
    images: np.ndarray,
    labels,
    epochs: int = 5,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 1e-3,
) -> tuple[ViTParams, list[float]]:
    """Plain supervised Adam training; returns new params and per-epoch mean loss."""
    from ..optim import Adam

    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise ContractError("cannot train on an empty dataset")
    params = params.copy()
    names = params.names
    opt = Adam([params[k].shape for k in names])
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(epochs):
        order = rng.permutation(images.shape[0])
        losses = []
        for start in range(0, order.size, batch_size):
            idx = order[start : start + batch_size]
            w = params.tensors(requires_grad=True)
            with T.Tape() as tape:
                loss = cross_entropy(vit_forward(params, images[idx], w), labels[idx])
                tape.backward(loss)
            losses.append(loss.item())
            opt.step([params.arrays[k] for k in names], [w[k].grad.data for k in names], lr)
        history.append(float(np.mean(losses)))
    return params, history
