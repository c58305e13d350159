"""Gradient inversion: recover a training batch from shared ViT gradients.

The objective at iteration ``t`` of ``T`` is::

    total = Gamma(t) * L_grad + Upsilon(t) * R_image
            + a1 * R_patch + a2 * R_reg + a3 * (R_l2 + R_tv)

``L_grad`` sums per-parameter l2 distances between simulated and shared
gradients, ``R_image`` matches batch statistics of a BN prior, and the
auxiliary terms smooth patch seams, pull seeds towards their consensus and
penalize energy and total variation. ``Gamma`` halves and ``Upsilon``
switches on after ``T/2``.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .ablation.masks import MaskSpec, resolve_mask
from .capture import GradientCapture
from .models.prior import PriorCNN, prior_forward_stats
from .models.vit import ViTParams, vit_param_grads
from .optim import Adam, cosine_lr
from .tensor import ContractError, NumericError, Tensor

LEDGER_COLUMNS = ("t", "L_grad", "R_image", "R_patch", "R_reg", "R_tv_l2", "total", "lr")
LOSS_TERMS = ("grad", "image_prior", "patch", "reg", "tv_l2", "scheduler")

# residuals below this fraction of the shared gradient's norm are float noise
MATCH_RTOL = 1e3 * np.finfo(np.float64).eps


def _default_losses() -> dict[str, bool]:
    return {k: True for k in LOSS_TERMS}


@dataclass
class AttackConfig:
    iterations: int = 2000
    alpha_grad: float = 4e-3
    alpha_image: float = 2e-1
    alpha_patch: float = 1e-4
    alpha_reg: float = 1e-2
    alpha_prior: float = 1e-4
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seeds: list[int] = field(default_factory=lambda: [0])
    losses: dict[str, bool] = field(default_factory=_default_losses)
    mask: dict = field(default_factory=lambda: {"mode": "all"})
    consensus_every: int | None = None

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        self.losses = {**_default_losses(), **self.losses}
        self.validate()

    def validate(self) -> None:
        if self.iterations < 2 or self.iterations % 2:
            raise ContractError("iterations must be an even number >= 2")
        if not self.seeds:
            raise ContractError("at least one seed is required")
        for name in ("alpha_grad", "alpha_image", "alpha_patch", "alpha_reg", "alpha_prior"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        unknown = set(self.losses) - set(LOSS_TERMS)
        if unknown:
            raise ContractError(f"unknown loss toggles {sorted(unknown)}")
        if self.consensus_every is not None and self.consensus_every < 1:
            raise ContractError("consensus_every must be >= 1")
        MaskSpec.from_dict(self.mask)

    @property
    def mask_spec(self) -> MaskSpec:
        return MaskSpec.from_dict(self.mask)

    @property
    def refresh_every(self) -> int:
        return self.consensus_every or max(1, self.iterations // 10)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "AttackConfig":
        d = self.to_dict()
        d.update(changes)
        return AttackConfig.from_dict(d)


def schedule(t: int, cfg: AttackConfig) -> tuple[float, float]:
    """(Gamma, Upsilon) at iteration t in 1..T."""
    if not 0 < t <= cfg.iterations:
        raise ContractError(f"iteration {t} outside 1..{cfg.iterations}")
    if not cfg.losses.get("scheduler", True):
        return cfg.alpha_grad, cfg.alpha_image
    if t <= cfg.iterations // 2:
        return cfg.alpha_grad, 0.0
    return cfg.alpha_grad / 2.0, cfg.alpha_image


# ------------------------------------------------------------------ labels


def restore_labels(capture: GradientCapture) -> list[int]:
    """Sort classes by the minimum entry of their head-gradient column; take the N lowest."""
    head = capture.grads.get("head.weight")
    if head is None or head.ndim != 2:
        raise ContractError("capture lacks a [D, K] classification-head gradient")
    n, k = capture.batch_size, head.shape[1]
    if n > k:
        raise ContractError(f"cannot restore {n} distinct labels from {k} classes")
    if not np.any(head):
        raise ContractError("degenerate capture: classification-head gradient is all zero")
    col_min = head.min(axis=0)
    order = np.argsort(col_min, kind="stable")
    if n < k and col_min[order[n - 1]] == col_min[order[n]]:
        raise ContractError("degenerate capture: tie at the label cut-off")
    return [int(i) for i in order[:n]]


# ------------------------------------------------------------------ losses


def gradient_matching_loss(
    x, labels: Sequence[int], params: ViTParams, capture: GradientCapture, mask: Sequence[str] | None = None
) -> Tensor:
    """Sum over selected parameters of || grad_W L(x, labels) - shared grad_W ||_2.

    The l2 norm has a kink at zero, so a residual that is pure roundoff would
    contribute a unit-length gradient of arbitrary direction. Terms whose
    residual is within ``MATCH_RTOL`` of the shared gradient's overall norm
    count as matched: value and gradient zero.
    """
    capture.check_against(params)
    names = params.names if mask is None else list(mask)
    if not names:
        return Tensor(0.0)
    sim = vit_param_grads(params, x, labels, names)
    floor = MATCH_RTOL * capture.norm()
    total = Tensor(0.0)
    for name in names:
        diff = sim[name] - capture.grads[name]
        if float(np.linalg.norm(diff.data)) > floor:
            total = total + T.l2_norm(diff)
    return total


def image_prior_loss(x, prior: PriorCNN) -> Tensor:
    """Distance of the batch's per-layer BN statistics to the prior's running statistics."""
    if not prior.frozen:
        raise ContractError("prior statistics must be frozen before use as an image prior")
    total = None
    for (mu, var), mu_bn, var_bn in zip(prior_forward_stats(prior, x), prior.stats.means, prior.stats.variances):
        term = T.l2_norm(mu - mu_bn) + T.l2_norm(var - var_bn)
        total = term if total is None else total + term
    return total


def patch_prior_loss(x, patch_size: int) -> Tensor:
    """l2 jumps across internal patch seams, rows then columns."""
    x = T.astensor(x)
    h, w = x.shape[1], x.shape[2]
    p = patch_size
    if h % p or w % p:
        raise ContractError(f"patch size {p} must divide image size {h}x{w}")
    total = Tensor(0.0)
    for k in range(1, h // p):
        total = total + T.l2_norm(x[:, p * k, :, :] - x[:, p * k - 1, :, :])
    for k in range(1, w // p):
        total = total + T.l2_norm(x[:, :, p * k, :] - x[:, :, p * k - 1, :])
    return total


def tv_l2_loss(x) -> Tensor:
    """||x||_2 plus anisotropic total variation (l2 norm of each difference field)."""
    x = T.astensor(x)
    tv = T.l2_norm(x[:, 1:, :, :] - x[:, :-1, :, :]) + T.l2_norm(x[:, :, 1:, :] - x[:, :, :-1, :])
    return T.l2_norm(x) + tv


def consensus(xs: Sequence[np.ndarray]) -> np.ndarray:
    """Pixel mean of all seed reconstructions, each registered by the identity flow."""
    if not xs:
        raise ContractError("consensus of an empty ensemble")
    shape = np.shape(xs[0])
    if any(np.shape(x) != shape for x in xs):
        raise ContractError("all seed reconstructions must share one shape")
    stacked = np.stack([np.asarray(x, dtype=np.float64) for x in xs])
    x_m = stacked.mean(axis=0)
    registered = [identity_flow(x, x_m) for x in stacked]
    return np.mean(registered, axis=0)


def identity_flow(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Stand-in for dense alignment of ``source`` onto ``target``: no warp."""
    return source


def registration_loss(x, x_c: np.ndarray) -> Tensor:
    return T.l2_norm(T.astensor(x) - x_c)


def auxiliary_loss(x, x_c: np.ndarray | None, cfg: AttackConfig, patch_size: int) -> Tensor:
    """alpha_patch*R_patch + alpha_reg*R_reg + alpha_prior*(R_l2 + R_tv); ``x_c=None`` disables R_reg."""
    total = Tensor(0.0)
    if cfg.losses["patch"]:
        total = total + cfg.alpha_patch * patch_prior_loss(x, patch_size)
    if cfg.losses["reg"] and x_c is not None:
        total = total + cfg.alpha_reg * registration_loss(x, x_c)
    if cfg.losses["tv_l2"]:
        total = total + cfg.alpha_prior * tv_l2_loss(x)
    return total


# -------------------------------------------------------------------- loop


class AttackDiverged(NumericError):
    def __init__(self, msg, partial: "AttackResult"):
        super().__init__(msg)
        self.partial = partial


@dataclass
class ReconstructionResult:
    seed: int
    x: np.ndarray
    labels: list[int]
    ledger: np.ndarray
    wall_time: float
    config: dict
    warnings: list[str] = field(default_factory=list)

    @property
    def final_total(self) -> float:
        return float(self.ledger[-1, LEDGER_COLUMNS.index("total")])

    def export(self) -> np.ndarray:
        return np.clip(self.x, 0.0, 1.0)


@dataclass
class AttackResult:
    labels: list[int]
    seeds: list[ReconstructionResult]
    consensus: np.ndarray

    @property
    def best(self) -> ReconstructionResult:
        """Seed with the lowest final objective."""
        return min(self.seeds, key=lambda r: r.final_total)


class _SeedRun:
    def __init__(self, seed, shape, cfg):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.x = rng.random(shape)
        self.opt = Adam([shape], cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.ledger = np.zeros((cfg.iterations, len(LEDGER_COLUMNS)))
        self.done = 0
        self.elapsed = 0.0


class _Objective:
    def __init__(self, capture, params, prior, cfg, labels):
        self.capture, self.params, self.prior, self.cfg, self.labels = capture, params, prior, cfg, labels
        self.mask = resolve_mask(cfg.mask_spec, params.config)
        self.patch = params.config.patch_size
        self.use_reg = cfg.losses["reg"] and len(cfg.seeds) > 1

    def step(self, run: _SeedRun, t: int, x_c: np.ndarray) -> None:
        cfg = self.cfg
        gamma, upsilon = schedule(t, cfg)
        lr = cosine_lr(cfg.lr, t, cfg.iterations)
        xt = Tensor(run.x, requires_grad=True)
        vals = dict.fromkeys(LEDGER_COLUMNS[1:6], 0.0)
        with T.Tape() as tape:
            total = Tensor(0.0)
            if cfg.losses["grad"]:
                lg = gradient_matching_loss(xt, self.labels, self.params, self.capture, self.mask)
                vals["L_grad"] = lg.item()
                if gamma:
                    total = total + gamma * lg
            if cfg.losses["image_prior"] and self.prior is not None:
                if upsilon:
                    ri = image_prior_loss(xt, self.prior)
                    total = total + upsilon * ri
                else:
                    with T.no_grad():
                        ri = image_prior_loss(xt, self.prior)
                vals["R_image"] = ri.item()
            if cfg.losses["patch"]:
                rp = patch_prior_loss(xt, self.patch)
                vals["R_patch"] = rp.item()
                total = total + cfg.alpha_patch * rp
            if self.use_reg:
                rr = registration_loss(xt, x_c)
                vals["R_reg"] = rr.item()
                total = total + cfg.alpha_reg * rr
            if cfg.losses["tv_l2"]:
                rt = tv_l2_loss(xt)
                vals["R_tv_l2"] = rt.item()
                total = total + cfg.alpha_prior * rt
            value = total.item()
            run.ledger[t - 1] = [t, *vals.values(), value, lr]
            if not math.isfinite(value):
                raise NumericError(f"non-finite objective at iteration {t}")
            if total.requires_grad:
                tape.backward(total)
        grad = xt.grad.data if xt.grad is not None else np.zeros_like(run.x)
        run.opt.step([run.x], [grad], lr)
        run.done = t

    def advance(self, run: _SeedRun, t0: int, t1: int, x_c: np.ndarray) -> None:
        start = time.perf_counter()
        try:
            for t in range(t0, t1):
                self.step(run, t, x_c)
        finally:
            run.elapsed += time.perf_counter() - start


def run_attack(
    capture: GradientCapture,
    params: ViTParams,
    prior: PriorCNN | None,
    cfg: AttackConfig,
    labels: Sequence[int] | None = None,
    workers: int = 1,
) -> AttackResult:
    """Optimize one reconstruction per seed; seeds meet at every consensus refresh."""
    capture.check_against(params)
    if cfg.losses["image_prior"] and prior is not None and not prior.frozen:
        raise ContractError("prior statistics must be frozen")
    labels = restore_labels(capture) if labels is None else [int(v) for v in labels]
    vc = params.config
    shape = (capture.batch_size, vc.image_size, vc.image_size, vc.channels)
    objective = _Objective(capture, params, prior, cfg, labels)
    runs = [_SeedRun(s, shape, cfg) for s in cfg.seeds]
    warnings = []
    if cfg.losses["image_prior"] and prior is None:
        warnings.append("image prior requested but no prior supplied; term skipped")
    if cfg.losses["image_prior"] and capture.batch_size < 2:
        warnings.append("image prior statistics computed from a single image")

    def result(x_c):
        seeds = [
            ReconstructionResult(
                r.seed, r.x.copy(), list(labels), r.ledger[: r.done].copy(), r.elapsed, cfg.to_dict(), list(warnings)
            )
            for r in runs
        ]
        return AttackResult(list(labels), seeds, x_c)

    every = cfg.refresh_every
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 and len(runs) > 1 else None
    x_c = consensus([r.x for r in runs])
    try:
        for t0 in range(1, cfg.iterations + 1, every):
            t1 = min(t0 + every, cfg.iterations + 1)
            x_c = consensus([r.x for r in runs])
            if pool is None:
                for r in runs:
                    objective.advance(r, t0, t1, x_c)
            else:
                list(pool.map(lambda r: objective.advance(r, t0, t1, x_c), runs))
    except NumericError as e:
        raise AttackDiverged(str(e), result(x_c)) from e
    finally:
        if pool is not None:
            pool.shutdown()
    return result(consensus([r.x for r in runs]))
