"""Reconstruction quality: PSNR, Fourier-magnitude distance, prior-feature distance, IIP."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .models.prior import PriorCNN, prior_features
from .tensor import ContractError

PSNR_CAP = 99.0
MAX_ASSIGN = 12
EXHAUSTIVE_LIMIT = 8


def _batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ContractError(f"expected [N,H,W,C] images, got shape {x.shape}")
    return x


def pair_costs(recons, originals) -> np.ndarray:
    """cost[i, j] = ||recons[i] - originals[j]||_2."""
    a, b = _batch(recons), _batch(originals)
    if a.shape != b.shape:
        raise ContractError(f"batch shapes differ: {a.shape} vs {b.shape}")
    fa, fb = a.reshape(len(a), -1), b.reshape(len(b), -1)
    return np.sqrt(((fa[:, None, :] - fb[None, :, :]) ** 2).sum(-1))


def assign_bruteforce(cost: np.ndarray) -> np.ndarray:
    n = cost.shape[0]
    perms = np.array(list(itertools.permutations(range(n))))
    totals = cost[np.arange(n), perms].sum(axis=1)
    return perms[int(np.argmin(totals))]


def assign_hungarian(cost: np.ndarray) -> np.ndarray:
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(cost.shape[0], dtype=np.int64)
    out[rows] = cols
    return out


def assign(recons, originals) -> np.ndarray:
    """perm[i] = index of the original matched to reconstruction i (minimum total l2)."""
    cost = pair_costs(recons, originals)
    n = cost.shape[0]
    if n > MAX_ASSIGN:
        raise ContractError(f"assignment supports batches up to {MAX_ASSIGN}, got {n}")
    if n <= EXHAUSTIVE_LIMIT:
        return assign_bruteforce(cost)
    return assign_hungarian(cost)


def psnr(a, b) -> float:
    """PSNR in dB for signals in [0, 1]; inputs are clamped first, identical inputs give 99."""
    a = np.clip(np.asarray(a, dtype=np.float64), 0, 1)
    b = np.clip(np.asarray(b, dtype=np.float64), 0, 1)
    if a.shape != b.shape:
        raise ContractError(f"psnr: shapes differ {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def fft2d_distance(a, b) -> float:
    """Mean over images and channels of 1 - cosine(|DFT a|, |DFT b|)."""
    a = np.clip(_batch(a), 0, 1)
    b = np.clip(_batch(b), 0, 1)
    if a.shape != b.shape:
        raise ContractError(f"fft2d_distance: shapes differ {a.shape} vs {b.shape}")
    ma = np.abs(np.fft.fft2(a, axes=(1, 2))).reshape(a.shape[0], -1, a.shape[3])
    mb = np.abs(np.fft.fft2(b, axes=(1, 2))).reshape(b.shape[0], -1, b.shape[3])
    na = np.linalg.norm(ma, axis=1, keepdims=True)
    nb = np.linalg.norm(mb, axis=1, keepdims=True)
    # 1 - cos = ||ua - ub||^2 / 2 for unit vectors; exact zero for identical inputs
    ua = ma / np.where(na > 0, na, 1.0)
    ub = mb / np.where(nb > 0, nb, 1.0)
    d = 0.5 * ((ua - ub) ** 2).sum(axis=1)
    one_zero = (na[:, 0] == 0) != (nb[:, 0] == 0)
    return float(np.mean(np.where(one_zero, 1.0, d)))


def feature_distance(a, b, prior: PriorCNN) -> float:
    """Mean l2 distance between prior penultimate features of aligned pairs."""
    a = np.clip(_batch(a), 0, 1)
    b = np.clip(_batch(b), 0, 1)
    if a.shape != b.shape:
        raise ContractError(f"feature_distance: shapes differ {a.shape} vs {b.shape}")
    fa, fb = prior_features(prior, a), prior_features(prior, b)
    return float(np.mean(np.linalg.norm(fa - fb, axis=1)))


def iip(recons, gallery, prior: PriorCNN, truth_index) -> float:
    """Fraction of reconstructions whose nearest gallery embedding is their own original.

    ``truth_index[i]`` is the gallery position of reconstruction i's original.
    """
    r = np.clip(_batch(recons), 0, 1)
    g = np.clip(_batch(gallery), 0, 1)
    truth_index = np.asarray(truth_index)
    if g.shape[0] < r.shape[0]:
        raise ContractError("gallery must hold at least as many images as the batch")
    if truth_index.shape != (r.shape[0],):
        raise ContractError("need one gallery index per reconstruction")
    er, eg = prior_features(prior, r), prior_features(prior, g)
    d = ((er[:, None, :] - eg[None, :, :]) ** 2).sum(-1)
    return float(np.mean(np.argmin(d, axis=1) == truth_index))


@dataclass
class MetricReport:
    psnr: list[float]
    psnr_mean: float
    fft2d_distance: float
    feature_distance: float | None
    assignment: list[int]
    iip: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(recons, originals, prior: PriorCNN | None = None, gallery=None, gallery_index=None) -> MetricReport:
    """Align reconstructions to originals, then score every metric on the aligned pairs."""
    r, o = _batch(recons), _batch(originals)
    perm = assign(r, o)
    aligned = o[perm]
    per = [psnr(r[i], aligned[i]) for i in range(len(r))]
    fd = feature_distance(r, aligned, prior) if prior is not None else None
    score = None
    if gallery is not None and prior is not None:
        idx = np.asarray(gallery_index)[perm] if gallery_index is not None else perm
        score = iip(r, gallery, prior, idx)
    return MetricReport(per, float(np.mean(per)), fft2d_distance(r, aligned), fd, [int(p) for p in perm], score)
