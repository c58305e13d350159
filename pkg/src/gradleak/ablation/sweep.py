"""Repeated attacks over one experimental axis, aggregated per variant."""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..attack import AttackConfig, restore_labels, run_attack
from ..capture import apply_defense, capture_gradients
from ..data import sample_batch
from ..metrics import evaluate
from ..models.prior import PriorCNN
from ..models.vit import ViTParams
from ..tensor import ContractError
from .masks import MaskSpec, thirds

AXES = ("layer_thirds", "components", "loss_terms", "batch_size", "defense_sigma")
SWEEP_COLUMNS = ("axis", "variant", "trial", "seed", "psnr", "fft2d", "feature_distance", "iip", "wall_s")
METRICS = ("psnr", "fft2d", "feature_distance", "iip", "label_accuracy")

# cumulative loss stacks; total variation and l2 are on in every row
LOSS_STACK = (
    ("grad+reg", {"grad": True, "reg": True, "tv_l2": True, "image_prior": False, "scheduler": False, "patch": False}),
    ("+image", {"grad": True, "reg": True, "tv_l2": True, "image_prior": True, "scheduler": False, "patch": False}),
    ("+scheduler", {"grad": True, "reg": True, "tv_l2": True, "image_prior": True, "scheduler": True, "patch": False}),
    ("+patch", {"grad": True, "reg": True, "tv_l2": True, "image_prior": True, "scheduler": True, "patch": True}),
)


@dataclass
class SweepSetup:
    """Everything a sweep cell needs besides its variant."""

    params: ViTParams
    images: np.ndarray
    labels: np.ndarray
    base_cfg: AttackConfig
    prior: PriorCNN | None = None
    batch_size: int = 4
    batch_sizes: Sequence[int] = (1, 2, 4, 8)
    sigmas: Sequence[float] = (0.0, 1e-2, 1e-1, 1.0)
    defense_target: str = "all"
    gallery: np.ndarray | None = None
    gallery_index: Sequence[int] | None = None
    base_seed: int = 0
    workers: int = 1
    # attack with the true labels instead of restored ones (restoration accuracy is still recorded)
    oracle_labels: bool = False


@dataclass
class Variant:
    name: str
    cfg: AttackConfig
    batch_size: int
    sigma: float = 0.0


@dataclass
class SweepTable:
    axis: str
    rows: list[dict] = field(default_factory=list)

    def variants(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r["variant"] not in seen:
                seen.append(r["variant"])
        return seen

    def aggregate(self) -> dict[str, dict]:
        out = {}
        for v in self.variants():
            rows = [r for r in self.rows if r["variant"] == v]
            agg = {"trials": len(rows), "errors": sum(1 for r in rows if r.get("error"))}
            for m in METRICS:
                vals = [r[m] for r in rows if r.get(m) is not None and not math.isnan(r[m])]
                agg[m] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))} if vals else None
            out[v] = agg
        return out

    def mean(self, variant: str, metric: str = "psnr") -> float:
        agg = self.aggregate()[variant][metric]
        return float("nan") if agg is None else agg["mean"]

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "sweep.csv"
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SWEEP_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r.get(c)) for c in SWEEP_COLUMNS])
        json_path = out / "sweep.json"
        json_path.write_text(json.dumps({"axis": self.axis, "variants": self.aggregate(), "rows": self.rows}, indent=2))
        return csv_path, json_path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def variants_for(axis: str, setup: SweepSetup) -> list[Variant]:
    base = setup.base_cfg
    depth = setup.params.config.depth
    n = setup.batch_size
    if axis == "layer_thirds":
        out = [Variant("all", base.replace(mask={"mode": "all"}), n)]
        for group in thirds(depth):
            spec = MaskSpec.drop(group[0], group[-1])
            out.append(Variant(spec.label, base.replace(mask=spec.to_dict()), n))
        return out
    if axis == "components":
        return [
            Variant("all", base.replace(mask={"mode": "all"}), n),
            Variant("keep_MSA", base.replace(mask=MaskSpec.keep("MSA").to_dict()), n),
            Variant("keep_MLP", base.replace(mask=MaskSpec.keep("MLP").to_dict()), n),
        ]
    if axis == "loss_terms":
        return [Variant(name, base.replace(losses=dict(toggles)), n) for name, toggles in LOSS_STACK]
    if axis == "batch_size":
        return [Variant(f"N={b}", base, int(b)) for b in setup.batch_sizes]
    if axis == "defense_sigma":
        return [Variant(f"sigma={s:g}", base, n, float(s)) for s in setup.sigmas]
    raise ContractError(f"unknown sweep axis {axis!r}; choose from {AXES}")


def run_cell(setup: SweepSetup, axis: str, variant: Variant, trial: int) -> dict:
    seed = setup.base_seed + trial
    row = {"axis": axis, "variant": variant.name, "trial": trial, "seed": seed, "error": None}
    row.update(dict.fromkeys(METRICS))
    start = time.perf_counter()
    try:
        idx = sample_batch(setup.images, setup.labels, variant.batch_size, seed)
        x, y = setup.images[idx], setup.labels[idx]
        capture = capture_gradients(setup.params, x, y)
        if variant.sigma > 0:
            capture = apply_defense(capture, variant.sigma, setup.defense_target, seed)
        restored = restore_labels(capture)
        row["label_accuracy"] = len(set(restored) & set(y.tolist())) / len(y)
        labels = [int(v) for v in y] if setup.oracle_labels else restored
        cfg = variant.cfg.replace(seeds=[1000 * seed + s for s in variant.cfg.seeds])
        result = run_attack(capture, setup.params, setup.prior, cfg, labels)
        report = evaluate(result.best.export(), x, setup.prior)
        row["psnr"] = report.psnr_mean
        row["fft2d"] = report.fft2d_distance
        row["feature_distance"] = report.feature_distance
        if setup.gallery is not None and setup.prior is not None:
            gidx = np.asarray(setup.gallery_index)[idx]
            row["iip"] = evaluate(result.best.export(), x, setup.prior, setup.gallery, gidx).iip
    except (ContractError, ArithmeticError) as e:
        row["error"] = f"{type(e).__name__}: {e}"
    row["wall_s"] = time.perf_counter() - start
    return row


def run_sweep(setup: SweepSetup, axis: str, trials: int = 5) -> SweepTable:
    """One attack per (variant, trial); failed cells are recorded and the sweep continues."""
    if trials < 1:
        raise ContractError("trials must be >= 1")
    cells = [(v, t) for v in variants_for(axis, setup) for t in range(trials)]
    if setup.workers > 1:
        with ThreadPoolExecutor(setup.workers) as pool:
            rows = list(pool.map(lambda c: run_cell(setup, axis, *c), cells))
    else:
        rows = [run_cell(setup, axis, *c) for c in cells]
    return SweepTable(axis, rows)
