"""On-disk artifacts: checkpoints, datasets, attack run directories, manifests and PPM images."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import archive
from .attack import LEDGER_COLUMNS, AttackConfig, AttackResult, run_attack
from .capture import GradientCapture
from .metrics import MetricReport, evaluate
from .models.prior import PriorCNN, PriorConfig, PriorStats
from .models.vit import ViTConfig, ViTParams
from .tensor import ContractError

VERSION = "0.1.0"

DESIGN_FLAGS = {
    "gelu": "tanh-approximation",
    "fft2d": "one-minus-cosine-of-dft-magnitudes/v1",
    "consensus_flow": "identity",
    "grad_norm": "per-parameter-l2-summed",
    "mask_keep_component": "excludes-embeddings-norms-head",
    "layer_indexing": "1-based",
    "bn_variance": "biased",
    "vit_init": "trunc-normal-0.02/zero-bias/zero-tokens",
    "lr_schedule": "0.5*lr*(1+cos(pi*t/T))",
}


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ContractError(f"{path}: invalid JSON ({e})") from e


# ------------------------------------------------------------- checkpoints


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_victim(path, params: ViTParams, extra: dict | None = None) -> Path:
    path = Path(path)
    meta = {"kind": "vit_checkpoint", "config": params.config.to_dict(), "fingerprint": params.fingerprint()}
    archive.save(path, {f"vit/{k}": v for k, v in params.arrays.items()}, meta)
    write_json(_sidecar(path), {**meta, **(extra or {})})
    return path


def load_victim(path) -> ViTParams:
    arrays, meta = archive.load(path)
    if meta.get("kind") != "vit_checkpoint":
        raise ContractError(f"{path} is not a victim checkpoint")
    weights = {k[len("vit/") :]: v for k, v in arrays.items() if k.startswith("vit/")}
    return ViTParams(ViTConfig(**meta["config"]), weights)


def save_prior(path, prior: PriorCNN, extra: dict | None = None) -> Path:
    path = Path(path)
    arrays = {f"prior/{k}": v for k, v in prior.params.items()}
    for i, (m, v) in enumerate(zip(prior.stats.means, prior.stats.variances)):
        arrays[f"prior_stats/mean/{i}"] = m
        arrays[f"prior_stats/var/{i}"] = v
    meta = {"kind": "prior_checkpoint", "config": prior.config.to_dict(), "history": prior.history}
    archive.save(path, arrays, meta)
    write_json(_sidecar(path), {**meta, **(extra or {})})
    return path


def load_prior(path) -> PriorCNN:
    arrays, meta = archive.load(path)
    if meta.get("kind") != "prior_checkpoint":
        raise ContractError(f"{path} is not a prior checkpoint")
    cfg = PriorConfig.from_dict(meta["config"])
    params = {k[len("prior/") :]: v for k, v in arrays.items() if k.startswith("prior/")}
    n = len(cfg.widths)
    stats = PriorStats(
        [arrays[f"prior_stats/mean/{i}"] for i in range(n)], [arrays[f"prior_stats/var/{i}"] for i in range(n)]
    ).freeze()
    return PriorCNN(cfg, params, stats, list(meta.get("history", [])))


# ---------------------------------------------------------------- datasets


def save_dataset(out_dir, images: np.ndarray, labels: np.ndarray, description: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    archive.save(out / "images.gvt", {"images": images}, {"kind": "dataset", **description})
    write_json(out / "labels.json", {"labels": [int(v) for v in labels], "dataset": description})
    return out


def load_dataset(path) -> tuple[np.ndarray, np.ndarray, dict]:
    path = Path(path)
    arrays, meta = archive.load(path / "images.gvt")
    labels = read_json(path / "labels.json")
    return arrays["images"], np.asarray(labels["labels"], dtype=np.int64), labels.get("dataset", meta)


def save_truth(path, images: np.ndarray, labels: Sequence[int], indices: Sequence[int] | None = None) -> Path:
    meta = {"kind": "truth", "labels": [int(v) for v in labels]}
    if indices is not None:
        meta["indices"] = [int(i) for i in indices]
    return archive.save(path, {"images": images}, meta)


def load_truth(path) -> tuple[np.ndarray, list[int], list[int] | None]:
    arrays, meta = archive.load(path)
    if meta.get("kind") != "truth":
        raise ContractError(f"{path} is not a ground-truth archive")
    return arrays["images"], meta["labels"], meta.get("indices")


# ------------------------------------------------------------ run directory


def ledger_csv(ledger: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LEDGER_COLUMNS)
    for row in ledger:
        w.writerow([int(row[0]), *(repr(float(v)) for v in row[1:])])
    return buf.getvalue()


def read_ledger(path) -> np.ndarray:
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != LEDGER_COLUMNS:
        raise ContractError(f"{path}: unexpected ledger header {rows[0]}")
    return np.array([[float(v) for v in r] for r in rows[1:]])


def write_run(
    out_dir,
    result: AttackResult,
    capture: GradientCapture,
    cfg: AttackConfig,
    inputs: dict[str, str] | None = None,
    truth: tuple | None = None,
    wall_time: float = 0.0,
) -> dict:
    """Write the run directory and return its manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())
    capture.save(out / "capture.gvt")
    files = ["config.json", "capture.gvt"]
    for r in result.seeds:
        d = out / f"seed_{r.seed}"
        d.mkdir(exist_ok=True)
        archive.save(d / "recon.gvt", {"x": r.x}, {"kind": "reconstruction", "seed": r.seed, "labels": r.labels})
        (d / "ledger.csv").write_text(ledger_csv(r.ledger))
        files += [f"seed_{r.seed}/recon.gvt", f"seed_{r.seed}/ledger.csv"]
    archive.save(out / "consensus.gvt", {"x": result.consensus}, {"kind": "consensus", "labels": result.labels})
    files.append("consensus.gvt")
    if truth is not None:
        save_truth(out / "truth.gvt", *truth)
        files.append("truth.gvt")
    manifest = {
        "tool": "gradleak",
        "version": VERSION,
        "numpy": np.__version__,
        "config": cfg.to_dict(),
        "seeds": list(cfg.seeds),
        "labels": result.labels,
        "best_seed": result.best.seed,
        "inputs": {k: {"path": str(Path(v).resolve()), "sha256": sha256_file(v)} for k, v in (inputs or {}).items()},
        "design": DESIGN_FLAGS,
        "warnings": result.best.warnings,
        "wall_time_s": wall_time,
        "seed_wall_time_s": {str(r.seed): r.wall_time for r in result.seeds},
        "outputs": {f: sha256_file(out / f) for f in files},
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def load_run(run_dir) -> dict:
    """Reconstructions, consensus, labels and manifest of a run directory."""
    run = Path(run_dir)
    if not (run / "manifest.json").exists():
        raise ContractError(f"{run} has no manifest.json")
    manifest = read_json(run / "manifest.json")
    best = manifest["best_seed"]
    recons = {}
    for s in manifest["seeds"]:
        arrays, _ = archive.load(run / f"seed_{s}" / "recon.gvt")
        recons[s] = arrays["x"]
    consensus_arrays, _ = archive.load(run / "consensus.gvt")
    truth = load_truth(run / "truth.gvt") if (run / "truth.gvt").exists() else None
    return {
        "manifest": manifest,
        "recons": recons,
        "best": np.clip(recons[best], 0.0, 1.0),
        "consensus": consensus_arrays["x"],
        "truth": truth,
    }


def attack_from_files(
    capture_path,
    victim_path,
    prior_path,
    cfg: AttackConfig,
    out_dir,
    truth_path=None,
    workers: int = 1,
) -> tuple[AttackResult, dict]:
    capture = GradientCapture.load(capture_path)
    params = load_victim(victim_path)
    prior = load_prior(prior_path) if prior_path else None
    inputs = {"capture": capture_path, "victim": victim_path}
    if prior_path:
        inputs["prior"] = prior_path
    truth = None
    if truth_path:
        inputs["truth"] = truth_path
        images, labels, indices = load_truth(truth_path)
        truth = (images, labels, indices)
    start = time.perf_counter()
    result = run_attack(capture, params, prior, cfg, workers=workers)
    wall = time.perf_counter() - start
    manifest = write_run(out_dir, result, capture, cfg, inputs, truth, wall)
    if truth is not None:
        write_metrics(out_dir, evaluate(result.best.export(), truth[0], prior))
    return result, manifest


def replay(manifest_path, out_dir, workers: int = 1) -> tuple[AttackResult, dict]:
    """Re-run an attack from its manifest; inputs must still match their recorded hashes."""
    manifest = read_json(manifest_path)
    inputs = manifest["inputs"]
    for key, rec in inputs.items():
        if not Path(rec["path"]).exists():
            raise ContractError(f"manifest input {key!r} missing at {rec['path']}")
        if sha256_file(rec["path"]) != rec["sha256"]:
            raise ContractError(f"manifest input {key!r} changed since the run (hash mismatch)")
    cfg = AttackConfig.from_dict(manifest["config"])
    return attack_from_files(
        inputs["capture"]["path"],
        inputs["victim"]["path"],
        inputs.get("prior", {}).get("path"),
        cfg,
        out_dir,
        inputs.get("truth", {}).get("path"),
        workers,
    )


def write_metrics(out_dir, report: MetricReport) -> Path:
    return write_json(Path(out_dir) / "metrics.json", report.to_dict())


def write_report_csv(path, report: MetricReport) -> Path:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "assigned_original", "psnr"])
        for i, (p, v) in enumerate(zip(report.assignment, report.psnr)):
            w.writerow([i, p, repr(v)])
    return Path(path)


# -------------------------------------------------------------------- PPM


def to_bytes(image: np.ndarray) -> np.ndarray:
    """[0,1] floats to uint8 with round-half-up."""
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ContractError(f"PPM export needs 1 or 3 channels, got shape {image.shape}")
    h, w, c = image.shape
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + to_bytes(image).tobytes()


def export_ppm(path, image: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(encode_ppm(image))
    return path


def read_ppm(path) -> np.ndarray:
    """Binary P5/P6 reader returning floats in [0,1] with shape [H, W, C]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ContractError(f"{path}: only 8-bit binary P5/P6 is supported")
    c = 1 if magic == b"P5" else 3
    raw = np.frombuffer(data[pos : pos + w * h * c], dtype=np.uint8)
    if raw.size != w * h * c:
        raise ContractError(f"{path}: truncated pixel data")
    return raw.reshape(h, w, c).astype(np.float64) / 255.0


def side_by_side(original: np.ndarray, recon: np.ndarray, gap: int = 1) -> np.ndarray:
    """original | white gap | reconstruction."""
    h, _, c = original.shape
    return np.concatenate([original, np.ones((h, gap, c)), recon], axis=1)
