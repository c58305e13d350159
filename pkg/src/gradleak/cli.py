"""``gradleak`` command line.

Exit codes: 0 success, 2 usage error, 3 contract violation, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import runio
from .ablation.sweep import AXES, SweepSetup, run_sweep
from .attack import AttackConfig
from .capture import DEFENSE_TARGETS, apply_defense, capture_gradients
from .data import GENERATORS, ToyDataset
from .metrics import evaluate
from .models.prior import PriorConfig, pretrain_prior
from .models.vit import ViTConfig, init_vit, train_vit
from .tensor import ContractError, NumericError

EXIT_USAGE, EXIT_CONTRACT, EXIT_NUMERIC = 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def worker_cap(requested: int) -> int:
    cap = os.environ.get("GRADLEAK_THREADS")
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError:
            raise ContractError(f"GRADLEAK_THREADS must be an integer, got {cap!r}") from None
    return max(1, requested)


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def load_config(path, seeds=None) -> AttackConfig:
    cfg = AttackConfig.from_dict(runio.read_json(path)) if path else AttackConfig()
    if seeds:
        cfg = cfg.replace(seeds=seeds)
    return cfg


# ------------------------------------------------------------ subcommands


def cmd_synth_data(a) -> int:
    ds = ToyDataset(a.gen, a.n, a.size, a.channels, a.classes, a.seed)
    images, labels = ds.arrays()
    runio.save_dataset(a.out, images, labels, ds.to_dict())
    print(f"wrote {a.n} images to {a.out}")
    return 0


def cmd_train_victim(a) -> int:
    images, labels, _ = runio.load_dataset(a.data)
    cfg = ViTConfig(
        image_size=images.shape[1],
        channels=images.shape[3],
        patch_size=a.patch_size,
        embed_dim=a.embed_dim,
        depth=a.depth,
        heads=a.heads,
        num_classes=a.classes or int(labels.max()) + 1,
    )
    params = init_vit(cfg, a.seed)
    history = []
    if a.epochs > 0:
        params, history = train_vit(params, images, labels, a.epochs, a.seed, lr=a.lr)
    runio.save_victim(a.out, params, {"history": history, "epochs": a.epochs, "seed": a.seed})
    print(f"victim {params.fingerprint()} -> {a.out}")
    return 0


def cmd_train_prior(a) -> int:
    images, labels, _ = runio.load_dataset(a.data)
    cfg = PriorConfig(images.shape[1], images.shape[3], num_classes=a.classes or int(labels.max()) + 1)
    prior = pretrain_prior(images, labels, a.epochs, a.seed, cfg, lr=a.lr)
    runio.save_prior(a.out, prior, {"epochs": a.epochs, "seed": a.seed})
    print(f"prior trained, final loss {prior.history[-1]:.4f} -> {a.out}")
    return 0


def cmd_capture(a) -> int:
    params = runio.load_victim(a.victim)
    images, labels, _ = runio.load_dataset(a.data)
    idx = np.asarray(a.batch_indices)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= len(images):
        raise ContractError(f"batch indices must lie in 0..{len(images) - 1}")
    x, y = images[idx], labels[idx]
    cap = capture_gradients(params, x, y)
    if a.defense_sigma > 0 or a.defense_target != "all":
        cap = apply_defense(cap, a.defense_sigma, a.defense_target, a.defense_seed)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cap.save(out)
    runio.save_truth(out.with_name("truth.gvt"), x, y, idx)
    print(f"captured N={len(idx)} gradients -> {out}")
    return 0


def cmd_attack(a) -> int:
    if a.print_default_config:
        print(json.dumps(AttackConfig().to_dict(), indent=2, sort_keys=True))
        return 0
    workers = worker_cap(a.workers)
    if a.from_manifest:
        _, manifest = runio.replay(a.from_manifest, a.out, workers)
    else:
        if not (a.capture and a.victim and a.out):
            raise _usage("attack needs --capture, --victim and --out (or --from-manifest)")
        truth = a.truth
        if truth is None and Path(a.capture).with_name("truth.gvt").exists():
            truth = Path(a.capture).with_name("truth.gvt")
        cfg = load_config(a.config, a.seed)
        _, manifest = runio.attack_from_files(a.capture, a.victim, a.prior, cfg, a.out, truth, workers)
    metrics = Path(a.out) / "metrics.json"
    tail = ""
    if metrics.exists():
        tail = f", PSNR {runio.read_json(metrics)['psnr_mean']:.2f} dB"
    print(f"attack done (labels {manifest['labels']}, best seed {manifest['best_seed']}{tail}) -> {a.out}")
    return 0


def cmd_sweep(a) -> int:
    params = runio.load_victim(a.victim)
    prior = runio.load_prior(a.prior) if a.prior else None
    images, labels, _ = runio.load_dataset(a.data)
    setup = SweepSetup(
        params=params,
        images=images,
        labels=labels,
        base_cfg=load_config(a.config),
        prior=prior,
        batch_size=a.batch_size,
        batch_sizes=a.batch_sizes,
        sigmas=a.sigmas,
        defense_target=a.defense_target,
        gallery=images if prior is not None else None,
        gallery_index=np.arange(len(images)),
        base_seed=a.base_seed,
        workers=worker_cap(a.workers),
    )
    table = run_sweep(setup, a.axis, a.trials)
    table.write(a.out)
    for name, agg in table.aggregate().items():
        p = agg["psnr"]
        cell = f"{p['mean']:.2f} +- {p['std']:.2f} dB" if p else "n/a"
        print(f"{a.axis:>14} {name:<16} psnr {cell}  errors {agg['errors']}")
    return 0


def cmd_report(a) -> int:
    run = runio.load_run(a.run)
    if run["truth"] is None:
        raise ContractError(f"{a.run} has no truth.gvt; cannot score reconstructions")
    originals, _, indices = run["truth"]
    prior_path = run["manifest"]["inputs"].get("prior", {}).get("path")
    prior = runio.load_prior(prior_path) if prior_path and Path(prior_path).exists() else None
    gallery, gallery_index = None, None
    if a.gallery:
        gallery, _, _ = runio.load_dataset(a.gallery)
        gallery_index = indices
    elif prior is not None:
        gallery, gallery_index = originals, np.arange(len(originals))
    report = evaluate(run["best"], originals, prior, gallery, gallery_index)
    out = Path(a.run)
    runio.write_metrics(out, report)
    if a.format == "csv":
        runio.write_report_csv(out / "report.csv", report)
    if a.images:
        for i, j in enumerate(report.assignment):
            runio.export_ppm(out / f"pair_{i}.ppm", runio.side_by_side(originals[j], run["best"][i]))
    print(f"PSNR {report.psnr_mean:.2f} dB, assignment {report.assignment}, IIP {report.iip}")
    return 0


def _usage(msg):
    return _UsageError(msg)


class _UsageError(Exception):
    pass


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gradleak", description="Gradient inversion against toy vision transformers.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth-data", help="synthesize a toy image dataset")
    s.add_argument("--gen", choices=GENERATORS, default="smooth_gradients")
    s.add_argument("--n", type=int, default=256)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--channels", type=int, default=3)
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train-victim", help="initialize and optionally train the victim ViT")
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--patch-size", type=int, default=4)
    s.add_argument("--embed-dim", type=int, default=32)
    s.add_argument("--depth", type=int, default=3)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--classes", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_victim)

    s = sub.add_parser("train-prior", help="pretrain the BN prior CNN")
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--classes", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_prior)

    s = sub.add_parser("capture", help="record the gradients a victim would share")
    s.add_argument("--victim", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--batch-indices", type=_ints, required=True)
    s.add_argument("--defense-sigma", type=float, default=0.0)
    s.add_argument("--defense-target", choices=DEFENSE_TARGETS, default="all")
    s.add_argument("--defense-seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_capture)

    s = sub.add_parser("attack", help="reconstruct a batch from a capture")
    s.add_argument("--capture")
    s.add_argument("--victim")
    s.add_argument("--prior")
    s.add_argument("--config")
    s.add_argument("--truth", help="ground-truth archive for scoring (default: truth.gvt beside the capture)")
    s.add_argument("--seed", type=int, action="append", help="override config seeds (repeatable)")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--from-manifest")
    s.add_argument("--print-default-config", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("sweep", help="repeat attacks along one ablation axis")
    s.add_argument("--axis", choices=AXES, required=True)
    s.add_argument("--trials", type=int, default=5)
    s.add_argument("--config")
    s.add_argument("--victim", required=True)
    s.add_argument("--prior")
    s.add_argument("--data", required=True)
    s.add_argument("--batch-size", type=int, default=4)
    s.add_argument("--batch-sizes", type=_ints, default=[1, 2, 4, 8])
    s.add_argument("--sigmas", type=_floats, default=[0.0, 1e-2, 1e-1, 1.0])
    s.add_argument("--defense-target", choices=DEFENSE_TARGETS, default="all")
    s.add_argument("--base-seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="score a run directory and export image panels")
    s.add_argument("--run", required=True)
    s.add_argument("--format", choices=("csv", "json"), default="json")
    s.add_argument("--images", action="store_true", help="write original|reconstruction PPM panels")
    s.add_argument("--gallery", help="dataset directory used as the IIP gallery")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except _UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"gradleak: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as e:
        print(f"gradleak: contract violation: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except (NumericError, ArithmeticError) as e:
        print(f"gradleak: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as e:
        print(f"gradleak: contract violation: missing file {e.filename}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
