"""Which gradients leak most? Mask parts of the victim out of the matching loss and compare."""

from gradleak.ablation import MaskSpec, resolve_mask, thirds
from gradleak.ablation.sweep import SweepSetup, run_sweep
from gradleak.attack import AttackConfig
from gradleak.data import ToyDataset
from gradleak.models import ViTConfig, init_vit

cfg = ViTConfig(channels=1)
print("thirds of depth 3:", thirds(3), " of depth 12:", thirds(12))
for spec in (MaskSpec(), MaskSpec.drop(3, 3), MaskSpec.keep("MSA"), MaskSpec.keep("MLP")):
    print(f"{spec.label:<16} {len(resolve_mask(spec, cfg)):3d} gradient entries")

images, labels = ToyDataset("smooth_gradients", 128, channels=1, seed=0).arrays()
grad_only = {"grad": True, "image_prior": False, "patch": False, "reg": False, "tv_l2": False}
setup = SweepSetup(
    params=init_vit(cfg, 0),
    images=images,
    labels=labels,
    base_cfg=AttackConfig(iterations=300, losses=grad_only),
    batch_size=1,
)

# short runs: the ordering is what matters here, not the absolute quality
for axis in ("components", "layer_thirds"):
    table = run_sweep(setup, axis, trials=2)
    for name, agg in table.aggregate().items():
        print(f"{axis:>13} {name:<16} PSNR {agg['psnr']['mean']:6.2f} +- {agg['psnr']['std']:.2f}")
    table.write(f"demo_out/sweep_{axis}")
