"""A toy ViT victim shares one step of gradients; the head gradient alone gives away the labels."""

import numpy as np

from gradleak.attack import restore_labels
from gradleak.capture import apply_defense, capture_gradients
from gradleak.data import ToyDataset, sample_batch
from gradleak.models import ViTConfig, init_vit

cfg = ViTConfig(channels=1)  # 16x16 grey images, 4x4 patches, D=32, 3 layers, 8 classes
victim = init_vit(cfg, seed=0)
print("victim", victim.fingerprint(), "parameters:", len(victim.names))
print("tokens per image:", cfg.seq_len)

images, labels = ToyDataset("gaussian_blobs", 200, channels=1, seed=0).arrays()

# one client step on four images with distinct labels
idx = sample_batch(images, labels, 4, seed=1)
capture = capture_gradients(victim, images[idx], labels[idx])
print("true labels     ", sorted(labels[idx].tolist()))
print("restored labels ", sorted(restore_labels(capture)))

# the head gradient [D, K]: the minimum of each column is most negative for classes in the batch
col_min = capture.grads["head.weight"].min(axis=0)
print("column minima   ", col_min.round(5))

# noise on the shared gradients destroys the signal once it dwarfs the gradient itself
for sigma in (1e-4, 1e-2, 1e3):
    hits = 0
    for t in range(50):
        i = sample_batch(images, labels, 1, seed=100 + t)
        cap = apply_defense(capture_gradients(victim, images[i], labels[i]), sigma, "all", seed=t)
        hits += restore_labels(cap)[0] == labels[i][0]
    print(f"sigma={sigma:g}: single-image label accuracy {hits / 50:.2f}")
