import math

import numpy as np
import pytest

from conftest import FD_TOL, numeric_grad, rel_err
from gradleak import tensor as T
from gradleak.archive import decode, encode
from gradleak.capture import capture_gradients
from gradleak.data import ToyDataset
from gradleak.models import ViTConfig, ViTParams, cross_entropy, init_vit, param_shapes, vit_forward, vit_param_grads
from gradleak.models.prior import PriorConfig, init_prior, pretrain_prior, prior_features, prior_forward_stats
from gradleak.tensor import ContractError, Tensor

SMALL = ViTConfig(image_size=8, channels=1, patch_size=4, embed_dim=8, depth=2, heads=2, num_classes=4)


def randomized(cfg, seed=0, scale=0.3):
    """Parameters with every entry non-trivial, so no gradient is structurally zero."""
    g = np.random.default_rng(seed)
    return ViTParams(cfg, {k: g.standard_normal(s) * scale + (1.0 if "ln" in k or "norm.w" in k else 0.0)
                           for k, s in param_shapes(cfg).items()})


def test_config_invariants():
    with pytest.raises(ContractError):
        ViTConfig(image_size=10, patch_size=4)
    with pytest.raises(ContractError):
        ViTConfig(embed_dim=30, heads=4)
    assert ViTConfig().seq_len == 17


def test_param_order_is_fixed():
    names = list(param_shapes(SMALL))
    assert names[:4] == ["patch_embed.weight", "patch_embed.bias", "cls_token", "pos_embed"]
    assert names[-2:] == ["head.weight", "head.bias"]
    assert param_shapes(SMALL)["head.weight"] == (8, 4)


def test_param_order_round_trips_through_archive():
    p = init_vit(SMALL, 3)
    arrays, _ = decode(encode(p.arrays))
    assert list(arrays) == p.names
    assert all(arrays[k].shape == p[k].shape for k in p.names)


def test_init_scheme():
    p = init_vit(ViTConfig(), 0)
    w = p["layers.1.attn.q.weight"]
    assert abs(w.std() - 0.02) < 0.005 * 2 and np.abs(w).max() <= 0.04 + 1e-12
    assert not p["pos_embed"].any() and not p["cls_token"].any() and not p["head.bias"].any()
    assert np.all(p["layers.2.ln1.weight"] == 1)


def test_zero_head_gives_uniform_logits():
    cfg = ViTConfig(image_size=16, channels=1, patch_size=4, embed_dim=8, depth=2, heads=2, num_classes=4)
    p = init_vit(cfg, 0)
    p.arrays["head.weight"][:] = 0
    with T.no_grad():
        logits = vit_forward(p, np.zeros((1, 16, 16, 1))).data
    assert np.ptp(logits) == 0


def test_patch_permutation_invariant_without_positional_embedding():
    p = randomized(SMALL, 1)
    p.arrays["pos_embed"][:] = 0
    x = np.random.default_rng(0).random((1, 8, 8, 1))
    swapped = x.copy()
    swapped[:, :4, :4], swapped[:, 4:, 4:] = x[:, 4:, 4:], x[:, :4, :4]
    with T.no_grad():
        a, b = vit_forward(p, x).data, vit_forward(p, swapped).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    p.arrays["pos_embed"][:] = np.random.default_rng(2).standard_normal(p["pos_embed"].shape)
    with T.no_grad():
        assert not np.allclose(vit_forward(p, x).data, vit_forward(p, swapped).data)


def test_batch_consistency():
    p = randomized(SMALL, 2)
    x = np.random.default_rng(1).random((3, 8, 8, 1))
    with T.no_grad():
        full = vit_forward(p, x).data
        rows = np.concatenate([vit_forward(p, x[i : i + 1]).data for i in range(3)])
    np.testing.assert_allclose(full, rows, atol=1e-13)


def test_cross_entropy_values():
    with T.no_grad():
        assert math.isclose(cross_entropy(np.zeros((1, 4)), [2]).item(), math.log(4), rel_tol=1e-12)
        big = np.array([[50.0, 0.0, 0.0]])
        assert cross_entropy(big, [0]).item() < 1e-20
        z = np.random.default_rng(0).standard_normal((3, 5))
        want = np.mean([-(z[i, y] - np.log(np.exp(z[i]).sum())) for i, y in enumerate([1, 4, 0])])
        assert math.isclose(cross_entropy(z, [1, 4, 0]).item(), want, rel_tol=1e-12)
    with pytest.raises(ContractError):
        cross_entropy(np.zeros((1, 4)), [4])


def test_parameter_gradients_match_finite_differences():
    p = randomized(SMALL, 3)
    x = np.random.default_rng(4).random((2, 8, 8, 1))
    labels = [1, 3]
    cap = capture_gradients(p, x, labels)
    worst = 0.0
    for name in p.names:
        def loss(v, name=name):
            q = p.copy()
            q.arrays[name] = v
            with T.no_grad():
                return cross_entropy(vit_forward(q, x), labels).item()

        fd = numeric_grad(loss, p[name])
        if name.endswith("attn.k.bias"):
            # softmax ignores a shift shared by every key: the exact gradient is zero
            assert np.abs(cap.grads[name]).max() < 1e-12 and np.abs(fd).max() < 1e-8
            continue
        worst = max(worst, rel_err(cap.grads[name], fd))
    assert worst < FD_TOL


def test_explicit_gradient_graph_equals_tape_backward():
    p = randomized(SMALL, 5)
    x = np.random.default_rng(6).random((2, 8, 8, 1))
    cap = capture_gradients(p, x, [0, 2])
    with T.no_grad():
        explicit = vit_param_grads(p, x, [0, 2])
    for name in p.names:
        np.testing.assert_allclose(explicit[name].data, cap.grads[name], rtol=1e-9, atol=1e-13)


def test_capture_is_deterministic():
    p = init_vit(SMALL, 0)
    x = np.random.default_rng(0).random((1, 8, 8, 1))
    a, b = capture_gradients(p, x, [1]), capture_gradients(p, x, [1])
    assert encode(a.grads) == encode(b.grads)


def test_saturated_batch_has_near_zero_gradients():
    p = init_vit(SMALL, 0)
    p.arrays["head.bias"][:] = [0.0, 60.0, 0.0, 0.0]
    cap = capture_gradients(p, np.random.default_rng(0).random((2, 8, 8, 1)), [1, 1])
    assert max(np.abs(g).max() for g in cap.grads.values()) < 1e-20


def test_true_class_column_holds_head_gradient_minimum():
    hits = 0
    for seed in range(100):
        cfg = ViTConfig(channels=1)
        p = init_vit(cfg, seed)
        g = np.random.default_rng(seed)
        y = int(g.integers(8))
        cap = capture_gradients(p, g.random((1, 16, 16, 1)), [y])
        hits += int(np.argmin(cap.grads["head.weight"].min(axis=0)) == y)
    assert hits >= 95


# ------------------------------------------------------------------ prior


@pytest.fixture(scope="module")
def toy():
    return ToyDataset("smooth_gradients", 96, channels=3, seed=0).arrays()


def test_prior_stats_fixed_point(toy):
    prior = init_prior(PriorConfig(), 0)
    x = toy[0][:8]
    with T.no_grad():
        stats = prior_forward_stats(prior, x)
    prior.stats.means = [m.data.copy() for m, _ in stats]
    prior.stats.variances = [v.data.copy() for _, v in stats]
    prior.stats.freeze()
    from gradleak.attack import image_prior_loss

    with T.no_grad():
        assert image_prior_loss(x, prior).item() == 0.0


def test_prior_layer1_mean_on_constant_input():
    prior = init_prior(PriorConfig(), 1)
    c = 0.7
    with T.no_grad():
        mu, _ = prior_forward_stats(prior, np.full((2, 16, 16, 3), c))[0]
    w = prior.params["conv1.weight"]
    # zero padding: border outputs see only part of the kernel
    cover = np.zeros((16, 16, 3, 3))
    for dy in range(3):
        for dx in range(3):
            rows = slice(max(0, 1 - dy), min(16, 17 - dy))
            cols = slice(max(0, 1 - dx), min(16, 17 - dx))
            cover[rows, cols, dy, dx] = 1
    want = c * np.einsum("hwyx,yxco->o", cover, w) / 256
    np.testing.assert_allclose(mu.data, want, rtol=1e-12)


def test_prior_layer1_mean_is_linear():
    prior = init_prior(PriorConfig(), 2)
    x = np.random.default_rng(0).random((3, 16, 16, 3))
    with T.no_grad():
        a = prior_forward_stats(prior, x)[0][0].data
        b = prior_forward_stats(prior, 2 * x)[0][0].data
    np.testing.assert_allclose(b, 2 * a, rtol=1e-12)


def test_prior_stats_gradient_matches_finite_differences():
    prior = init_prior(PriorConfig(image_size=8, widths=(4, 4), strides=(1, 2)), 0)
    x = np.random.default_rng(3).random((2, 6, 6, 3))
    w = np.random.default_rng(4).standard_normal(4)

    def f(v):
        with T.no_grad():
            return float(np.sum(w * prior_forward_stats(prior, v)[1][1].data))

    xt = Tensor(x.copy(), requires_grad=True)
    with T.Tape() as tape:
        tape.backward(T.sum(prior_forward_stats(prior, xt)[1][1] * w))
    assert rel_err(xt.grad.data, numeric_grad(f, x)) < FD_TOL


def test_pretraining_reproducible_and_improving(toy):
    x, y = toy
    a = pretrain_prior(x, y, epochs=4, seed=0)
    b = pretrain_prior(x, y, epochs=4, seed=0)
    assert a.frozen
    assert all(np.array_equal(m, n) for m, n in zip(a.stats.means, b.stats.means))
    assert all(np.array_equal(m, n) for m, n in zip(a.stats.variances, b.stats.variances))
    assert a.history[-1] < a.history[0]
    assert all(np.all(v >= 0) for v in a.stats.variances)
    with pytest.raises(ValueError):
        a.stats.means[0][0] = 1.0
    assert prior_features(a, x[:2]).shape == (2, 16)


def test_pretraining_rejects_empty_dataset():
    with pytest.raises(ContractError):
        pretrain_prior(np.zeros((0, 16, 16, 3)), np.zeros(0, dtype=int))
