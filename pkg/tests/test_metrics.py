import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradleak.data import ToyDataset
from gradleak.metrics import (
    PSNR_CAP,
    assign,
    assign_bruteforce,
    assign_hungarian,
    evaluate,
    feature_distance,
    fft2d_distance,
    iip,
    pair_costs,
    psnr,
)
from gradleak.models.prior import pretrain_prior
from gradleak.tensor import ContractError


@pytest.fixture(scope="module")
def prior_and_images():
    x, y = ToyDataset("gaussian_blobs", 64, seed=0).arrays()
    return pretrain_prior(x, y, epochs=2, seed=0), x


def naive_dft_distance(a, b):
    """Direct O(n^4) DFT magnitudes; independent of numpy.fft."""
    n, h, w, c = a.shape
    ky, kx = np.arange(h), np.arange(w)
    out = []
    for i in range(n):
        for ch in range(c):
            mags = []
            for img in (a[i, :, :, ch], b[i, :, :, ch]):
                m = np.zeros((h, w))
                for u in range(h):
                    for v in range(w):
                        phase = np.exp(-2j * np.pi * (u * ky[:, None] / h + v * kx[None, :] / w))
                        m[u, v] = abs(np.sum(img * phase))
                mags.append(m.ravel())
            cos = mags[0] @ mags[1] / (np.linalg.norm(mags[0]) * np.linalg.norm(mags[1]))
            out.append(1 - cos)
    return float(np.mean(out))


def test_psnr_values():
    a = np.full((4, 4, 3), 0.5)
    assert psnr(a, a) == PSNR_CAP
    assert math.isclose(psnr(a, a + 0.1), 20.0, rel_tol=1e-12)
    assert psnr(np.full((2, 2), 1.7), np.ones((2, 2))) == PSNR_CAP
    with pytest.raises(ContractError):
        psnr(np.zeros((2, 2)), np.zeros((3, 2)))


def test_fft2d_matches_naive_dft():
    g = np.random.default_rng(0)
    a, b = g.random((2, 6, 5, 3)), g.random((2, 6, 5, 3))
    assert abs(fft2d_distance(a, b) - naive_dft_distance(a, b)) < 1e-9


def test_fft2d_edge_cases():
    a = np.random.default_rng(1).random((1, 4, 4, 1))
    z = np.zeros_like(a)
    assert fft2d_distance(a, a) < 1e-15
    assert fft2d_distance(z, z) == 0.0
    assert fft2d_distance(a, z) == 1.0
    # magnitudes are shift invariant
    assert fft2d_distance(a, np.roll(a, 1, axis=2)) < 1e-12


def test_identical_pairs(prior_and_images):
    prior, x = prior_and_images
    batch = x[:4]
    r = evaluate(batch, batch, prior, x[:10], [0, 1, 2, 3])
    assert r.psnr == [PSNR_CAP] * 4 and r.fft2d_distance < 1e-15
    assert r.feature_distance == 0.0 and r.iip == 1.0 and r.assignment == [0, 1, 2, 3]


def test_assignment_recovers_permutation(prior_and_images):
    _, x = prior_and_images
    perm = [2, 0, 3, 1]
    recons = x[:4][perm] + 0.01
    assert list(assign(recons, x[:4])) == perm
    r = evaluate(recons, x[:4])
    assert r.assignment == perm and min(r.psnr) > 35


def test_hungarian_equals_bruteforce_on_random_instances():
    g = np.random.default_rng(5)
    for _ in range(50):
        c = g.random((5, 5))
        h, b = assign_hungarian(c), assign_bruteforce(c)
        assert math.isclose(c[np.arange(5), h].sum(), c[np.arange(5), b].sum(), rel_tol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_bruteforce_is_optimal(n, seed):
    c = np.random.default_rng(seed).random((n, n))
    best = min(sum(c[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
    got = assign_bruteforce(c)
    assert math.isclose(c[np.arange(n), got].sum(), best, rel_tol=1e-12)


def test_assign_limits():
    x = np.zeros((13, 2, 2, 1))
    with pytest.raises(ContractError):
        assign(x, x)
    big = np.random.default_rng(0).random((10, 2, 2, 1))
    assert sorted(assign(big, big)) == list(range(10))
    assert pair_costs(big, big).shape == (10, 10)


def test_feature_distance_and_iip(prior_and_images):
    prior, x = prior_and_images
    assert feature_distance(x[:3], x[:3], prior) == 0.0
    assert feature_distance(x[:3], x[3:6], prior) > 0
    assert iip(x[:5], x[:20], prior, [0, 1, 2, 3, 4]) == 1.0
    assert iip(x[:2], x[:20], prior, [5, 6]) == 0.0
    with pytest.raises(ContractError):
        iip(x[:5], x[:3], prior, [0, 1, 2, 3, 4])
