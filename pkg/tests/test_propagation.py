import math

import numpy as np
import pytest
import torch

from twinseg.config import KernelConfig
from twinseg.errors import ConfigError
from twinseg.model import SegSource
from twinseg.propagation import (AffinityHead, BackgroundScore, BgOrigin, PropagationKernel,
                                 bsp_wrap, classification_segmap, fixed_bg_wrap,
                                 mlp_affinity, par_refine)


def par_oracle(scores: np.ndarray, image: np.ndarray, kernel: PropagationKernel) -> np.ndarray:
    """Literal per-pixel reimplementation of the propagation update."""
    c, h, w = scores.shape
    out = scores.astype(np.float64).copy()
    img = image.astype(np.float64)
    for _ in range(kernel.iterations):
        nxt = out.copy()
        for i in range(h):
            for j in range(w):
                logits, coords = [], []
                for dy, dx in kernel.offsets:
                    ni, nj = i + dy, j + dx
                    if not (0 <= ni < h and 0 <= nj < w):
                        continue
                    col = float(((img[:, i, j] - img[:, ni, nj]) ** 2).sum())
                    pos = float(dy * dy + dx * dx)
                    logits.append(-col / (2 * kernel.sigma_rgb ** 2)
                                  - pos / (2 * kernel.sigma_pos ** 2))
                    coords.append((ni, nj))
                if not coords:
                    continue
                m = max(logits)
                ws = [math.exp(l - m) for l in logits]
                z = sum(ws)
                for ch in range(c):
                    nxt[ch, i, j] = sum(w_ * out[ch, ni, nj]
                                        for w_, (ni, nj) in zip(ws, coords)) / z
        out = nxt
    return out


def test_kernel_from_config_offsets():
    k = PropagationKernel.from_config(KernelConfig())
    assert len(k.offsets) == 32
    assert len(set(k.offsets)) == 32
    assert (0, 0) not in k.offsets
    assert (-8, 8) in k.offsets and (1, 0) in k.offsets


def test_zero_iterations_identity():
    k = PropagationKernel.from_config(KernelConfig(iterations=0))
    scores = torch.rand(3, 5, 5)
    assert torch.equal(par_refine(scores, torch.rand(3, 5, 5), k), scores)


def test_constant_scores_fixed_point():
    k = PropagationKernel.from_config(KernelConfig(iterations=4))
    img = torch.full((3, 6, 6), 0.5)
    scores = torch.stack([torch.full((6, 6), v) for v in (0.2, 0.7)])
    out = par_refine(scores, img, k)
    assert (out - scores).abs().max() < 1e-6


def test_column_sums_preserved():
    torch.manual_seed(0)
    k = PropagationKernel.from_config(KernelConfig(iterations=5))
    img = torch.rand(3, 4, 4)
    scores = torch.rand(3, 4, 4)
    scores = scores / scores.sum(dim=0, keepdim=True)  # columns sum to 1
    out = par_refine(scores, img, k)
    assert (out.sum(dim=0) - 1).abs().max() < 1e-6


def test_matches_bruteforce_oracle():
    rng = np.random.default_rng(3)
    k = PropagationKernel.from_config(KernelConfig(dilations=(1, 2), iterations=2))
    for _ in range(10):
        img = rng.random((3, 4, 4))
        scores = rng.random((2, 4, 4))
        want = par_oracle(scores, img, k)
        got = par_refine(torch.from_numpy(scores), torch.from_numpy(img), k)
        assert np.abs(got.numpy() - want).max() < 1e-9


def test_uniform_weights_equal_neighborhood_mean():
    rng = np.random.default_rng(4)
    # constant image and huge positional bandwidth flatten the kernel
    k = PropagationKernel.from_config(KernelConfig(dilations=(1,), sigma_pos=1e6, iterations=3))
    img = np.full((3, 5, 5), 0.3)
    scores = rng.random((2, 5, 5))
    out = scores.copy()
    for _ in range(k.iterations):
        nxt = out.copy()
        for i in range(5):
            for j in range(5):
                vals = [out[:, i + dy, j + dx] for dy, dx in k.offsets
                        if 0 <= i + dy < 5 and 0 <= j + dx < 5]
                nxt[:, i, j] = np.mean(vals, axis=0)
        out = nxt
    got = par_refine(torch.from_numpy(scores), torch.from_numpy(img), k)
    assert np.abs(got.numpy() - out).max() < 1e-9


def test_convex_range_bound():
    torch.manual_seed(1)
    k = PropagationKernel.from_config(KernelConfig(iterations=10))
    scores = torch.rand(4, 4, 4) * 3 - 1
    out = par_refine(scores, torch.rand(3, 4, 4), k)
    assert out.min() >= scores.min() - 1e-6
    assert out.max() <= scores.max() + 1e-6


def test_bsp_wrap_concat_and_bit_equality():
    seed = torch.rand(2, 4, 4)
    bg = BackgroundScore(map=torch.rand(4, 4), origin=BgOrigin.SEG_BRANCH)
    out = bsp_wrap(seed, bg)
    assert out.shape == (3, 4, 4)
    assert torch.equal(out[0], bg.map)
    assert torch.equal(out[1:], seed)


def test_bsp_zero_background_never_wins():
    seed = torch.rand(2, 4, 4) + 0.01
    bg = BackgroundScore(map=torch.zeros(4, 4), origin=BgOrigin.SEG_BRANCH)
    lab = bsp_wrap(seed, bg).argmax(dim=0)
    assert (lab != 0).all()


def test_bsp_shape_mismatch():
    bg = BackgroundScore(map=torch.rand(3, 3), origin=BgOrigin.SEG_BRANCH)
    with pytest.raises(ValueError, match="shape"):
        bsp_wrap(torch.rand(2, 4, 4), bg)


def test_bsp_requires_seg_origin():
    bg = BackgroundScore(map=torch.rand(4, 4), origin=BgOrigin.FIXED_THRESHOLD)
    with pytest.raises(ValueError, match="SEG_BRANCH"):
        bsp_wrap(torch.rand(2, 4, 4), bg)


def test_bsp_detaches_background():
    seed = torch.rand(2, 4, 4)
    src = torch.rand(4, 4, requires_grad=True)
    out = bsp_wrap(seed, BackgroundScore(map=src * 1.0, origin=BgOrigin.SEG_BRANCH))
    assert not out.requires_grad


def test_fixed_bg_wrap_values():
    seed = torch.rand(3, 4, 4)
    out = fixed_bg_wrap(seed, 0.45)
    assert torch.equal(out[0], torch.full((4, 4), 0.45))
    assert torch.equal(out[1:], seed)


def test_fixed_bg_wrap_argmax_behavior():
    seed = torch.zeros(2, 3, 3)
    seed[1, 1, 1] = 0.9
    lab = fixed_bg_wrap(seed, 0.45).argmax(dim=0)
    assert lab[1, 1].item() == 2
    assert (fixed_bg_wrap(torch.zeros(2, 3, 3), 0.45).argmax(dim=0) == 0).all()


@pytest.mark.parametrize("beta", [0.0, 1.0, -0.2, 1.5])
def test_fixed_bg_wrap_beta_range(beta):
    with pytest.raises(ConfigError):
        fixed_bg_wrap(torch.rand(2, 3, 3), beta)


def test_classification_segmap_zero_iterations():
    k = PropagationKernel.from_config(KernelConfig(iterations=0))
    s_hat = torch.rand(3, 4, 4) * 1.5 - 0.2
    out = classification_segmap(s_hat, torch.rand(3, 4, 4), k)
    assert out.source is SegSource.CLS_BRANCH
    assert torch.equal(out.probs, s_hat.clamp(0, 1))


def test_classification_segmap_range_preserved():
    torch.manual_seed(2)
    k = PropagationKernel.from_config(KernelConfig(iterations=10))
    out = classification_segmap(torch.rand(4, 6, 6), torch.rand(3, 6, 6), k)
    assert out.probs.min() >= 0 and out.probs.max() <= 1


def test_constant_image_keeps_dominant_argmax():
    rng = np.random.default_rng(5)
    k = PropagationKernel.from_config(KernelConfig(iterations=3))
    img = torch.full((3, 4, 4), 0.5)
    scores = torch.from_numpy(rng.uniform(0.0, 0.4, size=(3, 4, 4)))
    scores[1] += 0.5  # one channel dominates everywhere
    out = classification_segmap(scores, img, k)
    assert (out.probs.argmax(dim=0) == 1).all()


def test_mlp_affinity_identity_and_constant():
    sym = torch.rand(1, 4, 4)
    sym = 0.5 * (sym + sym.transpose(-2, -1))
    a = mlp_affinity(sym, torch.tensor([1.0]), torch.tensor(0.0))
    assert torch.allclose(a, torch.sigmoid(sym[0]), atol=1e-6)
    z = mlp_affinity(torch.rand(2, 4, 4), torch.zeros(2), torch.tensor(0.0))
    assert torch.allclose(z, torch.full((4, 4), 0.5))


def test_mlp_affinity_symmetry():
    torch.manual_seed(3)
    a = mlp_affinity(torch.randn(4, 6, 6), torch.randn(4), torch.tensor(0.3))
    assert (a - a.transpose(-2, -1)).abs().max() < 1e-6
    assert a.min() >= 0 and a.max() <= 1


def test_affinity_head_module():
    head = AffinityHead(heads=4)
    out = head(torch.rand(2, 4, 9, 9))
    assert out.shape == (2, 9, 9)
    assert (out - out.transpose(-2, -1)).abs().max() < 1e-6
