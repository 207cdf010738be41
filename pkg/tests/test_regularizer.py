import numpy as np
import pytest
import torch

from sfmwarp.errors import ContractError, DegenerateInputError
from sfmwarp.regularizer import RegConfig, normalize_inverse_depth, smoothness_loss, sparseness_loss


def g(a):
    a = np.asarray(a, dtype=np.float64)
    return torch.as_tensor(a.reshape((1,) * (4 - a.ndim) + a.shape))


def smooth_brute(a, beta):
    H, W = a.shape
    terms = []
    dx = [[a[i, j + 1] - a[i, j] for j in range(W - 1)] for i in range(H)]
    dy = [[a[i + 1, j] - a[i, j] for j in range(W)] for i in range(H - 1)]
    terms.append(beta * np.mean(np.abs(dx)))
    terms.append(beta * np.mean(np.abs(dy)))
    dxx = [[dx[i][j + 1] - dx[i][j] for j in range(W - 2)] for i in range(H)]
    dyy = [[dy[i + 1][j] - dy[i][j] for j in range(W)] for i in range(H - 2)]
    dxy = [[dx[i + 1][j] - dx[i][j] for j in range(W - 1)] for i in range(H - 1)]
    dyx = [[dy[i][j + 1] - dy[i][j] for j in range(W - 1)] for i in range(H - 1)]
    for d in (dxx, dyy, dxy, dyx):
        terms.append((1 - beta) * np.mean(np.abs(d)))
    return sum(terms)


def test_weights():
    cfg = RegConfig()
    assert cfg.beta == 0.25 and cfg.base_weight == 0.01
    assert [cfg.weight(s) for s in range(4)] == [0.01, 0.005, 0.0025, 0.00125]


def test_smoothness_constant_zero():
    assert float(smoothness_loss(g(np.full((5, 5), 0.7)))) == 0.0


def test_ramp_examples():
    ramp = np.add.outer(np.arange(5.0), np.arange(5.0))
    assert float(smoothness_loss(g(ramp), beta=1.0)) == pytest.approx(2.0, abs=1e-15)
    assert float(smoothness_loss(g(ramp), beta=0.0)) == 0.0


@pytest.mark.parametrize("beta", [0.0, 0.25, 1.0])
def test_smoothness_matches_brute_force(beta):
    a = np.random.default_rng(0).random((6, 9))
    assert float(smoothness_loss(g(a), beta)) == pytest.approx(smooth_brute(a, beta), abs=1e-14)


def test_multichannel_sums_channels():
    a = np.random.default_rng(1).random((3, 5, 6))
    total = sum(smooth_brute(a[c], 0.25) for c in range(3))
    assert float(smoothness_loss(g(a))) == pytest.approx(total, abs=1e-14)


def test_smoothness_scale_covariant_and_zero_iff_constant():
    a = torch.rand(1, 1, 6, 6, dtype=torch.float64)
    for c in (0.1, 3.0, 1e3):
        assert float(smoothness_loss(c * a)) == pytest.approx(c * float(smoothness_loss(a)), rel=1e-12)
    b = torch.ones(1, 1, 6, 6, dtype=torch.float64)
    b[0, 0, 3, 3] += 1e-9
    assert float(smoothness_loss(b)) > 0


def test_smoothness_degenerate():
    with pytest.raises(DegenerateInputError):
        smoothness_loss(g(np.zeros((2, 5))))


def test_sparseness():
    assert float(sparseness_loss(torch.zeros(1, 3, 4, 4))) == 0.0
    f = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    f[:, 0] = 0.1
    assert float(sparseness_loss(f)) == pytest.approx(0.1, abs=1e-16)
    r = np.random.default_rng(2).normal(size=(3, 5, 7))
    ref = sum(abs(r[c, i, j]) for c in range(3) for i in range(5) for j in range(7)) / 35
    assert float(sparseness_loss(g(r))) == pytest.approx(ref, abs=1e-14)


def test_normalize_examples():
    assert bool((normalize_inverse_depth(g(np.full((3, 3), 0.5))) == 1.0).all())
    a = np.random.default_rng(3).random((4, 4)) + 0.1
    a = a / a.mean() * 2
    np.testing.assert_allclose(normalize_inverse_depth(g(a))[0, 0].numpy(), a / 2, atol=1e-15)
    for seed in range(20):
        r = torch.as_tensor(np.random.default_rng(seed).random((1, 1, 7, 5)) + 1e-3)
        n = normalize_inverse_depth(r)
        assert abs(float(n.mean()) - 1.0) <= 1e-12
        np.testing.assert_allclose(normalize_inverse_depth(n).numpy(), n.numpy(), atol=1e-12)
        np.testing.assert_allclose(normalize_inverse_depth(7.3 * r).numpy(), n.numpy(), atol=1e-12)
    with pytest.raises(ContractError):
        normalize_inverse_depth(-torch.ones(1, 1, 2, 2))
