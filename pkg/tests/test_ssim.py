import numpy as np
import pytest

from fadiff import ssim as ssim_mod
from fadiff.ssim import SSIMError, SSIMParams, pairwise_ssim, ssim

BACKENDS = ["numpy"] + (["cython"] if ssim_mod._ssim_core is not None else [])
P = SSIMParams()


def brute_force_ssim(a, b, params=P):
    """Direct definition: explicit weighted statistics for every valid window."""
    k = params.window
    w = params.kernel_2d()
    c1, c2 = params.c1, params.c2
    H, W = a.shape
    vals = []
    for r in range(H - k + 1):
        for c in range(W - k + 1):
            pa, pb = a[r:r + k, c:c + k], b[r:r + k, c:c + k]
            mu_a = mu_b = 0.0
            for i in range(k):
                for j in range(k):
                    mu_a += w[i, j] * pa[i, j]
                    mu_b += w[i, j] * pb[i, j]
            va = vb = cov = 0.0
            for i in range(k):
                for j in range(k):
                    va += w[i, j] * (pa[i, j] - mu_a) ** 2
                    vb += w[i, j] * (pb[i, j] - mu_b) ** 2
                    cov += w[i, j] * (pa[i, j] - mu_a) * (pb[i, j] - mu_b)
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def test_window_is_normalised():
    assert P.kernel_2d().sum() == pytest.approx(1.0, abs=1e-15)
    assert P.c1 == pytest.approx(1e-4) and P.c2 == pytest.approx(9e-4)


@pytest.mark.parametrize("backend", BACKENDS)
def test_matches_brute_force(backend):
    rng = np.random.default_rng(0)
    for _ in range(3):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert abs(ssim(a, b, backend=backend) - brute_force_ssim(a, b)) < 1e-6


@pytest.mark.parametrize("backend", BACKENDS)
def test_self_similarity_and_constants(backend):
    x = np.random.default_rng(1).random((20, 20))
    assert abs(ssim(x, x, backend=backend) - 1.0) < 1e-9
    half = np.full((16, 16), 0.5)
    assert ssim(half, half, backend=backend) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_constant_pair_closed_form(backend):
    a, b = np.full((16, 16), 0.25), np.full((16, 16), 0.75)
    c1 = P.c1
    # Variances and covariance vanish, leaving the luminance term.
    expected = (2 * 0.25 * 0.75 + c1) / (0.25 ** 2 + 0.75 ** 2 + c1)
    assert ssim(a, b, backend=backend) == pytest.approx(expected, abs=1e-12)
    assert ssim(a, b, backend=backend) == pytest.approx(brute_force_ssim(a, b), abs=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_symmetry_and_bounds(backend):
    rng = np.random.default_rng(2)
    for _ in range(10):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        s = ssim(a, b, backend=backend)
        assert abs(s - ssim(b, a, backend=backend)) < 1e-12
        assert -1.0 <= s <= 1.0
        assert s < 1.0 - 1e-6


@pytest.mark.parametrize("backend", BACKENDS)
def test_errors(backend):
    with pytest.raises(SSIMError):
        ssim(np.zeros((16, 16)), np.zeros((16, 15)), backend=backend)
    with pytest.raises(SSIMError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)), backend=backend)


@pytest.mark.parametrize("backend", BACKENDS)
def test_pairwise_order_and_values(backend):
    stack = np.random.default_rng(3).random((5, 1, 16, 16))
    vals = pairwise_ssim(stack, backend=backend)
    expected = [ssim(stack[i, 0], stack[j, 0], backend="numpy")
                for i in range(5) for j in range(i + 1, 5)]
    np.testing.assert_allclose(vals, expected, rtol=0, atol=1e-12)
    assert pairwise_ssim(stack[:1], backend=backend).size == 0


@pytest.mark.skipif(ssim_mod._ssim_core is None, reason="compiled core not built")
def test_backends_agree():
    stack = np.random.default_rng(4).random((12, 32, 32))
    np.testing.assert_allclose(pairwise_ssim(stack, backend="cython"),
                               pairwise_ssim(stack, backend="numpy"), rtol=0, atol=1e-12)


def test_agrees_with_scikit_image():
    skm = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(5)
    a, b = rng.random((32, 32)), rng.random((32, 32))
    ref = skm.structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)
