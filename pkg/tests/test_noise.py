import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.fft import dctn, idctn

from vibmark import analysis, noise
from vibmark import autodiff as ad
from vibmark.data import power_law_covers

COVERS = power_law_covers(6, 32, seed=0, purpose="test-covers")
ALL_SPECS = ["identity", "gaussian(sigma=0.05)", "dropout(keep=0.65..0.75)", "cropout(ratio=0.25..0.35)",
             "crop(ratio=0.4..0.55)", "resize(scale=0.4..0.6)", "jpeg(keep_y=25)", "purify(gamma=0.5,sigma=0.02)"]


def test_parse_and_format_roundtrip():
    for text in ALL_SPECS:
        spec = noise.parse_spec(text)
        assert noise.parse_spec(str(spec)) == spec
    assert noise.parse_spec("purify_proxy(gamma=0.5, sigma=0.02)").kind == "purify"
    assert noise.parse_spec("gaussian_noise(sigma=0.1)").kind == "gaussian"


@pytest.mark.parametrize("text", ["blur(r=1)", "dropout(keep=0)", "dropout(keep=1.2)", "jpeg(keep_y=65)",
                                  "crop(ratio=0.6..0.4)", "gaussian", "gaussian(s=0.1)", "purify(gamma=0.5)",
                                  "dropout(keep)", "jpeg(keep_y=0)", "((("])
def test_invalid_specs_rejected(text):
    with pytest.raises(ValueError):
        noise.parse_spec(text)


def test_parse_pool_separators():
    a = noise.parse_pool("crop(ratio=0.4..0.55); jpeg(keep_y=25)")
    b = noise.parse_pool("crop(ratio=0.4..0.55), jpeg(keep_y=25)")
    assert a == b and len(a) == 2
    assert [str(s) for s in noise.parse_pool(noise.TABLE8_POOL)] == list(noise.TABLE8_POOL)


@pytest.mark.parametrize("text", ALL_SPECS)
def test_outcome_contract(text):
    out = noise.apply(text, COVERS, COVERS, np.random.default_rng(0))
    img = out.image.data
    assert img.shape == COVERS.shape
    assert img.min() >= 0 and img.max() <= 1
    assert np.array_equal(out.s_atk, img - COVERS)


@pytest.mark.parametrize("text", ALL_SPECS)
def test_seeded_determinism(text):
    a = noise.apply(text, COVERS, COVERS, np.random.default_rng(7)).image.data
    b = noise.apply(text, COVERS, COVERS, np.random.default_rng(7)).image.data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("text", ALL_SPECS)
def test_channels_are_differentiable(text):
    x = ad.parameter(COVERS[:2] * 0.8 + 0.1)
    w = np.random.default_rng(1).normal(size=x.shape)

    def f(t):
        # same draws on every evaluation
        return ad.sum(ad.mul(noise.apply(text, t, COVERS[:2], np.random.default_rng(3)).image, w))

    assert ad.grad_check(f, x, indices=np.arange(0, 2048, 97)) < 1e-4


def test_identity_and_degenerate_parameters():
    x = COVERS[0]
    out = noise.apply("identity", x)
    assert np.array_equal(out.image.data, x) and not out.s_atk.any()
    assert np.array_equal(noise.apply("dropout(keep=1)", x, x * 0).image.data, x)
    assert np.array_equal(noise.apply("purify(gamma=0,sigma=0)", x).image.data, x)


def test_resize_keeps_constants():
    const = np.full((32, 32), 0.37)
    out = noise.apply("resize(scale=0.5)", const)
    assert np.allclose(out.image.data, const, atol=1e-12) and np.allclose(out.s_atk, 0, atol=1e-12)
    for s in (0.4, 0.5, 0.6):
        assert np.allclose(noise.resize_matrix(32, s).sum(axis=1), 1.0)


def test_dropout_and_cropout_mix_in_cover():
    wm = np.clip(COVERS + 0.05, 0, 1)
    out = noise.apply("dropout(keep=0.7)", wm, COVERS, np.random.default_rng(0)).image.data
    from_wm = np.isclose(out, wm)
    from_cover = np.isclose(out, COVERS)
    assert np.all(from_wm | from_cover)
    assert 0.6 < from_wm[~np.isclose(wm, COVERS)].mean() < 0.8
    out = noise.apply("cropout(ratio=0.3)", wm, COVERS, np.random.default_rng(0)).image.data
    kept = np.isclose(out, wm) & ~np.isclose(wm, COVERS)
    assert kept.any(axis=(1, 2)).all()
    with pytest.raises(ValueError):
        noise.apply("dropout(keep=0.5)", wm)


def test_crop_zeroes_outside_a_rectangle():
    out = noise.apply("crop(ratio=0.5)", COVERS, rng=np.random.default_rng(0)).image.data
    for img, cov in zip(out, COVERS):
        rows, cols = np.nonzero(img.any(axis=1))[0], np.nonzero(img.any(axis=0))[0]
        assert len(rows) == 16 and len(cols) == 16
        r, c = slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)
        assert np.array_equal(img[r, c], cov[r, c])


def test_jpeg_matches_scipy_dct_oracle():
    x = COVERS[0]
    ref = np.zeros_like(x)
    order = noise.zigzag_order(8)[:25]
    mask = np.zeros((8, 8))
    for r, c in order:
        mask[r, c] = 1
    for i in range(0, 32, 8):
        for j in range(0, 32, 8):
            coef = dctn(x[i:i + 8, j:j + 8], norm="ortho")
            ref[i:i + 8, j:j + 8] = idctn(coef * mask, norm="ortho")
    out = noise.jpeg_differentiable(x, 25).image.data
    assert np.allclose(out, np.clip(ref, 0, 1), atol=1e-12)


def test_jpeg_extremes():
    x = COVERS[1]
    assert np.allclose(noise.jpeg_differentiable(x, 64).image.data, x, atol=1e-10)
    dc = noise.jpeg_differentiable(x, 1).image.data
    means = x.reshape(4, 8, 4, 8).mean(axis=(1, 3))
    assert np.allclose(dc, np.kron(means, np.ones((8, 8))), atol=1e-12)


def test_jpeg_handles_non_multiple_of_eight():
    x = power_law_covers(1, 12, seed=2)[0]
    assert noise.jpeg_differentiable(x, 64).image.shape == (12, 12)
    assert np.allclose(noise.jpeg_differentiable(x, 64).image.data, x, atol=1e-10)


def test_jpeg_residual_is_high_frequency():
    res = noise.apply("jpeg(keep_y=25)", COVERS).s_atk
    assert np.abs(res).max() > 0
    band = analysis.mean_band_energy(res)
    cov = analysis.mean_band_energy(COVERS)
    assert band.mid + band.high > 0.5
    assert band.mid + band.high > cov.mid + cov.high


def test_purify_full_erasure_is_blur():
    x = COVERS[2]
    out = noise.purify_proxy(x, 1.0, 0.0, np.random.default_rng(0)).image.data
    blur = noise.blur_matrix(32) @ x @ noise.blur_matrix(32).T
    assert np.allclose(out, np.clip(blur, 0, 1), atol=1e-12)
    assert np.allclose(noise.blur_matrix(32).sum(axis=1), 1.0)


def test_purify_anticorrelates_with_highpass():
    out = noise.apply("purify(gamma=0.5,sigma=0.02)", COVERS, rng=np.random.default_rng(0))
    hp = noise.highpass(ad.Tensor(COVERS)).data
    for s, h in zip(out.s_atk, hp):
        assert analysis.pearson_cc(s, h) < 0


def test_zigzag_order_prefix():
    assert noise.zigzag_order(8)[:6] == [(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2)]
    assert sorted(noise.zigzag_order(8)) == [(r, c) for r in range(8) for c in range(8)]


@given(st.floats(0.0, 1.0), st.integers(0, 2 ** 16))
def test_purify_noise_free_part_is_linear(gamma, seed):
    x = power_law_covers(1, 16, seed=seed)[0] * 0.5 + 0.25
    out = noise.purify_proxy(x, gamma, 0.0, np.random.default_rng(0)).image.data
    hp = noise.highpass(ad.Tensor(x)).data
    assert np.allclose(out, np.clip(x - gamma * hp, 0, 1), atol=1e-12)


@given(st.floats(0.05, 1.0), st.integers(0, 2 ** 16))
def test_gaussian_noise_level(sigma, seed):
    x = np.full((1, 64, 64), 0.5)
    out = noise.apply(f"gaussian(sigma={sigma})", x, rng=np.random.default_rng(seed))
    # clipping only shrinks the residual
    assert out.s_atk.std() <= sigma * 1.1
