import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gatefeat.errors import ValidationError
from gatefeat.feature_store import FeatureBundle
from gatefeat.shift_metric import (
    LAPLACIAN_8,
    bundle_shift_score,
    contour_diff,
    laplacian_magnitude,
    pca_components,
    shift_score,
    visualize_pca_rgb,
    visualize_pca_rgb_joint,
)


def naive_lap_mag(f, stencil=((0, 1, 0), (1, -4, 1), (0, 1, 0))):
    c, h, w = f.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for ch in range(c):
                v = 0.0
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        ii = min(max(i + di, 0), h - 1)
                        jj = min(max(j + dj, 0), w - 1)
                        v += stencil[di + 1][dj + 1] * f[ch, ii, jj]
                acc += v * v
            out[i, j] = acc**0.5
    return out


def naive_diff(a, b):
    return float(np.abs(naive_lap_mag(b) - naive_lap_mag(a)).sum())


def test_constant_map_has_zero_laplacian():
    assert np.all(laplacian_magnitude(np.full((3, 6, 6), 2.5)) == 0)


def test_centered_impulse():
    f = np.zeros((1, 5, 5))
    f[0, 2, 2] = 1
    expected = np.zeros((5, 5))
    expected[2, 2] = 4
    expected[1, 2] = expected[3, 2] = expected[2, 1] = expected[2, 3] = 1
    np.testing.assert_array_equal(laplacian_magnitude(f), expected)


def test_identical_channels_scale_by_sqrt2(rng):
    f = rng.normal(size=(1, 6, 7))
    np.testing.assert_allclose(laplacian_magnitude(np.concatenate([f, f])), np.sqrt(2) * laplacian_magnitude(f))


def test_too_small():
    with pytest.raises(ValidationError):
        laplacian_magnitude(np.zeros((1, 2, 5)))


def test_contour_diff_basics(rng):
    a = rng.normal(size=(2, 6, 6))
    assert contour_diff(a, a) == 0
    assert contour_diff(a + 3.7, a) == pytest.approx(0, abs=1e-9)
    with pytest.raises(ValidationError):
        contour_diff(a, a[:, :5])


def test_contour_diff_3x3_against_loop(rng):
    a, b = rng.normal(size=(1, 3, 3)), rng.normal(size=(1, 3, 3))
    assert contour_diff(a, b) == pytest.approx(naive_diff(a, b), rel=1e-12)


def test_eight_neighbour_stencil(rng):
    a = rng.normal(size=(2, 5, 5))
    np.testing.assert_allclose(laplacian_magnitude(a, LAPLACIAN_8), naive_lap_mag(a, LAPLACIAN_8.tolist()))


def test_score_values(rng):
    ref, anchor = rng.normal(size=(3, 8, 8)), rng.normal(size=(3, 8, 8))
    assert shift_score(ref, ref, anchor).score == 1.0
    assert shift_score(anchor, ref, anchor).score == 0.0
    # build a feature with twice the anchor's diff by scaling its Laplacian magnitude
    zero = np.zeros((1, 8, 8))
    anc = np.zeros((1, 8, 8))
    anc[0, 4, 4] = 1
    rep = shift_score(2 * anc, zero, anc)
    assert rep.diff == pytest.approx(2 * rep.diff_anchor)
    assert rep.score == pytest.approx(-1.0)


def test_zero_anchor_diff_is_an_error(rng):
    ref = rng.normal(size=(1, 5, 5))
    with pytest.raises(ValidationError):
        shift_score(ref, ref, ref.copy())


def test_noised_feature_between_anchor_and_reference(rng):
    ref = rng.normal(size=(4, 8, 8))
    anchor = ref + rng.normal(size=ref.shape)
    mid = ref + 0.1 * rng.normal(size=ref.shape)
    rep = shift_score(mid, ref, anchor)
    expected = (naive_diff(anchor, ref) - naive_diff(mid, ref)) / naive_diff(anchor, ref)
    assert 0 < rep.score < 1
    assert rep.score == pytest.approx(expected, rel=1e-9)


def test_monotone_degradation():
    amps = [0.01, 0.1, 1.0]
    means = []
    for a in amps:
        vals = []
        for s in range(20):
            r = np.random.default_rng(s)
            ref = r.normal(size=(2, 8, 8))
            vals.append(contour_diff(ref + a * r.normal(size=ref.shape), ref))
        means.append(np.mean(vals))
    assert means[0] < means[1] < means[2]


def test_bundle_score_averages_entries(rng):
    def b(feats, combo="x", t=50):
        return FeatureBundle("img", combo, t, [(f"up{i}", f) for i, f in enumerate(feats)])

    ref = [rng.normal(size=(2, 6, 6)) for _ in range(2)]
    anc = [r + rng.normal(size=r.shape) for r in ref]
    mixed = [ref[0], anc[1]]
    rep = bundle_shift_score(b(mixed), b(ref, "off", 0), b(anc, "off", 500))
    assert rep.entries["up0"].score == 1.0 and rep.entries["up1"].score == 0.0
    assert rep.score == pytest.approx(0.5)
    assert rep.entries["up0"].ref_id == "off@t0"
    with pytest.raises(ValidationError):
        bundle_shift_score(b(mixed), b(ref[:1], "off", 0), b(anc, "off", 500))


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (2, 5, 5), elements=st.floats(-100, 100)),
    arrays(np.float64, (2, 5, 5), elements=st.floats(-100, 100)),
    st.floats(-50, 50),
)
def test_symmetry_and_offset_invariance(a, b, k):
    d = contour_diff(a, b)
    assert d >= 0
    assert d == pytest.approx(contour_diff(b, a), rel=1e-9, abs=1e-9)
    assert contour_diff(a + k, b) == pytest.approx(d, rel=1e-6, abs=1e-6)


def test_pca_orthogonal_channels_recovered():
    h = w = 8
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base = [np.cos(np.pi * (xx + 0.5) / w), np.cos(np.pi * (yy + 0.5) / h), np.cos(2 * np.pi * (xx + 0.5) / w)]
    feat = np.stack([3.0 * base[0], 2.0 * base[1], 1.0 * base[2]])
    flat = feat.reshape(3, -1)
    cov = np.cov(flat)
    vals, vecs = np.linalg.eigh(cov)
    axes, ev = pca_components(feat)
    np.testing.assert_allclose(ev, vals[::-1], rtol=1e-9)
    np.testing.assert_allclose(np.abs(axes), np.abs(vecs[:, ::-1].T), atol=1e-9)
    rgb = visualize_pca_rgb(feat).astype(float)
    for k in range(3):
        src = flat[k]
        expect = (src - src.min()) / (src.max() - src.min()) * 255
        out = rgb[..., k].ravel()
        # a component is the input channel up to sign
        assert min(np.abs(out - expect).max(), np.abs(out - (255 - expect)).max()) <= 0.5 + 1e-9


def test_pca_errors_and_determinism(rng):
    with pytest.raises(ValidationError):
        visualize_pca_rgb(np.ones((4, 5, 5)))
    with pytest.raises(ValidationError):
        visualize_pca_rgb(rng.normal(size=(2, 5, 5)))
    f = rng.normal(size=(6, 7, 5))
    a = visualize_pca_rgb(f)
    assert a.shape == (7, 5, 3) and a.dtype == np.uint8
    np.testing.assert_array_equal(a, visualize_pca_rgb(f.copy()))
    axes, _ = pca_components(f)
    assert all(ax[np.argmax(np.abs(ax))] > 0 for ax in axes)


def test_joint_pca_shares_projection(rng):
    f = rng.normal(size=(5, 4, 4))
    a, b = visualize_pca_rgb_joint([f, f])
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValidationError):
        visualize_pca_rgb_joint([f, rng.normal(size=(4, 4, 4))])
