import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scrsdm import features as F
from scrsdm.dataio import canonical_scheme


# -- gradients and codes --------------------------------------------------------

def naive_gradients(p):
    h, w = p.shape
    gx, gy = np.zeros_like(p), np.zeros_like(p)
    for i in range(h):
        for j in range(w):
            gx[i, j] = p[i, 1] - p[i, 0] if j == 0 else p[i, j] - p[i, j - 1] if j == w - 1 else (p[i, j + 1] - p[i, j - 1]) / 2
            gy[i, j] = p[1, j] - p[0, j] if i == 0 else p[i, j] - p[i - 1, j] if i == h - 1 else (p[i + 1, j] - p[i - 1, j]) / 2
    return gx, gy


def test_gradients_constant():
    gx, gy = F.gradients(np.full((8, 8), 0.3))
    assert not gx.any() and not gy.any()


def test_gradients_ramp():
    p = np.tile(np.arange(10.0), (10, 1))
    gx, gy = F.gradients(p)
    assert np.all(gx[:, 1:-1] == 1.0)
    assert not gy.any()


def test_gradients_naive_oracle(rng):
    p = rng.random((8, 8))
    gx, gy = F.gradients(p)
    ox, oy = naive_gradients(p)
    assert np.array_equal(gx, ox) and np.array_equal(gy, oy)


def test_gradients_batch_matches_single(rng):
    stack = rng.random((3, 9, 7))
    gx, gy = F.gradients(stack)
    for k in range(3):
        sx, sy = F.gradients(stack[k])
        assert np.array_equal(gx[k], sx) and np.array_equal(gy[k], sy)


def test_gradients_too_small():
    with pytest.raises(ValueError):
        F.gradients(np.zeros((2, 5)))


@pytest.mark.parametrize("gx,gy,code", [(1, 0, 5), (0, 0, 0), (1, 1, 6), (-1, 0.5, 3), (0.5, -1, 4), (-2, -1, 1)])
def test_code_examples(gx, gy, code):
    assert F.orientation_codes(np.array(gx, float), np.array(gy, float)) == code


def test_lut_table():
    lut = F.code_lut()
    assert lut.tolist() == [5, 4, 2, 3, 6, 7, 1, 0]
    assert lut[7] == 0 and lut[0] == 5
    assert sorted(lut.tolist()) == list(range(8))


def atan2_octants(gx, gy):
    theta = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    return np.floor(theta / (np.pi / 4)).astype(int) % 8


def test_lut_matches_atan2_octants(rng):
    theta = rng.uniform(0, 2 * np.pi, 100_000)
    r = rng.uniform(1e-3, 10, theta.size)
    edge = np.abs(theta / (np.pi / 4) - np.round(theta / (np.pi / 4))) * (np.pi / 4)
    keep = edge > 1e-6
    gx, gy = r[keep] * np.cos(theta[keep]), r[keep] * np.sin(theta[keep])
    assert np.array_equal(F.code_lut()[F.orientation_codes(gx, gy)], atan2_octants(gx, gy))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(-1, 1)), st.floats(-5, 5))
def test_codes_invariant_to_offset(p, c):
    # offsets are exact in binary when the values share an exponent range; use dyadic offsets
    c = round(c * 4) / 4
    p = np.round(p * 256) / 256
    a = F.orientation_codes(*F.gradients(p))
    b = F.orientation_codes(*F.gradients(p + c))
    assert np.array_equal(a, b)


def test_onehot_single_pixel():
    f = F.encode_onehot(np.array([[7]]))
    assert f.dim == 8 and f.active.tolist() == [0]


def test_onehot_patch(rng):
    p = rng.random((32, 32))
    f = F.encode_onehot(F.orientation_codes(*F.gradients(p)))
    assert f.dim == 8192 and f.active.size == 1024
    assert np.all(np.diff(f.active) > 0)
    assert f.dense().sum() == 1024
    assert np.array_equal(f.active, F.basift_active(p)[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 12), st.integers(3, 12), st.integers(0, 2**32 - 1))
def test_onehot_one_per_pixel(h, w, seed):
    p = np.random.default_rng(seed).random((h, w))
    f = F.encode_onehot(F.orientation_codes(*F.gradients(p)))
    assert f.active.size == h * w
    assert np.array_equal(f.active // 8, np.arange(h * w))


# -- reference SIFT -------------------------------------------------------------

def naive_sift(p):
    """Triangular-kernel formulation of the soft histogram, written independently of the kernel."""
    side = p.shape[0]
    gx, gy = naive_gradients(p)
    cell = side / 4
    sigma = side / 2
    c0 = (side - 1) / 2
    hist = np.zeros((4, 4, 8))
    for i in range(side):
        for j in range(side):
            m = math.hypot(gx[i, j], gy[i, j])
            if m == 0:
                continue
            w = m * math.exp(-((i - c0) ** 2 + (j - c0) ** 2) / (2 * sigma**2))
            ti, tj = (i + 0.5) / cell - 0.5, (j + 0.5) / cell - 0.5
            to = (math.atan2(gy[i, j], gx[i, j]) % (2 * math.pi)) / (math.pi / 4) - 0.5
            for r in range(4):
                for c in range(4):
                    wrc = max(0.0, 1 - abs(ti - r)) * max(0.0, 1 - abs(tj - c))
                    for b in range(8):
                        d = abs(to - b) % 8
                        wo = max(0.0, 1 - min(d, 8 - d))
                        hist[r, c, b] += w * wrc * wo
    v = hist.reshape(-1)
    v = v / np.linalg.norm(v)
    v = np.minimum(v, 0.2)
    return v / np.linalg.norm(v)


def test_sift_matches_naive(rng):
    p = rng.random((16, 16))
    assert np.allclose(F.reference_sift(p), naive_sift(p), atol=1e-12)


def test_sift_constant_is_zero():
    assert not F.reference_sift(np.full((32, 32), 0.7)).any()


def test_sift_unit_norm_and_clip(rng):
    d = F.reference_sift(rng.random((20, 32, 32)))
    assert d.shape == (20, 128)
    assert np.allclose(np.linalg.norm(d, axis=1), 1, atol=1e-6)
    assert d.min() >= 0


def test_sift_rotation_permutation(rng):
    p = rng.random((32, 32))
    old = F.reference_sift(p).reshape(4, 4, 8)
    new = F.reference_sift(np.rot90(p)).reshape(4, 4, 8)
    expect = np.empty_like(old)
    for ci in range(4):
        for cj in range(4):
            for b in range(8):
                expect[ci, cj, b] = old[cj, 3 - ci, (b + 2) % 8]
    assert np.abs(new - expect).max() <= 1e-9


def test_sift_requires_square():
    with pytest.raises(ValueError):
        F.reference_sift(np.zeros((32, 16)))


# -- BASIFT ----------------------------------------------------------------------

def random_model(rng, side=32, d=128):
    return F.BasiftModel(rng.integers(-1, 2, size=(d, side * side * 8)), side=side)


def test_model_validation(rng):
    with pytest.raises(ValueError, match="permutation"):
        F.BasiftModel(np.zeros((4, 8 * 64)), side=8, lut=np.zeros(8))
    with pytest.raises(ValueError, match="entries"):
        F.BasiftModel(np.full((4, 8 * 64), 2), side=8)
    with pytest.raises(ValueError, match="shape"):
        F.BasiftModel(np.zeros((4, 10)), side=8)


def test_basift_zero_map(rng):
    m = F.BasiftModel(np.zeros((128, 8192)))
    assert not F.basift_extract(rng.random((32, 32)), m).any()


def test_basift_single_column(rng):
    p = rng.random((32, 32))
    active = F.basift_active(p)[0]
    j = active[100]
    sm = np.zeros((128, 8192), dtype=np.int8)
    sm[:, j] = rng.integers(-1, 2, 128)
    sm[0, j] = 1
    d = F.basift_extract(p, F.BasiftModel(sm))
    assert np.allclose(d, sm[:, j] / np.linalg.norm(sm[:, j]))


def test_basift_raw_equals_dense_oracle(rng):
    m = random_model(rng)
    patches = rng.random((50, 32, 32))
    raw = F.basift_raw(patches, m)
    for k in range(50):
        eta = F.encode_onehot(F.orientation_codes(*F.gradients(patches[k]))).dense()
        assert np.array_equal(raw[k], m.sign_map.astype(np.int64) @ eta)


def test_fused_matches_staged(rng):
    m = random_model(rng, side=16, d=32)
    patches = rng.random((10, 16, 16))
    assert np.array_equal(F.basift_raw(patches, m), F.basift_accumulate(F.basift_active(patches), m))


def test_basift_side_mismatch(rng):
    with pytest.raises(ValueError, match="side"):
        F.basift_extract(rng.random((16, 16)), random_model(rng))


def test_accumulate_range_check(rng):
    m = random_model(rng, side=8, d=4)
    with pytest.raises(ValueError):
        F.basift_accumulate(np.array([[600]]), m)


# -- map learning ---------------------------------------------------------------

def test_map_normal_equation_oracle(rng):
    patches = rng.random((400, 8, 8))
    targets = rng.normal(size=(400, 5))
    L, diag = F.train_basift_map(patches, ridge=0.5, targets=targets)
    X = F.onehot_design(F.basift_active(patches), 512).toarray()
    G = X.T @ X
    lam = 0.5 * np.trace(G) / 512
    oracle = np.linalg.solve(G + lam * np.eye(512), X.T @ targets).T
    assert np.allclose(L, oracle, atol=1e-10)
    assert diag["penalty"] == pytest.approx(lam)


def test_map_zero_targets(rng):
    patches = rng.random((50, 8, 8))
    L, _ = F.train_basift_map(patches, ridge=1e-3, targets=np.zeros((50, 3)))
    assert not L.any()
    L, _ = F.train_basift_map(np.full((20, 8, 8), 0.4), ridge=1e-3)
    assert not L.any()


def test_map_large_ridge_vanishes(rng):
    p = rng.random((1, 8, 8))
    L, _ = F.train_basift_map(p, ridge=1e12, trace_scaled=False)
    assert np.abs(L).max() < 1e-11


def test_map_singular_without_ridge(rng):
    with pytest.raises(np.linalg.LinAlgError, match="ridge"):
        F.train_basift_map(rng.random((30, 8, 8)), ridge=0.0)


def test_map_generalizes():
    # held-out residual within 1.5x of the training residual (16x16 patches keep this quick)
    ims = [F.presmooth(im, 2.0) for im in F.builtin_natural_images()]
    patches = F.sample_patches(ims, 9000, side=16, seed=2)
    L, diag = F.train_basift_map(patches[:8000], ridge=1.0)
    held = F.map_residual(L, patches[8000:])
    assert held <= 1.5 * diag["train_residual"]


def test_quantize_sign_examples():
    assert not F.quantize_sign(np.zeros((3, 4))).any()
    assert F.quantize_sign(np.array([[-0.3, 0.2, 0.0]])).tolist() == [[-1, 1, 0]]
    assert F.quantize_sign(np.array([[-0.3, 0.2]]), zero_band=0.25).tolist() == [[-1, 0]]


@given(arrays(np.float64, (5, 7), elements=st.floats(-1, 1)), st.floats(0, 1), st.floats(0, 1))
def test_quantize_zero_fraction_monotone(L, a, b):
    lo, hi = sorted((a, b))
    assert np.mean(F.quantize_sign(L, lo) == 0) <= np.mean(F.quantize_sign(L, hi) == 0)


def test_train_basift_records_settings():
    m = F.train_basift(patches=np.random.default_rng(0).random((300, 8, 8)), ridge=2.0, smooth_sigma=1.5)
    assert m.side == 8 and m.dim == 512
    assert m.diagnostics["smooth_sigma"] == 1.5 and m.diagnostics["ridge"] == 2.0


# -- corpus and per-shape features ---------------------------------------------

def test_sample_patches_deterministic(rng):
    ims = [rng.random((50, 60)), rng.random((40, 40))]
    a = F.sample_patches(ims, 30, side=16, seed=5)
    assert np.array_equal(a, F.sample_patches(ims, 30, side=16, seed=5))
    assert not np.array_equal(a, F.sample_patches(ims, 30, side=16, seed=6))
    with pytest.raises(ValueError):
        F.sample_patches([np.zeros((8, 8))], 3, side=16)


def test_builtin_images_are_grayscale():
    ims = F.builtin_natural_images()
    assert len(ims) >= 10
    assert all(im.ndim == 2 and im.min() >= 0 and im.max() <= 1 for im in ims)


def test_presmooth():
    img = np.random.default_rng(0).random((20, 20))
    assert F.presmooth(img, 0) is img
    assert F.presmooth(img, 2.0).std() < img.std()


def test_shape_feature_lengths(rng, small_basift):
    img = rng.random((120, 120))
    one = np.array([[60.0, 60.0]])
    assert F.extract_shape_features(img, one, F.SiftExtractor()).shape == (128,)
    shape = rng.uniform(20, 100, (49, 2))
    for ex in (F.SiftExtractor(), F.BasiftExtractor(small_basift)):
        assert F.extract_shape_features(img, shape, ex).shape == (6272,)


def test_shape_features_permute_with_landmarks(rng):
    img = rng.random((100, 100))
    shape = rng.uniform(10, 90, (5, 2))
    perm = rng.permutation(5)
    a = F.extract_shape_features(img, shape, F.SiftExtractor()).reshape(5, 128)
    b = F.extract_shape_features(img, shape[perm], F.SiftExtractor()).reshape(5, 128)
    assert np.array_equal(a[perm], b)
