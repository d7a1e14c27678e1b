"""Reference SIFT descriptors and the binary-approximated variant (BASIFT).

Both descriptors use the same patch geometry: a square patch split into 4x4
spatial cells with 8 orientation bins (128 values for the default 32x32
patch). Orientation bin ``k`` is the octant ``[45k, 45(k+1))`` degrees of
``atan2(gy, gx)`` with ``gx`` along columns and ``gy`` along rows.

BASIFT replaces the magnitude-weighted soft histogram with a one-hot code per
pixel (three sign/magnitude comparisons) followed by a learned linear map that
is stored as signs only, so applying it is a sum of selected int8 columns.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numba
import numpy as np
import scipy.linalg
import scipy.sparse
from scipy import ndimage

from .dataio import extract_patches

log = logging.getLogger(__name__)

N_CELLS = 4
N_BINS = 8
D_SIFT = N_CELLS * N_CELLS * N_BINS
CLIP = 0.2

# Code bits, MSB->LSB: [gx > 0], [gy > 0], [|gx| > |gy|]. Ties fall to 0.
# lut[code] is the octant of atan2(gy, gx) for that comparison pattern, e.g.
# code 7 (gx>0, gy>0, |gx|>|gy|) lies in (0, 45) deg -> bin 0,
# code 0 (gx<=0, gy<=0, |gx|<=|gy|) lies in [225, 270) deg -> bin 5.
_LUT = np.array([5, 4, 2, 3, 6, 7, 1, 0], dtype=np.int64)


def code_lut() -> np.ndarray:
    """Map from 3-bit orientation code to standard SIFT octant index."""
    return _LUT.copy()


# -- gradients and codes ------------------------------------------------------

@numba.njit(cache=True)
def _gradients_kernel(patches, gx, gy):
    b, h, w = patches.shape
    for n in range(b):
        p = patches[n]
        for i in range(h):
            for j in range(w):
                if j == 0:
                    gx[n, i, j] = p[i, 1] - p[i, 0]
                elif j == w - 1:
                    gx[n, i, j] = p[i, j] - p[i, j - 1]
                else:
                    gx[n, i, j] = 0.5 * (p[i, j + 1] - p[i, j - 1])
                if i == 0:
                    gy[n, i, j] = p[1, j] - p[0, j]
                elif i == h - 1:
                    gy[n, i, j] = p[i, j] - p[i - 1, j]
                else:
                    gy[n, i, j] = 0.5 * (p[i + 1, j] - p[i - 1, j])


def gradients(patch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences inside, one-sided differences on the border.

    Accepts a single ``(h, w)`` patch or a ``(n, h, w)`` stack and returns
    ``(gx, gy)`` of the same shape.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape[-1] < 3 or patch.shape[-2] < 3:
        raise ValueError(f"patch side must be >= 3, got {patch.shape[-2:]}")
    stack = np.ascontiguousarray(patch.reshape((-1,) + patch.shape[-2:]))
    gx = np.empty_like(stack)
    gy = np.empty_like(stack)
    _gradients_kernel(stack, gx, gy)
    return gx.reshape(patch.shape), gy.reshape(patch.shape)


def orientation_codes(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Per-pixel 3-bit code ``4[gx>0] + 2[gy>0] + [|gx|>|gy|]``."""
    gx = np.asarray(gx)
    gy = np.asarray(gy)
    return ((gx > 0) * 4 + (gy > 0) * 2 + (np.abs(gx) > np.abs(gy))).astype(np.uint8)


def sift_bins(patch: np.ndarray, lut: np.ndarray | None = None) -> np.ndarray:
    """SIFT octant index per pixel, derived from comparisons only."""
    lut = _LUT if lut is None else np.asarray(lut)
    return lut[orientation_codes(*gradients(patch))]


@dataclass(frozen=True)
class SparseBinaryFeature:
    dim: int
    active: np.ndarray

    def dense(self) -> np.ndarray:
        v = np.zeros(self.dim, dtype=np.int64)
        v[self.active] = 1
        return v


def encode_onehot(codes: np.ndarray, lut: np.ndarray | None = None) -> SparseBinaryFeature:
    """One active element per pixel at ``pixel_index * 8 + lut[code]``."""
    lut = _LUT if lut is None else np.asarray(lut)
    flat = np.asarray(codes).reshape(-1)
    active = np.arange(flat.size, dtype=np.int64) * N_BINS + lut[flat]
    return SparseBinaryFeature(flat.size * N_BINS, active)


# -- reference SIFT -----------------------------------------------------------

@lru_cache(maxsize=8)
def _spatial_tables(side: int):
    """Per-pixel bilinear cell assignment (2 row cells x 2 col cells) with Gaussian weights."""
    if side % N_CELLS:
        raise ValueError(f"patch side must be a multiple of {N_CELLS}, got {side}")
    width = side / N_CELLS
    t = (np.arange(side) + 0.5) / width - 0.5
    i0 = np.floor(t).astype(np.int64)
    f = t - i0
    # (side, 2) cell index and weight along one axis; out-of-range cells get weight 0
    idx = np.stack([i0, i0 + 1], axis=1)
    wts = np.stack([1.0 - f, f], axis=1)
    wts[(idx < 0) | (idx >= N_CELLS)] = 0.0
    idx = np.clip(idx, 0, N_CELLS - 1)
    centre = (side - 1) / 2.0
    sigma = side / 2.0
    g1 = np.exp(-((np.arange(side) - centre) ** 2) / (2 * sigma**2))
    gauss = np.outer(g1, g1)
    return idx, wts, gauss


@numba.njit(cache=True)
def _sift_kernel(gx, gy, cidx, cw, gauss, out):
    b, h, w = gx.shape
    two_pi = 2.0 * math.pi
    for n in range(b):
        hist = out[n]
        for i in range(h):
            for j in range(w):
                dx = gx[n, i, j]
                dy = gy[n, i, j]
                mag = math.sqrt(dx * dx + dy * dy)
                if mag == 0.0:
                    continue
                theta = math.atan2(dy, dx)
                if theta < 0.0:
                    theta += two_pi
                t = theta / (two_pi / 8.0) - 0.5
                b0 = int(math.floor(t))
                fo = t - b0
                o0 = b0 % 8
                o1 = (b0 + 1) % 8
                m = mag * gauss[i, j]
                for a in range(2):
                    wr = cw[i, a]
                    if wr == 0.0:
                        continue
                    r = cidx[i, a]
                    for c in range(2):
                        wc = cw[j, c]
                        if wc == 0.0:
                            continue
                        base = (r * 4 + cidx[j, c]) * 8
                        v = m * wr * wc
                        hist[base + o0] += v * (1.0 - fo)
                        hist[base + o1] += v * fo


def _normalize_clip(desc: np.ndarray, clip: float = CLIP) -> np.ndarray:
    norm = np.linalg.norm(desc, axis=-1, keepdims=True)
    nz = norm[..., 0] > 0
    out = np.zeros_like(desc)
    out[nz] = desc[nz] / norm[nz]
    np.minimum(out, clip, out=out)
    norm = np.linalg.norm(out, axis=-1, keepdims=True)
    out[nz] /= norm[nz]
    return out


def sift_histogram(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Unnormalized 4x4x8 soft histogram for a ``(n, side, side)`` gradient stack."""
    side = gx.shape[-1]
    cidx, cw, gauss = _spatial_tables(side)
    out = np.zeros((gx.shape[0], D_SIFT))
    _sift_kernel(gx, gy, cidx, cw, gauss, out)
    return out


def reference_sift(patch: np.ndarray) -> np.ndarray:
    """SIFT descriptor of a square patch (or a ``(n, side, side)`` stack).

    Gradient magnitudes, Gaussian-weighted with sigma = side/2, are soft-binned
    with bilinear interpolation over the 4x4 cell grid and linear
    interpolation between the two nearest orientation bins. The histogram is
    L2-normalized, clipped at 0.2 and renormalized. A patch without gradient
    yields the zero descriptor.
    """
    patch = np.asarray(patch, dtype=np.float64)
    single = patch.ndim == 2
    stack = patch[None] if single else patch
    if stack.shape[-1] != stack.shape[-2]:
        raise ValueError("SIFT patches must be square")
    gx, gy = gradients(stack)
    desc = _normalize_clip(sift_histogram(gx, gy))
    return desc[0] if single else desc


# -- BASIFT -------------------------------------------------------------------

@dataclass
class BasiftModel:
    """LUT plus the sign-quantized map, ``sign_map`` of shape ``(d_sift, side*side*8)``."""

    sign_map: np.ndarray
    side: int = 32
    lut: np.ndarray = field(default_factory=code_lut)
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.sign_map = np.asarray(self.sign_map, dtype=np.int8)
        self.lut = np.asarray(self.lut, dtype=np.int64)
        if sorted(self.lut.tolist()) != list(range(N_BINS)):
            raise ValueError("lut must be a permutation of 0..7")
        if self.sign_map.ndim != 2 or self.sign_map.shape[1] != self.side * self.side * N_BINS:
            raise ValueError(f"sign_map shape {self.sign_map.shape} does not match a {self.side}x{self.side} patch")
        if np.any(np.abs(self.sign_map) > 1):
            raise ValueError("sign_map entries must be in {-1, 0, 1}")
        if self.side * self.side > np.iinfo(np.int16).max:
            raise ValueError("patch too large for 16-bit accumulation")
        # column j of sign_map as a contiguous row: the accumulation gathers rows
        self._columns = np.ascontiguousarray(self.sign_map.T)

    @property
    def d_sift(self) -> int:
        return self.sign_map.shape[0]

    @property
    def dim(self) -> int:
        return self.sign_map.shape[1]

    def columns(self) -> np.ndarray:
        return self._columns


@numba.njit(cache=True)
def _accumulate_kernel(active, columns, out):
    # adds only: one int8 column per active index
    b, n_active = active.shape
    d = columns.shape[1]
    for n in range(b):
        acc = out[n]
        for a in range(n_active):
            col = columns[active[n, a]]
            for k in range(d):
                acc[k] += col[k]


def basift_accumulate(active: np.ndarray, model: BasiftModel) -> np.ndarray:
    """Integer sum of ``sign_map`` columns at each row of ``active`` indices."""
    active = np.ascontiguousarray(np.atleast_2d(active), dtype=np.int64)
    if active.size and (active.min() < 0 or active.max() >= model.dim):
        raise ValueError("active index out of range for the BASIFT model")
    out = np.zeros((active.shape[0], model.d_sift), dtype=np.int32)
    _accumulate_kernel(active, model.columns(), out)
    return out


def basift_active(patch: np.ndarray, lut: np.ndarray | None = None) -> np.ndarray:
    """Active one-hot indices, ``(n, side*side)`` for a patch stack."""
    lut = _LUT if lut is None else lut
    stack = np.asarray(patch, dtype=np.float64)
    stack = stack.reshape((-1,) + stack.shape[-2:])
    bins = lut[orientation_codes(*gradients(stack))].reshape(stack.shape[0], -1)
    return np.arange(bins.shape[1], dtype=np.int64) * N_BINS + bins


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


@numba.njit(cache=True)
def _basift_fused_kernel(patches, lut, columns, out):
    # gradients -> 3-bit code -> one column add per pixel; int16 holds |sum| <= side*side
    b, h, w = patches.shape
    d = columns.shape[1]
    acc = np.zeros(d, np.int16)
    for n in range(b):
        p = patches[n]
        acc[:] = 0
        base = 0
        for i in range(h):
            for j in range(w):
                if j == 0:
                    dx = p[i, 1] - p[i, 0]
                elif j == w - 1:
                    dx = p[i, j] - p[i, j - 1]
                else:
                    dx = 0.5 * (p[i, j + 1] - p[i, j - 1])
                if i == 0:
                    dy = p[1, j] - p[0, j]
                elif i == h - 1:
                    dy = p[i, j] - p[i - 1, j]
                else:
                    dy = 0.5 * (p[i + 1, j] - p[i - 1, j])
                code = 0
                if dx > 0:
                    code += 4
                if dy > 0:
                    code += 2
                if abs(dx) > abs(dy):
                    code += 1
                col = columns[base + lut[code]]
                for k in range(d):
                    acc[k] += col[k]
                base += 8
        for k in range(d):
            out[n, k] = acc[k]


def basift_raw(patch: np.ndarray, model: BasiftModel) -> np.ndarray:
    """Integer ``sign_map @ onehot(patch)``: a sum of int8 columns, one per pixel.

    Works on a single patch or a ``(n, side, side)`` stack.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape[-2:] != (model.side, model.side):
        raise ValueError(f"patch shape {patch.shape[-2:]} does not match model side {model.side}")
    stack = np.ascontiguousarray(patch.reshape((-1,) + patch.shape[-2:]))
    acc = np.empty((stack.shape[0], model.d_sift), dtype=np.int32)
    _basift_fused_kernel(stack, model.lut, model.columns(), acc)
    return acc[0] if patch.ndim == 2 else acc


def basift_extract(patch: np.ndarray, model: BasiftModel) -> np.ndarray:
    """BASIFT descriptor: :func:`basift_raw` followed by L2 normalization."""
    return l2_normalize(basift_raw(patch, model).astype(np.float64))


def onehot_design(active: np.ndarray, dim: int) -> scipy.sparse.csr_matrix:
    """Sparse ``(n, dim)`` 0/1 design matrix with the given active indices per row."""
    n, k = active.shape
    return scipy.sparse.csr_matrix(
        (np.ones(n * k), active.reshape(-1), np.arange(0, n * k + 1, k)), shape=(n, dim))


def train_basift_map(patches: np.ndarray, ridge: float = 1.0, trace_scaled: bool = True,
                     targets: np.ndarray | None = None, chunk: int = 1024):
    """Least-squares map from one-hot orientation codes to SIFT descriptors.

    Solves ``min_L sum ||sift(x) - L onehot(x)||^2 + r ||L||_F^2`` through the
    normal equations. With ``trace_scaled`` the penalty is
    ``r = ridge * trace(G) / dim`` where ``G`` is the one-hot Gram matrix.

    Returns ``(L, diagnostics)`` with ``L`` of shape ``(128, side*side*8)``.
    """
    patches = np.asarray(patches, dtype=np.float64)
    n, side = patches.shape[0], patches.shape[-1]
    dim = side * side * N_BINS
    if targets is None:
        targets = reference_sift(patches)
    targets = np.asarray(targets, dtype=np.float64)
    if n < 10 * targets.shape[1]:
        log.warning("only %d patches for a %d-dim descriptor; at least %d recommended", n, targets.shape[1], 10 * targets.shape[1])
    active = basift_active(patches)

    design = onehot_design(active, dim)
    rhs = np.asarray(design.T @ targets)
    gram = np.zeros((dim, dim), dtype=np.float32)
    for s in range(0, n, chunk):
        a = active[s:s + chunk]
        onehot = np.zeros((a.shape[0], dim), dtype=np.float32)
        np.put_along_axis(onehot, a, 1.0, axis=1)
        # counts stay below 2**24, so float32 accumulation is exact
        gram += onehot.T @ onehot
    del onehot
    gram = gram.astype(np.float64)
    penalty = ridge * (np.trace(gram) / dim if trace_scaled else 1.0)
    gram[np.diag_indices(dim)] += penalty
    try:
        factor = scipy.linalg.cho_factor(gram, overwrite_a=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"normal matrix is singular (ridge={ridge}); the one-hot design is rank deficient, use ridge > 0") from exc
    del gram
    lmap = scipy.linalg.cho_solve(factor, rhs, overwrite_b=True, check_finite=False).T
    del factor

    fitted = np.asarray(design @ lmap.T)
    tnorm = float(np.sum(targets**2))
    diagnostics = {
        "n_patches": n,
        "side": side,
        "ridge": ridge,
        "penalty": penalty,
        "train_residual": float(np.mean(np.sum((targets - fitted) ** 2, axis=1))),
        "train_relative_residual": float(np.sum((targets - fitted) ** 2) / tnorm) if tnorm > 0 else 0.0,
    }
    return lmap, diagnostics


def map_residual(lmap: np.ndarray, patches: np.ndarray, targets: np.ndarray | None = None) -> float:
    """Mean squared residual ``||sift(x) - L onehot(x)||^2`` over ``patches``."""
    if targets is None:
        targets = reference_sift(patches)
    active = basift_active(patches)
    fitted = np.asarray(onehot_design(active, lmap.shape[1]) @ lmap.T)
    return float(np.mean(np.sum((targets - fitted) ** 2, axis=1)))


def quantize_sign(lmap: np.ndarray, zero_band: float = 0.0) -> np.ndarray:
    """Entries with ``|value| <= zero_band`` become 0, the rest their sign (int8)."""
    lmap = np.asarray(lmap)
    q = np.sign(lmap).astype(np.int8)
    q[np.abs(lmap) <= zero_band] = 0
    return q


# -- corpus of natural-image patches -------------------------------------------

def sample_patches(images, n: int, side: int = 32, seed: int = 0, min_std: float = 0.0) -> np.ndarray:
    """Draw ``n`` random ``side x side`` crops uniformly over a list of grayscale images."""
    rng = np.random.default_rng(seed)
    images = [np.asarray(im, dtype=np.float64) for im in images if min(im.shape) >= side]
    if not images:
        raise ValueError(f"no image is at least {side} pixels on each side")
    out = np.empty((n, side, side))
    k = 0
    while k < n:
        im = images[rng.integers(len(images))]
        r = rng.integers(im.shape[0] - side + 1)
        c = rng.integers(im.shape[1] - side + 1)
        crop = im[r:r + side, c:c + side]
        if min_std and crop.std() < min_std:
            continue
        out[k] = crop
        k += 1
    return out


def builtin_natural_images() -> list[np.ndarray]:
    """Grayscale versions of the non-face sample images bundled with scikit-image."""
    from skimage import color, data

    names = ["camera", "coffee", "chelsea", "rocket", "coins", "moon", "brick",
             "grass", "gravel", "hubble_deep_field", "immunohistochemistry", "horse", "clock", "page"]
    out = []
    for name in names:
        im = getattr(data, name)()
        if im.ndim == 3:
            im = color.rgb2gray(im[..., :3])
        else:
            im = im.astype(np.float64) / (255.0 if im.dtype == np.uint8 else max(im.max(), 1))
        out.append(np.asarray(im, dtype=np.float64))
    return out


def train_basift(patches: np.ndarray | None = None, n_patches: int = 20000, ridge: float = 1.0, seed: int = 0,
                 smooth_sigma: float = 2.0, images=None) -> BasiftModel:
    """Learn and sign-quantize the BASIFT map.

    Patches are drawn from ``images`` (default: the bundled natural images)
    after the same Gaussian pre-smoothing the cascade applies to faces.
    """
    if patches is None:
        images = builtin_natural_images() if images is None else images
        images = [presmooth(im, smooth_sigma) for im in images]
        patches = sample_patches(images, n_patches, seed=seed)
    lmap, diag = train_basift_map(patches, ridge=ridge)
    diag.update(seed=seed, smooth_sigma=smooth_sigma)
    return BasiftModel(quantize_sign(lmap), side=patches.shape[-1], diagnostics=diag)


# -- per-shape feature vectors ------------------------------------------------

class SiftExtractor:
    kind = "sift"

    def __init__(self, side: int = 32):
        self.side = side

    def __call__(self, patches: np.ndarray) -> np.ndarray:
        return reference_sift(patches)

    @property
    def d_feature(self) -> int:
        return D_SIFT


class BasiftExtractor:
    kind = "basift"

    def __init__(self, model: BasiftModel):
        self.model = model
        self.side = model.side

    def __call__(self, patches: np.ndarray) -> np.ndarray:
        return basift_extract(patches, self.model)

    @property
    def d_feature(self) -> int:
        return self.model.d_sift


def presmooth(image: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur applied to whole images before descriptor extraction."""
    if sigma <= 0:
        return image
    return ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), sigma, mode="nearest")


def extract_shape_features(image: np.ndarray, shape: np.ndarray, extractor) -> np.ndarray:
    """Concatenated per-landmark descriptors in landmark order (length 128 * P)."""
    patches = extract_patches(image, np.asarray(shape, dtype=np.float64), extractor.side)
    return extractor(patches).reshape(-1)
