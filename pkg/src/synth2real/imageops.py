"""Deterministic image mathematics.

Images are float arrays laid out ``(..., H, W, C)`` with RGB values in [0, 1].
Functions that sit inside a loss (resampling, colour transforms) accept and
return :class:`~synth2real.autodiff.Tensor` so gradients flow through them;
everything else works on plain numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad

# BT.601 analogue YUV.
_LUMA = np.array([0.299, 0.587, 0.114])
RGB_TO_YUV = np.stack([
    _LUMA,
    0.492 * (np.array([0.0, 0.0, 1.0]) - _LUMA),
    0.877 * (np.array([1.0, 0.0, 0.0]) - _LUMA),
])
YUV_TO_RGB = np.linalg.inv(RGB_TO_YUV)

FALLOFF_EXPONENT = 10


@dataclass(frozen=True)
class MaskSet:
    """A synthetic render with its face and hair alpha masks (all ``H x W``)."""

    render: np.ndarray
    face_alpha: np.ndarray
    hair_alpha: np.ndarray

    def __post_init__(self):
        h, w = self.render.shape[:2]
        for name in ("face_alpha", "hair_alpha"):
            a = getattr(self, name)
            if a.shape != (h, w):
                raise ValueError(f"{name} has shape {a.shape}, render is {h}x{w}")
            if a.min() < 0.0 or a.max() > 1.0:
                raise ValueError(f"{name} outside [0, 1]")

    @property
    def size(self) -> tuple[int, int]:
        return self.render.shape[:2]


# --- filtered resampling ----------------------------------------------------------

def gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


@lru_cache(maxsize=64)
def blur_matrix(n: int, size: int, sigma: float) -> np.ndarray:
    """``n x n`` Gaussian filter with clamp-to-edge borders (rows sum to one)."""
    k = gaussian_kernel1d(size, sigma)
    half = size // 2
    m = np.zeros((n, n))
    for i in range(n):
        for t, kt in enumerate(k):
            m[i, min(max(i + t - half, 0), n - 1)] += kt
    m.flags.writeable = False
    return m


@lru_cache(maxsize=64)
def area_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Box-filter resampling from ``n_src`` to ``n_dst <= n_src`` samples."""
    if n_dst > n_src:
        raise ValueError(f"area resampling cannot upsample ({n_src} -> {n_dst})")
    scale = n_src / n_dst
    m = np.zeros((n_dst, n_src))
    for i in range(n_dst):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_src)):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    m /= m.sum(axis=1, keepdims=True)
    m.flags.writeable = False
    return m


def default_sigma(n_src: int, n_dst: int) -> float:
    """0.15 at a 4x reduction, scaled linearly with the reduction factor."""
    return 0.15 * (n_src / n_dst) / 4.0


@lru_cache(maxsize=64)
def _resample_pair(src: tuple, dst: tuple, kernel_size: int, sigma: float | None):
    mats = []
    for n_src, n_dst in zip(src, dst):
        s = default_sigma(n_src, n_dst) if sigma is None else sigma
        mats.append(area_matrix(n_src, n_dst) @ blur_matrix(n_src, kernel_size, s))
    return tuple(mats)


def gaussian_resample(img, target: tuple[int, int], kernel_size: int = 7,
                      sigma: float | None = None):
    """Gaussian low-pass then area resampling to ``target`` (differentiable).

    Accepts a Tensor or array of layout ``(..., H, W, C)``; returns the same kind.
    """
    src = tuple(img.shape[-3:-1])
    target = tuple(int(t) for t in target)
    if target[0] > src[0] or target[1] > src[1]:
        raise ValueError(f"gaussian_resample cannot upsample {src} -> {target}")
    rows, cols = _resample_pair(src, target, kernel_size, sigma)
    out = ad.resample(img, rows, cols)
    return out if isinstance(img, ad.Tensor) else out.data


def area_downsample(img, factor: int = 2):
    h, w = img.shape[-3:-1]
    out = ad.resample(img, area_matrix(h, h // factor), area_matrix(w, w // factor))
    return out if isinstance(img, ad.Tensor) else out.data


@lru_cache(maxsize=32)
def _nearest_up(n: int, factor: int) -> np.ndarray:
    m = np.zeros((n * factor, n))
    m[np.arange(n * factor), np.arange(n * factor) // factor] = 1.0
    m.flags.writeable = False
    return m


def upsample_nearest(img, factor: int = 2):
    h, w = img.shape[-3:-1]
    out = ad.resample(img, _nearest_up(h, factor), _nearest_up(w, factor))
    return out if isinstance(img, ad.Tensor) else out.data


# --- colour ----------------------------------------------------------------------

def _check_rgb(img):
    if img.shape[-1] != 3:
        raise ValueError(f"expected 3 RGB channels, got {img.shape[-1]}")


def to_yuv(img):
    _check_rgb(img)
    out = ad.color_transform(img, RGB_TO_YUV)
    return out if isinstance(img, ad.Tensor) else out.data


def from_yuv(img):
    _check_rgb(img)
    out = ad.color_transform(img, YUV_TO_RGB)
    return out if isinstance(img, ad.Tensor) else out.data


def luminance(img):
    """The Y channel, shape ``(..., H, W, 1)``."""
    _check_rgb(img)
    out = ad.color_transform(img, RGB_TO_YUV[:1])
    return out if isinstance(img, ad.Tensor) else out.data


def chroma(img):
    """The U and V channels, shape ``(..., H, W, 2)``."""
    _check_rgb(img)
    out = ad.color_transform(img, RGB_TO_YUV[1:])
    return out if isinstance(img, ad.Tensor) else out.data


# --- distance transform and falloff ----------------------------------------------------

_FAR = 1e20


def _edt_1d(f: list) -> list:
    """Lower envelope of parabolas (Felzenszwalb & Huttenlocher); squared distances."""
    n = len(f)
    v = [0] * n
    z = [0.0] * (n + 1)
    k = 0
    z[0], z[1] = -np.inf, np.inf
    for q in range(1, n):
        fq = f[q] + q * q
        p = v[k]
        s = (fq - (f[p] + p * p)) / (2 * (q - p))
        while s <= z[k]:
            k -= 1
            p = v[k]
            s = (fq - (f[p] + p * p)) / (2 * (q - p))
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    d = [0.0] * n
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        d[q] = (q - p) * (q - p) + f[p]
    return d


def squared_distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance to the nearest nonzero pixel (two 1-D passes)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("distance transform of an empty mask")
    f = np.where(mask, 0.0, _FAR)
    cols = np.array([_edt_1d(col) for col in f.T.tolist()]).T
    return np.array([_edt_1d(row) for row in cols.tolist()])


def euclidean_distance_transform(mask: np.ndarray) -> np.ndarray:
    return np.sqrt(squared_distance_transform(mask))


def build_falloff_mask(face_mask: np.ndarray, radius: float) -> np.ndarray:
    """Face alpha: 1 inside the face, ``(1 - min(d, R)/R)**10`` outside it."""
    if radius <= 0:
        raise ValueError("falloff radius must be positive")
    d = euclidean_distance_transform(face_mask)
    return (1.0 - np.minimum(d, radius) / radius) ** FALLOFF_EXPONENT


def default_falloff_radius(width: int) -> float:
    return 0.1 * width


# --- Laplacian pyramid ------------------------------------------------------------------

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@lru_cache(maxsize=64)
def _binomial_matrix(n: int) -> np.ndarray:
    m = np.zeros((n, n))
    for i in range(n):
        for t, kt in enumerate(_BINOMIAL5):
            j = i + t - 2
            if n > 1:
                # reflect without repeating the edge sample
                period = 2 * (n - 1)
                j = j % period
                j = period - j if j >= n else j
            else:
                j = 0
            m[i, j] += kt
    m.flags.writeable = False
    return m


@lru_cache(maxsize=64)
def _reduce_matrix(n: int) -> np.ndarray:
    return _binomial_matrix(n)[::2]


@lru_cache(maxsize=64)
def _expand_matrix(n_coarse: int, n_fine: int) -> np.ndarray:
    up = np.zeros((n_fine, n_coarse))
    up[np.arange(0, n_fine, 2), np.arange(n_coarse)] = 2.0
    return _binomial_matrix(n_fine) @ up


def _apply(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return ad.resample(img, rows, cols).data


def _as_hwc(img: np.ndarray) -> tuple[np.ndarray, bool]:
    img = np.asarray(img, dtype=np.float64)
    return (img[..., None], True) if img.ndim == 2 else (img, False)


def gaussian_pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    img, _ = _as_hwc(img)
    pyr = [img]
    for _ in range(levels - 1):
        h, w = pyr[-1].shape[:2]
        pyr.append(_apply(pyr[-1], _reduce_matrix(h), _reduce_matrix(w)))
    return pyr


def _expand(coarse: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    return _apply(coarse, _expand_matrix(coarse.shape[0], shape[0]),
                  _expand_matrix(coarse.shape[1], shape[1]))


def laplacian_pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    if levels < 1:
        raise ValueError("levels must be >= 1")
    g = gaussian_pyramid(img, levels)
    lap = [g[i] - _expand(g[i + 1], g[i].shape[:2]) for i in range(levels - 1)]
    lap.append(g[-1])
    return lap


def reconstruct_laplacian(pyr: list[np.ndarray]) -> np.ndarray:
    img = pyr[-1]
    for band in reversed(pyr[:-1]):
        img = band + _expand(img, band.shape[:2])
    return img


def max_pyramid_levels(h: int, w: int) -> int:
    return max(1, int(np.floor(np.log2(min(h, w)))) - 1)


def laplacian_composite(fg: np.ndarray, bg: np.ndarray, alpha: np.ndarray,
                        levels: int = 5) -> np.ndarray:
    """Blend two images band by band, weighting with the Gaussian pyramid of ``alpha``."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    fg, squeeze = _as_hwc(fg)
    bg, _ = _as_hwc(bg)
    if fg.shape != bg.shape or alpha.shape[:2] != fg.shape[:2]:
        raise ValueError(f"composite dimension mismatch: {fg.shape}, {bg.shape}, {alpha.shape}")
    levels = min(levels, max_pyramid_levels(*fg.shape[:2]))
    lf = laplacian_pyramid(fg, levels)
    lb = laplacian_pyramid(bg, levels)
    ga = gaussian_pyramid(alpha, levels)
    blended = [a * f + (1.0 - a) * b for a, f, b in zip(ga, lf, lb)]
    out = reconstruct_laplacian(blended)
    return out[..., 0] if squeeze else out


# --- SSIM -------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _valid_filter(n: int, size: int, sigma: float) -> np.ndarray:
    k = gaussian_kernel1d(size, sigma)
    m = np.zeros((n - size + 1, n))
    for i in range(n - size + 1):
        m[i, i:i + size] = k
    return m


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, window: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with a Gaussian window, averaged over channels."""
    a, _ = _as_hwc(a)
    b, _ = _as_hwc(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim dimension mismatch: {a.shape} vs {b.shape}")
    h, w = a.shape[:2]
    win = min(window, h, w)
    if win % 2 == 0:
        win -= 1
    rows, cols = _valid_filter(h, win, sigma), _valid_filter(w, win, sigma)

    def filt(x):
        return _apply(x, rows, cols)

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def resize_area(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Area resize for evaluation; upsamples by nearest replication when needed."""
    img, squeeze = _as_hwc(img)
    h, w = img.shape[:2]
    mats = []
    for n, m in ((h, size[0]), (w, size[1])):
        if m <= n:
            mats.append(area_matrix(n, m))
        else:
            mats.append(np.eye(n)[np.minimum((np.arange(m) * n) // m, n - 1)])
    out = _apply(img, *mats)
    return out[..., 0] if squeeze else out
