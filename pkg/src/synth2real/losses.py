"""Masked, low-pass filtered image objectives used by the adaptation stages.

All three losses compare a target ``I_s`` with a generated ``I_g`` under a
soft face mask ``I_a``.  The mask is applied first; the sampling and
refinement losses then low-pass and downsample both images to
``eval_resolution`` before comparing them.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import imageops
from .perception import FeatureExtractor, default_extractor, extract_landmarks, perceptual_distance, \
    perceptual_distances


@dataclass(frozen=True)
class LossWeights:
    lum: float = 0.1
    col: float = 0.01
    landm: float = 1e-5
    eval_resolution: int = 16

    def __post_init__(self):
        if min(self.lum, self.col, self.landm) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.eval_resolution < 1:
            raise ValueError("eval_resolution must be positive")

    def without_landmarks(self) -> "LossWeights":
        return LossWeights(self.lum, self.col, 0.0, self.eval_resolution)

    def to_dict(self) -> dict:
        return asdict(self)


def _check(I_s, I_a, I_g) -> None:
    if tuple(I_s.shape) != tuple(I_g.shape):
        raise ValueError(f"dimension mismatch: target {tuple(I_s.shape)} vs generated {tuple(I_g.shape)}")
    if tuple(I_a.shape) != tuple(I_s.shape[-3:-1]):
        raise ValueError(f"mask {tuple(I_a.shape)} does not match image {tuple(I_s.shape)}")


def mask_image(img, alpha: np.ndarray):
    a = np.asarray(alpha, dtype=np.float64)[..., None]
    return ad.mul(img, a) if isinstance(img, ad.Tensor) else np.asarray(img) * a


def reduce_image(img, alpha: np.ndarray, resolution: int):
    """``r(I * I_a)``: mask, then Gaussian low-pass and area-resample."""
    masked = mask_image(img, alpha)
    h, w = img.shape[-3:-1]
    if (h, w) == (resolution, resolution):
        return masked
    return imageops.gaussian_resample(masked, (resolution, resolution))


def landmark_error(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over landmarks of the squared point distance (pixels^2)."""
    pa = extract_landmarks(np.asarray(a)).points
    pb = extract_landmarks(np.asarray(b)).points
    return float(np.mean(np.sum((pa - pb) ** 2, axis=1)))


def _l1(x, y):
    return ad.mean(ad.absolute(ad.sub(x, y)))


def loss_terms(I_s, I_a, I_g, weights: LossWeights, extractor: FeatureExtractor | None = None,
               landmarks: bool = True) -> dict:
    """Unweighted terms of the sampling objective (Tensors where tracked)."""
    _check(I_s, I_a, I_g)
    rs = reduce_image(np.asarray(I_s), I_a, weights.eval_resolution)
    rg = reduce_image(I_g, I_a, weights.eval_resolution)
    terms = {
        "perceptual": perceptual_distance(rg, rs, extractor),
        "lum": _l1(imageops.luminance(rg), imageops.luminance(rs)),
        "col": _l1(imageops.chroma(rg), imageops.chroma(rs)),
    }
    if landmarks:
        gen = rg.data if isinstance(rg, ad.Tensor) else rg
        terms["landm"] = landmark_error(rs, gen)
    if not (isinstance(I_g, ad.Tensor) and I_g.tape is not None):
        terms = {k: float(v.data) if isinstance(v, ad.Tensor) else float(v) for k, v in terms.items()}
    return terms


def _combine(terms: dict, weights: LossWeights, with_landmarks: bool):
    if not any(isinstance(v, ad.Tensor) for v in terms.values()):
        total = terms["perceptual"] + weights.lum * terms["lum"] + weights.col * terms["col"]
        if with_landmarks and weights.landm > 0:
            total += weights.landm * terms["landm"]
        return total
    total = ad.add(ad.add(terms["perceptual"], ad.mul(terms["lum"], weights.lum)),
                   ad.mul(terms["col"], weights.col))
    if with_landmarks and weights.landm > 0:
        # the landmark term is a constant under differentiation
        total = ad.add(total, weights.landm * terms["landm"])
    return total


def _finish(total, I_g):
    if isinstance(I_g, ad.Tensor) and I_g.tape is not None:
        return total
    return float(total.data) if isinstance(total, ad.Tensor) else float(total)


def sampling_loss(I_s, I_a, I_g, weights: LossWeights = LossWeights(),
                  extractor: FeatureExtractor | None = None):
    """Perceptual + luminance L1 + chroma L1 + landmark squared error."""
    terms = loss_terms(I_s, I_a, I_g, weights, extractor, landmarks=weights.landm > 0)
    return _finish(_combine(terms, weights, True), I_g)


def csanns_loss(I_s, I_a, I_g, weights: LossWeights = LossWeights(),
                extractor: FeatureExtractor | None = None):
    """The sampling objective without its landmark term; fully differentiable."""
    terms = loss_terms(I_s, I_a, I_g, weights, extractor, landmarks=False)
    return _finish(_combine(terms, weights, False), I_g)


def fit_loss(I_s, I_a, I_g, extractor: FeatureExtractor | None = None):
    """Perceptual distance between the masked full-resolution images."""
    _check(I_s, I_a, I_g)
    d = perceptual_distance(mask_image(I_g, I_a), mask_image(np.asarray(I_s), I_a), extractor)
    return d


def sampling_losses(I_s: np.ndarray, I_a: np.ndarray, I_g: np.ndarray, weights: LossWeights = LossWeights(),
                    extractor: FeatureExtractor | None = None, landmarks: bool = True) -> np.ndarray:
    """Vectorised sampling objective over a batch ``(N, H, W, 3)`` of generated images."""
    I_g = np.asarray(I_g, dtype=np.float64)
    if I_g.ndim != 4:
        raise ValueError("expected a batch of images")
    _check(np.asarray(I_s), I_a, I_g[0])
    ext = default_extractor() if extractor is None else extractor
    res = weights.eval_resolution
    rs = reduce_image(np.asarray(I_s, dtype=np.float64), I_a, res)
    rg = reduce_image(I_g, I_a, res)
    perc = perceptual_distances(rg, rs, ext)
    lum = np.mean(np.abs(imageops.luminance(rg) - imageops.luminance(rs)), axis=(1, 2, 3))
    col = np.mean(np.abs(imageops.chroma(rg) - imageops.chroma(rs)), axis=(1, 2, 3))
    total = perc + weights.lum * lum + weights.col * col
    if landmarks and weights.landm > 0:
        ref = extract_landmarks(rs).points
        lm = np.array([np.mean(np.sum((extract_landmarks(g).points - ref) ** 2, axis=1)) for g in rg])
        total = total + weights.landm * lm
    return total
