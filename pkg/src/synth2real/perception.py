"""Seeded random-feature stand-ins for perceptual distance, landmarks and class posteriors.

None of these are trained.  The feature extractor is a fixed stack of random
3x3 convolutions whose per-stage outputs are rescaled to unit RMS on a
calibration set, which is enough to make distances respond to structure
(edges, blobs, layout) rather than just raw pixel values.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import imageops

DEFAULT_WIDTHS = (8, 16, 32)
N_LANDMARKS = 68


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _calibration_images(seed: int, n: int = 16, size: int = 32) -> np.ndarray:
    """Mix of white noise, smooth noise and hard-edged blocks."""
    rng = _rng(seed, 0xCA11B)
    out = np.empty((n, size, size, 3))
    blur = imageops.blur_matrix(size, 9, 2.0)
    for i in range(n):
        kind = i % 3
        if kind == 0:
            img = rng.random((size, size, 3))
        elif kind == 1:
            img = imageops._apply(rng.random((size, size, 3)), blur, blur)
            img = (img - img.min()) / max(img.max() - img.min(), 1e-12)
        else:
            img = np.broadcast_to(rng.random(3), (size, size, 3)).copy()
            for _ in range(4):
                y0, x0 = rng.integers(0, size - 4, 2)
                h, w = rng.integers(3, size // 2, 2)
                img[y0:y0 + h, x0:x0 + w] = rng.random(3)
        out[i] = img
    return out


class FeatureExtractor:
    """Three stride-2 stages of random conv + leaky ReLU, unit-RMS per stage.

    Stage ``s`` computes ``down2(leaky(conv3x3(x)))``; the stage output is
    divided by a constant measured once on seeded calibration images so
    every stage contributes on a comparable scale.
    """

    def __init__(self, seed: int = 0, widths: tuple[int, ...] = DEFAULT_WIDTHS,
                 in_channels: int = 3):
        if not widths or any(w < 1 for w in widths):
            raise ValueError("widths must be a non-empty tuple of positive ints")
        self.seed = int(seed)
        self.widths = tuple(int(w) for w in widths)
        rng = _rng(self.seed, 0xFEA7)
        kernels = []
        c = in_channels
        for w in self.widths:
            k = rng.standard_normal((3, 3, c, w)) * np.sqrt(2.0 / (9 * c))
            k.flags.writeable = False
            kernels.append(k)
            c = w
        self._kernels = tuple(kernels)
        self._scales = np.ones(len(self.widths))
        calib = _calibration_images(self.seed)
        feats = self._raw_features(calib)
        self._scales = np.array([np.sqrt(np.mean(f.data ** 2)) + 1e-12 for f in feats])
        self._scales.flags.writeable = False

    @property
    def kernels(self) -> tuple[np.ndarray, ...]:
        return self._kernels

    @property
    def scales(self) -> np.ndarray:
        return self._scales

    @property
    def n_features(self) -> int:
        """Length of the pooled embedding."""
        return int(sum(self.widths))

    def describe(self) -> dict:
        return {"seed": self.seed, "widths": list(self.widths)}

    def _raw_features(self, x):
        single = x.ndim == 3
        if single:
            x = ad.reshape(x, (1,) + tuple(x.shape))
        out = []
        for k in self._kernels:
            x = ad.leaky_relu(ad.conv2d(x, k))
            h, w = x.shape[1:3]
            if h >= 2 and w >= 2:
                x = imageops.area_downsample(x, 2)
            x = ad.Tensor(x) if not isinstance(x, ad.Tensor) else x
            out.append(x)
        if single:
            out = [ad.reshape(f, f.shape[1:]) for f in out]
        return out

    def features(self, img) -> list:
        """Per-stage normalised feature maps (Tensors), ``(..., h, w, C)``."""
        x = img if isinstance(img, ad.Tensor) else ad.Tensor(img)
        if x.ndim not in (3, 4):
            raise ValueError(f"expected (H, W, C) or (N, H, W, C), got {x.shape}")
        return [ad.mul(f, 1.0 / s) for f, s in zip(self._raw_features(x), self._scales)]

    def embed(self, images) -> np.ndarray:
        """Globally pooled features, ``(N, n_features)``."""
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        feats = self.features(arr)
        return np.concatenate([f.data.mean(axis=(1, 2)) for f in feats], axis=1)


@lru_cache(maxsize=8)
def default_extractor(seed: int = 0, widths: tuple[int, ...] = DEFAULT_WIDTHS) -> FeatureExtractor:
    return FeatureExtractor(seed, widths)


def perceptual_distance(a, b, extractor: FeatureExtractor | None = None):
    """Sum over stages of the mean squared feature difference.

    Images are ``(H, W, 3)``.  Returns a Tensor when either input is tracked,
    otherwise a float.
    """
    ext = default_extractor() if extractor is None else extractor
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    tracked = isinstance(a, ad.Tensor) and a.tape is not None or \
        isinstance(b, ad.Tensor) and b.tape is not None
    total = None
    for fa, fb in zip(ext.features(a), ext.features(b)):
        d = ad.sub(fa, fb)
        term = ad.mean(ad.mul(d, d))
        total = term if total is None else ad.add(total, term)
    return total if tracked else total.item()


def perceptual_distances(a: np.ndarray, b: np.ndarray,
                         extractor: FeatureExtractor | None = None) -> np.ndarray:
    """Batched :func:`perceptual_distance` over ``(N, H, W, 3)``; ``b`` may be a single image."""
    ext = default_extractor() if extractor is None else extractor
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if b.ndim == 3:
        b = np.broadcast_to(b, a.shape)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    total = np.zeros(len(a))
    for fa, fb in zip(ext.features(a), ext.features(b)):
        total += np.mean((fa.data - fb.data) ** 2, axis=(1, 2, 3))
    return total


# --- landmarks ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LandmarkSet:
    """``K`` landmark points ``(x, y)`` in pixel units."""

    points: np.ndarray

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError("landmark points must be (K, 2)")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def x(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.points[:, 1]


def _arc(cx, cy, rx, ry, t0, t1, n):
    t = np.linspace(t0, t1, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


@lru_cache(maxsize=1)
def template_unit() -> np.ndarray:
    """68 reference points in ``[0, 1]^2`` laid out like a frontal face.

    Ordering follows the common 68-point convention: jaw (17), brows (5+5),
    nose bridge (4), nostrils (5), eyes (6+6), outer lip (12), inner lip (8).
    """
    jaw = _arc(0.5, 0.45, 0.34, 0.42, np.pi * 0.98, np.pi * 0.02, 17)
    jaw[:, 1] = 0.45 + np.abs(jaw[:, 1] - 0.45)
    parts = [jaw]
    for cx in (0.33, 0.67):
        parts.append(_arc(cx, 0.36, 0.11, 0.04, np.pi * 1.1, np.pi * 1.9, 5))
    parts.append(np.stack([np.full(4, 0.5), np.linspace(0.42, 0.58, 4)], axis=1))
    parts.append(np.stack([np.linspace(0.42, 0.58, 5), 0.62 - 0.02 * np.cos(np.linspace(-1, 1, 5))], axis=1))
    for cx in (0.34, 0.66):
        t = np.pi + np.linspace(0.0, 2.0 * np.pi, 6, endpoint=False)
        parts.append(np.stack([cx + 0.07 * np.cos(t), 0.44 + 0.03 * np.sin(t)], axis=1))
    t = np.pi + np.linspace(0.0, 2.0 * np.pi, 12, endpoint=False)
    parts.append(np.stack([0.5 + 0.15 * np.cos(t), 0.74 + 0.06 * np.sin(t)], axis=1))
    t = np.pi + np.linspace(0.0, 2.0 * np.pi, 8, endpoint=False)
    parts.append(np.stack([0.5 + 0.09 * np.cos(t), 0.74 + 0.025 * np.sin(t)], axis=1))
    pts = np.concatenate(parts)
    assert len(pts) == N_LANDMARKS
    pts.flags.writeable = False
    return pts


def template_points(height: int, width: int, k: int = N_LANDMARKS) -> np.ndarray:
    """Template lattice in pixel coordinates (pixel centres at integers)."""
    base = template_unit()
    if k != N_LANDMARKS:
        idx = np.round(np.linspace(0, N_LANDMARKS - 1, k)).astype(int)
        base = base[idx]
    return base * [width - 1, height - 1]


def edge_magnitude(img: np.ndarray) -> np.ndarray:
    """Gradient magnitude of luminance (central differences, replicated border)."""
    img = np.asarray(img, dtype=np.float64)
    y = img @ imageops.RGB_TO_YUV[0] if img.ndim == 3 else img
    p = np.pad(y, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return np.hypot(gx, gy)


def _summed_area(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    out[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    return out


def extract_landmarks(img: np.ndarray, k: int = N_LANDMARKS, window: int | None = None,
                      iterations: int = 2) -> LandmarkSet:
    """Windowed edge-energy centroids around a globally aligned template.

    The template is first shifted so its centre sits on the centroid of all
    edge energy; each point then moves to the energy centroid of a square
    window around it (``iterations`` times).  Windows with no energy keep
    their position, so a flat image yields the template itself.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    energy = edge_magnitude(img)
    tmpl = template_points(h, w, k)
    total = energy.sum()
    pts = tmpl.copy()
    half = max(1, int(round(0.06 * max(h, w)))) if window is None else int(window) // 2
    if total > 0:
        ys, xs = np.mgrid[0:h, 0:w]
        pts = pts + [(energy * xs).sum() / total - (w - 1) / 2.0,
                     (energy * ys).sum() / total - (h - 1) / 2.0]
        # summed-area tables of energy and its first moments: O(1) per window
        tables = [_summed_area(energy), _summed_area(energy * xs), _summed_area(energy * ys)]
        floor = 1e-12 * total
        for _ in range(iterations):
            cx, cy = np.round(pts[:, 0]).astype(int), np.round(pts[:, 1]).astype(int)
            xa, xb = np.clip(cx - half, 0, w), np.clip(cx + half + 1, 0, w)
            ya, yb = np.clip(cy - half, 0, h), np.clip(cy + half + 1, 0, h)
            mass, mx, my = (t[yb, xb] - t[ya, xb] - t[yb, xa] + t[ya, xa] for t in tables)
            # empty or out-of-image windows keep their point
            ok = (xa < xb) & (ya < yb) & (mass > floor)
            safe = np.where(ok, mass, 1.0)
            pts = np.where(ok[:, None], np.stack([mx / safe, my / safe], axis=1), pts)
    pts = np.clip(pts, 0.0, [w - 1, h - 1])
    return LandmarkSet(pts)


# --- class posteriors ----------------------------------------------------------------------

class LabelModel:
    """Softmax over a fixed random linear readout of pooled features."""

    def __init__(self, n_classes: int = 10, extractor: FeatureExtractor | None = None,
                 seed: int = 0, temperature: float = 1.0):
        if n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        self.extractor = default_extractor() if extractor is None else extractor
        self.n_classes = int(n_classes)
        self.seed = int(seed)
        rng = _rng(seed, 0x1ABE1)
        d = self.extractor.n_features
        self.readout = rng.standard_normal((d, n_classes)) * (temperature / np.sqrt(d))
        self.readout.flags.writeable = False
        # standardise pooled features so logits are centred across typical inputs
        calib = self.extractor.embed(_calibration_images(self.extractor.seed))
        self.center = calib.mean(axis=0)
        self.spread = calib.std(axis=0) + 1e-12

    def probabilities(self, images) -> np.ndarray:
        """``(N, C)`` rows summing to one."""
        feats = self.extractor.embed(images)
        logits = ((feats - self.center) / self.spread) @ self.readout
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)


def class_probabilities(img: np.ndarray, model: LabelModel | None = None) -> np.ndarray:
    model = LabelModel() if model is None else model
    return model.probabilities(np.asarray(img)[None])[0]
