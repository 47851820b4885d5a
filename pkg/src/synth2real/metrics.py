"""Distribution and alignment metrics: Fréchet distance, inception-style score, landmark errors."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .perception import FeatureExtractor, LabelModel, LandmarkSet, default_extractor

CSV_FIELDS = ("metric", "crop", "value", "n", "seed")


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        if self.cov.shape != (len(self.mean), len(self.mean)):
            raise ValueError("covariance shape does not match mean")


def stats_from_features(feats: np.ndarray) -> GaussianStats:
    """Unbiased mean and covariance of ``(N, d)`` feature rows."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or len(feats) < 2:
        raise ValueError("need at least 2 feature vectors")
    mu = feats.mean(axis=0)
    centered = feats - mu
    cov = centered.T @ centered / (len(feats) - 1)
    return GaussianStats(mu, 0.5 * (cov + cov.T), len(feats))


def feature_stats(images, extractor: FeatureExtractor | None = None) -> GaussianStats:
    images = list(images)
    if len(images) < 2:
        raise ValueError("feature_stats needs at least 2 images")
    ext = default_extractor() if extractor is None else extractor
    return stats_from_features(ext.embed(np.stack(images)))


def _sqrtm_psd(m: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    if vals.min(initial=0.0) < -1e-6:
        raise ValueError(f"{what} is not positive semi-definite (eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``."""
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"feature dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    ra = _sqrtm_psd(a.cov, "first covariance")
    inner = ra @ b.cov @ ra
    cross = _sqrtm_psd(inner, "covariance product")
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross)
    return float(max(value, 0.0))


def inception_score(probs: np.ndarray, splits: int = 1) -> tuple[float, float]:
    """Mean and std over splits of ``exp(mean_x KL(p(y|x) || p(y)))``."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or len(probs) == 0:
        raise ValueError("need a non-empty (N, C) probability matrix")
    if splits < 1 or len(probs) < splits:
        raise ValueError(f"cannot make {splits} splits from {len(probs)} images")
    scores = []
    for part in np.array_split(probs, splits):
        n = len(part)
        # p(y|x) / p(y) as p * N / column sum, with the sum pivoted on the column
        # minimum: identical rows then give ratio 1 and one-hot rows give C exactly
        lo = part.min(axis=0)
        total = n * lo + (part - lo).sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(part > 0, part * n / total, 1.0)
        per_image = np.prod(ratio ** part, axis=1)  # exp(KL(p(y|x) || p(y)))
        # geometric mean pivoted on the first image
        gm = per_image[0] * np.exp(np.mean(np.log(per_image / per_image[0])))
        scores.append(float(np.clip(gm, 1.0, probs.shape[1])))
    return float(np.mean(scores)), float(np.std(scores))


def image_inception_score(images, model: LabelModel | None = None, splits: int = 1) -> tuple[float, float]:
    model = LabelModel() if model is None else model
    return inception_score(model.probabilities(np.stack(list(images))), splits)


def landmark_error_stats(pairs) -> dict:
    """Per-landmark and pooled mean/median/std of ``|dx|`` and ``|dy|``."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no landmark pairs")
    k = len(pairs[0][0])
    for a, b in pairs:
        if len(a) != k or len(b) != k:
            raise ValueError("landmark counts differ between sets")
    diffs = np.stack([np.abs(_points(a) - _points(b)) for a, b in pairs])  # (N, K, 2)
    out = {}
    for axis, name in ((0, "x"), (1, "y")):
        d = diffs[..., axis]
        out[name] = {
            "mean": d.mean(axis=0), "median": np.median(d, axis=0), "std": d.std(axis=0),
            "pooled_mean": float(d.mean()), "pooled_median": float(np.median(d)),
            "pooled_std": float(d.std()),
        }
    return out


def _points(s) -> np.ndarray:
    return s.points if isinstance(s, LandmarkSet) else np.asarray(s, dtype=np.float64)


def crop(img: np.ndarray, box) -> np.ndarray:
    """``box`` is ``(top, left, bottom, right)`` in fractions of the image size."""
    h, w = img.shape[:2]
    t, l, b, r = box
    y0, y1 = int(round(t * h)), int(round(b * h))
    x0, x1 = int(round(l * w)), int(round(r * w))
    if y1 <= y0 or x1 <= x0:
        raise ValueError(f"empty crop {box}")
    return img[y0:y1, x0:x1]


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in CSV_FIELDS})


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{**r, "value": float(r["value"]), "n": int(r["n"]), "seed": int(r["seed"])}
                for r in csv.DictReader(fh)]
