"""A toy style-based generator and the latent-space steering machinery around it.

The decoder follows the usual style-based layout: a learned 4x4 constant is
repeatedly upsampled and convolved, and every layer's output channels are
scaled by an affine function of one row of the ``L x D`` latent code.  A
two-layer mapping network turns Gaussian ``z`` into ``w``.

"Pretraining" fits the decoder (never the mapping network) so that prior
samples decode to photo-style renders whose pose, lighting, expression and
hair are linear functions of ``w`` along planted directions.  The planted
directions double as ground truth for control-vector recovery.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from . import imageops
from .synthrender import ATTRIBUTE_RANGES, ATTRIBUTES, SceneParams, render_image

log = logging.getLogger(__name__)

FORMAT_NAME = "synth2real-generator"
FORMAT_VERSION = 1
BASIS_FORMAT = "synth2real-basis"


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def channels_at(res: int) -> int:
    return int(min(32, max(8, 768 // res)))


def layer_plan(n_layers: int, resolution: int) -> list[tuple[str, int, int]]:
    """``(kind, resolution, latent row)`` for every modulated layer."""
    stages = int(round(np.log2(resolution / 4)))
    if 4 * 2 ** stages != resolution or stages < 0:
        raise ValueError(f"resolution must be 4 * 2**k, got {resolution}")
    if n_layers < 2:
        raise ValueError("need at least two latent rows")
    extra = max(0, n_layers - (stages + 2))
    per_stage = [1 + extra // max(stages, 1) + (1 if s < extra % max(stages, 1) else 0)
                 for s in range(stages)]
    kinds = [("const", 4)]
    for s in range(stages):
        res = 8 * 2 ** s
        kinds.append(("up", res))
        kinds.extend([("conv", res)] * (per_stage[s] - 1))
    kinds.append(("rgb", resolution))
    m = len(kinds)
    if m == n_layers:
        rows = list(range(m))
    else:
        rows = [int(round(j * (n_layers - 1) / (m - 1))) for j in range(m)]
    return [(kind, res, row) for (kind, res), row in zip(kinds, rows)]


@dataclass(frozen=True)
class GeneratorSpec:
    """Immutable generator definition: shapes, seed, and parameter arrays."""

    n_layers: int
    style_dim: int
    resolution: int
    seed: int
    params: dict = field(repr=False)
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for arr in self.params.values():
            arr.flags.writeable = False

    @property
    def plan(self) -> list[tuple[str, int, int]]:
        return layer_plan(self.n_layers, self.resolution)

    @property
    def latent_shape(self) -> tuple[int, int]:
        return (self.n_layers, self.style_dim)

    @property
    def n_attributes(self) -> int:
        return self.params["attr.readout"].shape[1]

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return ATTRIBUTES[: self.n_attributes]

    @property
    def planted_directions(self) -> np.ndarray:
        """Row-replicated latent directions that move one planted attribute each."""
        d = self.params["attr.dirs"]
        return np.repeat(d[:, None, :], self.n_layers, axis=1)

    def with_params(self, params: dict, **meta) -> "GeneratorSpec":
        merged = dict(self.params)
        merged.update({k: np.array(v, dtype=np.float64) for k, v in params.items()})
        return GeneratorSpec(self.n_layers, self.style_dim, self.resolution, self.seed,
                             merged, {**self.meta, **meta})


# --- construction -------------------------------------------------------------------

def _map_raw(params: dict, z: np.ndarray) -> np.ndarray:
    h = z @ params["map.W1"] + params["map.b1"]
    h = np.where(h > 0, h, 0.2 * h)
    h = h @ params["map.W2"] + params["map.b2"]
    return np.where(h > 0, h, 0.2 * h)


def init_generator(seed: int, n_layers: int = 6, style_dim: int = 32, resolution: int = 64,
                   n_attributes: int | None = None) -> GeneratorSpec:
    """Randomly initialised generator with calibrated mapping and planted attributes."""
    rng = _rng(seed, 1)
    D = style_dim
    p: dict[str, np.ndarray] = {
        "map.W1": rng.standard_normal((D, D)) / np.sqrt(D),
        "map.b1": 0.1 * rng.standard_normal(D),
        "map.W2": rng.standard_normal((D, D)) / np.sqrt(D),
        "map.b2": 0.1 * rng.standard_normal(D),
    }
    raw = _map_raw(p, _rng(seed, 2).standard_normal((8192, D)))
    p["map.mean"] = raw.mean(axis=0)
    p["map.std"] = raw.std(axis=0) + 1e-8

    plan = layer_plan(n_layers, resolution)
    c_prev = channels_at(4)
    p["const"] = rng.standard_normal((4, 4, c_prev))
    for j, (kind, res, _row) in enumerate(plan):
        if kind == "rgb":
            p[f"L{j}.A"] = 0.2 * rng.standard_normal((D, c_prev)) / np.sqrt(D)
            p["rgb.W"] = rng.standard_normal((c_prev, 3)) / np.sqrt(c_prev)
            p["rgb.b"] = np.zeros(3)
            continue
        c = channels_at(res)
        if kind in ("up", "conv"):
            p[f"L{j}.K"] = rng.standard_normal((3, 3, c_prev, c)) * np.sqrt(2.0 / (9 * c_prev))
        p[f"L{j}.A"] = 0.5 * rng.standard_normal((D, c)) / np.sqrt(D)
        p[f"L{j}.b"] = np.zeros(c)
        c_prev = c

    # planted attribute directions: whitened coordinates along random orthonormal axes
    k = min(len(ATTRIBUTES), D) if n_attributes is None else n_attributes
    w = (raw - p["map.mean"]) / p["map.std"]
    mu = w.mean(axis=0)
    evals, evecs = np.linalg.eigh(np.cov(w, rowvar=False))
    evals = np.clip(evals, 1e-6, None)
    sqrt_cov = (evecs * np.sqrt(evals)) @ evecs.T
    isqrt_cov = (evecs / np.sqrt(evals)) @ evecs.T
    q, _ = np.linalg.qr(rng.standard_normal((D, k)))
    p["attr.mean"] = mu
    p["attr.readout"] = isqrt_cov @ q
    p["attr.dirs"] = (sqrt_cov @ q).T
    return GeneratorSpec(n_layers, style_dim, resolution, int(seed), p,
                         {"pretrain_steps": 0})


# --- mapping and prior -----------------------------------------------------------------

def map_latents(spec: GeneratorSpec, z: np.ndarray) -> np.ndarray:
    """Mapping network: ``(n, D)`` Gaussian draws to ``(n, D)`` styles."""
    raw = _map_raw(spec.params, np.asarray(z, dtype=np.float64))
    return (raw - spec.params["map.mean"]) / spec.params["map.std"]


def sample_prior(spec: GeneratorSpec, seed: int, n: int) -> np.ndarray:
    """``n`` prior codes of shape ``(n, L, D)``, identical across layer rows."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = _rng(seed, 0x9A10).standard_normal((n, spec.style_dim))
    w = map_latents(spec, z)
    return np.repeat(w[:, None, :], spec.n_layers, axis=1)


def mean_latent(spec: GeneratorSpec, n: int = 10_000, seed: int = 0) -> np.ndarray:
    return sample_prior(spec, seed, n).mean(axis=0)


def latent_attributes(spec: GeneratorSpec, w: np.ndarray) -> np.ndarray:
    """Planted attribute values (scene units) of codes ``(..., L, D)``."""
    rows = np.asarray(w).mean(axis=-2)
    a = (rows - spec.params["attr.mean"]) @ spec.params["attr.readout"]
    out = np.empty(a.shape)
    for k, name in enumerate(spec.attribute_names):
        lo, hi = ATTRIBUTE_RANGES[name]
        out[..., k] = lo + (hi - lo) * ndtr(a[..., k])
    return out


def latent_scene(spec: GeneratorSpec, w: np.ndarray) -> SceneParams:
    vals = [np.mean(ATTRIBUTE_RANGES[n]) for n in ATTRIBUTES]
    vals[: spec.n_attributes] = latent_attributes(spec, w)
    return SceneParams.from_attributes(vals)


# --- decoding ------------------------------------------------------------------------

def decode(spec: GeneratorSpec, w, params: dict | None = None):
    """Decode codes ``(L, D)`` or ``(N, L, D)`` to RGB images in [0, 1].

    Returns a Tensor when ``w`` (or any entry of ``params``) is a tracked
    Tensor, else a numpy array of shape ``(H, W, 3)`` / ``(N, H, W, 3)``.
    """
    p = spec.params if params is None else params
    tracked = isinstance(w, ad.Tensor) or any(isinstance(v, ad.Tensor) for v in p.values())
    L, D = spec.latent_shape
    if tuple(w.shape[-2:]) != (L, D) or len(w.shape) not in (2, 3):
        raise ValueError(f"latent shape {tuple(w.shape)} does not match generator {L}x{D}")
    single = len(w.shape) == 2
    if single:
        w = ad.reshape(w, (1, L, D))
    n = w.shape[0]

    def style(j, row):
        s = ad.matmul(ad.getitem(w, (slice(None), row, slice(None))), p[f"L{j}.A"])
        return ad.reshape(ad.add(s, 1.0), (n, 1, 1, s.shape[-1]))

    x = None
    for j, (kind, _res, row) in enumerate(spec.plan):
        s = style(j, row)
        if kind == "const":
            x = ad.add(ad.mul(p["const"], s), p[f"L{j}.b"])
        elif kind == "rgb":
            x = ad.matmul(ad.mul(x, s), p["rgb.W"])
            x = ad.sigmoid(ad.add(x, p["rgb.b"]))
            break
        else:
            if kind == "up":
                x = imageops.upsample_nearest(x, 2)
            x = ad.conv2d(x, p[f"L{j}.K"])
            x = ad.add(ad.mul(x, s), p[f"L{j}.b"])
        x = ad.leaky_relu(x)
    if single:
        x = ad.reshape(x, x.shape[1:])
    return x if tracked else x.data


def decode_batched(spec: GeneratorSpec, w: np.ndarray, chunk: int = 64) -> np.ndarray:
    w = np.asarray(w)
    return np.concatenate([decode(spec, w[i:i + chunk]) for i in range(0, len(w), chunk)])


# --- pretraining ---------------------------------------------------------------------

def _trainable(spec: GeneratorSpec) -> list[str]:
    return sorted(k for k in spec.params if not k.startswith(("map.", "attr.")))


def pretrain(spec: GeneratorSpec, steps: int = 1500, batch: int = 8, lr: float = 0.005,
             seed: int | None = None) -> GeneratorSpec:
    """Fit decoder weights so prior samples decode to photo-style renders."""
    seed = spec.seed if seed is None else seed
    names = _trainable(spec)
    values = [spec.params[k].copy() for k in names]
    state = ad.AdamState(lr=lr)
    R = spec.resolution
    for step in range(steps):
        w = sample_prior(spec, seed * 100_003 + step, batch)
        targets = np.stack([render_image(latent_scene(spec, wi), R, "photo") for wi in w])
        tape = ad.Tape()
        tp = dict(spec.params)
        tv = [tape.variable(v) for v in values]
        tp.update(zip(names, tv))
        img = decode(spec, w, params=tp)
        loss = ad.mean(ad.mul(ad.sub(img, targets), ad.sub(img, targets)))
        grads = tape.backward(loss)
        # cosine decay keeps the final weights stable
        rate = lr * 0.5 * (1.0 + np.cos(np.pi * step / steps))
        values = ad.adam_step(state, values, [grads[t] for t in tv], lr=rate)
        if step % 50 == 0 or step == steps - 1:
            log.debug("pretrain step %d loss %.5f", step, loss.item())
    return spec.with_params(dict(zip(names, values)), pretrain_steps=steps,
                            pretrain_batch=batch, pretrain_lr=lr)


def make_generator(seed: int, n_layers: int = 6, style_dim: int = 32, resolution: int = 64,
                   pretrain_steps: int = 1500, batch: int = 8) -> GeneratorSpec:
    spec = init_generator(seed, n_layers, style_dim, resolution)
    if pretrain_steps > 0:
        spec = pretrain(spec, steps=pretrain_steps, batch=batch)
    return spec


# --- persistence ------------------------------------------------------------------------

def _header(spec: GeneratorSpec) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "n_layers": spec.n_layers,
        "style_dim": spec.style_dim,
        "resolution": spec.resolution,
        "seed": spec.seed,
        "meta": spec.meta,
    }


def content_hash(spec: GeneratorSpec) -> str:
    h = hashlib.sha256(json.dumps(_header(spec), sort_keys=True).encode())
    for name in sorted(spec.params):
        arr = np.ascontiguousarray(spec.params[name], dtype="<f8")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_generator(spec: GeneratorSpec, path) -> str:
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(_header(spec), sort_keys=True)),
                 **{k: np.asarray(v, dtype="<f8") for k, v in spec.params.items()})
    return content_hash(spec)


def load_generator(path) -> GeneratorSpec:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format") != FORMAT_NAME:
            raise ValueError(f"{path} is not a generator file")
        if header["version"] > FORMAT_VERSION:
            raise ValueError(f"generator format version {header['version']} is newer than supported")
        params = {k: data[k].astype(np.float64) for k in data.files if k != "__header__"}
    return GeneratorSpec(header["n_layers"], header["style_dim"], header["resolution"],
                         header["seed"], params, header.get("meta", {}))


# --- steering basis ---------------------------------------------------------------------

@dataclass(frozen=True)
class AnnotatedSample:
    code: np.ndarray
    attributes: np.ndarray


@dataclass(frozen=True)
class SteeringBasis:
    """Centroids to sample around plus unit control directions and their scales."""

    centroids: np.ndarray
    directions: np.ndarray
    scales: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        if self.centroids.ndim != 3 or len(self.centroids) == 0:
            raise ValueError("basis needs at least one centroid of shape (L, D)")
        if self.directions.shape[1:] != self.centroids.shape[1:] and len(self.directions):
            raise ValueError("control directions and centroids differ in shape")
        if len(self.scales) != len(self.directions):
            raise ValueError("one scale per control direction required")

    @property
    def controls(self) -> np.ndarray:
        """Control vectors, each a one-sigma step along its attribute direction."""
        if len(self.directions) == 0:
            return np.zeros((0,) + self.centroids.shape[1:])
        return self.directions * self.scales[:, None, None]

    @property
    def latent_shape(self) -> tuple[int, int]:
        return self.centroids.shape[1:]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, __header__=np.array(json.dumps({"format": BASIS_FORMAT, "version": 1,
                                                          "names": list(self.names)})),
                     centroids=self.centroids, directions=self.directions, scales=self.scales)

    @classmethod
    def load(cls, path) -> "SteeringBasis":
        with np.load(Path(path), allow_pickle=False) as data:
            header = json.loads(str(data["__header__"]))
            if header.get("format") != BASIS_FORMAT:
                raise ValueError(f"{path} is not a steering-basis file")
            return cls(data["centroids"].astype(np.float64), data["directions"].astype(np.float64),
                       data["scales"].astype(np.float64), tuple(header["names"]))


def derive_controls(samples: list[AnnotatedSample]) -> tuple[np.ndarray, np.ndarray]:
    """One control per attribute from high-vs-low mean codes.

    Returns unit-Frobenius directions ``(C, L, D)`` and per-control scales:
    the standard deviation of the annotated codes projected on each direction,
    so ``direction * scale`` is a one-sigma move along it.
    """
    codes = np.stack([s.code for s in samples])
    labels = np.stack([np.atleast_1d(s.attributes) for s in samples])
    centered = codes - codes.mean(axis=0)
    dirs, scales = [], []
    for k in range(labels.shape[1]):
        y = labels[:, k]
        med = np.median(y)
        hi, lo = y > med, y <= med
        if not hi.any() or not lo.any():
            raise ValueError(f"attribute {k} is degenerate (all labels equal)")
        d = codes[hi].mean(axis=0) - codes[lo].mean(axis=0)
        norm = np.linalg.norm(d)
        if norm == 0.0:
            raise ValueError(f"attribute {k} yields a zero direction")
        u = d / norm
        dirs.append(u)
        scales.append(np.std(np.tensordot(centered, u, axes=2), ddof=1))
    return np.stack(dirs), np.array(scales)


def select_centroids(samples: np.ndarray, k: int, seed: int = 0, iters: int = 100) -> np.ndarray:
    """k-means (k-means++ seeding, Lloyd iterations) over latent codes."""
    samples = np.asarray(samples, dtype=np.float64)
    n = len(samples)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds sample count {n}")
    if k == 1:
        return samples.mean(axis=0, keepdims=True)
    flat = samples.reshape(n, -1)
    rng = _rng(seed, 0xCE17)
    idx = [int(rng.integers(n))]
    d2 = ((flat - flat[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        nxt = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        idx.append(nxt)
        d2 = np.minimum(d2, ((flat - flat[nxt]) ** 2).sum(axis=1))
    centers = flat[idx].copy()
    assign = None
    for _ in range(iters):
        dist = ((flat[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            members = flat[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
            else:
                far = int(dist.min(axis=1).argmax())
                centers[c] = flat[far]
    return centers.reshape((k,) + samples.shape[1:])


def annotate_prior(spec: GeneratorSpec, seed: int, n: int) -> list[AnnotatedSample]:
    """Label prior samples with the generator's planted attribute values."""
    codes = sample_prior(spec, seed, n)
    labels = latent_attributes(spec, codes)
    return [AnnotatedSample(c, a) for c, a in zip(codes, labels)]


def derive_basis(spec: GeneratorSpec, n_annotate: int = 2000, k_centroids: int = 8,
                 seed: int = 0, centroids: np.ndarray | None = None) -> SteeringBasis:
    samples = annotate_prior(spec, seed, n_annotate)
    dirs, scales = derive_controls(samples)
    if centroids is None:
        centroids = select_centroids(np.stack([s.code for s in samples]), k_centroids, seed)
    return SteeringBasis(np.asarray(centroids, dtype=np.float64), dirs, scales, spec.attribute_names)
