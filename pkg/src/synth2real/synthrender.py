"""A small parametric face renderer.

Two appearance styles share one geometry: ``"flat"`` is the deliberately
non-photoreal input domain (quantised tones, saturated palette, hard edges);
``"photo"`` is smooth and continuously shaded and is what the toy generator
is fitted to.  Coordinates are normalised to [-1, 1] with x to the right and
y downwards.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import imageops

ATTRIBUTES = (
    "yaw", "pitch", "light", "mouth_open", "hair_length", "hair_curl", "beard_length", "skin_tone",
)
ATTRIBUTE_RANGES = {
    "yaw": (-0.6, 0.6),
    "pitch": (-0.35, 0.35),
    "light": (-1.0, 1.0),
    "mouth_open": (0.0, 1.0),
    "hair_length": (0.0, 1.0),
    "hair_curl": (0.0, 1.0),
    "beard_length": (0.0, 1.0),
    "skin_tone": (0.0, 1.0),
}
N_BACKGROUNDS = 8

_FLAT_BACKGROUNDS = np.array([
    [0.20, 0.45, 0.85], [0.85, 0.30, 0.30], [0.25, 0.70, 0.35], [0.90, 0.80, 0.20],
    [0.55, 0.30, 0.75], [0.15, 0.15, 0.20], [0.95, 0.95, 0.95], [0.30, 0.75, 0.80],
])
_SKIN_LIGHT = np.array([0.96, 0.80, 0.69])
_SKIN_DARK = np.array([0.42, 0.28, 0.20])
_HAIR_DARK = np.array([0.10, 0.07, 0.05])
_HAIR_LIGHT = np.array([0.55, 0.38, 0.20])


@dataclass(frozen=True)
class SceneParams:
    yaw: float = 0.0
    pitch: float = 0.0
    light_x: float = 0.0
    light_z: float = 1.0
    mouth_open: float = 0.2
    hair_length: float = 0.5
    hair_curl: float = 0.0
    beard_length: float = 0.0
    skin_tone: float = 0.5
    background_id: int = 0

    def __post_init__(self):
        for name in ("mouth_open", "hair_length", "hair_curl", "beard_length", "skin_tone"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        lo, hi = ATTRIBUTE_RANGES["yaw"]
        if not lo <= self.yaw <= hi:
            raise ValueError(f"yaw={self.yaw} outside [{lo}, {hi}]")
        lo, hi = ATTRIBUTE_RANGES["pitch"]
        if not lo <= self.pitch <= hi:
            raise ValueError(f"pitch={self.pitch} outside [{lo}, {hi}]")
        if abs(np.hypot(self.light_x, self.light_z) - 1.0) > 1e-6:
            raise ValueError("light direction must be a unit 2-vector")
        if not 0 <= self.background_id < N_BACKGROUNDS:
            raise ValueError(f"background_id={self.background_id} out of range")

    @property
    def light_angle(self) -> float:
        return float(np.arctan2(self.light_x, self.light_z))

    def attributes(self) -> np.ndarray:
        """Real-valued attribute vector in :data:`ATTRIBUTES` order."""
        return np.array([
            self.yaw, self.pitch, self.light_angle, self.mouth_open, self.hair_length,
            self.hair_curl, self.beard_length, self.skin_tone,
        ])

    @classmethod
    def from_attributes(cls, values, background_id: int = 0) -> "SceneParams":
        d = dict(zip(ATTRIBUTES, (float(v) for v in values)))
        angle = d.pop("light")
        return cls(light_x=float(np.sin(angle)), light_z=float(np.cos(angle)),
                   background_id=background_id, **d)


@dataclass(frozen=True)
class _Geometry:
    face: np.ndarray
    hair: np.ndarray
    eyes: np.ndarray
    pupils: np.ndarray
    mouth: np.ndarray
    beard: np.ndarray
    shade: np.ndarray
    y: np.ndarray


def _grid(resolution: int):
    c = (2.0 * np.arange(resolution) + 1.0) / resolution - 1.0
    return np.meshgrid(c, c, indexing="xy")


def _geometry(p: SceneParams, resolution: int) -> _Geometry:
    x, y = _grid(resolution)
    cx = 0.45 * np.sin(p.yaw)
    cy = 0.05 + 0.30 * np.sin(p.pitch)
    ax, ay = 0.42, 0.55
    u = (x - cx) / ax
    v = (y - cy) / ay
    r2 = u * u + v * v
    face = r2 <= 1.0

    nz = np.sqrt(np.clip(1.0 - r2, 0.0, None))
    light = np.array([p.light_x, -0.3, p.light_z])
    light /= np.linalg.norm(light)
    lambert = np.clip(u * light[0] + v * light[1] + nz * light[2], 0.0, None)
    shade = 0.35 + 0.65 * lambert

    vs = -0.6 * np.sin(p.pitch)
    eyes = np.zeros_like(face)
    pupils = np.zeros_like(face)
    for side in (-1.0, 1.0):
        phi = side * 0.45 + p.yaw
        eu, ev = 0.85 * np.sin(phi), -0.12 + vs
        ew = 0.17 * max(np.cos(phi), 0.2)
        e = ((u - eu) / ew) ** 2 + ((v - ev) / 0.10) ** 2 <= 1.0
        eyes |= e
        pupils |= ((u - eu) / (0.5 * ew)) ** 2 + ((v - ev) / 0.08) ** 2 <= 1.0
    eyes &= face
    pupils &= eyes

    mu = 0.85 * np.sin(p.yaw)
    mh = 0.04 + 0.22 * p.mouth_open
    mw = 0.32 * np.sqrt(max(np.cos(p.yaw), 0.2))
    mouth = (((u - mu) / mw) ** 2 + ((v - 0.52 - vs) / mh) ** 2 <= 1.0) & face

    beard = face & (v > 1.0 - 0.8 * p.beard_length) & ~mouth if p.beard_length > 0 else np.zeros_like(face)

    # hair: a shell around the head, disjoint from the face ellipse
    dx, dy = x - cx, y - cy
    theta = np.arctan2(dx, -dy)
    thick = 0.10 + 0.18 * p.hair_length
    wobble = 1.0 + 0.10 * p.hair_curl * np.cos(12.0 * theta)
    outer = (dx / ((ax + thick) * wobble)) ** 2 + (dy / ((ay + thick) * wobble)) ** 2 <= 1.0
    hair = outer & ~face & (y < cy + ay * (-0.25 + 1.35 * p.hair_length))
    return _Geometry(face=face, hair=hair, eyes=eyes, pupils=pupils, mouth=mouth,
                     beard=beard, shade=shade, y=y)


def _render_flat(p: SceneParams, g: _Geometry) -> np.ndarray:
    skin = (1.0 - p.skin_tone) * _SKIN_LIGHT + p.skin_tone * _SKIN_DARK
    # saturate the skin palette and quantise shading to three tones
    skin = np.clip(skin.mean() + 1.4 * (skin - skin.mean()), 0.0, 1.0)
    tone = np.select([g.shade < 0.55, g.shade < 0.8], [0.5, 0.75], 1.0)
    img = np.broadcast_to(_FLAT_BACKGROUNDS[p.background_id], g.face.shape + (3,)).copy()
    hair_col = np.array([0.85, 0.55, 0.10]) * (1.0 - 0.6 * p.hair_curl)
    img[g.hair] = hair_col
    img[g.face] = skin * tone[g.face][:, None]
    img[g.beard] = np.array([0.35, 0.20, 0.08])
    img[g.eyes] = 1.0
    img[g.pupils] = np.array([0.05, 0.25, 0.60])
    img[g.mouth] = np.array([0.55, 0.0, 0.05])
    return img


def _render_photo(p: SceneParams, g: _Geometry) -> np.ndarray:
    skin = (1.0 - p.skin_tone) * _SKIN_LIGHT + p.skin_tone * _SKIN_DARK
    shade = g.shade[..., None]
    bg = 0.55 + 0.15 * g.y[..., None] * np.array([1.0, 1.0, 1.0]) + np.array([0.02, 0.0, -0.03])
    img = np.broadcast_to(bg, g.face.shape + (3,)).copy()
    hair_col = (1.0 - p.hair_curl) * _HAIR_DARK + p.hair_curl * _HAIR_LIGHT
    img = np.where(g.hair[..., None], hair_col * (0.6 + 0.5 * shade), img)
    img = np.where(g.face[..., None], skin * shade, img)
    img = np.where(g.beard[..., None], 0.5 * skin * shade + 0.5 * _HAIR_DARK, img)
    img = np.where(g.eyes[..., None], np.array([0.85, 0.82, 0.80]) * shade, img)
    img = np.where(g.pupils[..., None], np.array([0.20, 0.14, 0.10]), img)
    img = np.where(g.mouth[..., None], np.array([0.35, 0.10, 0.10]) * shade, img)
    # soft edges
    h = img.shape[0]
    blur = imageops.blur_matrix(h, 5, max(0.6, h / 96.0))
    img = imageops._apply(img, blur, blur)
    return np.clip(img, 0.0, 1.0)


def _paint(params: SceneParams, g: _Geometry, style: str) -> np.ndarray:
    if style == "flat":
        return _render_flat(params, g)
    if style == "photo":
        return _render_photo(params, g)
    raise ValueError(f"unknown render style {style!r}")


def render_image(params: SceneParams, resolution: int, style: str = "flat") -> np.ndarray:
    return _paint(params, _geometry(params, resolution), style)


def render_masks(params: SceneParams, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Binary face and hair masks (disjoint)."""
    g = _geometry(params, resolution)
    return g.face, g.hair


def render(params: SceneParams, resolution: int, falloff_radius: float | None = None,
           style: str = "flat") -> imageops.MaskSet:
    """Render plus falloff face alpha and hair alpha."""
    g = _geometry(params, resolution)
    img = _paint(params, g, style)
    radius = imageops.default_falloff_radius(resolution) if falloff_radius is None else falloff_radius
    face_alpha = imageops.build_falloff_mask(g.face, radius)
    return imageops.MaskSet(render=img, face_alpha=face_alpha, hair_alpha=g.hair.astype(np.float64))


def sample_scene(seed: int, n: int) -> list[SceneParams]:
    """Latin-hypercube samples over the parameter box, one stratum per sample."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CE7E]))
    cols = []
    for _ in ATTRIBUTES:
        cols.append((rng.permutation(n) + rng.random(n)) / n)
    unit = np.stack(cols, axis=1)
    backgrounds = rng.integers(0, N_BACKGROUNDS, size=n)
    out = []
    for row, bg in zip(unit, backgrounds):
        vals = [lo + (hi - lo) * t for t, (lo, hi) in zip(row, ATTRIBUTE_RANGES.values())]
        out.append(SceneParams.from_attributes(vals, background_id=int(bg)))
    return out


_CSV_FIELDS = [f.name for f in fields(SceneParams)]


def write_params_csv(path, params: list[SceneParams]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["index"] + _CSV_FIELDS)
        writer.writeheader()
        for i, p in enumerate(params):
            writer.writerow({"index": i, **{k: repr(v) for k, v in asdict(p).items()}})


def read_params_csv(path) -> list[SceneParams]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {k: float(row[k]) for k in _CSV_FIELDS if k != "background_id"}
            out.append(SceneParams(background_id=int(row["background_id"]), **kw))
    return out
