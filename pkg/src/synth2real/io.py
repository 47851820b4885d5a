"""Image, mask, latent and manifest persistence.

PNGs are written with pypng so 16-bit output (used for soft alpha masks) is
available; floats are quantised with round-half-even, which keeps writes
byte-identical across runs.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import png

from .imageops import MaskSet

MASKSET_FILES = ("render.png", "face_alpha.png", "hair_alpha.png")


class InputError(OSError):
    """Unreadable or malformed input artefact."""


def write_png(path, img: np.ndarray, bitdepth: int = 8) -> None:
    """Write ``(H, W)`` or ``(H, W, 3)`` floats in [0, 1] as 8- or 16-bit PNG."""
    if bitdepth not in (8, 16):
        raise ValueError("bitdepth must be 8 or 16")
    arr = np.asarray(img, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("cannot write non-finite image")
    top = 2 ** bitdepth - 1
    q = np.rint(np.clip(arr, 0.0, 1.0) * top).astype(np.uint16 if bitdepth == 16 else np.uint8)
    h, w = q.shape[:2]
    greyscale = q.ndim == 2
    rows = q.reshape(h, -1)
    writer = png.Writer(w, h, greyscale=greyscale, bitdepth=bitdepth)
    with open(path, "wb") as fh:
        writer.write(fh, rows.tolist())


def read_png(path) -> np.ndarray:
    """Float image in [0, 1]; ``(H, W)`` for greyscale, ``(H, W, 3)`` for colour."""
    try:
        w, h, rows, info = png.Reader(filename=str(path)).asDirect()
        data = np.array([np.asarray(r) for r in rows], dtype=np.float64)
    except (OSError, png.Error) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    planes = info["planes"]
    top = 2 ** info["bitdepth"] - 1
    data = data.reshape(h, w, planes) / top
    if info.get("alpha"):
        data = data[..., :-1]
        planes -= 1
    if planes == 1:
        return data[..., 0]
    return data


def write_maskset(directory, masks: MaskSet, stem: str = "") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = [f"{stem}{n}" for n in MASKSET_FILES]
    write_png(directory / names[0], masks.render)
    write_png(directory / names[1], masks.face_alpha, bitdepth=16)
    write_png(directory / names[2], masks.hair_alpha, bitdepth=16)
    return [directory / n for n in names]


def read_maskset(render, face_alpha, hair_alpha=None) -> MaskSet:
    img = read_png(render)
    if img.ndim != 3:
        raise InputError(f"{render} is not an RGB image")
    face = read_png(face_alpha)
    if face.ndim == 3:
        face = face.mean(axis=2)
    hair = np.zeros_like(face) if hair_alpha is None else read_png(hair_alpha)
    if hair.ndim == 3:
        hair = hair.mean(axis=2)
    try:
        return MaskSet(render=img, face_alpha=face, hair_alpha=hair)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def read_maskset_dir(directory, stem: str = "") -> MaskSet:
    d = Path(directory)
    return read_maskset(*(d / f"{stem}{n}" for n in MASKSET_FILES))


def save_latent(path, code: np.ndarray) -> None:
    """Latent code as ``.npy`` (flat little-endian float64 with a shape header)."""
    np.save(path, np.ascontiguousarray(code, dtype="<f8"), allow_pickle=False)


def load_latent(path) -> np.ndarray:
    try:
        return np.load(path, allow_pickle=False).astype(np.float64)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read latent {path}: {exc}") from exc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, data) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
