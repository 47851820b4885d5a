from contextlib import contextmanager

import numpy as np

from synth2real import generator as G
from synth2real import imageops


def planted_target(spec, w):
    """Target whose render is the generator's own decode, with an all-ones face alpha."""
    img = G.decode(spec, w)
    ones = np.ones(img.shape[:2])
    return imageops.MaskSet(render=img, face_alpha=ones, hair_alpha=np.zeros_like(ones))


CRITERIA: dict[int, str] = {}


@contextmanager
def criterion(number: int, title: str):
    """Record one pass/fail line per acceptance criterion; yields a dict for detail values."""
    detail: dict = {}
    try:
        yield detail
    except BaseException:
        _report(number, title, "FAIL", detail)
        raise
    _report(number, title, "PASS", detail)


def _report(number, title, status, detail):
    extra = ", ".join(f"{k}={_fmt(v)}" for k, v in detail.items())
    line = f"criterion {number:2d} {status}: {title}" + (f" [{extra}]" if extra else "")
    CRITERIA[number] = line
    print(line)


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)
