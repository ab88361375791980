"""Procedural image families used as desk-scale stand-ins for real domains.

Every family maps (class parameters, instance jitter) to a 2-D intensity image
in [0, 1]. Class parameters are drawn from a stream seeded by
``(seed, family, class index)``; instance jitter from ``(seed, family, class,
instance)``. Rendering is plain numpy over a coordinate grid.
"""
from __future__ import annotations

import zlib
from typing import Callable, Dict

import numpy as np

FAMILIES = ("glyphs", "textures", "shapes", "digits")


def _stream(seed: int, family: str, *keys: int) -> np.random.Generator:
    # family enters the stream so equal seeds give different domains
    return np.random.default_rng([seed, zlib.crc32(family.encode()), *keys])


def _grid(size: int):
    ax = (np.arange(size) + 0.5) / size * 2 - 1
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    return yy, xx


def _affine(yy, xx, rng, rot_deg=15.0, scale=(0.85, 1.15), shift=0.12):
    a = np.deg2rad(rng.uniform(-rot_deg, rot_deg))
    s = rng.uniform(*scale)
    ty, tx = rng.uniform(-shift, shift, size=2)
    c, si = np.cos(a), np.sin(a)
    y0, x0 = yy - ty, xx - tx
    return (c * y0 - si * x0) / s, (si * y0 + c * x0) / s


def _segment_dist(yy, xx, p, q):
    d = q - p
    L = float(d @ d) or 1e-12
    t = np.clip(((yy - p[0]) * d[0] + (xx - p[1]) * d[1]) / L, 0.0, 1.0)
    return np.hypot(yy - (p[0] + t * d[0]), xx - (p[1] + t * d[1]))


def _strokes(yy, xx, segments, width):
    dist = np.full(yy.shape, np.inf)
    for p, q in segments:
        dist = np.minimum(dist, _segment_dist(yy, xx, p, q))
    return np.clip(1.5 - dist / width, 0.0, 1.0)


def _finish(img, rng, noise, contrast=(0.7, 1.0)):
    img = img * rng.uniform(*contrast) + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


# glyphs: random multi-stroke characters on a lattice --------------------------


def _glyph_class(rng):
    lattice = np.linspace(-0.6, 0.6, 4)
    n = rng.integers(3, 5)
    pts = [np.array([rng.choice(lattice), rng.choice(lattice)])]
    segs = []
    for _ in range(n):
        while True:
            q = np.array([rng.choice(lattice), rng.choice(lattice)])
            if not np.allclose(q, pts[-1]):
                break
        # occasionally lift the pen
        start = pts[-1] if rng.random() < 0.7 else np.array([rng.choice(lattice), rng.choice(lattice)])
        segs.append((start, q))
        pts.append(q)
    return {"segments": segs}


def _glyph_render(cls, rng, size):
    yy, xx = _grid(size)
    yy, xx = _affine(yy, xx, rng, rot_deg=12, shift=0.1)
    segs = [(p + rng.normal(0, 0.06, 2), q + rng.normal(0, 0.06, 2)) for p, q in cls["segments"]]
    return _finish(_strokes(yy, xx, segs, rng.uniform(0.05, 0.08)), rng, noise=0.08)


# textures: class-specific oriented periodic patterns -------------------------


def _texture_class(rng):
    return {
        "kind": rng.integers(0, 3),
        "theta": rng.uniform(0, np.pi),
        "freq": rng.uniform(2.0, 7.0),
        "theta2": rng.uniform(0, np.pi),
        "freq2": rng.uniform(2.0, 7.0),
        "mix": rng.uniform(0.2, 0.6),
    }


def _texture_render(cls, rng, size):
    yy, xx = _grid(size)
    th = cls["theta"] + rng.normal(0, 0.12)
    th2 = cls["theta2"] + rng.normal(0, 0.12)
    f = cls["freq"] * rng.uniform(0.9, 1.1)
    f2 = cls["freq2"] * rng.uniform(0.9, 1.1)
    u = np.cos(th) * xx + np.sin(th) * yy
    v = np.cos(th2) * xx + np.sin(th2) * yy
    a = np.sin(np.pi * f * u + rng.uniform(0, 2 * np.pi))
    b = np.sin(np.pi * f2 * v + rng.uniform(0, 2 * np.pi))
    if cls["kind"] == 1:
        a = np.sign(a)
    elif cls["kind"] == 2:
        a = a * b
    img = 0.5 + 0.5 * ((1 - cls["mix"]) * a + cls["mix"] * b)
    return _finish(img, rng, noise=0.15, contrast=(0.5, 1.0))


# shapes: filled geometric primitives -----------------------------------------


def _polygon_sdf(yy, xx, n, r):
    ang = np.arctan2(yy, xx)
    rad = np.hypot(yy, xx)
    sector = np.pi / n
    local = np.mod(ang, 2 * sector) - sector
    return rad * np.cos(local) - r * np.cos(sector)


def _shape_mask(kind, yy, xx):
    rad = np.hypot(yy, xx)
    if kind == 0:
        d = rad - 0.55
    elif kind == 1:
        d = np.maximum(np.abs(yy), np.abs(xx)) - 0.45
    elif kind == 2:
        d = _polygon_sdf(yy + 0.1, xx, 3, 0.6)
    elif kind == 3:
        d = np.minimum(np.maximum(np.abs(yy) - 0.6, np.abs(xx) - 0.15), np.maximum(np.abs(xx) - 0.6, np.abs(yy) - 0.15))
    elif kind == 4:
        d = np.abs(rad - 0.45) - 0.12
    elif kind == 5:
        d = np.abs(yy) + np.abs(xx) - 0.65
    elif kind == 6:
        ang = np.arctan2(yy, xx)
        d = rad - (0.4 + 0.2 * np.cos(5 * ang))
    elif kind == 7:
        d = _polygon_sdf(yy, xx, 6, 0.55)
    elif kind == 8:
        d = np.minimum(
            np.maximum(np.abs(xx + 0.3) - 0.15, np.abs(yy) - 0.6),
            np.maximum(np.abs(yy - 0.45) - 0.15, np.abs(xx) - 0.45),
        )
    else:
        d = np.maximum(rad - 0.6, -(np.hypot(yy, xx - 0.3) - 0.45))
    return np.clip(0.5 - d * 12.0, 0.0, 1.0)


def _shape_class(rng, index):
    return {"kind": index % 10, "hollow": index >= 10}


def _shape_render(cls, rng, size):
    yy, xx = _grid(size)
    yy, xx = _affine(yy, xx, rng, rot_deg=20, scale=(0.75, 1.1), shift=0.15)
    img = _shape_mask(cls["kind"], yy, xx)
    return _finish(img, rng, noise=0.12, contrast=(0.4, 1.0))


# digits: seven-segment numerals with slant and stroke jitter -----------------

_SEGMENTS = {
    "a": ((-0.6, -0.3), (-0.6, 0.3)),
    "b": ((-0.6, 0.3), (0.0, 0.3)),
    "c": ((0.0, 0.3), (0.6, 0.3)),
    "d": ((0.6, -0.3), (0.6, 0.3)),
    "e": ((0.0, -0.3), (0.6, -0.3)),
    "f": ((-0.6, -0.3), (0.0, -0.3)),
    "g": ((0.0, -0.3), (0.0, 0.3)),
}
_DIGITS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"]


def _digit_class(rng, index):
    return {"segments": _DIGITS[index % 10]}


def _digit_render(cls, rng, size):
    yy, xx = _grid(size)
    yy, xx = _affine(yy, xx, rng, rot_deg=10, scale=(0.8, 1.1), shift=0.1)
    xx = xx + rng.uniform(-0.25, 0.25) * yy
    segs = []
    for s in cls["segments"]:
        p, q = (np.array(v) for v in _SEGMENTS[s])
        segs.append((p + rng.normal(0, 0.07, 2), q + rng.normal(0, 0.07, 2)))
    return _finish(_strokes(yy, xx, segs, rng.uniform(0.06, 0.1)), rng, noise=0.08)


_CLASS_MAKERS: Dict[str, Callable] = {
    "glyphs": lambda rng, i: _glyph_class(rng),
    "textures": lambda rng, i: _texture_class(rng),
    "shapes": _shape_class,
    "digits": _digit_class,
}
_RENDERERS: Dict[str, Callable] = {
    "glyphs": _glyph_render,
    "textures": _texture_render,
    "shapes": _shape_render,
    "digits": _digit_render,
}


def render_family(family: str, classes: int, per_class: int, size: int, seed: int):
    """Images [classes*per_class, size, size] (float32) and integer labels."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    images = np.empty((classes * per_class, size, size), dtype=np.float32)
    labels = np.repeat(np.arange(classes), per_class)
    k = 0
    for c in range(classes):
        cls = _CLASS_MAKERS[family](_stream(seed, family, c), c)
        for i in range(per_class):
            images[k] = _RENDERERS[family](cls, _stream(seed, family, c, i + 1), size)
            k += 1
    return images, labels
