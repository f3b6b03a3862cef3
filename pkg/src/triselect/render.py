"""Deterministic synthetic views of a textured object on a turntable.

A scene is a vertical cylinder wrapped in a seeded blob-and-edge texture.
``rotation`` turns the cylinder about its axis, so views that are far apart
in angle show different parts of the surface, much like a turntable
capture of a physical object.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import PoseOutOfRange
from .visual import GrayImage

TEXTURE_PHI = 720   # samples around the circumference
TEXTURE_Z = 512     # samples along the axis
Z_EXTENT = 2.56     # texture covers z in [-Z_EXTENT, Z_EXTENT)
DEFAULT_SIZE = 128


@lru_cache(maxsize=64)
def scene_texture(scene_seed: int) -> np.ndarray:
    """Texture of shape (TEXTURE_Z, TEXTURE_PHI) with values in [0, 1]."""
    rng = np.random.default_rng(np.random.SeedSequence([0x7E57, int(scene_seed)]))
    shape = (TEXTURE_Z, TEXTURE_PHI)
    tex = np.zeros(shape)
    # blobs at three scales
    for sigma, count in ((3.0, 4000), (5.0, 1500), (9.0, 300)):
        impulses = np.zeros(shape)
        rows = rng.integers(0, shape[0], count)
        cols = rng.integers(0, shape[1], count)
        np.add.at(impulses, (rows, cols), rng.choice([-1.0, 1.0], count) * rng.uniform(0.5, 1.0, count))
        tex += gaussian_filter(impulses, sigma, mode=("nearest", "wrap")) * sigma ** 2 * 2 * math.pi
    # edges: rectangles with sharp borders
    edges = np.zeros(shape)
    for _ in range(70):
        h, w = rng.integers(8, 48, 2)
        r0, c0 = rng.integers(0, shape[0]), rng.integers(0, shape[1])
        rows = np.arange(r0, r0 + h) % shape[0]
        cols = np.arange(c0, c0 + w) % shape[1]
        edges[np.ix_(rows, cols)] += rng.choice([-0.6, 0.6])
    tex += gaussian_filter(edges, 0.8, mode=("nearest", "wrap"))
    lo, hi = np.percentile(tex, [1, 99])
    tex = np.clip((tex - lo) / (hi - lo), 0.0, 1.0)
    tex.setflags(write=False)
    return tex


def _pose_seed(scene_seed, rotation, scale, noise):
    bits = np.array([rotation, scale, noise], dtype=np.float64).view(np.uint64)
    return np.random.SeedSequence([0x4E01, int(scene_seed), *(int(b) for b in bits)])


def render_view(scene_seed: int, rotation: float = 0.0, scale: float = 1.0,
                noise: float = 0.0, size: int = DEFAULT_SIZE) -> GrayImage:
    """Render the scene seen from turntable angle `rotation` (radians).

    Raises PoseOutOfRange unless ``0.5 <= scale <= 2`` and ``0 <= noise <= 0.1``.
    """
    if not (math.isfinite(rotation)):
        raise PoseOutOfRange(f"rotation must be finite, got {rotation}")
    if not 0.5 <= scale <= 2.0:
        raise PoseOutOfRange(f"scale {scale} outside [0.5, 2]")
    if not 0.0 <= noise <= 0.1:
        raise PoseOutOfRange(f"noise {noise} outside [0, 0.1]")
    tex = scene_texture(scene_seed)
    radius = 0.42 * size * scale
    centre = (size - 1) / 2.0
    coords = (np.arange(size) - centre) / radius
    u = coords[None, :].repeat(size, axis=0)
    z = coords[:, None].repeat(size, axis=1)
    inside = np.abs(u) < 1.0
    phi = rotation + np.arcsin(np.clip(u, -1.0, 1.0))
    tex_col = (phi % (2 * math.pi)) * TEXTURE_PHI / (2 * math.pi)
    tex_row = (z + Z_EXTENT) * TEXTURE_Z / (2 * Z_EXTENT)
    sample = map_coordinates(tex, [tex_row, tex_col], order=1, mode="grid-wrap")
    shade = 0.35 + 0.65 * np.sqrt(np.clip(1.0 - u * u, 0.0, 1.0))
    img = np.where(inside, 0.1 + 0.8 * sample * shade, 0.05)
    if noise > 0:
        rng = np.random.default_rng(_pose_seed(scene_seed, rotation, scale, noise))
        img = img + rng.normal(0.0, noise, img.shape)
    return GrayImage(np.clip(img, 0.0, 1.0))
