"""Procedural grading LUTs and test images for desk-scale experiments.

The LUT generator composes the kind of adjustments colorists make: per-channel
lift/gain/gamma curves, a neutral-preserving channel mix, a saturation change,
an S-curve and split toning. Every draw is deterministic per seed.
"""

from __future__ import annotations

import numpy as np

from .lut import Lut3d, identity_lut

_LUMA = np.array([0.2126, 0.7152, 0.0722])


def _grade_params(rng: np.random.Generator) -> dict:
    mix = np.eye(3) + rng.normal(0.0, 0.08, size=(3, 3))
    mix /= mix.sum(axis=1, keepdims=True)
    return {
        "lift": rng.uniform(0.0, 0.10, size=3),
        "gain": rng.uniform(0.85, 1.0, size=3),
        "gamma": np.exp(rng.normal(0.0, 0.2, size=3)),
        "mix": mix,
        "sat": rng.uniform(0.6, 1.4),
        "scurve": rng.uniform(-0.5, 1.0),
        "shadow_tint": rng.normal(0.0, 0.05, size=3),
        "highlight_tint": rng.normal(0.0, 0.05, size=3),
    }


def _grade(p: dict, rgb: np.ndarray) -> np.ndarray:
    x = np.clip(rgb, 0.0, 1.0)
    x = p["lift"] + (p["gain"] - p["lift"]) * x ** p["gamma"]
    x = np.clip(x @ p["mix"].T, 0.0, 1.0)
    y = x @ _LUMA
    x = y[..., None] + p["sat"] * (x - y[..., None])
    s = p["scurve"]
    # smoothstep blend: s > 0 adds contrast, s < 0 flattens
    x = np.clip(x, 0.0, 1.0)
    x = x + s * (x * x * (3.0 - 2.0 * x) - x)
    y = np.clip(x @ _LUMA, 0.0, 1.0)[..., None]
    x = x + p["shadow_tint"] * (1.0 - y) ** 2 + p["highlight_tint"] * y**2
    return np.clip(x, 0.0, 1.0)


def synthetic_lut(seed, n: int = 32) -> Lut3d:
    """A random but plausible grading LUT on an ``n``-point lattice."""
    params = _grade_params(np.random.default_rng(seed))
    return Lut3d(_grade(params, identity_lut(n).data))


def synthetic_luts(count: int, seed: int = 0, n: int = 32) -> list[Lut3d]:
    seeds = np.random.SeedSequence(seed).spawn(count)
    return [synthetic_lut(s, n) for s in seeds]


def synthetic_image(seed, height: int = 48, width: int = 48) -> np.ndarray:
    """Gradient background with soft colored blobs and a little grain."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    u = xx / max(width - 1, 1)
    v = yy / max(height - 1, 1)
    top, bottom = rng.uniform(0.05, 0.95, size=(2, 3))
    angle = rng.uniform(0, np.pi)
    t = np.clip(np.cos(angle) * u + np.sin(angle) * v, 0.0, 1.0)[..., None]
    img = top * (1.0 - t) + bottom * t
    for _ in range(rng.integers(2, 6)):
        cx, cy = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.08, 0.35)
        color = rng.uniform(0.0, 1.0, size=3)
        w = np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * r * r))[..., None]
        img = img * (1.0 - 0.85 * w) + color * 0.85 * w
    img = img + rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_images(count: int, seed: int = 0, height: int = 48, width: int = 48) -> list[np.ndarray]:
    seeds = np.random.SeedSequence(seed).spawn(count)
    return [synthetic_image(s, height, width) for s in seeds]
