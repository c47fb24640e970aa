"""3D LUT data model and the deterministic operations on it.

A :class:`Lut3d` stores an ``(N, N, N, 3)`` array indexed ``[b, g, r]`` with
red varying fastest, which is the row order of ``.cube`` files. Images are
plain ``(H, W, 3)`` float arrays in ``[0, 1]``.

Inputs are clamped to ``[0, 1]`` and mapped to the continuous lattice index
``c * (N - 1)``; lookups are trilinear.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InputError, InvalidParameterError, InvalidResolutionError

__all__ = [
    "Lut3d",
    "Perturbation",
    "as_image",
    "identity_lut",
    "sample_lut",
    "apply_lut",
    "resample_lut",
    "compose_lut",
    "apply_perturbation",
    "perturbation_lut",
    "sample_random_perturbation",
    "LOW_INTENSITY",
    "HIGH_INTENSITY",
]

# Lattice coordinates closer than this to an integer are snapped onto it, so
# that vertex coordinates i/(N-1) hit the stored value exactly.
_SNAP = 1e-9


@dataclass(frozen=True)
class Lut3d:
    """A 3-channel lattice over ``[0, 1]^3``.

    ``data[b, g, r]`` holds the output RGB triplet for input
    ``(r, g, b) / (N - 1)``. The array is copied and made read-only.
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 4 or data.shape[-1] != 3 or not (data.shape[0] == data.shape[1] == data.shape[2]):
            raise InputError(f"LUT data must have shape (N, N, N, 3), got {data.shape}")
        if data.shape[0] < 2:
            raise InvalidResolutionError(f"LUT resolution must be >= 2, got {data.shape[0]}")
        if not np.all(np.isfinite(data)):
            raise InputError("LUT data contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise InputError("LUT values must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def size(self) -> int:
        return self.data.shape[0]

    def flat(self) -> np.ndarray:
        """Vertex values as ``(N**3, 3)`` in ``.cube`` row order."""
        return self.data.reshape(-1, 3)

    @classmethod
    def from_flat(cls, values, size: int) -> "Lut3d":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (size**3, 3):
            raise InputError(f"expected {size**3} RGB rows, got shape {values.shape}")
        return cls(values.reshape(size, size, size, 3))

    def __eq__(self, other):
        if not isinstance(other, Lut3d):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    __hash__ = None


def as_image(img) -> np.ndarray:
    """Validate an RGB raster and return it as a float64 ``(H, W, 3)`` array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InputError(f"image must have shape (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InputError("image values must lie in [0, 1]")
    return arr


def identity_lut(n: int) -> Lut3d:
    """Identity mapping sampled on an ``n``-point lattice."""
    if int(n) != n or n < 2:
        raise InvalidResolutionError(f"resolution must be an integer >= 2, got {n}")
    n = int(n)
    ramp = np.arange(n, dtype=np.float64) / (n - 1)
    b, g, r = np.meshgrid(ramp, ramp, ramp, indexing="ij")
    return Lut3d(np.stack([r, g, b], axis=-1))


def _lattice_coords(n: int) -> np.ndarray:
    return identity_lut(n).data


def _trilinear(data: np.ndarray, coords: np.ndarray, clip: bool = True) -> np.ndarray:
    n = data.shape[0]
    x = np.clip(coords, 0.0, 1.0) * (n - 1)
    near = np.rint(x)
    x = np.where(np.abs(x - near) < _SNAP, near, x)
    i0 = np.minimum(np.floor(x), n - 2).astype(np.intp)
    f = x - i0
    ir, ig, ib = i0[..., 0], i0[..., 1], i0[..., 2]
    fr, fg, fb = f[..., 0:1], f[..., 1:2], f[..., 2:3]
    gr, gg, gb = 1.0 - fr, 1.0 - fg, 1.0 - fb

    def v(db, dg, dr):
        return data[ib + db, ig + dg, ir + dr]

    c00 = v(0, 0, 0) * gr + v(0, 0, 1) * fr
    c01 = v(0, 1, 0) * gr + v(0, 1, 1) * fr
    c10 = v(1, 0, 0) * gr + v(1, 0, 1) * fr
    c11 = v(1, 1, 0) * gr + v(1, 1, 1) * fr
    c0 = c00 * gg + c01 * fg
    c1 = c10 * gg + c11 * fg
    out = c0 * gb + c1 * fb
    return np.clip(out, 0.0, 1.0) if clip else out


def sample_lut(lut: Lut3d, c) -> np.ndarray:
    """Trilinear lookup of one or many RGB triplets (shape ``(..., 3)``)."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1:] != (3,):
        raise InputError(f"colors must have a trailing axis of length 3, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise InputError("colors must be finite")
    return _trilinear(lut.data, c)


def _thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("ACETONE_THREADS", "1")))
    except ValueError:
        return 1


def apply_lut(lut: Lut3d, img) -> np.ndarray:
    """Grade an image with ``lut``.

    Rows are split across threads when ``ACETONE_THREADS`` > 1; every pixel is
    computed independently, so the result does not depend on the split.
    """
    img = as_image(img)
    threads = min(_thread_cap(), img.shape[0])
    if threads <= 1 or img.size < 3 * 65536:
        return _trilinear(lut.data, img)
    chunks = np.array_split(np.arange(img.shape[0]), threads)
    out = np.empty_like(img)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = pool.map(lambda rows: _trilinear(lut.data, img[rows]), chunks)
        for rows, part in zip(chunks, parts):
            out[rows] = part
    return out


def resample_lut(lut: Lut3d, target_n: int) -> Lut3d:
    """Evaluate ``lut`` at the vertices of a ``target_n`` lattice."""
    return Lut3d(_trilinear(lut.data, _lattice_coords(target_n)))


def compose_lut(first: Lut3d, second: Lut3d, out_n: int) -> Lut3d:
    """Single LUT equivalent to applying ``first`` then ``second``."""
    coords = _lattice_coords(out_n)
    return Lut3d(_trilinear(second.data, _trilinear(first.data, coords)))


@dataclass(frozen=True)
class Perturbation:
    """Gamma, contrast, exposure and an optional smoothed noise lattice.

    The noise lattice is indexed like a LUT: when applied to an image, the
    offset for a pixel is the trilinear lookup of the lattice at that pixel's
    input color.
    """

    gamma: float = 1.0
    contrast: float = 1.0
    exposure_stops: float = 0.0
    noise_field: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise InvalidParameterError(f"gamma must be positive, got {self.gamma}")
        if not (np.isfinite(self.contrast) and self.contrast > 0):
            raise InvalidParameterError(f"contrast must be positive, got {self.contrast}")
        if not np.isfinite(self.exposure_stops):
            raise InvalidParameterError("exposure_stops must be finite")
        if self.noise_field is not None:
            nf = np.array(self.noise_field, dtype=np.float64)
            if nf.ndim != 4 or nf.shape[-1] != 3 or nf.shape[0] < 2 or len(set(nf.shape[:3])) != 1:
                raise InvalidParameterError(f"noise field must have shape (N, N, N, 3), got {nf.shape}")
            nf.setflags(write=False)
            object.__setattr__(self, "noise_field", nf)

    def is_neutral(self) -> bool:
        return (
            self.gamma == 1.0
            and self.contrast == 1.0
            and self.exposure_stops == 0.0
            and (self.noise_field is None or not np.any(self.noise_field))
        )


def _tone(p: Perturbation, v: np.ndarray) -> np.ndarray:
    v = np.clip(v, 0.0, 1.0)
    if p.gamma != 1.0:
        v = v**p.gamma
    if p.contrast != 1.0:
        v = (v - 0.5) * p.contrast + 0.5
    if p.exposure_stops != 0.0:
        v = v * 2.0**p.exposure_stops
    return v


def apply_perturbation(p: Perturbation, target):
    """Apply ``p`` to a :class:`Lut3d` (per vertex) or to an image.

    Order is gamma, contrast, exposure, noise, followed by a clamp.
    """
    if isinstance(target, Lut3d):
        out = _tone(p, target.data)
        if p.noise_field is not None:
            noise = p.noise_field
            if noise.shape[0] != target.size:
                noise = _trilinear(noise, _lattice_coords(target.size), clip=False)
            out = out + noise
        return Lut3d(np.clip(out, 0.0, 1.0))
    img = as_image(target)
    out = _tone(p, img)
    if p.noise_field is not None:
        out = out + _trilinear(p.noise_field, img, clip=False)
    return np.clip(out, 0.0, 1.0)


def perturbation_lut(p: Perturbation, n: int = 32) -> Lut3d:
    """``p`` expressed as a LUT, so it can be composed with other LUTs."""
    return apply_perturbation(p, identity_lut(n))


@dataclass(frozen=True)
class IntensityRange:
    gamma: tuple[float, float]
    contrast: tuple[float, float]
    exposure: tuple[float, float]
    noise_sigma: float
    noise_bound: float


LOW_INTENSITY = IntensityRange((0.9, 1.1), (0.9, 1.1), (-0.25, 0.25), 0.02, 0.025)
HIGH_INTENSITY = IntensityRange((0.7, 1.4), (0.75, 1.25), (-0.6, 0.6), 0.04, 0.05)


def sample_random_perturbation(rng_seed, intensity: str = "low", n: int = 32) -> Perturbation:
    """Draw a perturbation with parameters uniform over the configured ranges.

    The noise lattice is Gaussian with the range's sigma, smoothed by a 3x3x3
    box filter and bounded by ``noise_bound``. Deterministic per seed.
    """
    ranges = {"low": LOW_INTENSITY, "high": HIGH_INTENSITY}.get(intensity)
    if ranges is None:
        raise InvalidParameterError(f"intensity must be 'low' or 'high', got {intensity!r}")
    rng = np.random.default_rng(rng_seed)
    gamma = rng.uniform(*ranges.gamma)
    contrast = rng.uniform(*ranges.contrast)
    exposure = rng.uniform(*ranges.exposure)
    noise = rng.normal(0.0, ranges.noise_sigma, size=(n, n, n, 3))
    noise = ndimage.uniform_filter(noise, size=(3, 3, 3, 1), mode="nearest")
    noise = np.clip(noise, -ranges.noise_bound, ranges.noise_bound)
    return Perturbation(float(gamma), float(contrast), float(exposure), noise)
