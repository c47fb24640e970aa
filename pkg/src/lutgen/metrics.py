"""Color metrics and the two grading rewards.

sRGB values are converted to CIELAB under D65 with the 2-degree observer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .errors import DimensionMismatchError, InputError, RewardUnavailableError
from .lut import Lut3d, as_image

PSNR_CAP = 99.0
MAX_EDGE = 256

_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
# White point taken from the matrix itself so that RGB (1, 1, 1) lands on
# L = 100, a = b = 0 exactly.
_WHITE = _SRGB_TO_XYZ.sum(axis=1)
_EPS = 216.0 / 24389.0
_KAPPA = 24389.0 / 27.0


def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def srgb_to_lab(c) -> np.ndarray:
    """sRGB in ``[0, 1]`` (shape ``(..., 3)``) to CIELAB ``(..., 3)``."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1:] != (3,):
        raise InputError(f"expected trailing axis of length 3, got {c.shape}")
    xyz = srgb_to_linear(np.clip(c, 0.0, 1.0)) @ _SRGB_TO_XYZ.T
    t = xyz / _WHITE
    f = np.where(t > _EPS, np.cbrt(t), (_KAPPA * t + 16.0) / 116.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def delta_e_2000(lab1, lab2, kL: float = 1.0, kC: float = 1.0, kH: float = 1.0) -> np.ndarray:
    """CIEDE2000 color difference, vectorized over leading axes."""
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    L1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    L2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    C1 = np.hypot(a1, b1)
    C2 = np.hypot(a2, b2)
    Cbar7 = ((C1 + C2) / 2.0) ** 7
    G = 0.5 * (1.0 - np.sqrt(Cbar7 / (Cbar7 + 25.0**7)))
    a1p = (1.0 + G) * a1
    a2p = (1.0 + G) * a2
    C1p = np.hypot(a1p, b1)
    C2p = np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0
    # hue is undefined for achromatic colors
    h1p = np.where(C1p == 0.0, 0.0, h1p)
    h2p = np.where(C2p == 0.0, 0.0, h2p)

    dLp = L2 - L1
    dCp = C2p - C1p
    chroma_prod = C1p * C2p
    dh = h2p - h1p
    dhp = np.where(dh > 180.0, dh - 360.0, np.where(dh < -180.0, dh + 360.0, dh))
    dhp = np.where(chroma_prod == 0.0, 0.0, dhp)
    dHp = 2.0 * np.sqrt(chroma_prod) * np.sin(np.radians(dhp) / 2.0)

    Lbarp = (L1 + L2) / 2.0
    Cbarp = (C1p + C2p) / 2.0
    hsum = h1p + h2p
    hbarp = np.where(
        np.abs(h1p - h2p) <= 180.0,
        hsum / 2.0,
        np.where(hsum < 360.0, (hsum + 360.0) / 2.0, (hsum - 360.0) / 2.0),
    )
    hbarp = np.where(chroma_prod == 0.0, hsum, hbarp)

    T = (
        1.0
        - 0.17 * np.cos(np.radians(hbarp - 30.0))
        + 0.24 * np.cos(np.radians(2.0 * hbarp))
        + 0.32 * np.cos(np.radians(3.0 * hbarp + 6.0))
        - 0.20 * np.cos(np.radians(4.0 * hbarp - 63.0))
    )
    dtheta = 30.0 * np.exp(-(((hbarp - 275.0) / 25.0) ** 2))
    Cbarp7 = Cbarp**7
    RC = 2.0 * np.sqrt(Cbarp7 / (Cbarp7 + 25.0**7))
    Lm = (Lbarp - 50.0) ** 2
    SL = 1.0 + 0.015 * Lm / np.sqrt(20.0 + Lm)
    SC = 1.0 + 0.045 * Cbarp
    SH = 1.0 + 0.015 * Cbarp * T
    RT = -np.sin(np.radians(2.0 * dtheta)) * RC

    tL = dLp / (kL * SL)
    tC = dCp / (kC * SC)
    tH = dHp / (kH * SH)
    return np.sqrt(tL**2 + tC**2 + tH**2 + RT * tC * tH)


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    # each output cell averages the input cells it overlaps, weighted by overlap
    edges = np.arange(n_out + 1) * (n_in / n_out)
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges[i], edges[i + 1]
        for j in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    return m / m.sum(axis=1, keepdims=True)


def downsample_area(img, max_edge: int = MAX_EDGE) -> np.ndarray:
    """Area-average ``img`` so its long edge is at most ``max_edge``."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    scale = max(h, w) / max_edge
    if scale <= 1.0:
        return img
    ho, wo = max(1, round(h / scale)), max(1, round(w / scale))
    rows, cols = _area_matrix(h, ho), _area_matrix(w, wo)
    # rows first, then columns: two small matmuls instead of one 4-index product
    tmp = np.tensordot(rows, img, axes=(1, 0))
    return np.einsum("jw,iwc->ijc", cols, tmp, optimize=True)


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def delta_e_map(a, b) -> np.ndarray:
    """Per-pixel CIEDE2000 between two images at full resolution."""
    a, b = _check_pair(a, b)
    return delta_e_2000(srgb_to_lab(a), srgb_to_lab(b))


def mean_delta_e(a, b, max_edge: int | None = MAX_EDGE) -> float:
    """Mean CIEDE2000 between two equally sized images.

    Both images are area-downsampled to ``max_edge`` on the long side first
    (pass ``None`` to disable).
    """
    a, b = _check_pair(a, b)
    if max_edge is not None:
        a, b = downsample_area(a, max_edge), downsample_area(b, max_edge)
    return float(np.mean(delta_e_2000(srgb_to_lab(a), srgb_to_lab(b))))


def mse(a, b) -> float:
    a = a.data if isinstance(a, Lut3d) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, Lut3d) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak-1.0 PSNR in dB between two images or two LUTs; identical inputs
    report :data:`PSNR_CAP`."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / err)


def color_reward_from_delta_e(de: float) -> float:
    if not (de >= 0.0):
        raise InputError(f"delta E must be a non-negative number, got {de}")
    return 1.0 / (max(2.0, de) - 1.0)


def color_reward(pred, gt) -> float:
    """``1 / (max(2, dE) - 1)`` with dE the mean CIEDE2000 of pred vs gt."""
    return color_reward_from_delta_e(mean_delta_e(pred, gt))


class AestheticScorer(Protocol):
    def __call__(self, img: np.ndarray) -> float:
        """Score an image on ``[0, 5]``."""


@dataclass(frozen=True)
class HeuristicAestheticScorer:
    """Deterministic stand-in for a learned aesthetic model.

    score = 5 * (w_color * colorfulness + w_contrast * contrast
                 + w_clip * (1 - clipped_fraction))

    colorfulness is the Hasler-Suesstrunk statistic divided by 100, contrast
    is the luminance standard deviation divided by 0.25, both capped at 1.
    A pixel counts as clipped when any channel is within 1/255 of 0 or 1.
    """

    w_color: float = 0.4
    w_contrast: float = 0.4
    w_clip: float = 0.2

    def __call__(self, img) -> float:
        img = as_image(img)
        r, g, b = (img[..., i] * 255.0 for i in range(3))
        rg = r - g
        yb = 0.5 * (r + g) - b
        colorful = np.hypot(rg.std(), yb.std()) + 0.3 * np.hypot(rg.mean(), yb.mean())
        luma = img @ np.array([0.2126, 0.7152, 0.0722])
        clipped = np.mean(np.any((img <= 1 / 255) | (img >= 254 / 255), axis=-1))
        parts = (
            self.w_color * min(colorful / 100.0, 1.0)
            + self.w_contrast * min(luma.std() / 0.25, 1.0)
            + self.w_clip * (1.0 - clipped)
        )
        total = self.w_color + self.w_contrast + self.w_clip
        return float(5.0 * parts / total)


DEFAULT_SCORER = HeuristicAestheticScorer()


def aesthetic_reward(img, scorer: Callable[[np.ndarray], float] | None = None) -> float:
    """Scorer output on ``[0, 5]`` mapped to ``[0, 1]``."""
    scorer = DEFAULT_SCORER if scorer is None else scorer
    try:
        score = float(scorer(img))
    except Exception as exc:
        raise RewardUnavailableError(f"aesthetic scorer failed: {exc}") from exc
    if not math.isfinite(score):
        raise RewardUnavailableError(f"aesthetic scorer returned {score}")
    return min(max(score / 5.0, 0.0), 1.0)


def metric_report(pred, gt, scorer=None) -> dict:
    de = mean_delta_e(pred, gt)
    return {
        "psnr_db": psnr(pred, gt),
        "mean_delta_e": de,
        "color_reward": color_reward_from_delta_e(de),
        "aesthetic_reward": aesthetic_reward(pred, scorer),
    }
