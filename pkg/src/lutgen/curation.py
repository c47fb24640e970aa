"""LUT-library fusion (PCA + K-means) and dataset-tuple construction."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import checkpoint
from .errors import InputError, ZeroVarianceError
from .lut import Lut3d, apply_lut

TASKS = ("transfer", "instruct")
CONDITION_TAGS = (
    "warm",
    "cool",
    "brighten",
    "darken",
    "high-contrast",
    "low-contrast",
    "saturate",
    "desaturate",
    "green-tint",
    "magenta-tint",
    "teal-shadows",
    "orange-highlights",
    "golden-hour",
    "faded",
    "moody",
    "neutral",
)
REFERENCE = "reference"


# -- PCA --------------------------------------------------------------------


@dataclass
class PcaModel:
    mean: np.ndarray  # (F,)
    components: np.ndarray  # (p, F), orthonormal rows
    explained_variance: np.ndarray  # (p,), descending

    def project(self, x) -> np.ndarray:
        return (_as_matrix(x) - self.mean) @ self.components.T

    def reconstruct(self, coords) -> np.ndarray:
        return np.asarray(coords) @ self.components + self.mean

    def save(self, path) -> None:
        checkpoint.save(
            path,
            "pca",
            {"mean": self.mean, "components": self.components, "explained_variance": self.explained_variance},
            meta={"p": int(len(self.explained_variance))},
        )

    @classmethod
    def load(cls, path) -> "PcaModel":
        _, arr = checkpoint.load(path, "pca")
        return cls(arr["mean"].astype(np.float64), arr["components"].astype(np.float64),
                   arr["explained_variance"].astype(np.float64))


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, Lut3d):
        return x.data.reshape(1, -1)
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], Lut3d):
        return np.stack([lut.data.reshape(-1) for lut in x])
    return np.asarray(x, dtype=np.float64)


def fit_pca(luts, p: int = 64) -> PcaModel:
    """PCA of flattened LUTs through the n x n Gram matrix.

    The feature dimension (3 N^3) is far larger than the number of LUTs, so
    eigenvectors of ``Xc Xc^T`` are mapped back to feature space.
    """
    x = _as_matrix(luts)
    n = x.shape[0]
    if n < 2:
        raise InputError("PCA needs at least two samples")
    if not 1 <= p <= n - 1:
        raise InputError(f"number of components must lie in [1, {n - 1}], got {p}")
    mean = x.mean(axis=0)
    xc = x - mean
    gram = xc @ xc.T
    evals, evecs = np.linalg.eigh(gram)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    scale = max(float(np.abs(x).max()), 1.0) ** 2 * x.shape[1]
    if evals[0] <= 1e-12 * scale:
        raise ZeroVarianceError("corpus has zero variance (all samples identical)")
    keep = evals[:p]
    if keep[-1] <= 1e-12 * evals[0]:
        raise InputError(f"corpus rank is below the requested {p} components")
    comps = (xc.T @ evecs[:, :p]) / np.sqrt(keep)
    return PcaModel(mean, comps.T.copy(), keep / (n - 1))


# -- K-means ------------------------------------------------------------------


@dataclass
class FuseLibrary:
    representatives: list[str]  # one medoid id per cluster
    assignment: dict[str, int]
    centroids: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)

    @property
    def labels(self) -> np.ndarray:
        return np.array(list(self.assignment.values()))


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def kmeans(points, k: int, seed: int = 0, ids: Sequence[str] | None = None, max_iter: int = 200) -> FuseLibrary:
    """k-means++ seeding and Lloyd iterations until the assignment stops
    changing (or ``max_iter``); each cluster is represented by its medoid."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if ids is None:
        ids = [str(i) for i in range(n)]
    if len(ids) != n:
        raise InputError("ids and points differ in length")
    if not 1 <= k <= n:
        raise InputError(f"k must lie in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(pts, k, rng)
    labels = None
    history: list[float] = []
    for _ in range(max_iter):
        d2 = _sq_dists(pts, centers)
        new = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = pts[members].mean(axis=0)
        empty = [j for j in range(k) if not np.any(labels == j)]
        for j in empty:
            # move an empty center onto the point worst served by its own center
            own = _sq_dists(pts, centers)[np.arange(n), labels]
            far = int(np.argmax(own))
            centers[j] = pts[far]
            labels[far] = j
    d2 = _sq_dists(pts, centers)
    labels = np.argmin(d2, axis=1)
    reps = []
    for j in range(k):
        members = np.flatnonzero(labels == j)
        if members.size == 0:
            members = np.array([int(np.argmin(d2[:, j]))])
        reps.append(ids[int(members[np.argmin(d2[members, j])])])
    return FuseLibrary(
        representatives=reps,
        assignment={ids[i]: int(labels[i]) for i in range(n)},
        centroids=centers,
        inertia=float(d2[np.arange(n), labels].sum()),
        inertia_history=history,
    )


def build_fuse_library(luts: Sequence[Lut3d], ids: Sequence[str], k: int = 64, p: int = 64,
                       seed: int = 0) -> tuple[PcaModel, FuseLibrary]:
    p = min(p, len(luts) - 1)
    pca = fit_pca(list(luts), p)
    return pca, kmeans(pca.project(list(luts)), k, seed=seed, ids=ids)


# -- dataset tuples -------------------------------------------------------------


@dataclass(frozen=True)
class DatasetTuple:
    task: str
    query_image_id: str
    lut_id: str
    condition: str
    perturbation_seed: int
    reference_image_id: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, row: dict) -> "DatasetTuple":
        try:
            return cls(
                task=row["task"],
                query_image_id=str(row["query_image_id"]),
                lut_id=str(row["lut_id"]),
                condition=row["condition"],
                perturbation_seed=int(row["perturbation_seed"]),
                reference_image_id=row.get("reference_image_id"),
            )
        except KeyError as exc:
            raise InputError(f"tuple row missing {exc.args[0]!r}") from None


_LUMA = np.array([0.2126, 0.7152, 0.0722])


def grade_statistics(img: np.ndarray, graded: np.ndarray) -> dict[str, float]:
    """Differences in simple color statistics between an image and its grade."""
    y0, y1 = img @ _LUMA, graded @ _LUMA
    r0, g0, b0 = img[..., 0], img[..., 1], img[..., 2]
    r1, g1, b1 = graded[..., 0], graded[..., 1], graded[..., 2]
    dark = y0 < np.quantile(y0, 0.35)
    bright = y0 > np.quantile(y0, 0.65)
    teal = ((g1 + b1) / 2 - r1) - ((g0 + b0) / 2 - r0)
    orange = (r1 - b1) - (r0 - b0)
    return {
        "luma": float(y1.mean() - y0.mean()),
        "contrast": float(y1.std() - y0.std()),
        "chroma": float((graded.max(-1) - graded.min(-1)).mean() - (img.max(-1) - img.min(-1)).mean()),
        "warmth": float(((r1 - b1) - (r0 - b0)).mean()),
        "tint": float(((g1 - (r1 + b1) / 2) - (g0 - (r0 + b0) / 2)).mean()),
        "shadow_teal": float(teal[dark].mean()) if dark.any() else 0.0,
        "highlight_orange": float(orange[bright].mean()) if bright.any() else 0.0,
        "black_lift": float(np.quantile(y1, 0.02) - np.quantile(y0, 0.02)),
    }


def assign_tag(img: np.ndarray, graded: np.ndarray, threshold: float = 0.015) -> str:
    """Pick the taxonomy tag that best describes ``img -> graded``."""
    s = grade_statistics(img, graded)
    scores = {
        "warm": s["warmth"],
        "cool": -s["warmth"],
        "brighten": s["luma"],
        "darken": -s["luma"],
        "high-contrast": s["contrast"],
        "low-contrast": -s["contrast"],
        "saturate": s["chroma"],
        "desaturate": -s["chroma"],
        "green-tint": s["tint"],
        "magenta-tint": -s["tint"],
        "teal-shadows": s["shadow_teal"] - max(s["warmth"], -s["warmth"]) * 0.5,
        "orange-highlights": s["highlight_orange"] - max(s["warmth"], -s["warmth"]) * 0.5,
        "golden-hour": min(s["warmth"], s["luma"]) * 1.5,
        "faded": min(s["black_lift"], -s["contrast"]) * 1.5,
        "moody": min(-s["luma"], -s["chroma"]) * 1.5,
    }
    best = max(scores, key=lambda t: (scores[t], -CONDITION_TAGS.index(t)))
    return best if scores[best] >= threshold else "neutral"


def build_pairs(task: str, image_ids: Sequence[str], lut_ids: Sequence[str], count: int, seed: int = 0,
                images: Mapping[str, np.ndarray] | None = None,
                luts: Mapping[str, Lut3d] | None = None) -> list[DatasetTuple]:
    """Sample ``count`` tuples for ``task``.

    Transfer tuples pair two distinct images with a LUT and a perturbation
    seed. Instruct tuples carry a condition tag derived from the image and its
    graded version, so ``images`` and ``luts`` must be supplied for them.
    """
    if task not in TASKS:
        raise InputError(f"task must be one of {TASKS}, got {task!r}")
    if count < 0:
        raise InputError("count must be >= 0")
    if count == 0:
        return []
    image_ids, lut_ids = list(image_ids), list(lut_ids)
    if not image_ids or not lut_ids:
        raise InputError("image and LUT manifests must be non-empty")
    if task == "transfer" and len(image_ids) < 2:
        raise InputError("transfer tuples need at least two images")
    if task == "instruct" and (images is None or luts is None):
        raise InputError("instruct tuples need image and LUT data to derive condition tags")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        lut_id = lut_ids[int(rng.integers(len(lut_ids)))]
        pseed = int(rng.integers(2**31))
        if task == "transfer":
            q, r = rng.choice(len(image_ids), size=2, replace=False)
            out.append(DatasetTuple("transfer", image_ids[q], lut_id, REFERENCE, pseed, image_ids[r]))
        else:
            q = image_ids[int(rng.integers(len(image_ids)))]
            tag = assign_tag(images[q], apply_lut(luts[lut_id], images[q]))
            out.append(DatasetTuple("instruct", q, lut_id, tag, pseed))
    return out


def disjoint_split(image_ids: Sequence[str], lut_ids: Sequence[str], eval_images: int, eval_luts: int,
                   seed: int = 0) -> tuple[tuple[list[str], list[str]], tuple[list[str], list[str]]]:
    """Partition images and LUTs into ``(train_images, train_luts)`` and
    ``(eval_images, eval_luts)`` with no shared ids."""
    image_ids, lut_ids = sorted(set(image_ids)), sorted(set(lut_ids))
    if not (0 < eval_images < len(image_ids)) or not (0 < eval_luts < len(lut_ids)):
        raise InputError(
            f"cannot hold out {eval_images} of {len(image_ids)} images and {eval_luts} of {len(lut_ids)} LUTs"
        )
    rng = np.random.default_rng(seed)
    im = [image_ids[i] for i in rng.permutation(len(image_ids))]
    lu = [lut_ids[i] for i in rng.permutation(len(lut_ids))]
    return (im[eval_images:], lu[eval_luts:]), (im[:eval_images], lu[:eval_luts])


def build_split_pairs(task: str, image_ids, lut_ids, n_train: int, n_eval: int, seed: int = 0,
                      eval_fraction: float = 0.5, images=None, luts=None):
    """Train and eval tuples drawn from disjoint image and LUT pools."""
    n_img = max(1, int(round(len(set(image_ids)) * eval_fraction)))
    n_lut = max(1, int(round(len(set(lut_ids)) * eval_fraction)))
    if task == "transfer":
        n_img = max(2, n_img)
    (tr_im, tr_lu), (ev_im, ev_lu) = disjoint_split(image_ids, lut_ids, n_img, n_lut, seed)
    if task == "transfer" and (len(tr_im) < 2 or len(ev_im) < 2):
        raise InputError("not enough images for disjoint transfer splits")
    ss = np.random.SeedSequence(seed).spawn(2)
    train = build_pairs(task, tr_im, tr_lu, n_train, int(ss[0].generate_state(1)[0]), images, luts)
    evals = build_pairs(task, ev_im, ev_lu, n_eval, int(ss[1].generate_state(1)[0]), images, luts)
    return train, evals
