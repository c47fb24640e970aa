import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lutgen.curation import (
    CONDITION_TAGS,
    REFERENCE,
    DatasetTuple,
    PcaModel,
    assign_tag,
    build_fuse_library,
    build_pairs,
    build_split_pairs,
    disjoint_split,
    fit_pca,
    kmeans,
)
from lutgen.errors import InputError, ZeroVarianceError
from lutgen.lut import Lut3d, apply_lut, identity_lut
from lutgen.synthetic import synthetic_images, synthetic_luts


@pytest.fixture(scope="module")
def toy_corpus():
    return synthetic_luts(10, seed=21, n=4)


def flat(luts):
    return np.stack([lut.data.reshape(-1) for lut in luts])


def test_two_point_pca():
    a, b = synthetic_luts(2, seed=3, n=8)
    pca = fit_pca([a, b], p=1)
    diff = (b.data - a.data).reshape(-1)
    cos = abs(pca.components[0] @ diff) / np.linalg.norm(diff)
    assert cos > 1 - 1e-6


def test_identical_corpus_has_zero_variance():
    with pytest.raises(ZeroVarianceError):
        fit_pca([identity_lut(8)] * 4, p=2)


def test_pca_argument_checks(toy_corpus):
    with pytest.raises(InputError):
        fit_pca(toy_corpus[:1], p=1)
    with pytest.raises(InputError):
        fit_pca(toy_corpus, p=10)
    with pytest.raises(InputError):
        fit_pca(toy_corpus, p=0)


def test_variances_match_dense_covariance(toy_corpus):
    x = flat(toy_corpus)
    dense = np.linalg.eigvalsh(np.cov(x, rowvar=False))[::-1][:9]
    pca = fit_pca(toy_corpus, p=9)
    np.testing.assert_allclose(pca.explained_variance, dense, atol=1e-6)
    assert np.all(np.diff(pca.explained_variance) <= 0)


def test_components_are_orthonormal(toy_corpus):
    c = fit_pca(toy_corpus, p=9).components
    np.testing.assert_allclose(c @ c.T, np.eye(9), atol=1e-6)


def test_full_rank_reconstruction():
    luts = synthetic_luts(10, seed=22)
    pca = fit_pca(luts, p=9)
    x = flat(luts)
    rms = np.sqrt(np.mean((pca.reconstruct(pca.project(luts)) - x) ** 2))
    assert rms < 1e-4


def test_projection_preserves_distances(toy_corpus):
    full = fit_pca(toy_corpus, p=9)
    share = np.cumsum(full.explained_variance) / full.explained_variance.sum()
    p = int(np.searchsorted(share, 0.99) + 1)
    z = fit_pca(toy_corpus, p=p).project(toy_corpus)
    x = flat(toy_corpus)
    pairs = [(i, j) for i in range(10) for j in range(i + 1, 10)]
    ratios = np.array([np.linalg.norm(z[i] - z[j]) / np.linalg.norm(x[i] - x[j]) for i, j in pairs])
    # projection never stretches; a single close pair can differ mostly along a
    # discarded direction, so the 10% band is checked in aggregate
    assert np.all(ratios <= 1.0 + 1e-9)
    assert ratios.mean() >= 0.9
    assert np.mean(ratios >= 0.9) >= 0.95


def test_pca_save_load(tmp_path, toy_corpus):
    pca = fit_pca(toy_corpus, p=3)
    pca.save(tmp_path / "pca.ckpt")
    back = PcaModel.load(tmp_path / "pca.ckpt")
    # the container stores float32 blobs
    np.testing.assert_allclose(back.project(toy_corpus), pca.project(toy_corpus), rtol=1e-6, atol=1e-6)


# -- k-means ---------------------------------------------------------------------


def test_k_equals_n_gives_zero_inertia():
    pts = np.random.default_rng(0).normal(size=(12, 3))
    lib = kmeans(pts, 12, seed=1)
    assert lib.inertia == 0.0
    assert sorted(lib.labels.tolist()) == list(range(12))


def test_separated_blobs_recovered():
    rng = np.random.default_rng(1)
    sigma = 0.5
    a = rng.normal(0.0, sigma, size=(40, 4))
    b = rng.normal(0.0, sigma, size=(40, 4)) + np.array([10 * sigma, 0, 0, 0]) * 2
    truth = np.array([0] * 40 + [1] * 40)
    for seed in range(5):
        labels = kmeans(np.vstack([a, b]), 2, seed=seed).labels
        assert np.array_equal(labels, truth) or np.array_equal(labels, 1 - truth)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 8))
def test_inertia_never_increases(seed, k):
    pts = np.random.default_rng(seed).normal(size=(40, 3))
    hist = kmeans(pts, k, seed=seed).inertia_history
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_deterministic_and_medoids_are_members():
    pts = np.random.default_rng(2).normal(size=(30, 5))
    ids = [f"lut{i}" for i in range(30)]
    a, b = kmeans(pts, 4, seed=7, ids=ids), kmeans(pts, 4, seed=7, ids=ids)
    assert a.representatives == b.representatives and a.assignment == b.assignment
    assert len(a.representatives) == 4
    assert set(a.representatives) <= set(ids)
    assert set(a.assignment) == set(ids)
    for j, rep in enumerate(a.representatives):
        assert a.assignment[rep] == j


def test_kmeans_rejects_too_many_clusters():
    with pytest.raises(InputError):
        kmeans(np.zeros((3, 2)), 4)


def test_duplicate_points_still_fill_every_cluster():
    pts = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]])
    lib = kmeans(pts, 3, seed=0)
    assert len(lib.representatives) == 3


def test_fuse_library_end_to_end():
    luts = synthetic_luts(12, seed=23, n=8)
    ids = [f"l{i}" for i in range(12)]
    pca, lib = build_fuse_library(luts, ids, k=4, p=64, seed=0)
    assert pca.components.shape[0] == 11
    assert len(lib.representatives) == 4 and set(lib.assignment) == set(ids)


# -- tuples ----------------------------------------------------------------------


IMAGES = [f"img{i}" for i in range(128)]
LUTS = [f"lut{i}" for i in range(128)]


def test_zero_count_gives_empty_list():
    assert build_pairs("transfer", IMAGES, LUTS, 0) == []


def test_pairs_are_deterministic():
    assert build_pairs("transfer", IMAGES, LUTS, 20, seed=4) == build_pairs("transfer", IMAGES, LUTS, 20, seed=4)
    assert build_pairs("transfer", IMAGES, LUTS, 20, seed=4) != build_pairs("transfer", IMAGES, LUTS, 20, seed=5)


def test_transfer_tuples_use_two_distinct_images():
    for t in build_pairs("transfer", IMAGES[:3], LUTS, 50, seed=1):
        assert t.condition == REFERENCE
        assert t.reference_image_id != t.query_image_id
        assert t.query_image_id in IMAGES and t.lut_id in LUTS


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), task=st.sampled_from(["transfer"]))
def test_split_is_disjoint(seed, task):
    train, evals = build_split_pairs(task, IMAGES, LUTS, n_train=128, n_eval=64, seed=seed)
    assert len(evals) == 64

    def image_ids(ts):
        return {t.query_image_id for t in ts} | {t.reference_image_id for t in ts}

    assert image_ids(train) & image_ids(evals) == set()
    assert {t.lut_id for t in train} & {t.lut_id for t in evals} == set()


def test_disjoint_split_errors():
    with pytest.raises(InputError):
        disjoint_split(IMAGES[:2], LUTS[:2], 2, 1)
    with pytest.raises(InputError):
        build_split_pairs("transfer", IMAGES[:3], LUTS, 4, 4)


def test_pair_input_errors():
    with pytest.raises(InputError):
        build_pairs("captioning", IMAGES, LUTS, 1)
    with pytest.raises(InputError):
        build_pairs("transfer", [], LUTS, 1)
    with pytest.raises(InputError):
        build_pairs("instruct", IMAGES, LUTS, 1)


def test_instruct_tuples_carry_taxonomy_tags():
    imgs = synthetic_images(4, seed=3, height=24, width=24)
    luts = synthetic_luts(6, seed=5, n=9)
    images = {f"i{k}": im for k, im in enumerate(imgs)}
    lut_map = {f"l{k}": lut for k, lut in enumerate(luts)}
    tuples = build_pairs("instruct", list(images), list(lut_map), 30, seed=2, images=images, luts=lut_map)
    assert all(t.condition in CONDITION_TAGS and t.reference_image_id is None for t in tuples)
    t = tuples[0]
    assert t.condition == assign_tag(images[t.query_image_id], apply_lut(lut_map[t.lut_id], images[t.query_image_id]))


def test_tags_for_obvious_grades():
    img = synthetic_images(1, seed=9, height=32, width=32)[0]
    assert assign_tag(img, img) == "neutral"
    assert assign_tag(img, np.clip(img * 0.6, 0, 1)) in ("darken", "moody")
    warm = img.copy()
    warm[..., 0] = np.clip(warm[..., 0] + 0.1, 0, 1)
    warm[..., 2] = np.clip(warm[..., 2] - 0.1, 0, 1)
    assert assign_tag(img, warm) in ("warm", "golden-hour")
    assert len(CONDITION_TAGS) == 16


def test_tuple_dict_round_trip():
    t = DatasetTuple("transfer", "a", "l", REFERENCE, 7, "b")
    assert DatasetTuple.from_dict(t.to_dict()) == t
    with pytest.raises(InputError):
        DatasetTuple.from_dict({"task": "transfer"})


def test_lut_ids_survive_identity_grade():
    img = synthetic_images(1, seed=2, height=16, width=16)[0]
    assert assign_tag(img, apply_lut(identity_lut(17), img)) == "neutral"
    assert isinstance(identity_lut(4), Lut3d)
