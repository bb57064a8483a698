import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from personaseg.data import UnlabeledSample
from personaseg.grouping import (Descriptor, GroupAssignment, GroupBatchStream, embed_images, kmeans,
                                 make_group_batches, pixel_histogram_descriptor, resnet50_descriptor)

from oracles import best_two_partition


def _descs(points):
    return [Descriptor(f"d{i:03d}", np.asarray(p, dtype=float)) for i, p in enumerate(points)]


def test_identical_images_identical_descriptors():
    img = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(0))
    a, b = embed_images([UnlabeledSample(img, "a"), UnlabeledSample(img.clone(), "b")])
    assert np.array_equal(a.vector, b.vector)


def test_brightness_shift_changes_default_descriptor():
    flat = torch.full((3, 32, 32), 0.4)
    a = pixel_histogram_descriptor(flat)
    b = pixel_histogram_descriptor(flat + 0.2)
    assert np.linalg.norm(a - b) > 0


def test_non_finite_descriptor_rejected():
    with pytest.raises(ValueError, match="x"):
        embed_images([UnlabeledSample(torch.zeros(3, 4, 4), "x")], lambda im: np.array([np.nan]))


def test_resnet_descriptor_dimension():
    fn = resnet50_descriptor()
    assert fn(torch.rand(3, 64, 64)).shape == (2048,)


def test_two_pairs_match_brute_force():
    pts = [[0.0, 0.0], [0.2, 0.1], [5.0, 5.0], [5.1, 4.8]]
    best, labels = best_two_partition(pts)
    res = kmeans(_descs(pts), 2, seed=0)
    got = [res.mapping[f"d{i:03d}"] for i in range(4)]
    assert got[0] == got[1] and got[2] == got[3] and got[0] != got[2]
    assert (np.array(got) == np.array(labels)).all() or (np.array(got) == 1 - np.array(labels)).all()
    assert res.history[-1] == pytest.approx(best, rel=1e-12)


def test_k1_is_mean():
    pts = np.random.default_rng(0).normal(size=(9, 3))
    res = kmeans(_descs(pts), 1)
    assert set(res.mapping.values()) == {0}
    np.testing.assert_allclose(res.centroids[0], pts.mean(0))


def test_k_equals_n_zero_objective():
    pts = np.random.default_rng(1).normal(size=(6, 2))
    res = kmeans(_descs(pts), 6)
    assert sorted(res.mapping.values()) == list(range(6))
    assert res.history[-1] == 0.0


def test_k_too_large():
    with pytest.raises(ValueError):
        kmeans(_descs([[0.0], [1.0]]), 3)


def test_duplicates_allowed_and_no_empty_cluster():
    pts = [[1.0, 1.0]] * 5 + [[2.0, 2.0]]
    res = kmeans(_descs(pts), 3, seed=0)
    assert set(res.mapping.values()) == {0, 1, 2}


@settings(max_examples=30, deadline=None)
@given(n=st.integers(3, 40), k=st.integers(1, 6), seed=st.integers(0, 1000), dim=st.integers(1, 5))
def test_kmeans_properties(n, k, seed, dim):
    k = min(k, n)
    pts = np.random.default_rng(seed).normal(size=(n, dim))
    descs = _descs(pts)
    res = kmeans(descs, k, seed=seed, n_init=2)
    hist = np.array(res.history)
    assert np.all(np.diff(hist) <= 1e-9 * max(1.0, hist[0]))
    assert sorted(res.mapping) == sorted(d.id for d in descs)
    assert set(res.mapping.values()) == set(range(k))
    assert kmeans(descs, k, seed=seed, n_init=2).mapping == res.mapping


def test_assignment_is_nearest_centroid_with_low_index_ties():
    pts = np.random.default_rng(3).normal(size=(30, 2))
    res = kmeans(_descs(pts), 4, seed=1)
    d = ((pts[:, None] - res.centroids[None]) ** 2).sum(-1)
    assert [res.mapping[f"d{i:03d}"] for i in range(30)] == list(d.argmin(1))


def test_groups_json_roundtrip(tmp_path):
    a = GroupAssignment({"x": 1, "y": 0}, 2, seed=4)
    a.save(tmp_path / "groups.json")
    b = GroupAssignment.load(tmp_path / "groups.json")
    assert b.mapping == a.mapping and b.k == 2 and b.seed == 4


def _assignment(sizes):
    mapping = {}
    for g, n in enumerate(sizes):
        for i in range(n):
            mapping[f"g{g}_{i}"] = g
    return GroupAssignment(mapping, len(sizes))


def test_batches_two_groups_example():
    a = _assignment([5, 3])
    batches = make_group_batches(a, 2, seed=0)
    per_group = {0: [], 1: []}
    for b in batches:
        groups = {a.mapping[i] for i in b}
        assert len(groups) == 1
        per_group[groups.pop()].append(len(b))
    assert sorted(per_group[0]) == [1, 2, 2]
    assert sorted(per_group[1]) == [1, 2]


def test_batch_size_eight_single_group_shuffled():
    a = _assignment([20])
    batches = make_group_batches(a, 8, seed=1)
    assert [len(b) for b in batches if len(b) == 8] == [8, 8]
    flat = [i for b in batches for i in b]
    assert sorted(flat) == sorted(a.mapping) and flat != sorted(a.mapping)


@settings(max_examples=40, deadline=None)
@given(sizes=st.lists(st.integers(1, 12), min_size=1, max_size=5), bs=st.integers(1, 9),
       seed=st.integers(0, 99), drop=st.booleans())
def test_batch_properties(sizes, bs, seed, drop):
    a = _assignment(sizes)
    batches = make_group_batches(a, bs, seed, drop_last=drop)
    for b in batches:
        assert len({a.mapping[i] for i in b}) == 1
        assert 1 <= len(b) <= bs
    flat = [i for b in batches for i in b]
    assert len(flat) == len(set(flat))
    expected = sum((n // bs) * bs if drop else n for n in sizes)
    assert len(flat) == expected
    assert make_group_batches(a, bs, seed, drop_last=drop) == batches


def test_stream_reshuffles_each_epoch():
    a = _assignment([6, 6])
    s = GroupBatchStream(a, 3, seed=0)
    first = [next(s) for _ in range(4)]
    second = [next(s) for _ in range(4)]
    assert sorted(sum(first, [])) == sorted(sum(second, [])) and first != second
    assert s.epoch == 2


def test_stream_empty_epoch_raises():
    s = GroupBatchStream(_assignment([2, 3]), 4, seed=0, drop_last=True)
    with pytest.raises(ValueError):
        next(s)
