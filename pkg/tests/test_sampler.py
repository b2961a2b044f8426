import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import population_label_map
from xdcnn import sampler
from xdcnn.errors import ValidationError
from xdcnn.hsdata import HyperCube, LabelMap
from xdcnn.sampler import BatchSchedule, Patch


# --- splits ----------------------------------------------------------------------


@pytest.mark.parametrize("name,n_train,n_test", [
    ("indian_pines", 1600, 6904),
    ("salinas", 3200, 50929),
    ("pavia_university", 1800, 40976),
])
def test_descriptor_split_totals(descriptors, name, n_train, n_test):
    split = sampler.split_train_test(population_label_map(descriptors[name]), 200, seed=0)
    assert (split.n_train, split.n_test) == (n_train, n_test)
    assert [len(split.test[k + 1]) for k in range(len(split.class_names))] == descriptors[name]["test_per_class"]


def test_split_per_class_zero():
    lm = LabelMap(np.array([[1, 2, 0], [2, 1, 1]]), ["a", "b"])
    split = sampler.split_train_test(lm, 0, seed=1)
    assert split.n_train == 0 and split.n_test == 5


def test_split_too_few_pixels_names_class():
    lm = LabelMap(np.array([[1, 1, 1, 2, 2]]), ["wide", "thin"])
    with pytest.raises(ValidationError, match="thin"):
        sampler.split_train_test(lm, 2, seed=0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), per_class=st.integers(1, 5))
def test_split_disjoint_exact_labeled(seed, per_class):
    labels = np.random.default_rng(7).integers(0, 4, (12, 12)).astype(np.uint16)
    lm = LabelMap(labels, ["a", "b", "c"])
    split = sampler.split_train_test(lm, per_class, seed)
    for k in (1, 2, 3):
        tr, te = set(split.train[k]), set(split.test[k])
        assert len(split.train[k]) == per_class == len(tr)
        assert not tr & te
        assert len(tr) + len(te) == int(np.sum(labels == k))
        assert all(labels[y, x] == k for x, y in tr | te)


def test_split_deterministic_and_json_round_trip(tmp_path):
    lm = LabelMap(np.random.default_rng(3).integers(0, 3, (10, 10)).astype(np.uint16), ["a", "b"])
    a = sampler.split_train_test(lm, 4, seed=11)
    b = sampler.split_train_test(lm, 4, seed=11)
    assert a == b
    assert a != sampler.split_train_test(lm, 4, seed=12)
    path = tmp_path / "split.json"
    sampler.save_split(a, path)
    assert sampler.load_split(path) == a
    record = a.to_json()
    assert set(record) == {"seed", "per_class", "classes"}
    assert set(record["classes"]["a"]) == {"train", "test"}


# --- patches ---------------------------------------------------------------------


def _cube(b=3, h=7, w=6, seed=0):
    return HyperCube(np.random.default_rng(seed).standard_normal((b, h, w)).astype(np.float32))


def test_interior_patch_matches_cube():
    cube = _cube()
    p = sampler.extract_patch(cube, 3, 3, 5)
    assert p.data.tobytes() == np.ascontiguousarray(cube.data[:, 1:6, 1:6]).tobytes()


def test_corner_patch_mirror_indices():
    assert sampler.reflect_index(np.arange(-2, 3), 7).tolist() == [2, 1, 0, 1, 2]
    cube = _cube()
    p = sampler.extract_patch(cube, 0, 0, 5)
    idx = [2, 1, 0, 1, 2]
    assert np.array_equal(p.data, cube.data[:, idx][:, :, idx])


def test_far_corner_mirror():
    cube = _cube(h=7, w=6)
    p = sampler.extract_patch(cube, 5, 6, 5)
    rows, cols = [4, 5, 6, 5, 4], [3, 4, 5, 4, 3]
    assert np.array_equal(p.data, cube.data[:, rows][:, :, cols])


def test_single_pixel_window():
    cube = _cube()
    p = sampler.extract_patch(cube, 4, 2, 1)
    assert p.data.shape == (3, 1, 1)
    assert np.array_equal(p.data[:, 0, 0], cube.data[:, 2, 4])


def test_patch_outside_image_rejected():
    with pytest.raises(ValidationError):
        sampler.extract_patch(_cube(), 6, 0, 5)


# --- D4 --------------------------------------------------------------------------


def _d4_oracle(n):
    """All index maps (i, j) -> (i', j') of an n x n grid preserving the square's symmetry."""
    maps = []
    for swap, fi, fj in itertools.product((False, True), repeat=3):
        def f(i, j, swap=swap, fi=fi, fj=fj):
            a, b = (j, i) if swap else (i, j)
            return (n - 1 - a if fi else a, n - 1 - b if fj else b)
        maps.append(f)
    return maps


def test_d4_enumeration_2x2():
    base = np.array([[1, 2], [3, 4]])
    expected = set()
    for f in _d4_oracle(2):
        img = np.empty_like(base)
        for i in range(2):
            for j in range(2):
                img[f(i, j)] = base[i, j]
        expected.add(tuple(img.ravel()))
    assert len(expected) == 8
    outs = sampler.augment_d4(Patch(base[None], 1, 0))
    got = [tuple(p.data[0].ravel()) for p in outs]
    assert len(outs) == 8
    assert got[0] == (1, 2, 3, 4)
    assert set(got) == expected


def test_d4_constant_patch():
    outs = sampler.augment_d4(Patch(np.full((2, 5, 5), 3.0), 2, 1))
    assert all(np.array_equal(o.data, outs[0].data) for o in outs)
    assert all(o.label == 2 and o.domain_id == 1 for o in outs)


def test_d4_non_square_rejected():
    with pytest.raises(ValidationError):
        sampler.augment_d4(Patch(np.zeros((1, 3, 5)), 1, 0))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_d4_closure_and_involutions(seed):
    x = np.random.default_rng(seed).standard_normal((2, 5, 5))
    images = [sampler.d4_transform(x, k) for k in range(8)]
    keys = {im.tobytes() for im in images}
    assert len(keys) == 8
    for a in range(8):
        for b in range(8):
            assert sampler.d4_transform(images[b], a).tobytes() in keys
    for k in (4, 5, 6, 7, 2):
        assert sampler.d4_transform(sampler.d4_transform(x, k), k).tobytes() == x.tobytes()


# --- batches ---------------------------------------------------------------------


def test_three_domains_three_batches(small_domains):
    cubes = [c for c, _, _ in small_domains]
    pools = [sampler.split_train_test(l, 5, 0).train_pixels() for _, l, _ in small_domains]
    sched = BatchSchedule(cubes, pools, batch_size=10, seed=0)
    batches = sched.next_batches()
    assert len(batches) == 3
    for d, b in enumerate(batches):
        assert b.domain_id == d
        assert b.x.shape == (10, cubes[d].bands, 5, 5)
        assert b.labels.shape == (10,)
    assert [sched.pool_size(d) for d in range(3)] == [8 * len(p) for p in pools]


def test_batches_deterministic(small_domains):
    cubes = [c for c, _, _ in small_domains]
    pools = [sampler.split_train_test(l, 5, 0).train_pixels() for _, l, _ in small_domains]
    a = BatchSchedule(cubes, pools, seed=3)
    b = BatchSchedule(cubes, pools, seed=3)
    for _ in range(5):
        for ba, bb in zip(sampler.next_batches(a), sampler.next_batches(b)):
            assert ba.x.data.tobytes() == bb.x.data.tobytes()
            assert np.array_equal(ba.labels, bb.labels)


def test_domain_stream_independent_of_companions(small_domains):
    cubes = [c for c, _, _ in small_domains]
    pools = [sampler.split_train_test(l, 5, 0).train_pixels() for _, l, _ in small_domains]
    joint = BatchSchedule(cubes, pools, seed=3, stream_keys=[10, 20, 30])
    alone = BatchSchedule(cubes[1:2], pools[1:2], seed=3, stream_keys=[20])
    for _ in range(4):
        assert joint.next_batches()[1].x.data.tobytes() == alone.next_batches()[0].x.data.tobytes()


def test_single_sample_pool():
    cube = _cube(b=2, h=6, w=6)
    sched = BatchSchedule([cube], [[(2, 3, 1)]], batch_size=10, seed=0)
    variants = {sampler.d4_transform(sampler.extract_patch(cube, 2, 3).data, k).tobytes() for k in range(8)}
    seen = set()
    for _ in range(20):
        (b,) = sched.next_batches()
        assert b.coords == [(2, 3)] * 10
        assert np.all(b.labels == 0)
        for m in range(10):
            assert b.x.data[m].tobytes() in variants
            seen.add(b.x.data[m].tobytes())
    assert len(seen) > 1


def test_empty_pool_rejected():
    with pytest.raises(ValidationError):
        BatchSchedule([_cube()], [[]])


def test_no_test_pixel_in_batches(small_domains):
    cubes = [c for c, _, _ in small_domains]
    splits = [sampler.split_train_test(l, 5, 0) for _, l, _ in small_domains]
    sched = BatchSchedule(cubes, [s.train_pixels() for s in splits], seed=1)
    test_sets = [{(x, y) for x, y, _ in s.test_pixels()} for s in splits]
    train_sets = [{(x, y) for x, y, _ in s.train_pixels()} for s in splits]
    for _ in range(300):
        for b in sched.next_batches():
            for c in b.coords:
                assert c not in test_sets[b.domain_id]
                assert c in train_sets[b.domain_id]
