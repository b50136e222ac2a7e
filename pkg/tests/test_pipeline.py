import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from organseg.pipeline import (
    batch_iterator,
    case_samples,
    center_crop,
    crop_array,
    crop_offsets,
    elastic_transform_2d,
    make_folds,
    stack_slices,
)


def test_stack_interior_and_edges(corpus):
    case = corpus[0]
    vol = case.intensities
    st_ = stack_slices(case, 20, 5)
    np.testing.assert_array_equal(st_.values, vol[18:23])
    assert st_.values.shape == (5, 64, 64)
    assert st_.case_ref == (case.source, case.case_id)
    edge = stack_slices(case, 0, 5)
    np.testing.assert_array_equal(edge.values, vol[[0, 0, 0, 1, 2]])
    top = stack_slices(case, 39, 5)
    np.testing.assert_array_equal(top.values, vol[[37, 38, 39, 39, 39]])


def test_stack_errors(corpus):
    with pytest.raises(IndexError):
        stack_slices(corpus[0], 40, 5)
    with pytest.raises(ValueError):
        stack_slices(corpus[0], 3, 4)


def test_crop_offsets():
    assert crop_offsets(512, 512, 320, 320) == (96, 96)
    assert crop_offsets(64, 64, 48, 48) == (8, 8)
    a = np.arange(5 * 64 * 64).reshape(5, 64, 64)
    np.testing.assert_array_equal(crop_array(a, 64, 64), a)
    np.testing.assert_array_equal(crop_array(a, 48, 48), a[:, 8:56, 8:56])
    with pytest.raises(ValueError):
        crop_offsets(64, 64, 65, 64)


def test_crop_commutes_with_stack(corpus):
    case = corpus[3]
    for z in (0, 1, 17, 39):
        a = center_crop(stack_slices(case, z, 5), 48, 40).values
        b = stack_slices(case, z, 5, volume=crop_array(case.intensities, 48, 40)).values
        np.testing.assert_array_equal(a, b)


def test_samples_follow_annotation(catalog, corpus):
    for case in corpus[6:9]:
        samples = case_samples(case, catalog, 5, (48, 48))
        assert len(samples) == case.shape[0]
        full = crop_array(case.full_label_map, 48, 48)
        for z, s in enumerate(samples):
            g = s.target_onehot
            assert (g.sum(axis=0) == 1).all()
            off = np.flatnonzero(s.availability == 0)
            assert g[off].sum() == 0
            hidden = np.isin(full[z], off)
            assert (g[catalog.background_index][hidden] == 1).all()
            assert s.region_label == case.region_per_slice[z]
            assert 0.0 <= s.input.values.min() and s.input.values.max() <= 1.0


def test_elastic_identity_and_determinism(catalog, corpus):
    s = case_samples(corpus[10], catalog, 5, (48, 48))[20]
    same = elastic_transform_2d(s, 0.0, 2.0, 3)
    np.testing.assert_array_equal(same.input.values, s.input.values)
    np.testing.assert_array_equal(same.target_onehot, s.target_onehot)
    a = elastic_transform_2d(s, 3.0, 2.0, 3)
    b = elastic_transform_2d(s, 3.0, 2.0, 3)
    np.testing.assert_array_equal(a.input.values, b.input.values)
    np.testing.assert_array_equal(a.target_onehot, b.target_onehot)
    assert not np.array_equal(a.input.values, s.input.values)
    assert (a.target_onehot.sum(axis=0) == 1).all()
    with pytest.raises(ValueError):
        elastic_transform_2d(s, -1.0, 2.0, 3)


@settings(max_examples=25, deadline=None)
@given(amp=st.floats(0.1, 8.0), smooth=st.floats(0.5, 6.0), seed=st.integers(0, 2**31))
def test_elastic_keeps_one_hot(catalog, corpus, amp, smooth, seed):
    s = case_samples(corpus[12], catalog, 5, (48, 48))[15]
    w = elastic_transform_2d(s, amp, smooth, seed)
    assert (w.target_onehot.sum(axis=0) == 1).all()
    assert np.isfinite(w.input.values).all()


def test_folds_stratified():
    ids = [f"r{r}_s{s}" for r in range(3) for s in range(7)]
    srcs = [r for r in range(3) for _ in range(7)]
    folds = make_folds(ids, 7, seed=0, sources=srcs)
    assert len(folds) == 7
    tests = [t for _, t in folds]
    assert sorted(sum(tests, [])) == sorted(ids)
    for train, test in folds:
        assert len(test) == 3
        assert sorted(int(t[1]) for t in test) == [0, 1, 2]
        assert set(train).isdisjoint(test)
        assert len(train) + len(test) == 21
    assert make_folds(ids, 7, 0, srcs) == folds
    assert make_folds(ids, 7, 1, srcs) != folds


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 40), k=st.integers(2, 8), seed=st.integers(0, 1000))
def test_folds_partition(n, k, seed):
    if n < k:
        with pytest.raises(ValueError):
            make_folds(list(range(n)), k, seed)
        return
    folds = make_folds(list(range(n)), k, seed)
    tests = [set(t) for _, t in folds]
    assert set().union(*tests) == set(range(n))
    assert sum(len(t) for t in tests) == n
    assert max(map(len, tests)) - min(map(len, tests)) <= 1


def test_folds_warn_on_small_source():
    with pytest.warns(UserWarning):
        make_folds(list(range(9)), 4, 0, sources=[0] * 7 + [1] * 2)
    with pytest.raises(ValueError):
        make_folds([1], 2, 0)


def test_batches(catalog, corpus):
    samples = case_samples(corpus[0], catalog, 5, (48, 48)) [:35]
    sizes = [len(b.inputs) for b in batch_iterator(samples, 16, 0)]
    assert sizes == [16, 16, 3]
    first = [b.refs for b in batch_iterator(samples, 16, 7)]
    assert first == [b.refs for b in batch_iterator(samples, 16, 7)]
    b = next(batch_iterator(samples, 16, 0))
    assert b.inputs.shape == (16, 5, 48, 48)
    assert b.targets.shape == (16, 9, 48, 48)
    assert b.availabilities.shape == (16, 8)
    assert b.region_labels.shape == (16,)
    with pytest.raises(ValueError):
        batch_iterator([], 16, 0)
    with pytest.raises(ValueError):
        batch_iterator(samples, 0, 0)
