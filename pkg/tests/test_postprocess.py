import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from longiseg.postprocess import connected_components, mpdr_filter, remove_small
from longiseg.volume_io import LabelMap

from oracles import flood_fill_components


def _lab(data, spacing=(1.0, 1.0, 1.0)):
    return LabelMap(np.asarray(data, np.uint8), spacing)


def test_two_cubes_and_corner_contact():
    d = np.zeros((6, 6, 6), np.uint8)
    d[0:2, 0:2, 0:2] = 1
    d[4:6, 4:6, 4:6] = 1
    assert len(connected_components(_lab(d))) == 2
    c = np.zeros((3, 3, 3), np.uint8)
    c[0, 0, 0] = c[1, 1, 1] = 1
    assert len(connected_components(_lab(c), 26)) == 1
    assert len(connected_components(_lab(c), 18)) == 2
    assert len(connected_components(_lab(c), 6)) == 2
    with pytest.raises(ValueError):
        connected_components(_lab(c), 8)


@settings(max_examples=60, deadline=None)
@given(
    data=hnp.arrays(np.uint8, st.tuples(*[st.integers(1, 7)] * 3), elements=st.sampled_from([0, 0, 0, 1, 2])),
    conn=st.sampled_from([6, 18, 26]),
)
def test_components_match_flood_fill(data, conn):
    comps = connected_components(_lab(data), conn)
    expected = []
    for cls in (1, 2):
        expected += [(cls, c) for c in flood_fill_components(data == cls, conn)]
    got = [(c.class_id, {tuple(v) for v in c.voxels}) for c in comps]
    assert got == expected  # same partition and same ordering
    for c in comps:
        lin = c.voxels[:, 0] + data.shape[0] * (c.voxels[:, 1] + data.shape[1] * c.voxels[:, 2])
        assert np.all(np.diff(lin) > 0)


def _blob(n_vox, dims=(30, 30, 30), start=(1, 1, 1)):
    """A connected blob of exactly ``n_vox`` voxels filled in x-fastest order."""
    d = np.zeros(dims, np.uint8)
    side = 10
    idx = np.arange(n_vox)
    d[start[0] + idx % side, start[1] + (idx // side) % side, start[2] + idx // side ** 2] = 1
    return d


@pytest.mark.parametrize("n,kept", [(400, False), (499, False), (500, True), (600, True)])
def test_remove_small_threshold(n, kept):
    out = remove_small(_lab(_blob(n)), 0.5)
    assert (out.data.sum() == n) == kept
    assert out.data.sum() in (0, n)


def test_remove_small_is_spacing_aware():
    d = _blob(100)
    assert remove_small(_lab(d, (2, 2, 2))).data.sum() == 100  # 0.8 cm³
    assert remove_small(_lab(d, (1, 1, 1))).data.sum() == 0  # 0.1 cm³
    assert remove_small(_lab(d, (1, 1, 1)), spacing=(2, 2, 2)).data.sum() == 100
    comp = connected_components(_lab(d, (2, 2, 2)))[0]
    assert comp.count == 100 and comp.volume_cm3 == pytest.approx(0.8)


def test_remove_small_per_class():
    d = _blob(600)
    d[d > 0] = 2
    d[20:23, 20:23, 20:23] = 1
    out = remove_small(_lab(d))
    assert (out.data == 2).sum() == 600 and (out.data == 1).sum() == 0


def test_mpdr_boundary_cases():
    d = np.zeros((10, 10, 10), np.uint8)
    d[1:3, 1:3, 1:3] = 1  # fully inside prior
    d[6:9, 6:9, 6:9] = 1  # one voxel of overlap
    d[1:3, 6:9, 1:3] = 2  # GTVn prior is empty, so this goes
    pp = np.zeros_like(d, bool)
    pp[0:4, 0:4, 0:4] = True
    pp[8, 8, 8] = True
    pn = np.zeros_like(d, bool)
    out = mpdr_filter(_lab(d), pp, pn)
    np.testing.assert_array_equal(out.data == 1, d == 1)
    assert not (out.data == 2).any()


def test_mpdr_per_class_vs_union():
    d = np.zeros((6, 6, 6), np.uint8)
    d[1:3, 1:3, 1:3] = 2
    pp = np.zeros_like(d, bool)
    pp[1, 1, 1] = True  # overlaps only the GTVp prior
    pn = np.zeros_like(d, bool)
    assert not mpdr_filter(_lab(d), pp, pn).data.any()
    np.testing.assert_array_equal(mpdr_filter(_lab(d), pp, pn, mode="union").data, d)
    with pytest.raises(ValueError):
        mpdr_filter(_lab(d), pp, pn, mode="any")


def test_mpdr_grid_mismatch():
    with pytest.raises(ValueError):
        mpdr_filter(_lab(np.zeros((4, 4, 4))), np.zeros((4, 4, 3)), np.zeros((4, 4, 4)))


@settings(max_examples=40, deadline=None)
@given(
    data=hnp.arrays(np.uint8, st.tuples(*[st.integers(2, 9)] * 3), elements=st.sampled_from([0, 0, 1, 2])),
    prior=hnp.arrays(np.bool_, st.just((2, 9, 9, 9))),
    min_vox=st.integers(1, 8), conn=st.sampled_from([6, 26]),
)
def test_filters_idempotent_and_shrinking(data, prior, min_vox, conn):
    lab = _lab(data)
    pri = prior[:, : data.shape[0], : data.shape[1], : data.shape[2]]
    min_cm3 = min_vox / 1000.0
    for f in (lambda L: remove_small(L, min_cm3, conn), lambda L: mpdr_filter(L, pri[0], pri[1], conn)):
        once = f(lab)
        np.testing.assert_array_equal(f(once).data, once.data)
        fg = once.data > 0
        assert np.all(data[fg] == once.data[fg])  # survivors keep their label
        assert np.all((data > 0) | ~fg)  # no voxels added
