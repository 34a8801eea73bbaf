import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fissureseg import autodiff as ad
from fissureseg import gradcheck as gc
from fissureseg.errors import ParameterError
from fissureseg.morphology import (DEFAULT_ADJACENCY, FissureAdjacency, dilate_binary, fgm_forward,
                                   fgm_normalizer, fissure_gt_from_lobes)
from fissureseg.volume import LabelVolume, argmax_channel, one_hot

PAIR = FissureAdjacency.from_triples([(1, 1, 2)])


def brute_dilate(mask, r):
    out = np.zeros_like(mask)
    for idx in itertools.product(*(range(n) for n in mask.shape)):
        lo = [max(0, i - r) for i in idx]
        hi = [i + r + 1 for i in idx]
        out[idx] = mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].any()
    return out


def brute_fissure_gt(lab, r, adj):
    out = np.zeros(lab.shape, dtype=int)
    for idx in itertools.product(*(range(n) for n in lab.shape)):
        for e in adj.entries:
            near = set()
            for off in itertools.product(range(-r, r + 1), repeat=3):
                q = tuple(i + o for i, o in zip(idx, off))
                if all(0 <= a < n for a, n in zip(q, lab.shape)):
                    near.add(int(lab[q]))
            if e.lobe_a in near and e.lobe_b in near:
                out[idx] = e.fissure
                break
    return out


def fgm_value(probs, adj=DEFAULT_ADJACENCY, radius=1):
    return fgm_forward(ad.Tape().constant(probs), adj, radius).value


def test_dilate_single_voxel():
    m = np.zeros((5, 5, 5), dtype=bool)
    m[2, 2, 2] = True
    out = dilate_binary(m, 1)
    expected = np.zeros_like(m)
    expected[1:4, 1:4, 1:4] = True
    np.testing.assert_array_equal(out, expected)
    assert not dilate_binary(np.zeros_like(m), 1).any()


def test_dilate_rejects_radius_zero():
    with pytest.raises(ParameterError):
        dilate_binary(np.ones((2, 2, 2), dtype=bool), 0)


def test_dilate_composition_and_brute_force(rng):
    for _ in range(10):
        m = rng.random((6, 6, 6)) < 0.05
        d1 = dilate_binary(m, 1)
        np.testing.assert_array_equal(d1, brute_dilate(m, 1))
        np.testing.assert_array_equal(dilate_binary(d1, 1), dilate_binary(m, 2))


def test_fissure_gt_line():
    lab = np.array([1, 1, 2, 2]).reshape(1, 1, 4)
    np.testing.assert_array_equal(fissure_gt_from_lobes(lab, 1, PAIR).data.ravel(), [0, 1, 1, 0])


def test_fissure_gt_single_lobe_is_background():
    out = fissure_gt_from_lobes(np.full((3, 3, 3), 4), 1)
    assert not out.data.any() and out.num_classes == 5


def test_fissure_gt_contested_voxel_takes_lowest_class():
    # RHF covers voxels 0-1, ROF-upper voxel 1, ROF-lower voxels 1-2
    lab = np.array([3, 4, 5]).reshape(1, 1, 3)
    np.testing.assert_array_equal(fissure_gt_from_lobes(lab, 1).data.ravel(), [2, 2, 4])


def test_fissure_gt_rejects_adjacency_beyond_lobe_count():
    with pytest.raises(ParameterError):
        fissure_gt_from_lobes(LabelVolume(np.zeros((2, 2, 2)), 3), 1, DEFAULT_ADJACENCY)


def test_fissure_gt_matches_brute_force(rng):
    for _ in range(5):
        lab = rng.integers(0, 6, size=tuple(rng.integers(2, 6, size=3)))
        for r in (1, 2):
            np.testing.assert_array_equal(fissure_gt_from_lobes(lab, r).data,
                                          brute_fissure_gt(lab, r, DEFAULT_ADJACENCY))


@pytest.mark.parametrize("rows", [[], [(2, 1, 2)], [(1, 1, 1)], [(1, 0, 2)], [(1, 1, 2, 3, 4)]])
def test_adjacency_validation(rows):
    with pytest.raises(ParameterError):
        FissureAdjacency.from_triples(rows)


def test_default_adjacency_table():
    assert DEFAULT_ADJACENCY.to_triples() == [[1, 1, 2], [2, 3, 4], [3, 3, 5], [4, 4, 5]]
    assert DEFAULT_ADJACENCY.names() == ["LOF", "RHF", "ROF-upper", "ROF-lower"]


def test_fgm_single_voxel():
    z = fgm_value(np.array([0.0, 0.6, 0.4]).reshape(3, 1, 1, 1), PAIR)
    np.testing.assert_allclose(z.ravel(), [0.76, 0.24], rtol=1e-14)


def test_fgm_line_matches_gt():
    z = fgm_value(one_hot(np.array([1, 1, 2, 2]).reshape(1, 1, 4), 3), PAIR)
    np.testing.assert_array_equal(z[1].ravel(), [0, 1, 1, 0])
    np.testing.assert_array_equal(z[0].ravel(), [1, 0, 0, 1])


def test_fgm_single_lobe():
    z = fgm_value(one_hot(np.ones((3, 3, 3), dtype=int), 6))
    assert np.all(z[0] == 1.0) and np.all(z[1:] == 0.0)


def test_fgm_channel_mismatch():
    with pytest.raises(ParameterError):
        fgm_value(np.full((4, 2, 2, 2), 0.25))


@given(st.integers(0, 2**32 - 1), st.integers(1, 2))
def test_fgm_hard_input_equivalence(seed, radius):
    r = np.random.default_rng(seed)
    lab = r.integers(0, 6, size=tuple(r.integers(1, 7, size=3)))
    z = fgm_value(one_hot(lab, 6), radius=radius)
    np.testing.assert_array_equal(argmax_channel(z), fissure_gt_from_lobes(lab, radius).data)


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 8.0))
def test_fgm_normalization(seed, scale):
    r = np.random.default_rng(seed)
    p = gc.softmax_np(scale * r.standard_normal((6, 4, 3, 5)))
    z = fgm_value(p)
    assert np.max(np.abs(z.sum(axis=0) - 1.0)) <= 1e-12
    assert np.all(fgm_normalizer(p) >= 1.0)


def test_fgm_gradient(rng):
    for _ in range(3):
        logits, labels = gc.random_instance(rng)
        fiss = fissure_gt_from_lobes(labels, 1, gc.THREE_LOBE_ADJACENCY)
        w = rng.standard_normal((4,) + labels.shape)

        def fn(x):
            z = fgm_forward(ad.softmax_channels(x), gc.THREE_LOBE_ADJACENCY, 1)
            return ad.sum_all(ad.mul(z, z.tape.constant(w)))

        assert fiss.data.any()
        assert gc.check(fn, logits).max_rel_error < gc.REL_TOL
