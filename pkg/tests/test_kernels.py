"""Both kernel paths (numba loops, numpy vectorised) must agree exactly."""
import itertools

import numpy as np
import pytest

from primpoly import kernels
from primpoly._accel import HAS_NUMBA

pytestmark = pytest.mark.skipif(not HAS_NUMBA, reason="numba path unavailable")


def random_polygon(rng, n, size):
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = rng.uniform(0.3, 1.0, n) * size / 2.5
    return size / 2 + rad * np.cos(ang), size / 2 + rad * np.sin(ang)


@pytest.mark.parametrize("seed", range(20))
def test_fill_paths_agree(seed):
    rng = np.random.default_rng(seed)
    xs, ys = random_polygon(rng, int(rng.integers(3, 20)), 48)
    if seed % 3 == 0:
        xs = xs - 20  # partly outside the grid
    a = kernels._fill_nb(xs, ys, 48, 40)
    b = kernels._fill_np(xs, ys, 48, 40)
    assert np.array_equal(a, b)


def test_fill_axis_aligned_square():
    xs = np.array([0.0, 10.0, 10.0, 0.0])
    ys = np.array([0.0, 0.0, 10.0, 10.0])
    for fn in (kernels._fill_nb, kernels._fill_np):
        m = fn(xs, ys, 20, 20)
        assert m.sum() == 100 and m[:10, :10].all()


def brute_min(cost):
    n, m = cost.shape  # rows are targets here, rows <= cols
    best = np.inf
    for cols in itertools.permutations(range(m), n):
        best = min(best, sum(cost[r, c] for r, c in enumerate(cols)))
    return best


@pytest.mark.parametrize("seed", range(30))
def test_lsap_paths_agree_and_are_optimal(seed):
    rng = np.random.default_rng(seed)
    nr = int(rng.integers(1, 6))
    nc = int(rng.integers(nr, 7))
    cost = rng.normal(size=(nr, nc))
    if seed % 5 == 0:
        cost = np.round(cost)  # many ties
    a, ok_a = kernels._lsap_nb(cost)
    b, ok_b = kernels._lsap_np(cost)
    assert ok_a and ok_b
    assert np.array_equal(a, b)
    assert len(set(a.tolist())) == nr
    assert np.isclose(cost[np.arange(nr), a].sum(), brute_min(cost), rtol=0, atol=1e-12)


def test_lsap_rejects_tall_grid():
    with pytest.raises(ValueError):
        kernels.linear_assignment(np.zeros((3, 2)))


def test_pairwise_iou_paths_agree():
    rng = np.random.default_rng(0)
    a = (rng.random((4, 30, 30)) < 0.4).astype(np.uint8)
    b = (rng.random((3, 30, 30)) < 0.4).astype(np.uint8)
    b[0] = 0
    fa, fb = a.reshape(4, -1), b.reshape(3, -1)
    x = kernels._pairwise_iou_nb(fa, fb)
    y = kernels._pairwise_iou_np(fa, fb)
    assert np.array_equal(x, y)
    i = (a[1] & b[2]).sum() / (a[1] | b[2]).sum()
    assert x[1, 2] == i
