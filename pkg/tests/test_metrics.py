import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dtcseg import metrics as M
from dtcseg.data import Sample
from dtcseg.oracles import brute_surface_distances


def _square(size, top, left, side):
    m = np.zeros((size, size), dtype=np.uint8)
    m[top : top + side, left : left + side] = 1
    return m


def test_binarize_is_strict():
    np.testing.assert_array_equal(M.binarize([0.2, 0.5, 0.5000001, 0.9]), [0, 0, 1, 1])


def test_overlap_identical_and_disjoint():
    m = _square(6, 1, 1, 3)
    assert M.overlap_metrics(m, m) == (100.0, 100.0)
    assert M.overlap_metrics(m, _square(6, 4, 4, 2)) == (0.0, 0.0)


def test_overlap_both_empty():
    z = np.zeros((4, 4))
    assert M.overlap_metrics(z, z) == (100.0, 100.0)


def test_overlap_shifted_square():
    # 2x2 squares shifted by one column: |A∩B| = 2, |A|+|B| = 8, |A∪B| = 6
    a, b = _square(5, 1, 1, 2), _square(5, 1, 2, 2)
    dice, jac = M.overlap_metrics(a, b)
    assert dice == pytest.approx(50.0, abs=1e-12)
    assert jac == pytest.approx(100 / 3, abs=1e-12)


def test_surface_distances_identical():
    m = _square(10, 2, 3, 4)
    assert M.surface_distances(m, m) == (0.0, 0.0, False)


def test_surface_distances_shift_by_one():
    a, b = _square(12, 3, 3, 5), _square(12, 3, 4, 5)
    asd, hd, degenerate = M.surface_distances(a, b)
    ref_asd, ref_hd = brute_surface_distances(a, b)
    assert not degenerate
    assert asd == pytest.approx(ref_asd, abs=1e-12)
    assert hd == pytest.approx(ref_hd, abs=1e-12)
    assert hd == 1.0


def test_surface_distances_concentric():
    # 8x8 and 4x4 rings two pixels apart everywhere on the inner ring
    big, small = _square(12, 2, 2, 8), _square(12, 4, 4, 4)
    asd, hd, _ = M.surface_distances(big, small)
    ref_asd, ref_hd = brute_surface_distances(big, small)
    assert (asd, hd) == pytest.approx((ref_asd, ref_hd), abs=1e-12)
    assert hd == pytest.approx(math.hypot(2, 2))


def test_degenerate_case_uses_diagonal():
    m = _square(8, 2, 2, 3)
    z = np.zeros((8, 8))
    for pair in ((m, z), (z, m)):
        asd, hd, degenerate = M.surface_distances(*pair)
        assert degenerate and asd == hd == pytest.approx(math.hypot(8, 8))
    assert M.surface_distances(z, z) == (0.0, 0.0, False)


def test_surface_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        M.surface_distances(np.ones((3, 3)), np.ones((3, 4)))


def test_nearest_rank():
    values = np.arange(1, 21, dtype=float)
    assert M.nearest_rank(values, 0.95) == 19.0
    assert M.nearest_rank(np.array([4.0]), 0.95) == 4.0
    assert M.nearest_rank(np.arange(1, 11, dtype=float), 0.95) == 10.0


nonempty = st.integers(2, 16).flatmap(
    lambda n: arrays(np.uint8, (n, n), elements=st.integers(0, 1)).filter(lambda a: a.any())
)


@settings(max_examples=150, deadline=None)
@given(st.data())
def test_surface_distances_match_brute_force(data):
    p = data.draw(nonempty)
    g = data.draw(arrays(np.uint8, p.shape, elements=st.integers(0, 1)).filter(lambda a: a.any()))
    asd, hd, degenerate = M.surface_distances(p, g)
    ref_asd, ref_hd = brute_surface_distances(p, g)
    assert not degenerate
    assert asd == pytest.approx(ref_asd, abs=1e-9)
    assert hd == pytest.approx(ref_hd, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_metrics_are_symmetric(data):
    p = data.draw(nonempty)
    g = data.draw(arrays(np.uint8, p.shape, elements=st.integers(0, 1)).filter(lambda a: a.any()))
    assert M.overlap_metrics(p, g) == M.overlap_metrics(g, p)
    assert M.surface_distances(p, g) == pytest.approx(M.surface_distances(g, p), abs=1e-12)


# evaluate ---------------------------------------------------------------------


class _Oracle:
    """Stands in for a network: returns a fixed probability map per input image."""

    def __init__(self, lookup):
        self.lookup = lookup

    def __call__(self, images):
        from dtcseg import tensor as T

        probs = np.stack([self.lookup[float(img[0, 0, 0])] for img in images])[:, None]
        return T.Tensor(probs), T.Tensor(np.zeros_like(probs))


def _samples():
    out = []
    for i, side in enumerate((3, 4, 5)):
        img = np.zeros((8, 8))
        img[0, 0] = float(i)
        out.append(Sample(i, img, _square(8, 1, 1, side)))
    return out[::-1]


def test_evaluate_perfect_predictor():
    samples = _samples()
    net = _Oracle({float(s.id): s.mask.astype(float) for s in samples})
    report = M.evaluate(net, samples)
    assert [r.id for r in report.rows] == [0, 1, 2]
    assert report.mean() == {"dice": 100.0, "jaccard": 100.0, "asd": 0.0, "hd95": 0.0}
    assert report.degenerate_count == 0


def test_evaluate_half_predictor_is_empty():
    samples = _samples()
    net = _Oracle({float(s.id): np.full((8, 8), 0.5) for s in samples})
    report = M.evaluate(net, samples)
    assert all(r.dice == 0.0 and r.degenerate for r in report.rows)
    assert report.rows[0].hd95 == pytest.approx(math.hypot(8, 8))


def test_report_csv_layout():
    samples = _samples()
    net = _Oracle({float(s.id): s.mask.astype(float) for s in samples})
    lines = M.evaluate(net, samples).to_csv().splitlines()
    assert lines[0] == M.CSV_HEADER
    assert lines[1] == "0,100.000000,100.000000,0.000000,0.000000,0"
    assert lines[-2].startswith("# mean,100.000000")
    assert lines[-1].startswith("# std,0.000000")


def test_evaluate_rejects_bad_input():
    with pytest.raises(ValueError, match="empty"):
        M.evaluate(None, [])
    with pytest.raises(ValueError, match="no mask"):
        M.evaluate(None, [Sample(0, np.zeros((4, 4)))])
