import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import coarsetrace as ct
from coarsetrace.space import lex_sort


def test_distance_examples(z2):
    assert ct.distance(z2, (0, 0), (3, -2)) == 3
    assert ct.distance(z2, (5, 7), (5, 7)) == 0
    l1 = ct.LatticeSpace(2, metric="l1")
    assert ct.distance(l1, (0, 0), (3, -2)) == 5


def test_distance_dimension_mismatch(z2):
    with pytest.raises(ct.DimensionMismatchError):
        ct.distance(z2, (0,), (1, 2))


def test_metric_axioms_sampled(z2):
    rng = np.random.default_rng(0)
    a = rng.integers(-50, 50, (100, 2))
    b = rng.integers(-50, 50, (100, 2))
    c = rng.integers(-50, 50, (100, 2))
    dab = z2.distance(a, b)
    assert (dab == z2.distance(b, a)).all()
    assert ((dab == 0) == (a == b).all(axis=1)).all()
    assert (z2.distance(a, c) <= dab + z2.distance(b, c)).all()


def test_thicken_point_examples():
    pt = ct.FiniteSet.of(1, [[0]])
    ball = ct.thicken(pt, 2)
    window = ct.Box.cube(1, 6)
    got = ct.enumerate_region(ball, window)
    assert got[:, 0].tolist() == [-2, -1, 0, 1, 2]

    half = ct.HalfSpace(1, 0, 0, "geq")
    shifted = ct.thicken(half, 3)
    got = ct.enumerate_region(shifted, ct.Box.cube(1, 8))
    assert got[:, 0].min() == -3

    pt2 = ct.FiniteSet.of(2, [[0, 0]])
    box = ct.thicken(pt2, 1)
    assert len(ct.enumerate_region(box, ct.Box.cube(2, 4))) == 9


def test_thicken_zero_is_identity(z2):
    y = ct.Sector(2, (0, 0), 0.3, 2.0)
    window = ct.Box.cube(2, 10)
    assert (ct.thicken(y, 0).contains(window.sites()) == y.contains(window.sites())).all()


def test_enumerate_examples(z2):
    w = ct.Box(2, (0, 0), (1, 1))
    alls = ct.enumerate_region(ct.All(2), w)
    assert alls.tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]
    assert len(ct.enumerate_region(ct.Empty(2), w)) == 0
    half = ct.HalfSpace(1, 0, 0, "geq")
    got = ct.enumerate_region(half, ct.Box.cube(1, 2))
    assert got[:, 0].tolist() == [0, 1, 2]


@given(st.integers(-8, 8), st.integers(0, 6), st.integers(0, 6))
@settings(max_examples=30, deadline=None)
def test_thickening_monotone(threshold, r1, r2):
    lo, hi = sorted((r1, r2))
    region = ct.HalfSpace(2, 0, threshold, "lt")
    window = ct.Box.cube(2, 20)
    small = ct.thicken(region, lo).contains(window.sites())
    big = ct.thicken(region, hi).contains(window.sites())
    assert (big | ~small).all()  # small subset of big


@given(st.lists(st.tuples(st.integers(-6, 6), st.integers(-6, 6)),
                min_size=1, max_size=8),
       st.lists(st.tuples(st.integers(-6, 6), st.integers(-6, 6)),
                min_size=1, max_size=8),
       st.integers(0, 4))
@settings(max_examples=25, deadline=None)
def test_thickening_union_intersection_laws(xs, ys, r):
    X = ct.FiniteSet.of(2, xs)
    Y = ct.FiniteSet.of(2, ys)
    window = ct.Box.cube(2, 14)
    pts = window.sites()
    lhs = ct.thicken(ct.union(X, Y), r).contains(pts)
    rhs = ct.thicken(X, r).contains(pts) | ct.thicken(Y, r).contains(pts)
    assert (lhs == rhs).all()
    lhs_i = ct.thicken(ct.intersection(X, Y), r).contains(pts)
    rhs_i = ct.thicken(X, r).contains(pts) & ct.thicken(Y, r).contains(pts)
    assert (~lhs_i | rhs_i).all()  # inclusion only


def test_complement_involution(z2):
    region = ct.Sector(2, (1, -1), 0.2, 2.5)
    window = ct.Box.cube(2, 9)
    twice = ct.complement(ct.complement(region))
    assert (twice.contains(window.sites()) == region.contains(window.sites())).all()


def test_transversality_standard_halfspaces_analytic():
    xs = ct.standard_halfspaces(2)
    boundary = []
    for x in xs:
        boundary.extend([x, ct.complement(x)])
    cert = ct.check_transversality(boundary, [5])
    assert cert.verdict == "certified-analytic"
    assert cert.radius_for(5) == 5
    # affine in R
    cert2 = ct.check_transversality(boundary, [11])
    assert cert2.radius_for(11) == 11


def test_transversality_sectors_on_window():
    A = ct.sector_partition([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    cert = ct.check_transversality(A.parts, [4], window=ct.Box.cube(2, 40))
    assert cert.verdict == "certified-on-window"
    assert cert.bounding_radius[0] < 20


def test_transversality_strip_partition_fails_everywhere():
    strip = ct.Partition((
        ct.HalfSpace(2, 0, -1, "lt"),
        ct.intersection(ct.HalfSpace(2, 0, -1, "geq"), ct.HalfSpace(2, 0, 2, "lt")),
        ct.HalfSpace(2, 0, 2, "geq")))
    for width in (30, 50, 80):
        cert = ct.check_transversality(strip.parts, [10], window=ct.Box.cube(2, width))
        assert cert.verdict == "failed"
        assert "window-too-small" in cert.detail


def test_standard_partition_examples():
    p1 = ct.standard_partition(1)
    sites = ct.Box.cube(1, 10).sites()
    owner = p1.membership(sites)
    assert (owner == (sites[:, 0] < 0).astype(int)).all()

    p2 = ct.standard_partition(2)
    window = ct.Box.cube(2, 10)
    owner = p2.membership(window.sites())  # raises unless disjoint cover
    assert len(owner) == 441
    # explicit membership spot checks
    assert p2.parts[0].contains([(3, 4)])[0]
    assert p2.parts[1].contains([(-1, 4)])[0]
    assert p2.parts[2].contains([(3, -1)])[0] and p2.parts[2].contains([(-3, -1)])[0]


def test_partition_from_halfspaces_covers_and_disjoint():
    xs = [ct.HalfSpace(2, 0, 2, "geq"), ct.HalfPlane(2, (1, 1), 0)]
    part = ct.partition_from_halfspaces(xs)
    owner = part.membership(ct.Box.cube(2, 12).sites())
    assert owner.min() >= 0


def test_classifying_map_example():
    part = ct.standard_partition(2)
    f = ct.classifying_map(part, (3, 4))
    assert f.tolist() == [0.0, 4.0, 5.0]
    assert (f == 0).sum() == 1


def test_classifying_map_single_zero_everywhere():
    part = ct.standard_partition(2)
    rng = np.random.default_rng(3)
    for x in rng.integers(-15, 15, (25, 2)):
        f = ct.classifying_map(part, x)
        assert (f == 0).sum() == 1
        assert int(np.argmin(f)) == part.membership(x[None, :])[0]


@given(st.integers(-12, 12), st.integers(-12, 12),
       st.integers(-12, 12), st.integers(-12, 12))
@settings(max_examples=40, deadline=None)
def test_classifying_map_is_1_lipschitz(x0, x1, y0, y1):
    part = ct.standard_partition(2)
    fx = ct.classifying_map(part, (x0, x1))
    fy = ct.classifying_map(part, (y0, y1))
    assert np.abs(fx - fy).max() <= max(abs(x0 - y0), abs(x1 - y1))


def test_classifying_map_window_too_small():
    part = ct.Partition((ct.FiniteSet.of(2, [[900, 900]]),
                         ct.complement(ct.FiniteSet.of(2, [[900, 900]]))))
    with pytest.raises(ct.WindowTooSmallError):
        ct.classifying_map(part, (0, 0), max_radius=16)


def test_sector_pullback_reproduces_parts():
    part = ct.sector_partition([0.1, 2.2, 4.4])
    pts = ct.Box.cube(2, 5).sites()
    for i in range(3):
        pullback = ct.SectorPullback(2, part.parts, i, search_radius=64)
        assert (pullback.contains(pts) == part.parts[i].contains(pts)).all()


def test_region_json_roundtrip():
    region = ct.union(
        ct.intersection(ct.HalfSpace(2, 0, 3, "geq"), ct.complement(ct.Box(2, (0, 0), (2, 2)))),
        ct.thicken(ct.FiniteSet.of(2, [[1, 1], [2, -3]]), 2),
        ct.Sector(2, (0, 0), 0.5, 2.5),
        ct.HalfPlane(2, (1, -2), 4))
    doc = ct.region_to_doc(region)
    back = ct.region_from_doc(doc)
    pts = ct.Box.cube(2, 8).sites()
    assert (back.contains(pts) == region.contains(pts)).all()

    part = ct.standard_partition(2)
    back_p = ct.partition_from_doc(ct.partition_to_doc(part))
    assert (back_p.membership(pts) == part.membership(pts)).all()


def test_enumeration_is_threadsafe_and_memoized():
    import threading

    region = ct.thicken(ct.Sector(2, (0, 0), 0.4, 2.0), 3)
    window = ct.Box.cube(2, 15)
    results = []

    def work():
        results.append(ct.enumerate_region(region, window))

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for got in results[1:]:
        assert (got == results[0]).all()


def test_lex_sort_deterministic():
    pts = np.array([[2, 1], [0, 5], [2, -1], [0, 3]])
    assert lex_sort(pts).tolist() == [[0, 3], [0, 5], [2, -1], [2, 1]]
