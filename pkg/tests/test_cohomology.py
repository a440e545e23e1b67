import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import coarsetrace as ct

X = ct.HalfSpace(2, 0, 0, "geq")
Y = ct.HalfSpace(2, 1, 0, "geq")
X1D = ct.HalfSpace(1, 0, 0, "geq")


def tuples_from(seed, n_tuples, arity, d=2, span=6):
    rng = np.random.default_rng(seed)
    return rng.integers(-span, span + 1, size=(n_tuples, arity, d))


def test_differential_prepends_one():
    theta = ct.WedgeCochain((X,), 2)
    d_theta = ct.as_differential(theta)
    assert d_theta.degree == 1 and d_theta.factors[0] is None
    # delta(X) evaluated at (x0, x1) equals X(x1) - X(x0)
    tup = tuples_from(0, 64, 2)
    got = d_theta.evaluate(tup)
    want = X.contains(tup[:, 1]).astype(complex) - X.contains(tup[:, 0])
    assert np.allclose(got, want)


def test_differential_squared_vanishes_pointwise():
    theta = ct.WedgeCochain((X,), 2)
    dd = ct.as_differential(ct.as_differential(theta))
    assert np.abs(dd.evaluate(tuples_from(1, 200, 3))).max() == 0


def test_partition_cocycle_closed_pointwise():
    part = ct.standard_partition(2)
    theta = ct.WedgeCochain.from_partition(part)
    closed = ct.as_differential(theta)
    assert np.abs(closed.evaluate(tuples_from(2, 200, 4))).max() == 0


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_wedge_antisymmetry(seed):
    theta = ct.WedgeCochain((None, X, Y), 2)
    tup = tuples_from(seed, 16, 3)
    swapped = tup[:, [1, 0, 2], :]
    assert np.allclose(theta.evaluate(tup), -theta.evaluate(swapped))


def test_pair_two_path_identity_idempotent():
    # partition cocycle against the idempotent character chain reproduces
    # the Kitaev pairing exactly, through independent code
    for seed in (0, 3):
        for scalar_rank in (0, 1):
            P = ct.random_local_idempotent(seed=seed, radius=2, k=1, d=2,
                                           scalar_rank=scalar_rank)
            part = ct.standard_partition(2)
            lhs = ct.pair(ct.WedgeCochain.from_partition(part),
                          ct.CharacterChain.from_idempotent(P, 2))
            rhs = ct.kitaev_idempotent(P, part, validate=False).value
            assert abs(lhs - rhs) <= 1e-12


def test_pair_one_wedge_matches_kubo():
    P = ct.random_local_idempotent(seed=6, radius=2, k=1, d=2, scalar_rank=1)
    lhs = ct.pair(ct.WedgeCochain.one_wedge([X, Y], 2),
                  ct.CharacterChain.from_idempotent(P, 2))
    rhs = ct.kubo_idempotent(P, [X, Y], validate=False).value
    assert abs(lhs - rhs) <= 1e-10


def test_pair_zero_chain():
    z2 = ct.LatticeSpace(2)
    zero = ct.scale(ct.mult_operator(z2, ct.All(2)), 0.0)
    val = ct.pair(ct.WedgeCochain.one_wedge([X, Y], 2),
                  ct.CharacterChain((zero, zero, zero)))
    assert val == 0


def test_pair_requires_certificate():
    z2 = ct.LatticeSpace(2)
    Q = ct.random_local_idempotent(seed=1, radius=2, k=1, d=2).part
    # wedge of two parallel half spaces is not coarsely transverse
    theta = ct.WedgeCochain.one_wedge([X, ct.HalfSpace(2, 0, 5, "geq")], 2)
    with pytest.raises((ct.UnboundedSupportError, ct.WindowTooSmallError)):
        ct.pair(theta, ct.CharacterChain((Q, Q, Q)), window=ct.Box.cube(2, 30))


def test_coboundary_blindness():
    # pair(delta eta, cycle chain) = 0 for eta with a bounded factor
    P = ct.random_local_idempotent(seed=4, radius=2, k=1, d=2, scalar_rank=1)
    bump = ct.FiniteSet.of(2, [[0, 0], [1, 1], [2, 0]])
    eta = ct.WedgeCochain((bump, X), 2)
    val = ct.pair(ct.as_differential(eta), ct.CharacterChain.from_idempotent(P, 2))
    assert abs(val) <= 1e-10

    U = ct.shifted_walk(1, 0.3, 0.4)
    bump1 = ct.FiniteSet.of(1, [[0], [2]])
    eta1 = ct.WedgeCochain((bump1,), 1)
    val1 = ct.pair(ct.as_differential(eta1), ct.CharacterChain.from_invertible(U, 1))
    assert abs(val1) <= 1e-10


def test_permuted_partition_examples():
    parts_id = ct.permuted_partition([X, Y], [0, 1])
    lemma = ct.partition_from_halfspaces([X, Y])
    window = ct.Box.cube(2, 10).sites()
    assert (parts_id.membership(window) == lemma.membership(window)).all()

    parts_swap = ct.permuted_partition([X, Y], [1, 0])
    # A_0 = Y X is the same quadrant; parts stay disjoint and covering
    assert (parts_swap.parts[0].contains(window) ==
            (X.contains(window) & Y.contains(window))).all()
    parts_swap.membership(window)  # raises unless a partition

    for sigma in ([0, 1], [1, 0]):
        cert = ct.check_transversality(
            ct.permuted_partition([X, Y], sigma).parts, [4],
            window=ct.Box.cube(2, 30))
        assert cert.ok


def test_equipartition_n1_trivial():
    U = ct.shift_unitary(3)
    rep = ct.verify_equipartition(U, [X1D], [0], validate=False)
    assert rep["passed"] and rep["sign"] == 1


def test_equipartition_n2_exact():
    P = ct.random_local_idempotent(seed=9, radius=2, k=1, d=2)
    rep = ct.verify_equipartition(P, [X, Y], [1, 0], validate=False)
    assert rep["passed"] and rep["sign"] == -1
    assert rep["tolerance"] == 1e-8


def test_sum_rule_n1_cochain_identity():
    # 1 ^ X = -(X ^ X^c) holds at every sampled tuple already
    one_wedge = ct.WedgeCochain.one_wedge([X1D], 1)
    part_wedge = ct.WedgeCochain((X1D, ct.complement(X1D)), 1)
    tup = tuples_from(5, 120, 2, d=1)
    assert np.allclose(one_wedge.evaluate(tup), -part_wedge.evaluate(tup))


def test_sum_rule_n1_invertible():
    U = ct.shifted_walk(2, 0.5, -0.1)
    rep = ct.verify_sum_rule(U, [X1D], validate=False)
    assert rep["passed"], rep


def test_sum_rule_n2_idempotent():
    P = ct.random_local_idempotent(seed=12, radius=2, k=1, d=2, scalar_rank=1)
    rep = ct.verify_sum_rule(P, [X, Y], validate=False)
    assert rep["passed"], rep


def test_switch_reduction_examples():
    ind = ct.SwitchFunction.indicator(X1D)
    assert ct.switch_reduction([ind]) == [X1D]

    ramp = ct.SwitchFunction.ramp_1d(-5, 5)
    got = ct.switch_reduction([ramp])
    assert got == [ct.HalfSpace(1, 0, -5, "geq")]

    # missing certificate: two parallel ramps on Z^2 along the same axis
    def fn(sites):
        return np.clip((sites[:, 0] + 0.5) / 4, 0, 1)

    chi_a = ct.SwitchFunction(fn, X, ct.HalfSpace(2, 0, 4, "lt"))
    chi_b = ct.SwitchFunction(fn, X, ct.HalfSpace(2, 0, 4, "lt"))
    with pytest.raises(ct.UnboundedSupportError):
        ct.switch_reduction([chi_a, chi_b], window=ct.Box.cube(2, 24))


def test_kubo_kitaev_factor_via_cor59():
    # kubo = (-1)^n n! kitaev at n = 2 on an exact unitized idempotent
    P = ct.random_local_idempotent(seed=15, radius=2, k=2, d=2, scalar_rank=1)
    ku = ct.kubo_idempotent(P, [X, Y], validate=False)
    ki = ct.kitaev_idempotent(P, ct.partition_from_halfspaces([X, Y]), validate=False)
    assert abs(ku.value - 2 * ki.value) <= 1e-8
