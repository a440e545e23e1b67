import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import coarsetrace as ct
from coarsetrace.opalg import tail_opnorm
from conftest import dense_chain_trace, dense_window


def shift_kernel(p):
    return ct.shift_unitary(p).as_kernel()


def test_mult_operator_examples(z1):
    half = ct.mult_operator(z1, ct.HalfSpace(1, 0, 0, "geq"))
    pts = np.arange(-3, 4)[:, None]
    vals = half.eval_blocks(pts, pts)[:, 0, 0]
    assert vals.tolist() == [0, 0, 0, 1, 1, 1, 1]
    assert half.radius == 0

    one = ct.identity_operator(z1)
    assert one.eval_blocks([[5]], [[5]])[0, 0, 0] == 1

    chi = ct.SwitchFunction.ramp_1d(-5, 5)
    ramp = ct.mult_operator(z1, chi)
    vals = ramp.eval_blocks(np.array([[-6], [-5], [5], [6]]),
                            np.array([[-6], [-5], [5], [6]]))[:, 0, 0].real
    assert vals[0] == 0 and vals[3] == 1
    assert 0 < vals[1] < vals[2] < 1


def test_compose_shift_inverse_is_identity(z1):
    u, v = shift_kernel(3), shift_kernel(-3)
    prod = ct.compose(u, v)
    xs = np.arange(-4, 5)[:, None]
    for x in xs:
        row = prod.eval_blocks(np.repeat(x[None], 9, 0), xs)[:, 0, 0]
        assert np.allclose(row, (xs[:, 0] == x[0]).astype(float))


def test_compose_propagation_additivity(z1):
    a = shift_kernel(1)
    b = ct.compose(shift_kernel(2), shift_kernel(1))
    ab = ct.compose(a, b)
    assert b.radius == 3 and ab.radius == 4
    xs = np.zeros((1, 1), dtype=np.int64)
    for dist in (5, 6):
        val = ab.eval_blocks(xs, np.array([[dist]]))
        assert np.abs(val).max() == 0


def test_compose_interface_support(z2, hof_small=None):
    # (indicator X) K (indicator X^c) is supported inside the collar of X
    space = z2
    X = ct.HalfSpace(2, 0, 0, "geq")
    K = ct.random_local_idempotent(seed=2, radius=2, k=1, d=2).part
    mX = ct.mult_operator(space, X)
    mXc = ct.mult_operator(space, ct.complement(X))
    prod = ct.compose(ct.compose(mX, K), mXc)
    bb_rows = prod.row_support
    pts = ct.Box.cube(2, 12).sites()
    inside = bb_rows.contains(pts)
    vals = prod.eval_blocks(pts, pts + np.array([[1, 0]]))
    nz = np.abs(vals).reshape(len(pts), -1).max(axis=1) > 0
    assert (~nz | inside).all()


def test_commutator_examples(z1):
    a = shift_kernel(1)
    zero = ct.commutator(a, a)
    xs = np.arange(-3, 4)[:, None]
    vals = zero.eval_blocks(np.repeat(xs, 7, 0), np.tile(xs, (7, 1)))
    assert np.abs(vals).max() < 1e-14

    mx = ct.mult_operator(z1, ct.HalfSpace(1, 0, 0, "geq"))
    my = ct.mult_operator(z1, ct.HalfSpace(1, 0, 3, "lt"))
    comm = ct.commutator(mx, my)
    vals = comm.eval_blocks(xs, xs)
    assert np.abs(vals).max() == 0


def test_commutator_shift_halfspace_interface(z1):
    # [Q, X] for Q = shift: single nonzero entry per unit cell at the cut
    Q = shift_kernel(1)
    mX = ct.mult_operator(z1, ct.HalfSpace(1, 0, 0, "geq"))
    comm = ct.commutator(Q, mX)  # QX - XQ
    window = ct.Box.cube(1, 6)
    dense = dense_window(comm, window)
    # oracle: dense commutator of dense factors
    oracle = dense_window(Q, window) @ dense_window(mX, window) \
        - dense_window(mX, window) @ dense_window(Q, window)
    assert np.allclose(dense, oracle)
    assert np.count_nonzero(np.abs(dense) > 1e-14) == 1


def test_support_of_product_examples(z2):
    P = ct.random_local_idempotent(seed=4, radius=2, k=1, d=2)
    Q = P.part
    parts = ct.standard_partition(2).parts
    mults = [ct.mult_operator(z2, p) for p in parts]
    chain = [mults[0], Q, mults[1], Q, mults[2], Q]
    budget = ct.support_of_product(chain)
    assert budget.bounded and budget.certificate == "analytic"
    assert budget.error_bound == 0.0

    lone = ct.support_of_product([ct.mult_operator(z2, ct.All(2))])
    assert not lone.bounded
    with pytest.raises(ct.UnboundedSupportError):
        ct.trace([ct.mult_operator(z2, ct.All(2))])

    X = ct.HalfSpace(2, 0, 0, "geq")
    Y = ct.HalfSpace(2, 1, 0, "geq")
    c1 = ct.commutator(Q, ct.mult_operator(z2, X))
    c2 = ct.commutator(Q, ct.mult_operator(z2, Y))
    corner = ct.support_of_product([c1, c2])
    assert corner.bounded and corner.certificate == "analytic"


def test_trace_of_finite_diagonal(z2):
    sites = ct.FiniteSet.of(2, [[0, 0], [1, 2], [-3, 1], [4, 4], [2, -2]])
    for k in (1, 3):
        op = ct.mult_operator(ct.LatticeSpace(2), sites, k=k)
        res = ct.trace([op])
        assert res.value == pytest.approx(5 * k)
        assert res.error_bound == 0.0


def test_trace_shift_transport_oracle(z1):
    # Tr(X^c U X U*) and Tr(X U X^c U*) against direct dense-window sums
    U = shift_kernel(1)
    Ustar = ct.adjoint(U)
    X = ct.mult_operator(z1, ct.HalfSpace(1, 0, 0, "geq"))
    Xc = ct.mult_operator(z1, ct.complement(ct.HalfSpace(1, 0, 0, "geq")))
    window = ct.Box.cube(1, 12)
    got_a = ct.trace([Xc, U, X, Ustar]).value
    got_b = ct.trace([X, U, Xc, Ustar]).value
    assert got_a == pytest.approx(dense_chain_trace(
        [Xc, U, X, Ustar], window), abs=1e-12)
    assert got_b == pytest.approx(dense_chain_trace(
        [X, U, Xc, Ustar], window), abs=1e-12)
    assert got_a == pytest.approx(0.0, abs=1e-14)
    assert got_b == pytest.approx(1.0, abs=1e-14)


@given(st.integers(0, 5))
@settings(max_examples=6, deadline=None)
def test_trace_cyclicity(rotation):
    z2loc = ct.LatticeSpace(2)
    P = ct.random_local_idempotent(seed=9, radius=2, k=1, d=2)
    Q = P.part
    parts = ct.standard_partition(2).parts
    mults = [ct.mult_operator(z2loc, p) for p in parts]
    chain = [mults[0], Q, mults[1], Q, mults[2], Q]
    rotated = chain[rotation:] + chain[:rotation]
    base = ct.trace(chain).value
    rot = ct.trace(rotated).value
    assert abs(base - rot) <= 1e-12


def test_trace_window_insensitive(z2):
    # enlarging the window leaves exact traces unchanged (no boundary effects)
    P = ct.random_local_idempotent(seed=13, radius=2, k=1, d=2)
    Q = P.part
    parts = ct.standard_partition(2).parts
    mults = [ct.mult_operator(z2, p) for p in parts]
    chain = [mults[0], Q, mults[1], Q, mults[2], Q]
    v1 = ct.trace(chain, window=ct.Box.cube(2, 30)).value
    v2 = ct.trace(chain, window=ct.Box.cube(2, 45)).value
    v3 = ct.trace(chain).value  # analytic, no window at all
    assert v1 == v2 == v3


def test_trace_against_dense_oracle_random_chain(z1):
    rng = np.random.default_rng(5)
    k = 2
    table_a = {(-1,): rng.standard_normal((k, k)) + 1j * rng.standard_normal((k, k)),
               (1,): rng.standard_normal((k, k))}
    table_b = {(0,): rng.standard_normal((k, k)),
               (2,): 1j * rng.standard_normal((k, k))}
    from coarsetrace.models import _offset_operator
    A = _offset_operator(z1, k, table_a, "A")
    B = _offset_operator(z1, k, table_b, "B")
    box = ct.mult_operator(z1, ct.FiniteSet.of(1, [[j] for j in range(-2, 3)]), k=k)
    chain = [A, box, B, box]
    got = ct.trace(chain).value
    oracle = dense_chain_trace(chain, ct.Box.cube(1, 12))
    assert got == pytest.approx(oracle, abs=1e-12)


def test_window_too_small_raises(z2):
    A = ct.sector_partition([0.0, 2.1, 4.2])
    P = ct.random_local_idempotent(seed=1, radius=2, k=1, d=2)
    mults = [ct.mult_operator(z2, p) for p in A.parts]
    chain = [mults[0], P.part, mults[1], P.part, mults[2], P.part]
    with pytest.raises(ct.WindowTooSmallError):
        ct.trace(chain, window=ct.Box.cube(2, 4))
    # big enough window succeeds and the value no longer depends on it
    v1 = ct.trace(chain, window=ct.Box.cube(2, 30)).value
    v2 = ct.trace(chain, window=ct.Box.cube(2, 44)).value
    assert v1 == v2


def test_adjoint_consistency(z1):
    W = ct.shifted_walk(1, 0.3, 0.8)
    U = W.as_kernel()
    parts = ct.partition_from_halfspaces([ct.HalfSpace(1, 0, 0, "geq")]).parts
    m0 = ct.mult_operator(z1, parts[0], k=2)
    m1 = ct.mult_operator(z1, parts[1], k=2)
    chain = [m0, U, m1, ct.adjoint(U)]
    forward = ct.trace(chain).value
    rev = ct.trace([ct.adjoint(op) for op in reversed(chain)]).value
    assert abs(forward - np.conj(rev)) <= 1e-12


def test_trace_report_doc_fields(z1):
    op = ct.mult_operator(z1, ct.FiniteSet.of(1, [[0], [1]]))
    doc = ct.trace([op]).to_doc()
    assert set(doc) == {"value", "error_bound", "region_radius", "sites_visited"}
    assert doc["value"] == [2.0, 0.0]


def test_verify_idempotent_pass_and_fail(z2):
    P = ct.random_local_idempotent(seed=21, radius=2, k=2, d=2)
    rep = ct.verify_idempotent(P, tol=1e-12)
    assert rep["passed"] and rep["max_residual"] < 1e-12

    broken = ct.UnitizedOperator(np.zeros((1, 1)), ct.scale(P.part, 0.5) if P.k == 1
                                 else ct.scale(ct.random_local_idempotent(
                                     seed=21, radius=2, k=1, d=2).part, 0.5))
    with pytest.raises(ct.ValidationError) as err:
        ct.verify_idempotent(broken, tol=1e-10)
    assert err.value.witness is not None


def test_verify_idempotent_scalar_one():
    z2loc = ct.LatticeSpace(2)
    zero_part = ct.scale(ct.mult_operator(z2loc, ct.Empty(2)), 0.0)
    P = ct.UnitizedOperator(np.eye(1), zero_part)
    rep = ct.verify_idempotent(P)
    assert rep["passed"] and rep["max_residual"] == 0.0 and rep["scalar_residual"] == 0.0


def test_verify_invertible_shift_and_truncated(hof_small):
    U = ct.shift_unitary(1)
    rep = ct.verify_invertible(U)
    assert rep["passed"]
    # truncated projection: residual reported against the declared tail
    P, report = hof_small
    vrep = ct.verify_idempotent(P, tol=1.0, raise_on_fail=False, samples=6)
    assert 0 < vrep["max_residual"] < 4 * tail_opnorm(P.part.propagation, 2) + 1e-8


def test_decay_chain_has_error_bound(hof_small, z2):
    P, _ = hof_small
    X = ct.HalfSpace(2, 0, 0, "geq")
    c1 = ct.commutator(P.part, ct.mult_operator(z2, X))
    res = ct.trace([P.part, c1, ct.commutator(P.part, ct.mult_operator(
        z2, ct.HalfSpace(2, 1, 0, "geq")))])
    assert res.error_bound > 0


def test_backend_equivalence_on_trace(z2):
    P = ct.random_local_idempotent(seed=30, radius=2, k=1, d=2)
    Q = P.part
    parts = ct.standard_partition(2).parts
    mults = [ct.mult_operator(z2, p) for p in parts]
    chain = [mults[0], Q, mults[1], Q, mults[2], Q]
    old = ct.get_backend()
    try:
        ct.set_backend("numpy")
        v_np = ct.trace(chain).value
        try:
            ct.set_backend("numba")
        except RuntimeError:
            pytest.skip("numba unavailable")
        v_nb = ct.trace(chain).value
    finally:
        ct.set_backend(old)
    assert abs(v_np - v_nb) < 1e-13
