"""Kitaev and Kubo trace pairings in their trace-class alternative forms.

All pairings are evaluated from the alternative formulas whose summands (or
whose antisymmetrized sums) are certifiably trace-class; the raw
permutation-sum definition is kept only as a cross-check for partition
pairings, where each summand is trace-class on its own.  Normalized values
land on integers; the quantization defect is the package's primary figure
of merit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import FormulaMismatchError, UnboundedSupportError, WindowTooSmallError
from .opalg import (KernelOperator, SwitchFunction, UnitizedOperator, commutator,
                    csum, mult_operator, tail_opnorm, trace, verify_idempotent,
                    verify_invertible)
from .space import (Box, HalfSpace, Partition, Region, check_transversality,
                    complement)

__all__ = [
    "PairingReport", "FlowReport", "quantize", "normalization_constant",
    "kitaev_idempotent", "kitaev_idempotent_raw", "kitaev_invertible",
    "kubo_idempotent", "kubo_invertible", "flow", "pairing_n0",
    "signed_permutations", "MAX_PERMUTATION_N",
]

MAX_PERMUTATION_N = 6  # (n+1)! fan-out guard

TWO_PI_I = 2j * math.pi


def signed_permutations(n: int):
    """All permutations of range(n) in lexicographic order with their signs."""
    import itertools

    for perm in itertools.permutations(range(n)):
        inv = sum(1 for i in range(n) for j in range(i + 1, n) if perm[i] > perm[j])
        yield perm, -1 if inv % 2 else 1


def _guard_n(n: int, allow_large_n: bool):
    if n > MAX_PERMUTATION_N and not allow_large_n:
        raise ValueError(
            f"n={n} exceeds the permutation guard ({MAX_PERMUTATION_N}); "
            f"pass allow_large_n=True to override")


def normalization_constant(flavor: str, n: int) -> complex:
    """Multiplier that lands the pairing on an integer (main theorem).

    Even n = 2m pairs with idempotents, odd n = 2m+1 with invertibles.
    """
    if flavor not in ("kitaev", "kubo"):
        raise ValueError(f"unknown flavor {flavor!r}")
    if n < 0:
        raise ValueError("n must be >= 0")
    if n % 2 == 0:
        m = n // 2
        if flavor == "kitaev":
            return TWO_PI_I ** m * math.factorial(2 * m) / math.factorial(m)
        return TWO_PI_I ** m / math.factorial(m)
    m = (n - 1) // 2
    if flavor == "kitaev":
        return TWO_PI_I ** m * math.factorial(m)
    return TWO_PI_I ** m * math.factorial(m) / math.factorial(2 * m + 1)


def quantize(value: complex, flavor: str, n: int):
    """Normalize a pairing value and round to the nearest integer.

    Returns (integer_candidate, defect, normalized, indeterminate).  A tie
    at distance 1/2 is flagged indeterminate instead of being rounded.
    """
    norm = normalization_constant(flavor, n)
    normalized = complex(value) * norm
    candidate = int(np.round(normalized.real))
    dist = abs(normalized.real - candidate)
    indeterminate = abs(abs(normalized.real - math.floor(normalized.real)) - 0.5) < 1e-9
    defect = abs(normalized - candidate) + abs(normalized.imag)
    return candidate, defect, normalized, indeterminate


@dataclass
class PairingReport:
    """Outcome of one pairing computation."""

    flavor: str
    n: int
    value: complex
    normalization: complex
    integer_candidate: Optional[int]
    defect: float
    error_bound: float
    regime: str  # "exact" | "approximate"
    permutations_evaluated: int
    expected_zero: bool = False
    indeterminate: bool = False
    extras: dict = field(default_factory=dict)

    def to_doc(self) -> dict:
        normalized = self.value * self.normalization
        doc = {"flavor": self.flavor, "n": self.n,
               "value": [self.value.real, self.value.imag],
               "normalized": [normalized.real, normalized.imag],
               "integer": self.integer_candidate, "defect": self.defect,
               "error_bound": self.error_bound, "regime": self.regime,
               "permutations": self.permutations_evaluated}
        if self.expected_zero:
            doc["expected_zero"] = True
        if self.indeterminate:
            doc["indeterminate"] = True
        for key, val in self.extras.items():
            doc[key] = [val.real, val.imag] if isinstance(val, complex) else val
        return doc


@dataclass
class FlowReport:
    value: float
    integer_candidate: int
    defect: float

    def to_doc(self) -> dict:
        return {"flow": self.value, "integer": self.integer_candidate,
                "defect": self.defect}


# ---------------------------------------------------------------------------
# Shared helpers


def validation_tolerance(op: KernelOperator) -> float:
    """Idempotency/invertibility tolerance: strict for exact inputs, scaled
    by the declared dropped tail for truncated ones."""
    t = tail_opnorm(op.propagation, op.d)
    return 1e-10 if t == 0.0 else max(1e-8, 4.0 * t)


def _certify_regions(regions, radius, window, what):
    cert = check_transversality(regions, [radius], window=window)
    if not cert.ok:
        if "window-too-small" in cert.detail:
            raise WindowTooSmallError(f"{what}: {cert.detail}")
        raise UnboundedSupportError(f"{what}: {cert.detail or 'no certificate'}")
    return cert


def _geometry_and_mults(xs, space, k):
    """Normalize Kubo geometry input to (mult ops, supp/cosupp region list)."""
    mults, boundary = [], []
    for item in xs:
        if isinstance(item, SwitchFunction):
            mults.append(mult_operator(space, item, k))
            boundary.extend([item.support, item.cosupport])
        elif isinstance(item, Region):
            mults.append(mult_operator(space, item, k))
            boundary.extend([item, complement(item)])
        else:
            raise TypeError("Kubo geometry entries must be Regions or SwitchFunctions")
    return mults, boundary


def _u_parts(U: UnitizedOperator):
    """Kernels for U - 1 and U^{-1} - 1 (membership in the algebra)."""
    if U.inverse is None:
        raise FormulaMismatchError("invertible pairings need a supplied inverse")
    eye = np.eye(U.k)

    def minus_one(W: UnitizedOperator) -> KernelOperator:
        if np.allclose(W.scalar, eye):
            return W.part
        return UnitizedOperator(W.scalar - eye, W.part).as_kernel()

    return minus_one(U), minus_one(U.inverse)


def _sum_traces(chains, window):
    """Signed sum of chain traces; returns (value, error, sites, regime)."""
    total = 0j
    error = 0.0
    sites = 0
    exact = True
    for sign, chain in chains:
        res = trace(chain, window=window)
        total += sign * res.value
        error += res.error_bound
        sites += res.sites_visited
        if res.error_bound or any(o.propagation.tail is not None for o in chain):
            exact = False
    return total, error, sites, ("exact" if exact else "approximate")


def _finish(flavor, n, value, error, perms, regime, expected_zero=False, extras=None):
    if expected_zero:
        norm = 1.0 + 0j
        candidate = int(np.round(value.real))
        defect = abs(value - candidate)
        indeterminate = False
    else:
        candidate, defect, _, indeterminate = quantize(value, flavor, n)
        norm = normalization_constant(flavor, n)
    return PairingReport(flavor=flavor, n=n, value=value, normalization=norm,
                         integer_candidate=candidate, defect=defect,
                         error_bound=error, regime=regime,
                         permutations_evaluated=perms,
                         expected_zero=expected_zero,
                         indeterminate=indeterminate, extras=extras or {})


# ---------------------------------------------------------------------------
# Kitaev pairings


def kitaev_idempotent(P: UnitizedOperator, partition: Partition,
                      window: Optional[Box] = None, validate: bool = True,
                      allow_large_n: bool = False) -> PairingReport:
    """Partition pairing of an idempotent, via the non-scalar-part reduction.

    value = sum_{sigma in S_{n+1}} sgn(sigma) Tr(A_{s0} Q A_{s1} Q ... A_{sn} Q),
    each summand traced over its own certified bounded region.  Odd n is
    answered with an expected-zero flag instead of being rejected.
    """
    n = partition.n
    _guard_n(n, allow_large_n)
    if validate:
        verify_idempotent(P, tol=validation_tolerance(P.part))
    Q = P.part
    space = Q.space
    r_tot = (n + 1) * Q.radius
    _certify_regions(partition.parts, r_tot, window, "partition not certified transverse")
    mults = [mult_operator(space, part, Q.k, label=f"A{i}")
             for i, part in enumerate(partition.parts)]
    chains = []
    for perm, sign in signed_permutations(n + 1):
        chain = []
        for idx in perm:
            chain.extend([mults[idx], Q])
        chains.append((sign, chain))
    value, error, _, regime = _sum_traces(chains, window)
    return _finish("kitaev", n, value, error, math.factorial(n + 1), regime,
                   expected_zero=(n % 2 == 1))


def kitaev_idempotent_raw(P: UnitizedOperator, partition: Partition,
                          window: Optional[Box] = None,
                          allow_large_n: bool = False) -> complex:
    """Raw definition sum_{sigma} sgn Tr(A_{s0} P ... A_{sn} P) with the full
    unitized P; each summand is trace-class because adjacent distinct parts
    annihilate the scalar contributions.  Cross-check path only."""
    n = partition.n
    _guard_n(n, allow_large_n)
    Pk = P.as_kernel()
    space = Pk.space
    mults = [mult_operator(space, part, Pk.k, label=f"A{i}")
             for i, part in enumerate(partition.parts)]
    chains = []
    for perm, sign in signed_permutations(n + 1):
        chain = []
        for idx in perm:
            chain.extend([mults[idx], Pk])
        chains.append((sign, chain))
    value, _, _, _ = _sum_traces(chains, window)
    return value


def kitaev_invertible(U: UnitizedOperator, partition: Partition,
                      window: Optional[Box] = None, validate: bool = True,
                      allow_large_n: bool = False) -> PairingReport:
    """Partition pairing of an invertible (odd n), via the (U-1)-form

    value = sum_{sigma} sgn(sigma) Tr(A_{s0} (U-1) A_{s1} (U^{-1}-1) ... A_{sn} (U^{-1}-1)).
    """
    n = partition.n
    if n % 2 == 0:
        raise ValueError("invertible pairings are defined for odd n only")
    _guard_n(n, allow_large_n)
    if validate:
        verify_invertible(U, tol=validation_tolerance(U.part))
    u1, v1 = _u_parts(U)
    space = u1.space
    r_tot = ((n + 1) // 2) * (u1.radius + v1.radius)
    _certify_regions(partition.parts, r_tot, window, "partition not certified transverse")
    mults = [mult_operator(space, part, u1.k, label=f"A{i}")
             for i, part in enumerate(partition.parts)]
    chains = []
    for perm, sign in signed_permutations(n + 1):
        chain = []
        for pos, idx in enumerate(perm):
            chain.extend([mults[idx], u1 if pos % 2 == 0 else v1])
        chains.append((sign, chain))
    value, error, _, regime = _sum_traces(chains, window)
    return _finish("kitaev", n, value, error, math.factorial(n + 1), regime)


# ---------------------------------------------------------------------------
# Kubo pairings


def kubo_idempotent(P: UnitizedOperator, xs: Sequence, window: Optional[Box] = None,
                    validate: bool = True, allow_large_n: bool = False) -> PairingReport:
    """Half-space (or switch-function) pairing of an idempotent

    value = sum_{sigma in S_n} sgn(sigma) Tr(P [Q, X_{s1}] ... [Q, X_{sn}]),
    the commutator products being supported on transverse boundary collars.
    """
    n = len(xs)
    _guard_n(n, allow_large_n)
    if validate:
        verify_idempotent(P, tol=validation_tolerance(P.part))
    Q = P.part
    space = Q.space
    mults, boundary = _geometry_and_mults(xs, space, Q.k)
    r_tot = (n + 1) * max(Q.radius, 1)
    _certify_regions(boundary, r_tot, window, "half spaces not certified transverse")
    if n == 0:
        return pairing_n0(P, window=window, validate=False)
    Pk = P.as_kernel()
    commutators = [commutator(Q, m) for m in mults]  # [Q, X_i] = [P, X_i]
    chains = []
    for perm, sign in signed_permutations(n):
        chains.append((sign, [Pk] + [commutators[i] for i in perm]))
    value, error, _, regime = _sum_traces(chains, window)
    return _finish("kubo", n, value, error, math.factorial(n), regime,
                   expected_zero=(n % 2 == 1))


def kubo_invertible(U: UnitizedOperator, xs: Sequence, window: Optional[Box] = None,
                    validate: bool = True, allow_large_n: bool = False,
                    crosscheck: bool = True, crosscheck_tol: float = 1e-10) -> PairingReport:
    """Half-space pairing of an invertible (odd n), via the commutator form

    value = sum_{sigma in S_n} sgn(sigma) Tr(U [X_{s1}, U^{-1}] [X_{s2}, U] ... [X_{sn}, U^{-1}])

    cross-evaluated against the (U-1)-form (an antisymmetrized tuple sum);
    disagreement beyond tolerance raises FormulaMismatchError.
    """
    n = len(xs)
    if n % 2 == 0:
        raise ValueError("invertible pairings are defined for odd n only")
    _guard_n(n, allow_large_n)
    if validate:
        verify_invertible(U, tol=validation_tolerance(U.part))
    u1, v1 = _u_parts(U)
    space = u1.space
    mults, boundary = _geometry_and_mults(xs, space, u1.k)
    r_tot = u1.radius + ((n + 1) // 2) * (u1.radius + v1.radius)
    _certify_regions(boundary, r_tot, window, "half spaces not certified transverse")
    Uk = U.as_kernel()
    # position i (1-based): odd i pairs with U^{-1}, even i with U
    comms = {("odd", i): commutator(mults[i], v1) for i in range(n)}
    comms.update({("even", i): commutator(mults[i], u1) for i in range(n)})
    chains = []
    for perm, sign in signed_permutations(n):
        chain = [Uk]
        for pos, idx in enumerate(perm, start=1):
            chain.append(comms[("odd" if pos % 2 == 1 else "even", idx)])
        chains.append((sign, chain))
    value, error, _, regime = _sum_traces(chains, window)
    extras = {"commutator_form": value}
    if crosscheck:
        from .cohomology import WedgeCochain, CharacterChain, pair

        ops = [u1 if i % 2 == 0 else v1 for i in range(n + 1)]
        theta = WedgeCochain.one_wedge(xs, space.d)
        alt = pair(theta, CharacterChain(tuple(ops)), window=window)
        extras["uminus_form"] = alt
        if abs(alt - value) > crosscheck_tol + 2 * error:
            raise FormulaMismatchError(
                f"commutator form {value} vs (U-1)-form {alt} differ by "
                f"{abs(alt - value):.3e} (> {crosscheck_tol:.1e} + error bounds); "
                f"implementation or certificate bug")
    report = _finish("kubo", n, value, error, math.factorial(n), regime,
                     extras=extras)
    return report


def flow(U: UnitizedOperator, validate: bool = True) -> FlowReport:
    """Net transport of a 1D invertible across the origin cut

    flow = sum_{j>=0, k<0} (|U_{kj}|^2 - |U_{jk}|^2),

    summed directly over the finitely many kernel entries crossing the cut.
    """
    space = U.space
    if space.d != 1:
        raise ValueError("flow is defined on Z only")
    if validate:
        verify_invertible(U, tol=validation_tolerance(U.part))
    Uk = U.as_kernel()
    R = Uk.radius
    js, ks = [], []
    for j in range(0, R):
        for k in range(j - R, 0):
            js.append(j)
            ks.append(k)
    if not js:
        return FlowReport(0.0, 0, 0.0)
    js = np.asarray(js, dtype=np.int64)[:, None]
    ks = np.asarray(ks, dtype=np.int64)[:, None]
    upper = Uk.eval_blocks(ks, js)  # U_{kj}
    lower = Uk.eval_blocks(js, ks)  # U_{jk}
    contrib = (np.abs(upper) ** 2).reshape(len(js), -1).sum(axis=1) \
        - (np.abs(lower) ** 2).reshape(len(js), -1).sum(axis=1)
    value = float(math.fsum(contrib.tolist()))
    integer = int(np.round(value))
    return FlowReport(value, integer, abs(value - integer))


def pairing_n0(P: UnitizedOperator, window: Optional[Box] = None,
               validate: bool = True) -> PairingReport:
    """n = 0 pairing: the extended trace Tr~(P) = Tr(Q) of the non-scalar part."""
    if validate:
        verify_idempotent(P, tol=validation_tolerance(P.part))
    res = trace([P.part], window=window)
    value = res.value
    candidate = int(np.round(value.real))
    defect = abs(value - candidate)
    return PairingReport(flavor="kubo", n=0, value=value, normalization=1.0 + 0j,
                         integer_candidate=candidate, defect=defect,
                         error_bound=res.error_bound,
                         regime="exact" if res.error_bound == 0 else "approximate",
                         permutations_evaluated=1)
