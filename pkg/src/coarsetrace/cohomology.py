"""Finite-support wedge cochains and character chains.

A wedge cochain is the full antisymmetrization of per-site functions; paired
against a tuple of finite-propagation operators it evaluates to

    sum_{sigma} sgn(sigma) Tr(f_{s0} T_0 f_{s1} T_1 ... f_{sn} T_n),

summed per lattice tuple with the antisymmetrized weight grouped *before*
the trace.  This is the evaluation that makes the half-space forms
well-defined: individual summands need not be trace-class, but the weighted
tuple sum is supported on a certified bounded set.

The homological identities (closedness, sum rule, equipartition) are
verified here at the level of pairing values, which is exactly what the
class-dependence lemma licenses; no cohomology groups are computed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import UnboundedSupportError, WindowTooSmallError
from .opalg import KernelOperator, SwitchFunction, UnitizedOperator, csum
from .space import (All, Box, Empty, Partition, Region, check_transversality,
                    complement, enumerate_region, intersection, lex_sort,
                    thicken)

__all__ = [
    "WedgeCochain", "CharacterChain", "as_differential", "pair",
    "permuted_partition", "verify_equipartition", "verify_sum_rule",
    "switch_reduction",
]


def _factor_profile(entry):
    """(values_fn, support, cosupport, is_constant) for a wedge factor."""
    if entry is None:
        return (lambda sites: np.ones(len(sites), dtype=np.complex128)), None, None, True
    if isinstance(entry, Region):
        region = entry
        return (lambda sites: region.contains(sites).astype(np.complex128)), \
            region, complement(region), False
    if isinstance(entry, SwitchFunction):
        return (lambda sites: np.asarray(entry(sites), dtype=np.complex128)), \
            entry.support, entry.cosupport, False
    raise TypeError("wedge factors must be None (constant 1), Region, or SwitchFunction")


@dataclass(frozen=True)
class WedgeCochain:
    """Antisymmetrized product f_0 ^ f_1 ^ ... ^ f_n of per-site functions.

    Factors are ``None`` (the constant 1), regions (their indicators), or
    switch functions.  ``from_partition`` tags the cochain so boundedness
    certificates can use the every-part-represented argument.
    """

    factors: tuple
    d: int
    coefficient: complex = 1.0 + 0j
    is_partition: bool = False

    @property
    def degree(self) -> int:
        return len(self.factors) - 1

    @property
    def has_constant(self) -> bool:
        return any(f is None for f in self.factors)

    @classmethod
    def from_partition(cls, partition: Partition) -> "WedgeCochain":
        return cls(tuple(partition.parts), partition.d, is_partition=True)

    @classmethod
    def one_wedge(cls, halfspaces: Sequence, d: int) -> "WedgeCochain":
        """1 ^ X_1 ^ ... ^ X_n."""
        return cls((None,) + tuple(halfspaces), d)

    def evaluate(self, tuples: np.ndarray) -> np.ndarray:
        """Value at site tuples of shape (N, degree+1, d).

        Computed by the explicit signed permutation sum, which is exact for
        indicator factors (products and small sums of 0/1 floats).
        """
        from .pairings import signed_permutations

        n1 = self.degree + 1
        vals = np.empty((len(self.factors), tuples.shape[0], n1), dtype=np.complex128)
        flat = tuples.reshape(-1, self.d)
        for a, entry in enumerate(self.factors):
            fn, _, _, _ = _factor_profile(entry)
            vals[a] = np.asarray(fn(flat)).reshape(tuples.shape[0], n1)
        out = np.zeros(tuples.shape[0], dtype=np.complex128)
        for perm, sign in signed_permutations(n1):
            term = vals[perm[0], :, 0].copy()
            for b in range(1, n1):
                term *= vals[perm[b], :, b]
            out += sign * term
        return self.coefficient * out

    def base_region(self, reach: int, metric: str = "sup") -> Region:
        """Region certifying where tuples within ``reach`` of the diagonal
        can carry nonzero antisymmetrized weight (first tuple slot)."""
        regs = []
        for entry in self.factors:
            _, supp, cosupp, const = _factor_profile(entry)
            if const:
                continue
            # a factor identically zero on the tuple gives a zero row
            regs.append(thicken(supp, reach, metric))
            # with a constant row present, a factor identically 1 duplicates
            # it; in a partition some part would be missed instead
            if self.has_constant:
                regs.append(thicken(cosupp, reach, metric))
        if not self.is_partition and not self.has_constant:
            # boundedness must come from the supports alone
            pass
        return intersection(*regs) if regs else All(self.d)


@dataclass(frozen=True)
class CharacterChain:
    """Operator tuple (T_0, ..., T_n); evaluated only through :func:`pair`."""

    operators: tuple

    @property
    def degree(self) -> int:
        return len(self.operators) - 1

    @classmethod
    def from_idempotent(cls, P: UnitizedOperator, n: int) -> "CharacterChain":
        return cls((P.part,) * (n + 1))

    @classmethod
    def from_invertible(cls, U: UnitizedOperator, n: int) -> "CharacterChain":
        from .pairings import _u_parts

        u1, v1 = _u_parts(U)
        return cls(tuple(u1 if i % 2 == 0 else v1 for i in range(n + 1)))


def as_differential(theta: WedgeCochain) -> WedgeCochain:
    """Alexander-Spanier differential: on wedges, prepend the constant 1."""
    return WedgeCochain((None,) + theta.factors, theta.d, theta.coefficient)


def _tuple_offsets(space, radii):
    """Relative positions of x_1..x_n from the step balls, pre-filtered by
    the wrap-around constraint |x_n - x_0| <= R_n."""
    combos = np.zeros((1, 0, space.d), dtype=np.int64)
    for R in radii[:-1]:
        ball = space.ball(R)
        a = np.repeat(combos, len(ball), axis=0)
        b = np.tile(ball, (len(combos), 1))[:, None, :]
        last = a[:, -1:, :] if a.shape[1] else np.zeros((len(a), 1, space.d), np.int64)
        combos = np.concatenate([a, last + b], axis=1)
    if combos.shape[1]:
        closing = np.abs(combos[:, -1, :])
        dist = closing.sum(axis=1) if space.metric == "l1" else closing.max(axis=1)
        combos = combos[dist <= radii[-1]]
    return combos


def pair(theta: WedgeCochain, chain: CharacterChain,
         window: Optional[Box] = None, chunk_tuples: int = 400_000) -> complex:
    """<theta, chi(T_0 (x) ... (x) T_n)>: the antisymmetrized tuple sum.

    Enumerates the certified bounded set of base sites, expands the
    propagation cones into full site tuples, and accumulates weight times
    block-trace with exactly rounded summation.
    """
    if theta.degree != chain.degree:
        raise ValueError(f"cochain degree {theta.degree} != chain degree {chain.degree}")
    ops = chain.operators
    space = ops[0].space
    radii = [op.radius for op in ops]
    reach = sum(radii)
    region = theta.base_region(reach, space.metric)
    bb = region.bounding_box()
    if bb is not None:
        base = lex_sort(np.asarray(enumerate_region(region, bb))) if not bb.empty \
            else np.zeros((0, space.d), np.int64)
    else:
        if window is None:
            raise UnboundedSupportError(
                "wedge support has no analytic certificate; provide a window")
        base = lex_sort(np.asarray(enumerate_region(region, window)))
        if len(base) and (window.boundary_margin(base) < reach + 2).any():
            raise WindowTooSmallError("wedge support reaches the window collar")
    if len(base) == 0:
        return 0j

    combos = _tuple_offsets(space, radii)  # (K, n, d)
    K = len(combos)
    n1 = theta.degree + 1
    k = ops[0].k
    partials = np.zeros(len(base), dtype=np.complex128)
    batch = max(1, chunk_tuples // max(K, 1))
    for s in range(0, len(base), batch):
        e = min(len(base), s + batch)
        x0 = base[s:e]
        B = e - s
        tuples = np.empty((B, K, n1, space.d), dtype=np.int64)
        tuples[:, :, 0, :] = x0[:, None, :]
        if n1 > 1:
            tuples[:, :, 1:, :] = x0[:, None, None, :] + combos[None, :, :, :]
        flat = tuples.reshape(B * K, n1, space.d)
        blocks = ops[0].eval_blocks(flat[:, 0], flat[:, 1 % n1])
        for i in range(1, n1):
            nxt = ops[i].eval_blocks(flat[:, i], flat[:, (i + 1) % n1])
            blocks = np.einsum("nab,nbc->nac", blocks, nxt)
        traces = np.trace(blocks, axis1=1, axis2=2)
        live = traces != 0
        weights = np.zeros(B * K, dtype=np.complex128)
        if live.any():
            weights[live] = theta.evaluate(flat[live])
        contrib = (weights * traces).reshape(B, K)
        partials[s:e] = contrib.sum(axis=1)
    return csum(partials)


# ---------------------------------------------------------------------------
# Permuted partitions and the homological identities


def permuted_partition(halfspaces: Sequence[Region], sigma: Sequence[int]) -> Partition:
    """Telescoping partition built from the permuted half-space list:

    A^s_0 = X_{s1}...X_{sn},  A^s_i = X_{si}^c X_{s(i+1)}...X_{sn}.

    ``sigma`` permutes 0-based indices into ``halfspaces``.
    """
    xs = list(halfspaces)
    idx = list(sigma)
    if sorted(idx) != list(range(len(xs))):
        raise ValueError("sigma must be a permutation of the half-space indices")
    d = xs[0].d
    parts = [intersection(*(xs[t] for t in idx)) if idx else All(d)]
    for i in range(len(idx)):
        rest = [xs[t] for t in idx[i + 1:]]
        parts.append(intersection(complement(xs[idx[i]]), *rest) if rest
                     else complement(xs[idx[i]]))
    return Partition(tuple(parts))


def _perm_sign(sigma) -> int:
    sigma = list(sigma)
    n = len(sigma)
    inv = sum(1 for i in range(n) for j in range(i + 1, n) if sigma[i] > sigma[j])
    return -1 if inv % 2 else 1


def _kitaev_pairing(input_op: UnitizedOperator, partition: Partition, window, validate):
    from . import pairings

    if partition.n % 2 == 0:
        return pairings.kitaev_idempotent(input_op, partition, window=window,
                                          validate=validate)
    return pairings.kitaev_invertible(input_op, partition, window=window,
                                      validate=validate)


def verify_equipartition(input_op: UnitizedOperator, halfspaces: Sequence[Region],
                         sigma: Sequence[int], window: Optional[Box] = None,
                         tolerance: Optional[float] = None,
                         validate: bool = True) -> dict:
    """Check pairing(A^sigma) = sgn(sigma) * pairing(A^id) for one permutation."""
    rep_id = _kitaev_pairing(input_op, permuted_partition(halfspaces, range(len(halfspaces))),
                             window, validate)
    rep_s = _kitaev_pairing(input_op, permuted_partition(halfspaces, sigma),
                            window, False)
    sign = _perm_sign(sigma)
    if tolerance is None:
        tolerance = 1e-8 if rep_id.regime == "exact" and rep_s.regime == "exact" \
            else max(1e-6, 3.0 * (rep_id.error_bound + rep_s.error_bound))
    delta = abs(rep_s.value - sign * rep_id.value)
    return {"identity": "equipartition", "sigma": list(sigma), "sign": sign,
            "lhs": [rep_s.value.real, rep_s.value.imag],
            "rhs": [(sign * rep_id.value).real, (sign * rep_id.value).imag],
            "delta": delta, "tolerance": tolerance, "passed": bool(delta <= tolerance)}


def verify_sum_rule(input_op: UnitizedOperator, halfspaces: Sequence[Region],
                    window: Optional[Box] = None, tolerance: Optional[float] = None,
                    validate: bool = True) -> dict:
    """Check <1 ^ X_1 ^...^ X_n, chi> = (-1)^n sum_sigma sgn(sigma) <A^sigma-wedge, chi>
    through the character-chain pairing (independent of the pairings module)."""
    from . import pairings

    n = len(halfspaces)
    if validate:
        if input_op.inverse is not None:
            from .opalg import verify_invertible
            verify_invertible(input_op, tol=pairings.validation_tolerance(input_op.part))
        else:
            from .opalg import verify_idempotent
            verify_idempotent(input_op, tol=pairings.validation_tolerance(input_op.part))
    chain = CharacterChain.from_invertible(input_op, n) if input_op.inverse is not None \
        else CharacterChain.from_idempotent(input_op, n)
    lhs = pair(WedgeCochain.one_wedge(halfspaces, halfspaces[0].d), chain, window=window)
    rhs = 0j
    for perm, sign in pairings.signed_permutations(n):
        theta = WedgeCochain.from_partition(permuted_partition(halfspaces, perm))
        rhs += sign * pair(theta, chain, window=window)
    rhs *= (-1) ** n
    if tolerance is None:
        tolerance = 1e-8
    delta = abs(lhs - rhs)
    return {"identity": "sum_rule", "n": n,
            "lhs": [lhs.real, lhs.imag], "rhs": [rhs.real, rhs.imag],
            "delta": delta, "tolerance": tolerance, "passed": bool(delta <= tolerance)}


def switch_reduction(chis: Sequence[SwitchFunction], radius: int = 8,
                     window: Optional[Box] = None) -> list:
    """Replace switch functions by the indicators of their supports.

    Requires a transversality certificate for the support/co-support pairs;
    downstream Kubo pairings agree for either input.
    """
    boundary = []
    for chi in chis:
        if not isinstance(chi, SwitchFunction):
            raise TypeError("switch_reduction expects SwitchFunctions")
        boundary.extend([chi.support, chi.cosupport])
    cert = check_transversality(boundary, [radius], window=window)
    if not cert.ok:
        raise UnboundedSupportError(
            f"switch supports lack a transversality certificate: {cert.detail}")
    return [chi.support for chi in chis]
