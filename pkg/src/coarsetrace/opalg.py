"""Lazy finite-propagation block-kernel operators and exact localized traces.

Operators are never materialized globally: a :class:`KernelOperator` is a
pure kernel ``(site, site) -> k x k complex block`` together with a declared
propagation bound and optional row/column support regions.  A chain trace
enumerates only the certified bounded region where the composed chain can
have diagonal mass, plus the propagation cones reaching it, so results for
exactly finite-propagation inputs carry no window artifacts at all.

Approximate inputs (truncated spectral projections) are ordinary
finite-propagation operators here; their distance to the intended operator
is tracked through :class:`DecayTail` metadata and surfaces as an explicit
``error_bound`` on every trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .errors import (DimensionMismatchError, ShapeMismatchError,
                     UnboundedSupportError, ValidationError,
                     WindowTooSmallError)
from .space import (All, Box, LatticeSpace, Region, as_sites, complement,
                    enumerate_region, intersection, lex_sort, thicken)

__all__ = [
    "DecayTail", "Propagation", "KernelOperator", "UnitizedOperator",
    "SwitchFunction", "SupportBudget", "TraceResult", "mult_operator",
    "identity_operator", "add", "sub", "scale", "adjoint", "compose",
    "commutator", "support_of_product", "trace", "verify_idempotent",
    "verify_invertible", "csum",
]


def csum(values) -> complex:
    """Exactly rounded complex sum (order independent)."""
    values = np.asarray(values, dtype=np.complex128).ravel()
    return complex(math.fsum(values.real.tolist()), math.fsum(values.imag.tolist()))


# ---------------------------------------------------------------------------
# Propagation metadata


@dataclass(frozen=True)
class DecayTail:
    """Entrywise bound ``C * exp(-kappa * d(x, y))`` on the dropped tail."""

    C: float
    kappa: float


@dataclass(frozen=True)
class Propagation:
    """Propagation bound of the kernel as realized.

    ``radius`` is a hard cutoff: the realized kernel vanishes beyond it.
    ``tail`` is set when the realized kernel is the truncation of an
    intended operator whose entries beyond ``radius`` obey the decay bound;
    exact inputs have ``tail is None``.
    """

    radius: int
    tail: Optional[DecayTail] = None

    @classmethod
    def exact(cls, radius: int) -> "Propagation":
        return cls(int(radius), None)

    @classmethod
    def decay(cls, C: float, kappa: float, cutoff: int) -> "Propagation":
        return cls(int(cutoff), DecayTail(float(C), float(kappa)))

    @property
    def is_exact(self) -> bool:
        return self.tail is None


def _sphere_count(d: int, r: int) -> int:
    if r == 0:
        return 1
    return (2 * r + 1) ** d - (2 * r - 1) ** d


def tail_opnorm(prop: Propagation, d: int) -> float:
    """Operator-norm (row-sum) bound on the dropped tail beyond the cutoff."""
    if prop.tail is None:
        return 0.0
    total = 0.0
    r = prop.radius + 1
    while r <= prop.radius + 10000:
        term = _sphere_count(d, r) * prop.tail.C * math.exp(-prop.tail.kappa * r)
        total += term
        if term < 1e-30:
            break
        r += 1
    return total


# ---------------------------------------------------------------------------
# Kernel protocol and basic kernels


class Kernel:
    """Batch-evaluable kernel: eval(xs, ys) -> (N, k, k) complex blocks."""

    def eval(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class BatchKernel(Kernel):
    def __init__(self, fn):
        self.fn = fn

    def eval(self, xs, ys):
        return np.asarray(self.fn(xs, ys), dtype=np.complex128)


class PointwiseKernel(Kernel):
    """Adapter for per-pair python callables (test-scale only)."""

    def __init__(self, fn, k: int):
        self.fn = fn
        self.k = k

    def eval(self, xs, ys):
        out = np.zeros((len(xs), self.k, self.k), dtype=np.complex128)
        for i in range(len(xs)):
            out[i] = np.asarray(self.fn(tuple(xs[i].tolist()), tuple(ys[i].tolist())),
                                dtype=np.complex128).reshape(self.k, self.k)
        return out


class DiagonalKernel(Kernel):
    """K(x, x) = f(x) * Id_k for a scalar per-site function."""

    def __init__(self, values, k: int):
        self.values = values
        self.k = k

    def eval(self, xs, ys):
        out = np.zeros((len(xs), self.k, self.k), dtype=np.complex128)
        on_diag = (xs == ys).all(axis=1)
        if on_diag.any():
            v = np.asarray(self.values(xs[on_diag]), dtype=np.complex128)
            out[on_diag] = v[:, None, None] * np.eye(self.k)[None]
        return out


@dataclass(frozen=True)
class SwitchFunction:
    """Borel function with declared support and co-support regions.

    ``support`` must contain {chi != 0} and ``cosupport`` must contain
    {chi != 1}; values must be bounded by 1 in modulus.  Downstream
    certificates rely on these declarations.
    """

    fn: Callable
    support: Region
    cosupport: Region
    label: str = "switch"

    def __call__(self, sites):
        return np.asarray(self.fn(as_sites(sites)), dtype=np.complex128)

    @classmethod
    def ramp_1d(cls, a: int, b: int) -> "SwitchFunction":
        """Linear 0 -> 1 ramp across [a, b] on Z, support {j >= a}."""
        from .space import HalfSpace
        if b < a:
            raise ValueError("ramp needs a <= b")

        def fn(sites):
            j = sites[:, 0].astype(float)
            return np.clip((j - a + 0.5) / (b - a + 1), 0.0, 1.0)

        return cls(fn, HalfSpace(1, 0, a, "geq"), HalfSpace(1, 0, b + 1, "lt"),
                   label=f"ramp[{a},{b}]")

    @classmethod
    def indicator(cls, region: Region) -> "SwitchFunction":
        def fn(sites):
            return region.contains(sites).astype(np.complex128)

        return cls(fn, region, complement(region), label="indicator")


# ---------------------------------------------------------------------------
# KernelOperator


@dataclass
class KernelOperator:
    """Element of the algebra of locally trace-class finite-propagation operators.

    Immutable by convention and shareable across workers.  The support
    fields are sound declarations: the kernel vanishes whenever the row
    (column) site falls outside them; ``None`` means no restriction.
    ``norm_hint`` is an upper bound on the operator norm, used only for
    truncation-error bookkeeping.
    """

    space: LatticeSpace
    k: int
    kernel: Kernel
    propagation: Propagation
    row_support: Optional[Region] = None
    col_support: Optional[Region] = None
    self_adjoint: bool = False
    mult_values: Optional[Callable] = None  # set for multiplication operators
    mult_support: Optional[Region] = None
    mult_cosupport: Optional[Region] = None
    norm_hint: Optional[float] = None
    valid_box: Optional[Box] = None  # None: kernel evaluable everywhere
    label: str = ""

    @property
    def d(self) -> int:
        return self.space.d

    @property
    def radius(self) -> int:
        return self.propagation.radius

    @property
    def is_multiplication(self) -> bool:
        return self.mult_values is not None

    def eval_blocks(self, xs, ys) -> np.ndarray:
        """Kernel blocks with the propagation cutoff applied."""
        xs = as_sites(xs, self.d)
        ys = as_sites(ys, self.d)
        if len(xs) != len(ys):
            raise DimensionMismatchError("batch length mismatch")
        out = np.zeros((len(xs), self.k, self.k), dtype=np.complex128)
        if len(xs) == 0:
            return out
        close = self.space.distance(xs, ys) <= self.radius
        if close.any():
            out[close] = self.kernel.eval(xs[close], ys[close])
        return out

    def entry(self, x, y) -> np.ndarray:
        return self.eval_blocks(as_sites(x, self.d), as_sites(y, self.d))[0]

    def __repr__(self):
        return (f"KernelOperator({self.label or type(self.kernel).__name__}, "
                f"k={self.k}, R={self.radius})")


def _check_compatible(a: KernelOperator, b: KernelOperator):
    if a.space != b.space:
        raise DimensionMismatchError("operators live on different spaces")
    if a.k != b.k:
        raise ShapeMismatchError(f"block dimensions differ: {a.k} vs {b.k}")


def identity_operator(space: LatticeSpace, k: int = 1) -> KernelOperator:
    return mult_operator(space, All(space.d), k, label="1")


def mult_operator(space: LatticeSpace, f, k: int = 1, label: str = "",
                  norm_hint: float = 1.0) -> KernelOperator:
    """Multiplication operator for a region indicator or a switch function."""
    if isinstance(f, Region):
        region = f
        values = lambda sites: region.contains(sites).astype(np.complex128)
        support, cosupport = region, complement(region)
        label = label or "mult"
    elif isinstance(f, SwitchFunction):
        values = lambda sites: np.asarray(f(sites), dtype=np.complex128)
        support, cosupport = f.support, f.cosupport
        label = label or f.label
    else:
        raise TypeError("mult_operator expects a Region or SwitchFunction")
    return KernelOperator(
        space=space, k=k, kernel=DiagonalKernel(values, k),
        propagation=Propagation.exact(0),
        row_support=support, col_support=support,
        self_adjoint=True, mult_values=values,
        mult_support=support, mult_cosupport=cosupport,
        norm_hint=norm_hint, label=label)


class _SumKernel(Kernel):
    def __init__(self, ops, coeffs):
        self.ops = ops
        self.coeffs = coeffs

    def eval(self, xs, ys):
        out = self.coeffs[0] * self.ops[0].eval_blocks(xs, ys)
        for op, c in zip(self.ops[1:], self.coeffs[1:]):
            out = out + c * op.eval_blocks(xs, ys)
        return out


def _combine_tails(ops, coeffs):
    tails = [(abs(c), o.propagation.tail) for o, c in zip(ops, coeffs)
             if o.propagation.tail is not None]
    if not tails:
        return None
    C = sum(a * t.C for a, t in tails)
    kappa = min(t.kappa for _, t in tails)
    return DecayTail(C, kappa)


def _hint_sum(ops, coeffs):
    hints = [o.norm_hint for o in ops]
    if any(h is None for h in hints):
        return None
    return sum(abs(c) * h for c, h in zip(coeffs, hints))


def add(a: KernelOperator, b: KernelOperator, ca: complex = 1.0, cb: complex = 1.0,
        label: str = "") -> KernelOperator:
    _check_compatible(a, b)
    radius = max(a.radius, b.radius)
    rs = None if (a.row_support is None or b.row_support is None) else \
        a.row_support | b.row_support
    cs = None if (a.col_support is None or b.col_support is None) else \
        a.col_support | b.col_support
    return KernelOperator(
        space=a.space, k=a.k, kernel=_SumKernel([a, b], [ca, cb]),
        propagation=Propagation(radius, _combine_tails([a, b], [ca, cb])),
        row_support=rs, col_support=cs,
        norm_hint=_hint_sum([a, b], [ca, cb]), label=label or "sum")


def sub(a: KernelOperator, b: KernelOperator) -> KernelOperator:
    return add(a, b, 1.0, -1.0, label="diff")


def scale(a: KernelOperator, c: complex) -> KernelOperator:
    tail = a.propagation.tail
    return KernelOperator(
        space=a.space, k=a.k,
        kernel=_SumKernel([a], [c]),
        propagation=Propagation(a.radius,
                                None if tail is None else DecayTail(abs(c) * tail.C, tail.kappa)),
        row_support=a.row_support, col_support=a.col_support,
        norm_hint=None if a.norm_hint is None else abs(c) * a.norm_hint,
        label=f"scale({a.label})")


class _AdjointKernel(Kernel):
    def __init__(self, base: KernelOperator):
        self.base = base

    def eval(self, xs, ys):
        return self.base.eval_blocks(ys, xs).conj().transpose(0, 2, 1)


def adjoint(a: KernelOperator) -> KernelOperator:
    return KernelOperator(
        space=a.space, k=a.k, kernel=_AdjointKernel(a),
        propagation=a.propagation,
        row_support=a.col_support, col_support=a.row_support,
        self_adjoint=a.self_adjoint, norm_hint=a.norm_hint,
        label=f"adj({a.label})")


class _ComposedKernel(Kernel):
    def __init__(self, a: KernelOperator, b: KernelOperator):
        self.a = a
        self.b = b

    def eval(self, xs, ys):
        a, b = self.a, self.b
        offs = a.space.ball(a.radius)
        n, K = len(xs), len(offs)
        out = np.zeros((n, a.k, a.k), dtype=np.complex128)
        chunk = max(1, 2_000_000 // max(K, 1))
        for s in range(0, n, chunk):
            e = min(n, s + chunk)
            m = e - s
            zflat = (xs[s:e, None, :] + offs[None, :, :]).reshape(m * K, -1)
            xrep = np.repeat(xs[s:e], K, axis=0)
            yrep = np.repeat(ys[s:e], K, axis=0)
            ab = a.eval_blocks(xrep, zflat).reshape(m, K, a.k, a.k)
            bb = b.eval_blocks(zflat, yrep).reshape(m, K, a.k, a.k)
            out[s:e] = np.einsum("nkab,nkbc->nac", ab, bb)
        return out


def compose(a: KernelOperator, b: KernelOperator, label: str = "") -> KernelOperator:
    """Operator product AB, evaluated lazily by summing over the middle site.

    The declared propagation adds; supports shrink per the localization
    lemmas: rows of AB lie in rows(A) and in the R_A-thickening of rows(B),
    and dually for columns.  The result represents the product of the
    realized kernels exactly; tail metadata is combined conservatively.
    """
    _check_compatible(a, b)
    metric = a.space.metric
    rows = []
    if a.row_support is not None:
        rows.append(a.row_support)
    if b.row_support is not None:
        rows.append(thicken(b.row_support, a.radius, metric))
    cols = []
    if b.col_support is not None:
        cols.append(b.col_support)
    if a.col_support is not None:
        cols.append(thicken(a.col_support, b.radius, metric))
    tail = None
    ta, tb = a.propagation.tail, b.propagation.tail
    if ta is not None or tb is not None:
        na = (b.norm_hint or 1.0) * (ta.C if ta else 0.0)
        nb = (a.norm_hint or 1.0) * (tb.C if tb else 0.0)
        kap = min(t.kappa for t in (ta, tb) if t is not None)
        tail = DecayTail(na + nb, kap)
    hint = None
    if a.norm_hint is not None and b.norm_hint is not None:
        hint = a.norm_hint * b.norm_hint
    return KernelOperator(
        space=a.space, k=a.k, kernel=_ComposedKernel(a, b),
        propagation=Propagation(a.radius + b.radius, tail),
        row_support=intersection(*rows) if rows else None,
        col_support=intersection(*cols) if cols else None,
        norm_hint=hint, label=label or f"({a.label})({b.label})")


class _MultCommutatorKernel(Kernel):
    """[f, B](x, y) = (f(x) - f(y)) B(x, y) for a multiplication operator f."""

    def __init__(self, values, base: KernelOperator, sign: float):
        self.values = values
        self.base = base
        self.sign = sign

    def eval(self, xs, ys):
        w = self.sign * (np.asarray(self.values(xs)) - np.asarray(self.values(ys)))
        return w[:, None, None] * self.base.eval_blocks(xs, ys)


def commutator(a: KernelOperator, b: KernelOperator) -> KernelOperator:
    """[A, B] = AB - BA.

    Commutators with a multiplication operator collapse to the pointwise
    kernel (f(x) - f(y)) K(x, y), supported on the boundary collar of f,
    which is what makes Kubo chains trace-class.
    """
    _check_compatible(a, b)
    metric = a.space.metric
    for f, g, sign in ((a, b, 1.0), (b, a, -1.0)):
        if f.is_multiplication:
            collar = intersection(thicken(f.mult_support, g.radius, metric),
                                  thicken(f.mult_cosupport, g.radius, metric))
            rs = collar if g.row_support is None else intersection(collar, g.row_support)
            cs = collar if g.col_support is None else intersection(collar, g.col_support)
            hint = None
            if f.norm_hint is not None and g.norm_hint is not None:
                hint = 2.0 * f.norm_hint * g.norm_hint
            return KernelOperator(
                space=a.space, k=a.k,
                kernel=_MultCommutatorKernel(f.mult_values, g, sign),
                propagation=g.propagation,
                row_support=rs, col_support=cs, norm_hint=hint,
                label=f"[{a.label},{b.label}]")
    return sub(compose(a, b), compose(b, a))


# ---------------------------------------------------------------------------
# Unitized operators


@dataclass
class UnitizedOperator:
    """scalar (x) identity + kernel part: an element of M_k(B(M)^+)."""

    scalar: np.ndarray  # (k, k) complex
    part: KernelOperator
    inverse: Optional["UnitizedOperator"] = None

    def __post_init__(self):
        self.scalar = np.asarray(self.scalar, dtype=np.complex128)
        if self.scalar.shape != (self.part.k, self.part.k):
            raise ShapeMismatchError("scalar part has wrong shape")

    @property
    def space(self) -> LatticeSpace:
        return self.part.space

    @property
    def k(self) -> int:
        return self.part.k

    @property
    def scalar_free(self) -> bool:
        return not self.scalar.any()

    def as_kernel(self) -> KernelOperator:
        """The full operator as a single lazy kernel (scalar delta included)."""
        if self.scalar_free:
            return self.part
        part = self.part
        scalar = self.scalar

        class _UnitizedKernel(Kernel):
            def eval(self, xs, ys):
                out = part.eval_blocks(xs, ys)
                on_diag = (xs == ys).all(axis=1)
                out[on_diag] += scalar[None]
                return out

        hint = None
        if part.norm_hint is not None:
            hint = part.norm_hint + float(np.linalg.norm(scalar, 2))
        return KernelOperator(
            space=part.space, k=part.k, kernel=_UnitizedKernel(),
            propagation=Propagation(max(part.radius, 0), part.propagation.tail),
            row_support=None, col_support=None, norm_hint=hint,
            valid_box=part.valid_box, label=f"unitized({part.label})")


# ---------------------------------------------------------------------------
# Chain support analysis


@dataclass(frozen=True)
class SupportBudget:
    """Bounded-support certificate for a factor chain.

    ``error_bound`` here is the summed operator-norm mass of the factors'
    dropped tails; the trace propagates it into a full bound.
    """

    region: Region
    radius_used: int
    bounded: bool
    error_bound: float
    certificate: str = ""  # "analytic" | "on-window" | ""
    bounding_radius: int = -1


@dataclass
class _Factor:
    op: KernelOperator
    left: list  # radius-0 operators folded in from the left

    @property
    def radius(self):
        return self.op.radius

    def row_region(self):
        regs = [o.row_support for o in self.left if o.row_support is not None]
        if self.op.row_support is not None:
            regs.append(self.op.row_support)
        return intersection(*regs) if regs else None

    def col_region(self):
        return self.op.col_support

    def norm_hint(self):
        h = self.op.norm_hint
        for o in self.left:
            if h is None or o.norm_hint is None:
                return None
            h = h * o.norm_hint
        return h

    def eval_blocks(self, xs, ys):
        out = self.op.eval_blocks(xs, ys)
        for diag in reversed(self.left):
            w = diag.eval_blocks(xs, xs)
            out = np.einsum("nab,nbc->nac", w, out)
        return out


def _fold_chain(ops: Sequence[KernelOperator]):
    """Fold propagation-0 factors into the kernel factor to their right.

    Trailing diagonals wrap around to the front, which is legal under the
    trace.  Returns (factors, None) or ([], diagonal_ops) when nothing
    propagates.
    """
    ops = list(ops)
    if not ops:
        raise ValueError("empty chain")
    space = ops[0].space
    for o in ops:
        _check_compatible(ops[0], o)
    if all(o.radius == 0 for o in ops):
        return [], ops, space
    while ops[-1].radius == 0:
        ops.insert(0, ops.pop())
    factors = []
    pending = []
    for o in ops:
        if o.radius == 0:
            pending.append(o)
        else:
            factors.append(_Factor(o, pending))
            pending = []
    return factors, None, space


def _slot_regions(factors):
    d = factors[0].op.d
    m = len(factors)
    radii = [f.radius for f in factors]
    total = sum(radii)
    slots = []
    for i in range(1, m):
        regs = []
        cr = factors[i - 1].col_region()
        rr = factors[i].row_region()
        if cr is not None:
            regs.append(cr)
        if rr is not None:
            regs.append(rr)
        fwd = sum(radii[:i])
        slots.append((intersection(*regs) if regs else All(d), min(fwd, total - fwd)))
    return slots, total


def _diag_region(factors, metric):
    d = factors[0].op.d
    slots, total = _slot_regions(factors)
    regs = []
    rr = factors[0].row_region()
    if rr is not None:
        regs.append(rr)
    cr = factors[-1].col_region()
    if cr is not None:
        regs.append(cr)
    for reg, slot_budget in slots:
        if isinstance(reg, All):
            continue
        regs.append(thicken(reg, slot_budget, metric))
    return (intersection(*regs) if regs else All(d)), slots, total


def support_of_product(ops: Sequence[KernelOperator],
                       window: Optional[Box] = None) -> SupportBudget:
    """Certified support region for the diagonal of a factor chain.

    The region intersects the thickened slot constraints coming from the
    localization lemmas.  ``bounded`` is True only with an analytic bounding
    box or a window enumeration whose guard collar stays empty.
    """
    factors, diag_only, space = _fold_chain(ops)
    metric = space.metric
    if diag_only is not None:
        regs = [o.row_support for o in diag_only if o.row_support is not None]
        region = intersection(*regs) if regs else All(space.d)
        total = 0
    else:
        region, _, total = _diag_region(factors, metric)
    tails = sum(tail_opnorm(o.propagation, space.d) for o in ops)
    bb = region.bounding_box()
    if bb is not None:
        return SupportBudget(region, total, True, tails, "analytic",
                             0 if bb.empty else bb.sup_radius())
    if window is None:
        return SupportBudget(region, total, False, tails, "")
    if min(b - a for a, b in zip(window.lo, window.hi)) < 2 * (total + 2):
        # too small to certify anything: an empty enumeration would be
        # indistinguishable from a window that misses the support entirely
        return SupportBudget(region, total, False, tails, "")
    sites = enumerate_region(region, window)
    if len(sites) and (window.boundary_margin(sites) < total + 2).any():
        return SupportBudget(region, total, False, tails, "")
    radius = int(np.abs(sites).max()) if len(sites) else 0
    return SupportBudget(region, total, True, tails, "on-window", radius)


# ---------------------------------------------------------------------------
# Trace evaluation


@dataclass
class TraceResult:
    value: complex
    budget: SupportBudget
    sites_visited: int
    error_bound: float

    def to_doc(self) -> dict:
        return {"value": [self.value.real, self.value.imag],
                "error_bound": self.error_bound,
                "region_radius": self.budget.bounding_radius,
                "sites_visited": self.sites_visited}


def _site_index(sites: np.ndarray):
    """Linearization data (lo, strides) so rows map to unique sorted keys."""
    if len(sites) == 0:
        return np.zeros(sites.shape[1], np.int64), np.ones(sites.shape[1], np.int64)
    lo = sites.min(axis=0)
    span = sites.max(axis=0) - lo + 1
    strides = np.ones_like(span)
    for i in range(len(span) - 2, -1, -1):
        strides[i] = strides[i + 1] * span[i + 1]
    return lo, strides


def _locate(targets: np.ndarray, table: np.ndarray, lo, strides) -> np.ndarray:
    """Indices of target rows in lex-sorted ``table`` (-1 when absent)."""
    if len(table) == 0:
        return np.full(len(targets), -1, dtype=np.int64)
    inside = np.all(targets >= lo, axis=1)
    keys_t = ((targets - lo) * strides).sum(axis=1)
    keys_s = ((table - lo) * strides).sum(axis=1)
    pos = np.searchsorted(keys_s, keys_t).clip(0, len(keys_s) - 1)
    valid = inside & (keys_s[pos] == keys_t)
    # linearized keys collide only for sites outside the table's bounding box
    valid &= np.all(targets <= table.max(axis=0), axis=1)
    return np.where(valid, pos, -1)


def _thicken_sites(sites: np.ndarray, space: LatticeSpace, budget: int,
                   region: Region) -> np.ndarray:
    """Sites of a superset of thicken(sites, budget), filtered by ``region``.

    For the sup metric the bounding-box expansion is used (a sound superset;
    extra sites only contribute structurally zero matrix rows).
    """
    if len(sites) == 0:
        return sites
    lo = sites.min(axis=0) - budget
    hi = sites.max(axis=0) + budget
    box = Box(space.d, tuple(lo.tolist()), tuple(hi.tolist()))
    cand = box.sites()
    if not isinstance(region, All):
        cand = cand[region._contains(cand)]
    if space.metric == "sup" or budget == 0:
        return cand
    keep = np.zeros(len(cand), dtype=bool)
    offs = space.ball(budget)
    slo, sstr = _site_index(sites)
    for off in offs:
        todo = ~keep
        if not todo.any():
            break
        keep[todo] = _locate(cand[todo] - off, sites, slo, sstr) >= 0
    return cand[keep]


def _build_matrix(factor: _Factor, rows: np.ndarray, cols: np.ndarray,
                  space: LatticeSpace) -> sp.csr_matrix:
    """Block-sparse factor matrix over rows x cols, expanded to scalar CSR."""
    k = factor.op.k
    n_r, n_c = len(rows), len(cols)
    if n_r == 0 or n_c == 0:
        return sp.csr_matrix((n_r * k, n_c * k), dtype=np.complex128)
    offs = space.ball(factor.radius)
    clo, cstr = _site_index(cols)
    rr_all, cc_all, blocks_all = [], [], []
    chunk = max(1, 4_000_000 // max(len(offs), 1))
    for s in range(0, n_r, chunk):
        e = min(n_r, s + chunk)
        tgt = (rows[s:e, None, :] + offs[None, :, :]).reshape(-1, space.d)
        idx = _locate(tgt, cols, clo, cstr)
        hit = idx >= 0
        rr = np.repeat(np.arange(s, e, dtype=np.int64), len(offs))[hit]
        cc = idx[hit]
        blocks = factor.eval_blocks(rows[rr], cols[cc])
        nz = np.abs(blocks).reshape(len(blocks), -1).max(axis=1) > 0.0
        rr_all.append(rr[nz])
        cc_all.append(cc[nz])
        blocks_all.append(blocks[nz])
    rr = np.concatenate(rr_all) if rr_all else np.zeros(0, np.int64)
    cc = np.concatenate(cc_all) if cc_all else np.zeros(0, np.int64)
    blocks = np.concatenate(blocks_all) if blocks_all else \
        np.zeros((0, k, k), np.complex128)
    ar = np.arange(k, dtype=np.int64)
    row_idx = np.broadcast_to(rr[:, None, None] * k + ar[None, :, None], blocks.shape)
    col_idx = np.broadcast_to(cc[:, None, None] * k + ar[None, None, :], blocks.shape)
    mat = sp.coo_matrix((blocks.ravel(), (row_idx.ravel(), col_idx.ravel())),
                        shape=(n_r * k, n_c * k)).tocsr()
    mat.sort_indices()
    return mat


def _opnorm_bound(mat: sp.csr_matrix) -> float:
    if mat.nnz == 0:
        return 0.0
    a = abs(mat)
    return float(np.sqrt(float(a.sum(axis=1).max()) * float(a.sum(axis=0).max())))


def trace(ops: Sequence[KernelOperator], window: Optional[Box] = None) -> TraceResult:
    """Exact trace of a chain of finite-propagation operators.

    The chain is folded (propagation-0 factors merge into their right
    neighbor), the diagonal support region is certified bounded, slot site
    sets follow from the propagation budgets, and the product is evaluated
    as block-sparse matrix products.  Within a backend the accumulation
    order is fixed and the final diagonal sum is exactly rounded, so
    results are bit-identical across thread counts and repeated runs.

    For truncated-decay factors the result carries an error bound, rigorous
    to first order in the dropped tails (higher orders enter through a
    geometric cap).
    """
    factors, diag_only, space = _fold_chain(ops)
    budget = support_of_product(ops, window)
    if not budget.bounded:
        if window is not None:
            if min(b - a for a, b in zip(window.lo, window.hi)) \
                    < 2 * (budget.radius_used + 2):
                raise WindowTooSmallError(
                    f"window cannot certify a chain with propagation budget "
                    f"{budget.radius_used}")
            sites = enumerate_region(budget.region, window)
            if len(sites) and (window.boundary_margin(sites) < budget.radius_used + 2).any():
                raise WindowTooSmallError(
                    f"support region reaches the window collar "
                    f"(propagation budget {budget.radius_used})")
        raise UnboundedSupportError(
            "chain has no bounded support certificate; the trace is not "
            "trace-class under the stated hypotheses")
    if budget.certificate == "analytic":
        bb = budget.region.bounding_box()
        if window is not None:
            need = bb.expand(budget.radius_used + 2)
            if not bb.empty and not all(
                    wl <= nl and nh <= wh
                    for wl, nl, nh, wh in zip(window.lo, need.lo, need.hi, window.hi)):
                raise WindowTooSmallError(
                    f"window must contain the support box thickened by "
                    f"{budget.radius_used + 2}")
        D = np.zeros((0, space.d), dtype=np.int64) if bb.empty else \
            lex_sort(np.asarray(enumerate_region(budget.region, bb)))
    else:
        D = lex_sort(np.asarray(enumerate_region(budget.region, window)))

    k = ops[0].k
    if len(D) == 0:
        return TraceResult(0j, budget, 0, 0.0)

    if diag_only is not None:
        vals = np.broadcast_to(np.eye(k, dtype=np.complex128), (len(D), k, k)).copy()
        for o in reversed(diag_only):
            vals = np.einsum("nab,nbc->nac", o.eval_blocks(D, D), vals)
        per_site = np.trace(vals, axis1=1, axis2=2)
        return TraceResult(csum(per_site), budget, len(D), 0.0)

    slots, total = _slot_regions(factors)
    site_sets = [D]
    for reg, slot_budget in slots:
        site_sets.append(_thicken_sites(D, space, slot_budget, reg))
    site_sets.append(D)

    mats = [_build_matrix(f, site_sets[i], site_sets[i + 1], space)
            for i, f in enumerate(factors)]

    if len(mats) == 1:
        per_row = mats[0].diagonal()
    else:
        acc = mats[0]
        for m in mats[1:-1]:
            acc = _kernels.spgemm(acc, m)
        per_row = _kernels.pair_trace_rows(acc, mats[-1])
    value = csum(per_row)

    error = 0.0
    if any(f.op.propagation.tail is not None for f in factors):
        norms = [f.norm_hint() if f.norm_hint() is not None else _opnorm_bound(m)
                 for f, m in zip(factors, mats)]
        tails = [tail_opnorm(f.op.propagation, space.d) for f in factors]
        first_order = 0.0
        for i, t in enumerate(tails):
            if t == 0.0:
                continue
            anchor_dim = len(site_sets[i + 1]) * k
            rest = 1.0
            for j, nb in enumerate(norms):
                if j != i:
                    rest *= max(nb, 1e-30)
            first_order += t * anchor_dim * rest
        rho = sum(t / max(n, 1e-30) for t, n in zip(tails, norms))
        error = first_order / (1.0 - rho) if rho < 0.5 else math.inf
    return TraceResult(value, budget, len(D), error)


# ---------------------------------------------------------------------------
# Local materialization (an optimization wrapper with loud validity guards)


class LocalMatrixKernel(Kernel):
    """Kernel backed by a sparse matrix over a finite site box.

    Only valid inside ``valid_box``: queries outside raise instead of
    silently returning zeros, so traces that outgrow the materialized
    window fail loudly.
    """

    def __init__(self, mat: sp.csr_matrix, sites: np.ndarray, valid_box: Box, k: int):
        self.mat = mat.tocsr()
        self.sites = sites
        self.valid_box = valid_box
        self.k = k
        self._lo, self._strides = _site_index(sites)

    def eval(self, xs, ys):
        inside = self.valid_box._contains(xs) & self.valid_box._contains(ys)
        if not inside.all():
            bad = xs[~inside][0] if (~inside).any() else None
            raise WindowTooSmallError(
                f"materialized kernel queried outside its valid box near "
                f"{tuple(bad.tolist()) if bad is not None else '?'}")
        ri = _locate(xs, self.sites, self._lo, self._strides)
        ci = _locate(ys, self.sites, self._lo, self._strides)
        k = self.k
        out = np.zeros((len(xs), k, k), dtype=np.complex128)
        ok = (ri >= 0) & (ci >= 0)
        if ok.any():
            rows = (ri[ok][:, None] * k + np.arange(k)[None, :]).ravel()
            cols = (ci[ok][:, None] * k + np.arange(k)[None, :]).ravel()
            rr = np.repeat(rows.reshape(-1, k), k, axis=1).ravel()
            cc = np.tile(cols.reshape(-1, k), (1, k)).ravel()
            vals = np.asarray(self.mat[rr, cc]).ravel()
            out[ok] = vals.reshape(-1, k, k)
        return out


def materialize_product(ops: Sequence[KernelOperator], box: Box,
                        scalar_sub: Optional[np.ndarray] = None,
                        label: str = "") -> KernelOperator:
    """Materialize the product of a factor list on a site box.

    Each factor is built as a block-sparse matrix over the box and the
    product is formed by sparse multiplication, so composing through deep
    trees never multiplies ball volumes.  Entries are exact inside the box
    shrunk by the total propagation; the returned operator refuses queries
    outside that region.  ``scalar_sub`` subtracts a scalar multiple of the
    identity (for extracting the non-scalar part of a unitized product).
    """
    space = ops[0].space
    k = ops[0].k
    sites = box.sites()
    mats = [_build_matrix(_Factor(o, []), sites, sites, space) for o in ops]
    acc = mats[0]
    for m in mats[1:]:
        acc = _kernels.spgemm(acc, m)
    if scalar_sub is not None:
        acc = (acc - sp.kron(sp.eye(len(sites), format="csr"),
                             sp.csr_matrix(np.asarray(scalar_sub, dtype=np.complex128)))).tocsr()
    total = sum(o.radius for o in ops)
    valid = Box(space.d, tuple(a + total for a in box.lo),
                tuple(b - total for b in box.hi))
    if valid.empty:
        raise WindowTooSmallError("materialization box smaller than the propagation budget")
    rows = [o.row_support for o in (ops[0],) if o.row_support is not None]
    cols = [o.col_support for o in (ops[-1],) if o.col_support is not None]
    tails = [o.propagation.tail for o in ops if o.propagation.tail is not None]
    tail = None
    if tails:
        tail = DecayTail(sum(t.C for t in tails), min(t.kappa for t in tails))
    hint = 1.0
    for o in ops:
        if o.norm_hint is None:
            hint = None
            break
        hint *= o.norm_hint
    if hint is not None and scalar_sub is not None:
        hint += float(np.linalg.norm(np.asarray(scalar_sub), 2))
    return KernelOperator(
        space=space, k=k, kernel=LocalMatrixKernel(acc, sites, valid, k),
        propagation=Propagation(total, tail),
        row_support=intersection(*rows) if rows else None,
        col_support=intersection(*cols) if cols else None,
        norm_hint=hint, valid_box=valid, label=label or "materialized")


# ---------------------------------------------------------------------------
# Validation


def _clamp_to_valid(ops, window: Box, reach: int) -> Box:
    """Shrink a sampling window into every operator's valid box."""
    lo = list(window.lo)
    hi = list(window.hi)
    for op in ops:
        if op.valid_box is None:
            continue
        inner = op.valid_box.expand(-(reach + 1))
        lo = [max(a, b) for a, b in zip(lo, inner.lo)]
        hi = [min(a, b) for a, b in zip(hi, inner.hi)]
    out = Box(window.d, tuple(lo), tuple(hi))
    if out.empty:
        raise WindowTooSmallError(
            "operator's materialized region is too small to validate")
    return out


def _sample_sites(space: LatticeSpace, window: Box, count: int,
                  seed: int = 7) -> np.ndarray:
    rng = np.random.default_rng(seed)
    lo = np.asarray(window.lo)
    hi = np.asarray(window.hi)
    pts = rng.integers(lo, hi + 1, size=(count, space.d))
    pts[0] = (lo + hi) // 2
    return np.unique(pts, axis=0)


def verify_idempotent(P: UnitizedOperator, tol: float = 1e-10,
                      window: Optional[Box] = None, samples: int = 16,
                      seed: int = 7, raise_on_fail: bool = True) -> dict:
    """Check P^2 = P on sampled kernel entries and the scalar part exactly.

    Returns a report with the max residual and its witness entry; raises
    :class:`ValidationError` beyond tolerance unless ``raise_on_fail`` off.
    """
    scalar_resid = float(np.abs(P.scalar @ P.scalar - P.scalar).max())
    Q = P.part
    space = Q.space
    R = max(Q.radius, 1)
    if window is None:
        window = Box.cube(space.d, max(4 * R, 8))
    window = _clamp_to_valid([Q], window, 2 * R)
    xs = _sample_sites(space, window, samples, seed)
    offs2 = space.ball(2 * R)
    offs1 = space.ball(R)
    worst = 0.0
    witness = None
    s = P.scalar
    for x in xs:
        ys = x[None, :] + offs2
        xrep = np.repeat(x[None, :], len(ys), axis=0)
        q_xy = Q.eval_blocks(xrep, ys)
        z = x[None, :] + offs1
        q_xz = Q.eval_blocks(np.repeat(x[None, :], len(z), axis=0), z)
        zrep = np.repeat(z, len(ys), axis=0)
        yrep = np.tile(ys, (len(z), 1))
        q_zy = Q.eval_blocks(zrep, yrep).reshape(len(z), len(ys), Q.k, Q.k)
        q2 = np.einsum("zab,zybc->yac", q_xz, q_zy)
        resid = q2 + np.einsum("ab,ybc->yac", s, q_xy) \
            + np.einsum("yab,bc->yac", q_xy, s) - q_xy
        mags = np.abs(resid).reshape(len(ys), -1).max(axis=1)
        i = int(mags.argmax())
        if mags[i] > worst:
            worst = float(mags[i])
            witness = (tuple(x.tolist()), tuple(ys[i].tolist()))
    report = {"scalar_residual": scalar_resid, "max_residual": worst,
              "witness": witness, "tolerance": tol,
              "passed": scalar_resid == 0.0 and worst <= tol}
    if raise_on_fail and not report["passed"]:
        raise ValidationError(
            f"idempotency residual {max(worst, scalar_resid):.3e} exceeds {tol:.1e}",
            max_residual=worst, witness=witness)
    return report


def verify_invertible(U: UnitizedOperator, tol: float = 1e-10,
                      window: Optional[Box] = None, samples: int = 16,
                      seed: int = 7, raise_on_fail: bool = True) -> dict:
    """Check UV = VU = 1 against the supplied inverse on sampled entries.

    Membership in the unitized algebra only requires U - 1 and U^{-1} - 1 to
    have finite propagation; no decay at infinity is demanded (the shift is
    a valid input).
    """
    if U.inverse is None:
        raise ValidationError("no inverse supplied")
    V = U.inverse
    a, b = U.as_kernel(), V.as_kernel()
    space = a.space
    if window is None:
        window = Box.cube(space.d, max(4 * (a.radius + b.radius), 8))
    window = _clamp_to_valid([a, b], window, a.radius + b.radius)
    xs = _sample_sites(space, window, samples, seed)
    worst = 0.0
    witness = None
    for first, second in ((a, b), (b, a)):
        prod = compose(first, second)
        offs = space.ball(first.radius + second.radius)
        for x in xs:
            ys = x[None, :] + offs
            vals = prod.eval_blocks(np.repeat(x[None, :], len(ys), axis=0), ys)
            on_diag = (ys == x[None, :]).all(axis=1)
            vals[on_diag] -= np.eye(prod.k)
            mags = np.abs(vals).reshape(len(ys), -1).max(axis=1)
            i = int(mags.argmax())
            if mags[i] > worst:
                worst = float(mags[i])
                witness = (tuple(x.tolist()), tuple(ys[i].tolist()))
    report = {"max_residual": worst, "witness": witness, "tolerance": tol,
              "passed": worst <= tol}
    if raise_on_fail and not report["passed"]:
        raise ValidationError(f"inverse residual {worst:.3e} exceeds {tol:.1e}",
                              max_residual=worst, witness=witness)
    return report
