"""Concrete operator generators and the independent Chern oracle.

Exact inputs: shift powers, split-step walks, tile-random idempotents and
invertibles (all strictly finite propagation, reproducible from counter-based
seeds).  Approximate input: magnetic (Harper) spectral projections on Z^2,
Bloch-reduced in Landau gauge, truncated in real space with a fitted
exponential tail declaration.

The lattice field-strength Chern oracle is the independent ground truth for
the Hall integers; its orientation convention is fixed here once and the
pairing integers are asserted against it, never against literature values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .errors import GapClosedError, TailFitError
from .opalg import (DecayTail, Kernel, KernelOperator, Propagation,
                    UnitizedOperator, adjoint, compose, materialize_product,
                    mult_operator, sub)
from .space import (Box, FiniteSet, LatticeSpace, Partition, Region,
                    complement, intersection, union)

__all__ = [
    "WalkSpec", "HofstadterSpec", "OffsetTableKernel", "shift_unitary",
    "split_step_walk", "shifted_walk", "random_local_idempotent", "random_local_invertible",
    "hofstadter_projection", "chern_oracle", "deform_partition",
    "conjugate_idempotent", "conjugate_invertible",
]

Z1 = LatticeSpace(1)
Z2 = LatticeSpace(2)


# ---------------------------------------------------------------------------
# Offset-table kernels (translation invariant operators)


class OffsetTableKernel(Kernel):
    """Kernel K(x, y) = table[x - y] for finitely many offsets."""

    def __init__(self, table: dict, k: int, d: int):
        self.table = {tuple(int(c) for c in off): np.asarray(m, dtype=np.complex128).reshape(k, k)
                      for off, m in table.items()}
        self.k = k
        self.d = d

    def eval(self, xs, ys):
        out = np.zeros((len(xs), self.k, self.k), dtype=np.complex128)
        diff = xs - ys
        for off, mat in self.table.items():
            mask = (diff == np.asarray(off)).all(axis=1)
            if mask.any():
                out[mask] = mat
        return out

    def adjoint_table(self) -> dict:
        return {tuple(-c for c in off): mat.conj().T for off, mat in self.table.items()}


def _offset_operator(space: LatticeSpace, k: int, table: dict, label: str,
                     norm_hint: Optional[float] = None) -> KernelOperator:
    radius = max((max(abs(c) for c in off) if space.metric == "sup"
                  else sum(abs(c) for c in off))
                 for off in table) if table else 0
    return KernelOperator(space=space, k=k,
                          kernel=OffsetTableKernel(table, k, space.d),
                          propagation=Propagation.exact(radius),
                          norm_hint=norm_hint, label=label)


def _unitized_from_table(space, k, table, inv_table, label):
    """Invertible 1 + (U - 1) from offset tables of U and U^{-1}."""
    eye = np.eye(k)

    def minus_one(tab):
        t = dict(tab)
        zero = (0,) * space.d
        t[zero] = t.get(zero, np.zeros((k, k))) - eye
        return t

    fwd = UnitizedOperator(eye, _offset_operator(space, k, minus_one(table),
                                                 f"{label}-1", norm_hint=2.0))
    bwd = UnitizedOperator(eye, _offset_operator(space, k, minus_one(inv_table),
                                                 f"{label}^-1-1", norm_hint=2.0))
    fwd.inverse = bwd
    bwd.inverse = fwd
    return fwd


@dataclass(frozen=True)
class WalkSpec:
    """shift(power) or split_step(theta1, theta2) on Z."""

    kind: str
    power: int = 0
    theta1: float = 0.0
    theta2: float = 0.0

    def build(self) -> UnitizedOperator:
        if self.kind == "shift":
            return shift_unitary(self.power)
        if self.kind == "split_step":
            return split_step_walk(self.theta1, self.theta2)
        raise ValueError(f"unknown walk kind {self.kind!r}")


def shift_unitary(p: int) -> UnitizedOperator:
    """U e_j = e_{j+p} on l^2(Z): kernel U(x, y) = [x = y + p]."""
    table = {(p,): np.array([[1.0]])}
    inv = {(-p,): np.array([[1.0]])}
    return _unitized_from_table(Z1, 1, table, inv, f"shift^{p}")


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=np.complex128)


def _split_step_table(theta1: float, theta2: float) -> dict:
    c1, c2 = _rotation(theta1), _rotation(theta2)
    up = np.diag([1.0, 0.0]).astype(np.complex128)
    dn = np.diag([0.0, 1.0]).astype(np.complex128)
    # (S_up C1)(x, y): offset +1 carries up @ C1, offset 0 carries dn @ C1
    # (S_dn C2)(x, z): offset -1 carries dn @ C2, offset 0 carries up @ C2
    return {
        (0,): up @ c2 @ dn @ c1 + dn @ c2 @ up @ c1,
        (1,): up @ c2 @ up @ c1,
        (-1,): dn @ c2 @ dn @ c1,
    }


def split_step_walk(theta1: float, theta2: float) -> UnitizedOperator:
    """U = S_down C(theta2) S_up C(theta1) with spin-dependent unit shifts.

    S_up moves the spin-up component right, S_down moves spin-down left;
    the offset table is assembled in closed form, propagation <= 1 per
    half-step (<= 2 total as one operator).  The flow of any balanced walk
    of this form is 0; see :func:`shifted_walk` for transporting examples.
    """
    table = _split_step_table(theta1, theta2)
    kern = OffsetTableKernel(table, 2, 1)
    return _unitized_from_table(Z1, 2, table, kern.adjoint_table(),
                                f"walk({theta1:.3f},{theta2:.3f})")


def _table_product(t1: dict, t2: dict, k: int) -> dict:
    out: dict = {}
    for o1, m1 in t1.items():
        for o2, m2 in t2.items():
            off = tuple(a + b for a, b in zip(o1, o2))
            out[off] = out.get(off, np.zeros((k, k), dtype=np.complex128)) + m1 @ m2
    return out


def shifted_walk(power: int, theta1: float, theta2: float) -> UnitizedOperator:
    """(S^power (x) 1_2) times a split-step walk: a walk with net transport."""
    eye = np.eye(2, dtype=np.complex128)
    table = _table_product({(power,): eye}, _split_step_table(theta1, theta2), 2)
    kern = OffsetTableKernel(table, 2, 1)
    return _unitized_from_table(Z1, 2, table, kern.adjoint_table(),
                                f"S^{power}*walk({theta1:.3f},{theta2:.3f})")


# ---------------------------------------------------------------------------
# Tile-random exact fixtures


def _tile_rng(seed: int, tile: tuple) -> np.random.Generator:
    packed = 0
    for c in tile:
        packed = (packed << 21) ^ (int(c) + (1 << 20))
    key = np.array([np.uint64(seed & (2**64 - 1)), np.uint64(packed & (2**64 - 1))])
    return np.random.Generator(np.random.Philox(key=key))


class _TileBlockKernel(Kernel):
    """Block-diagonal kernel over disjoint cubic tiles of width w.

    Each tile's block matrix is drawn lazily from a counter-based generator
    keyed by (seed, tile index), so evaluation order never matters.
    """

    def __init__(self, seed: int, width: int, k: int, d: int, offset, maker,
                 scalar_sub: Optional[np.ndarray] = None):
        self.seed = seed
        self.width = width
        self.k = k
        self.d = d
        self.offset = np.asarray(offset, dtype=np.int64)
        self.maker = maker  # maker(rng, m) -> (m, m) matrix
        self.scalar_sub = scalar_sub
        self._cache: dict = {}

    def tile_of(self, pts: np.ndarray) -> np.ndarray:
        return np.floor_divide(pts - self.offset, self.width)

    def _tile_matrix(self, tile: tuple) -> np.ndarray:
        got = self._cache.get(tile)
        if got is None:
            m = self.width ** self.d * self.k
            got = self.maker(_tile_rng(self.seed, tile), m)
            self._cache[tile] = got
        return got

    def _local_index(self, pts: np.ndarray, tiles: np.ndarray) -> np.ndarray:
        rel = pts - self.offset - tiles * self.width
        idx = np.zeros(len(pts), dtype=np.int64)
        for i in range(self.d):
            idx = idx * self.width + rel[:, i]
        return idx

    def eval(self, xs, ys):
        out = np.zeros((len(xs), self.k, self.k), dtype=np.complex128)
        tx = self.tile_of(xs)
        ty = self.tile_of(ys)
        same = (tx == ty).all(axis=1)
        if same.any():
            sel = np.where(same)[0]
            tiles = tx[sel]
            ix = self._local_index(xs[sel], tiles) * self.k
            iy = self._local_index(ys[sel], tiles) * self.k
            uniq, inv = np.unique(tiles, axis=0, return_inverse=True)
            for t_i, tile in enumerate(uniq):
                mat = self._tile_matrix(tuple(tile.tolist()))
                rows = np.where(inv == t_i)[0]
                for r in rows:
                    out[sel[r]] = mat[ix[r]:ix[r] + self.k, iy[r]:iy[r] + self.k]
        if self.scalar_sub is not None:
            on_diag = (xs == ys).all(axis=1)
            out[on_diag] -= self.scalar_sub[None]
        return out


def _idempotent_maker(rng: np.random.Generator, m: int) -> np.ndarray:
    rank = int(rng.integers(0, m + 1))
    diag = np.zeros(m)
    pos = rng.permutation(m)[:rank]
    diag[pos] = 1.0
    a = (rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))) / math.sqrt(m)
    s = np.eye(m) + 0.35 * a
    return s @ np.diag(diag) @ np.linalg.inv(s)


def _unitary_maker(rng: np.random.Generator, m: int) -> np.ndarray:
    a = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
    q, r = np.linalg.qr(a)
    return q * (np.diagonal(r) / np.abs(np.diagonal(r)))[None, :].conj()


def random_local_idempotent(seed: int, radius: int = 2, k: int = 1, d: int = 2,
                            scalar_rank: int = 0) -> UnitizedOperator:
    """Random idempotent, block-diagonal over disjoint tiles of width <= radius.

    Each tile block is a random similarity transform of a random-rank
    diagonal projector, so the whole operator is exactly idempotent up to
    float rounding.  ``scalar_rank`` declares that many scalar units in the
    unitization split P = P_0 + Q (the operator itself is unchanged; the
    split determines which part the trace formulas see).
    """
    if not 0 <= scalar_rank <= k:
        raise ValueError("scalar_rank must lie in [0, k]")
    space = Z1 if d == 1 else LatticeSpace(d)
    width = max(1, radius)
    rng = _tile_rng(seed, (-1,) * d)
    offset = rng.integers(0, width, size=d)
    scalar = np.diag([1.0] * scalar_rank + [0.0] * (k - scalar_rank)).astype(np.complex128)
    kern = _TileBlockKernel(seed, width, k, d, offset, _idempotent_maker,
                            scalar_sub=scalar if scalar_rank else None)
    part = KernelOperator(space=space, k=k, kernel=kern,
                          propagation=Propagation.exact(width - 1),
                          norm_hint=None, label=f"tile-idem(seed={seed})")
    return UnitizedOperator(scalar, part)


def random_local_invertible(seed: int, radius: int = 2, k: int = 1, d: int = 1,
                            shift_power: Optional[int] = None) -> UnitizedOperator:
    """Random invertible: tile-unitary layers around a global shift power.

    U = T_1 S^s T_2 with exactly known inverse T_2* S^{-s} T_1*.  The flow
    of U equals the flow of S^s alone (local layers do not transport).
    """
    space = Z1 if d == 1 else LatticeSpace(d)
    width = max(1, radius)
    rng = _tile_rng(seed, (-2,) * d)
    if shift_power is None:
        shift_power = int(rng.integers(-2, 3))
    offs = [rng.integers(0, width, size=d) for _ in range(2)]
    eye = np.eye(k)

    def layer(tag, off):
        kern = _TileBlockKernel(seed + tag, width, k, d, off, _unitary_maker)
        return KernelOperator(space=space, k=k, kernel=kern,
                              propagation=Propagation.exact(width - 1),
                              norm_hint=1.0, label=f"tile-unitary{tag}")

    t1, t2 = layer(101, offs[0]), layer(202, offs[1])
    s_table = {(shift_power,) + (0,) * (d - 1): eye}
    s_inv = {(-shift_power,) + (0,) * (d - 1): eye}
    s_fwd = _offset_operator(space, k, s_table, f"S^{shift_power}", norm_hint=1.0)
    s_bwd = _offset_operator(space, k, s_inv, f"S^{-shift_power}", norm_hint=1.0)
    u_full = compose(compose(t1, s_fwd), t2, label="rand-invertible")
    v_full = compose(compose(adjoint(t2), s_bwd), adjoint(t1), label="rand-inverse")
    delta = _offset_operator(space, k, {(0,) * d: eye}, "1", norm_hint=1.0)
    fwd = UnitizedOperator(eye, sub(u_full, delta))
    bwd = UnitizedOperator(eye, sub(v_full, delta))
    fwd.inverse = bwd
    bwd.inverse = fwd
    return fwd


def conjugate_idempotent(P: UnitizedOperator, V: UnitizedOperator,
                         box: Box) -> UnitizedOperator:
    """V P V^{-1}, materialized on a box (scalar part is preserved)."""
    part = materialize_product(
        [V.as_kernel(), P.as_kernel(), V.inverse.as_kernel()], box,
        scalar_sub=P.scalar, label="conjugated-idem")
    return UnitizedOperator(P.scalar, part)


def conjugate_invertible(U: UnitizedOperator, V: UnitizedOperator,
                         box: Box) -> UnitizedOperator:
    """V U V^{-1} with its inverse, both materialized on a box."""
    eye = np.eye(U.k)
    fwd = UnitizedOperator(U.scalar, materialize_product(
        [V.as_kernel(), U.as_kernel(), V.inverse.as_kernel()], box,
        scalar_sub=U.scalar, label="conjugated-inv"))
    bwd = UnitizedOperator(U.inverse.scalar, materialize_product(
        [V.as_kernel(), U.inverse.as_kernel(), V.inverse.as_kernel()], box,
        scalar_sub=U.inverse.scalar, label="conjugated-inv^-1"))
    fwd.inverse = bwd
    bwd.inverse = fwd
    return fwd


# ---------------------------------------------------------------------------
# Hofstadter spectral projections (approximate regime) and the Chern oracle


@dataclass(frozen=True)
class HofstadterSpec:
    """Magnetic projection spec: flux p/q, gap index (bands below the gap),
    real-space truncation radius, and k-grid resolution."""

    flux: Fraction
    gap_index: int = 1
    truncation_radius: int = 14
    kgrid: int = 48
    gauge: str = "landau"

    @classmethod
    def parse(cls, doc: dict) -> "HofstadterSpec":
        return cls(flux=Fraction(str(doc["flux"])), gap_index=int(doc.get("gap", 1)),
                   truncation_radius=int(doc.get("truncation_radius", 14)),
                   kgrid=int(doc.get("kgrid", 48)), gauge=doc.get("gauge", "landau"))


def _check_flux(flux: Fraction):
    p, q = flux.numerator, flux.denominator
    if not (0 < p < q):
        raise ValueError("flux must satisfy 0 < p/q < 1 in lowest terms")
    return p, q


def _bloch_hamiltonians(flux: Fraction, n_k: int, reduced: bool = True):
    """Harper Bloch Hamiltonians on an n_k x n_k grid, shape (n_k, n_k, q, q).

    ``reduced`` grids k1 over the magnetic zone [0, 2pi/q) (the inverse
    transform convention); otherwise over the full period [0, 2pi), where
    H(k) is manifestly periodic in both arguments.
    """
    p, q = _check_flux(flux)
    phi = p / q
    span1 = 2 * np.pi / q if reduced else 2 * np.pi
    k1 = span1 * np.arange(n_k) / n_k
    k2 = 2 * np.pi * np.arange(n_k) / n_k
    H = np.zeros((n_k, n_k, q, q), dtype=np.complex128)
    a = np.arange(q)
    diag = 2 * np.cos(2 * np.pi * phi * a[None, :] + k2[:, None])  # (n_k, q)
    H[:, :, a, a] = diag[None, :, :]
    hop = np.exp(1j * k1)
    for j in range(q):
        jn = (j + 1) % q
        H[:, :, j, jn] += hop[:, None]
        H[:, :, jn, j] += hop.conj()[:, None]
    return H, k1, k2


def _gapped_eigensystem(flux: Fraction, gap_index: int, n_k: int,
                        reduced: bool = True):
    p, q = _check_flux(flux)
    if not (1 <= gap_index <= q - 1):
        raise GapClosedError(f"gap index must lie in [1, {q - 1}]")
    H, _, _ = _bloch_hamiltonians(flux, n_k, reduced)
    evals, evecs = np.linalg.eigh(H)
    below = float(evals[:, :, gap_index - 1].max())
    above = float(evals[:, :, gap_index].min())
    gap = above - below
    if gap <= 1e-9:
        raise GapClosedError(
            f"gap {gap_index} of flux {flux} is closed (width {gap:.2e})")
    return evals, evecs, gap


class _HofstadterKernel(Kernel):
    """P(x, y) = table[x1 mod q, x1-y1, x2-y2] (Landau gauge periodicity)."""

    def __init__(self, table: np.ndarray, q: int, probe: int):
        self.table = table
        self.q = q
        self.probe = probe

    def eval(self, xs, ys):
        a = np.mod(xs[:, 0], self.q)
        d1 = xs[:, 0] - ys[:, 0] + self.probe
        d2 = xs[:, 1] - ys[:, 1] + self.probe
        return self.table[a, d1, d2][:, None, None]


def hofstadter_projection(spec: HofstadterSpec):
    """Spectral projection of the Harper Hamiltonian below the requested gap.

    Bloch-reduces over the magnetic unit cell, assembles the real-space
    kernel by inverse transform on the k-grid, truncates at the requested
    radius, and declares a fitted exponential tail that majorizes every
    sampled entry.  Returns (operator, report).
    """
    p, q = _check_flux(spec.flux)
    n_k = spec.kgrid
    r_t = spec.truncation_radius
    probe = r_t + 4
    if n_k < 2 * probe + 2:
        raise ValueError(
            f"kgrid {n_k} too coarse for truncation radius {r_t}: offsets beyond "
            f"{n_k // 2} alias across the discretized Brillouin zone "
            f"(need kgrid >= {2 * probe + 2})")
    evals, evecs, gap = _gapped_eigensystem(spec.flux, spec.gap_index, n_k)
    V = evecs[:, :, :, :spec.gap_index]
    Pk = np.einsum("xyab,xycb->xyac", V, V.conj())
    k1 = 2 * np.pi / q * np.arange(n_k) / n_k
    k2 = 2 * np.pi * np.arange(n_k) / n_k
    d_range = np.arange(-probe, probe + 1)
    ph1 = np.exp(1j * np.outer(k1, d_range))  # (n_k, n_d)
    ph2 = np.exp(1j * np.outer(k2, d_range))
    table = np.zeros((q, len(d_range), len(d_range)), dtype=np.complex128)
    for a in range(q):
        for i1, d1 in enumerate(d_range):
            sel = Pk[:, :, a, (a - d1) % q]  # (n_k, n_k)
            table[a, i1, :] = ph1[:, i1] @ sel @ ph2 / (n_k * n_k)
    # exponential tail fit on max |entry| per sup-distance
    dists = np.maximum(np.abs(d_range)[:, None], np.abs(d_range)[None, :])
    mags = np.zeros(probe + 1)
    for dd in range(probe + 1):
        sel = dists == dd
        mags[dd] = np.abs(table[:, sel]).max()
    fit_max = min(probe, n_k // 2 - 2)  # keep the fit clear of the alias floor
    fit_d = np.arange(2, fit_max + 1)
    logm = np.log(np.maximum(mags[2:fit_max + 1], 1e-300))
    slope, logc = np.polyfit(fit_d, logm, 1)
    kappa = -float(slope)
    if kappa <= 0.02:
        raise TailFitError(f"kernel tail is not exponentially decaying (kappa={kappa:.3f})")
    fitted = logc - kappa * fit_d
    ss_tot = float(np.sum((logm - logm.mean()) ** 2))
    ss_res = float(np.sum((logm - fitted) ** 2))
    # inflate the prefactor so the declared bound majorizes every sample
    c_fit = float(np.max(mags * np.exp(kappa * np.arange(probe + 1))))
    alias = c_fit * math.exp(-kappa * (n_k - probe)) if n_k > probe else math.inf
    op = KernelOperator(
        space=Z2, k=1, kernel=_HofstadterKernel(table, q, probe),
        propagation=Propagation.decay(c_fit, kappa, r_t),
        self_adjoint=True, norm_hint=1.0 + c_fit,
        label=f"hofstadter({p}/{q},gap{spec.gap_index},R{r_t})")
    P = UnitizedOperator(np.zeros((1, 1)), op)
    report = {
        "flux": f"{p}/{q}", "gap_index": spec.gap_index, "gap_width": gap,
        "truncation_radius": r_t, "kgrid": n_k, "probe_radius": probe,
        "tail_C": c_fit, "tail_kappa": kappa,
        "tail_fit_r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0,
        "alias_bound": alias,
        "max_entry_beyond_cutoff": float(mags[r_t + 1:].max()) if r_t < probe else 0.0,
    }
    return P, report


def chern_oracle(flux: Fraction, n_bands: int, kgrid: int = 48) -> int:
    """Chern number of the lowest ``n_bands`` Harper bands, by the lattice
    field-strength method.

    Runs on the full 2pi-periodic torus (where the Bloch family is smooth
    and periodic), on which each magnetic band is traversed q times, and
    divides the plaquette phase sum by q.  Both the integrality of the raw
    sum and its divisibility are checked.  Orientation is fixed by the
    (k1, k2) grid ordering.
    """
    flux = Fraction(flux)
    p, q = _check_flux(flux)
    if n_bands == q:
        # full spectrum: no gap to check, and the total class is trivial
        H, _, _ = _bloch_hamiltonians(flux, kgrid, reduced=False)
        _, evecs = np.linalg.eigh(H)
    else:
        _, evecs, _ = _gapped_eigensystem(flux, n_bands, kgrid, reduced=False)
    V = evecs[:, :, :, :n_bands]

    def link(Va, Vb):
        ov = np.einsum("xyab,xyac->xybc", Va.conj(), Vb)
        det = np.linalg.det(ov)
        return det / np.abs(det)

    u1 = link(V, np.roll(V, -1, axis=0))
    u2 = link(V, np.roll(V, -1, axis=1))
    field = np.angle(u1 * np.roll(u2, -1, axis=0) /
                     (np.roll(u1, -1, axis=1) * u2))
    total = field.sum() / (2 * np.pi)
    c_full = int(np.round(total))
    if abs(total - c_full) > 1e-6:
        raise GapClosedError(f"field-strength sum {total} is not integral")
    if c_full % q:
        raise GapClosedError(
            f"full-torus field-strength sum {c_full} is not divisible by q={q}")
    return c_full // q


# ---------------------------------------------------------------------------
# Partition surgery


def deform_partition(partition: Partition, swap_sites, target: int) -> Partition:
    """Reassign finitely many sites to the target part.

    The result is still a partition; transversality survives because a
    bounded modification only inflates the thickened intersections by a
    bounded set.
    """
    d = partition.d
    moved = FiniteSet.of(d, swap_sites)
    if not 0 <= target < len(partition.parts):
        raise ValueError("target part index out of range")
    parts = []
    for i, part in enumerate(partition.parts):
        stripped = intersection(part, complement(moved))
        parts.append(union(stripped, moved) if i == target else stripped)
    return Partition(tuple(parts))
