import numpy as np
import pytest

import coarsetrace as ct


@pytest.fixture(scope="session")
def z1():
    return ct.LatticeSpace(1)


@pytest.fixture(scope="session")
def z2():
    return ct.LatticeSpace(2)


def dense_window(op, window):
    """Materialize a kernel operator as a dense matrix over a window.

    Independent oracle path: plain full-matrix arithmetic, no support
    analysis, no sparsity.  Only for small windows.
    """
    sites = window.sites()
    n = len(sites)
    k = op.k
    xs = np.repeat(sites, n, axis=0)
    ys = np.tile(sites, (n, 1))
    blocks = op.eval_blocks(xs, ys).reshape(n, n, k, k)
    return blocks.transpose(0, 2, 1, 3).reshape(n * k, n * k)


def dense_chain_trace(ops, window):
    """Direct finite-window trace oracle: dense product over the window.

    Exact whenever the chain's support region plus propagation cones fit in
    the window (the caller chooses a window with margin).
    """
    mats = [dense_window(op, window) for op in ops]
    acc = mats[0]
    for m in mats[1:]:
        acc = acc @ m
    return complex(np.trace(acc))


@pytest.fixture(scope="session")
def hof_small():
    """Hofstadter 1/3 projection at development size (shared across tests)."""
    from fractions import Fraction

    spec = ct.HofstadterSpec(flux=Fraction(1, 3), gap_index=1,
                             truncation_radius=10, kgrid=32)
    P, report = ct.hofstadter_projection(spec)
    return P, report
