"""Hot numeric kernels with numba and pure-numpy implementations.

Each kernel ``foo`` exists as ``foo_nb`` (compiled) and ``foo_np`` (numpy);
the public name ``foo`` is bound to one of them according to
``caflow._accel.USE_NUMBA``. Both variants are always importable so tests
and benchmarks can compare them.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

# -- row softmax ---------------------------------------------------------------


def softmax_rows_np(x):
    """Softmax over the last axis of a 2-D array."""
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@njit
def softmax_rows_nb(x):
    n, k = x.shape
    out = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, k):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(k):
            v = np.exp(x[i, j] - m)
            out[i, j] = v
            s += v
        inv = 1.0 / s
        for j in range(k):
            out[i, j] *= inv
    return out


def softmax_rows_grad_np(y, g):
    """Vector-Jacobian product of the row softmax: ``y * (g - <g, y>)``."""
    return y * (g - (g * y).sum(axis=1, keepdims=True))


@njit
def softmax_rows_grad_nb(y, g):
    n, k = y.shape
    out = np.empty_like(y)
    for i in range(n):
        dot = 0.0
        for j in range(k):
            dot += g[i, j] * y[i, j]
        for j in range(k):
            out[i, j] = y[i, j] * (g[i, j] - dot)
    return out


# -- average ranks -------------------------------------------------------------


def average_ranks_np(x):
    """1-based ranks of a 1-D array; tied values share their mean rank."""
    x = np.asarray(x, dtype=np.float64)
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    mean_rank = upper - (counts - 1) / 2.0
    return mean_rank[inverse]


@njit
def _average_ranks_sorted(x, order):
    n = x.shape[0]
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and x[order[j + 1]] == x[order[i]]:
            j += 1
        r = 0.5 * (i + j) + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = r
        i = j + 1
    return ranks


def average_ranks_nb(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    return _average_ranks_sorted(x, order)


# -- discrete SCM enumeration --------------------------------------------------
# Tables: pc[c], p0[c, h0], pa[h0, a], p1[a, c, h1], py[h1, y].


def scm_joint_np(pc, p0, pa, p1, py):
    """Observational joint over (H0, Hca, H1, Y) with C summed out."""
    return np.einsum("c,ch,ha,acj,jy->hajy", pc, p0, pa, p1, py)


@njit
def scm_joint_nb(pc, p0, pa, p1, py):
    nc, n0 = p0.shape
    na = pa.shape[1]
    n1, ny = py.shape
    out = np.zeros((n0, na, n1, ny))
    for c in range(nc):
        for h in range(n0):
            w0 = pc[c] * p0[c, h]
            for a in range(na):
                w1 = w0 * pa[h, a]
                for j in range(n1):
                    w2 = w1 * p1[a, c, j]
                    for y in range(ny):
                        out[h, a, j, y] += w2 * py[j, y]
    return out


def scm_do_np(pc, pa, p1, py):
    """P(Y | do(H0=h)) for every h, by removing the C -> H0 edge."""
    return np.einsum("c,ha,acj,jy->hy", pc, pa, p1, py)


@njit
def scm_do_nb(pc, pa, p1, py):
    nc = pc.shape[0]
    n0, na = pa.shape
    n1, ny = py.shape
    out = np.zeros((n0, ny))
    for h in range(n0):
        for c in range(nc):
            for a in range(na):
                w = pc[c] * pa[h, a]
                for j in range(n1):
                    w2 = w * p1[a, c, j]
                    for y in range(ny):
                        out[h, y] += w2 * py[j, y]
    return out


if USE_NUMBA:
    softmax_rows = softmax_rows_nb
    softmax_rows_grad = softmax_rows_grad_nb
    average_ranks = average_ranks_nb
    scm_joint = scm_joint_nb
    scm_do = scm_do_nb
else:
    softmax_rows = softmax_rows_np
    softmax_rows_grad = softmax_rows_grad_np
    average_ranks = average_ranks_np
    scm_joint = scm_joint_np
    scm_do = scm_do_np
