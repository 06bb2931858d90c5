"""CSR inner-loop kernels, numba-jitted when available.

The pure-numpy fallback is selected by setting ``ADAFGL_NUMBA=0`` (or when
numba is not importable). Both paths implement identical arithmetic in
identical order so results match bit for bit; ``benchmarks/bench_kernels.py``
compares their throughput.
"""

from __future__ import annotations

import os

import numpy as np


def _env_wants_numba() -> bool:
    flag = os.environ.get("ADAFGL_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


NUMBA_ENABLED = False
if _env_wants_numba():
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False

if not NUMBA_ENABLED:

    def njit(*args, **kwargs):  # type: ignore[misc]
        # identity decorator so the same source serves both paths
        if len(args) == 1 and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


@njit(cache=True)
def _lp_propagate(indptr, indices, inv_sqrt_deg, prev, out):
    n = indptr.shape[0] - 1
    c = prev.shape[1]
    for u in range(n):
        wu = inv_sqrt_deg[u]
        for a in range(indptr[u], indptr[u + 1]):
            v = indices[a]
            w = wu * inv_sqrt_deg[v]
            for j in range(c):
                out[u, j] += w * prev[v, j]


def _lp_propagate_numpy(indptr, indices, inv_sqrt_deg, prev, out):
    if indices.size == 0:
        return
    rows = np.repeat(np.arange(indptr.shape[0] - 1), np.diff(indptr))
    w = inv_sqrt_deg[rows] * inv_sqrt_deg[indices]
    np.add.at(out, rows, w[:, None] * prev[indices])


def lp_propagate(indptr, indices, inv_sqrt_deg, prev):
    """One neighbor-sum of label propagation: out[u] = sum_v w_uv * prev[v]."""
    out = np.zeros_like(prev)
    if NUMBA_ENABLED:
        _lp_propagate(indptr, indices, inv_sqrt_deg, prev, out)
    else:
        _lp_propagate_numpy(indptr, indices, inv_sqrt_deg, prev, out)
    return out


@njit(cache=True)
def _same_label_counts(indptr, indices, labels, out):
    n = indptr.shape[0] - 1
    for u in range(n):
        lu = labels[u]
        for a in range(indptr[u], indptr[u + 1]):
            if labels[indices[a]] == lu:
                out[u] += 1


def _same_label_counts_numpy(indptr, indices, labels, out):
    if indices.size == 0:
        return
    rows = np.repeat(np.arange(indptr.shape[0] - 1), np.diff(indptr))
    same = labels[rows] == labels[indices]
    np.add.at(out, rows, same.astype(np.int64))


def same_label_counts(indptr, indices, labels):
    """Per-node count of neighbors sharing the node's label."""
    out = np.zeros(indptr.shape[0] - 1, dtype=np.int64)
    if NUMBA_ENABLED:
        _same_label_counts(indptr, indices, labels, out)
    else:
        _same_label_counts_numpy(indptr, indices, labels, out)
    return out


def _louvain_sweep_impl(indptr, indices, weights, order, comm, degree, sigma_tot, m2):
    n = indptr.shape[0] - 1
    neigh_w = np.zeros(n, dtype=np.float64)
    touched = np.empty(n, dtype=np.int64)
    mark = np.full(n, -1, dtype=np.int64)
    moves = 0
    for idx in range(order.shape[0]):
        u = order[idx]
        cu = comm[u]
        nt = 0
        for a in range(indptr[u], indptr[u + 1]):
            v = indices[a]
            if v == u:
                continue
            cv = comm[v]
            if mark[cv] != idx:
                mark[cv] = idx
                neigh_w[cv] = 0.0
                touched[nt] = cv
                nt += 1
            neigh_w[cv] += weights[a]
        sigma_tot[cu] -= degree[u]
        w_stay = neigh_w[cu] if mark[cu] == idx else 0.0
        best_c = cu
        best_gain = w_stay - degree[u] * sigma_tot[cu] / m2
        for t in range(nt):
            c = touched[t]
            if c == cu:
                continue
            g = neigh_w[c] - degree[u] * sigma_tot[c] / m2
            if g > best_gain:
                best_gain = g
                best_c = c
        comm[u] = best_c
        sigma_tot[best_c] += degree[u]
        if best_c != cu:
            moves += 1
    return moves


_louvain_sweep_jit = njit(cache=True)(_louvain_sweep_impl)


def louvain_sweep(indptr, indices, weights, order, comm, degree, sigma_tot, m2):
    """One local-move pass over `order`; mutates comm/sigma_tot, returns #moves."""
    fn = _louvain_sweep_jit if NUMBA_ENABLED else _louvain_sweep_impl
    return fn(indptr, indices, weights, order, comm, degree, sigma_tot, m2)
