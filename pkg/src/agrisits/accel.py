"""Hot numeric kernels with numba-compiled and pure-numpy implementations.

Every kernel exists twice: a loop-oriented ``*_numba`` version compiled with
``@njit`` and a vectorized ``*_numpy`` fallback. The active implementation is
chosen once at import time: numba is used when importable unless the
``AGRISITS_NO_NUMBA`` environment variable is set to a truthy value.
``benchmarks/bench_kernels.py`` times both paths side by side.

Both paths compute identical formulas in float64; they may differ by a few
ULPs only through summation order.
"""

from __future__ import annotations

import os

import numpy as np


def _env_disabled() -> bool:
    return os.environ.get("AGRISITS_NO_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def wrap(f):
            return f

        return wrap

    prange = range

USE_NUMBA = HAVE_NUMBA and not _env_disabled()
BACKEND = "numba" if USE_NUMBA else "numpy"


def set_num_threads(n: int) -> None:
    """Cap the worker count of the parallel numba kernels (no-op on numpy path)."""
    if USE_NUMBA and n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# Gaussian kernel-ensemble interpolation
#
# table[k, t, i] = exp(-(obs_time[i] - target_time[t])^2 / (2 sigma_k^2))
# For each pixel and target time:
#   mass_k = sum_i table[k, t, i] * valid[i]
#   num_k[b] = sum_i table[k, t, i] * valid[i] * values[i, b]
#   out[b] = sum_k gain_k * num_k[b] / sum_k gain_k * mass_k
# kernel_ok marks targets where max_k mass_k >= mass_floor; elsewhere the
# caller applies its fallback policy.
# ---------------------------------------------------------------------------

MASS_FLOOR = 1e-12


def rbf_ensemble_numpy(table, gains, values, valid):
    n_k, n_t, n_obs = table.shape
    n_pix, _, n_b = values.shape
    vv = values * valid[:, :, None]  # [pix, obs, band]
    num = np.zeros((n_pix, n_t, n_b))
    den = np.zeros((n_pix, n_t))
    max_mass = np.zeros((n_pix, n_t))
    for k in range(n_k):
        mass_k = valid @ table[k].T  # [pix, t]
        num_k = np.einsum("pob,to->ptb", vv, table[k], optimize=True)
        num += gains[k] * num_k
        den += gains[k] * mass_k
        np.maximum(max_mass, mass_k, out=max_mass)
    kernel_ok = max_mass >= MASS_FLOOR
    out = np.zeros_like(num)
    np.divide(num, den[:, :, None], out=out, where=kernel_ok[:, :, None])
    return out, kernel_ok


@njit(cache=True, parallel=True)
def _rbf_ensemble_jit(table, gains, values, valid, out, kernel_ok):  # pragma: no cover - compiled
    n_k, n_t, n_obs = table.shape
    n_pix = values.shape[0]
    n_b = values.shape[2]
    for p in prange(n_pix):
        for t in range(n_t):
            den = 0.0
            max_mass = 0.0
            num = np.zeros(n_b)
            for k in range(n_k):
                mass = 0.0
                for i in range(n_obs):
                    w = table[k, t, i] * valid[p, i]
                    if w != 0.0:
                        mass += w
                        for b in range(n_b):
                            num[b] += gains[k] * w * values[p, i, b]
                den += gains[k] * mass
                if mass > max_mass:
                    max_mass = mass
            if max_mass >= MASS_FLOOR:
                kernel_ok[p, t] = True
                for b in range(n_b):
                    out[p, t, b] = num[b] / den


def rbf_ensemble_numba(table, gains, values, valid):
    n_pix, _, n_b = values.shape
    n_t = table.shape[1]
    out = np.zeros((n_pix, n_t, n_b))
    kernel_ok = np.zeros((n_pix, n_t), dtype=np.bool_)
    _rbf_ensemble_jit(
        np.ascontiguousarray(table),
        np.ascontiguousarray(gains),
        np.ascontiguousarray(values),
        np.ascontiguousarray(valid),
        out,
        kernel_ok,
    )
    return out, kernel_ok


# ---------------------------------------------------------------------------
# Gini split search for CART trees
#
# Candidate split: sort one feature column, cut between adjacent distinct
# values, threshold = lower value, rule "x <= threshold goes left". The
# returned score is the size-weighted child Gini impurity; lower is better.
# Ties resolve to the lowest feature index, then the lowest threshold, in
# both implementations.
# ---------------------------------------------------------------------------


def _split_scores_numpy(x, y, n_classes, min_leaf):
    n = x.shape[0]
    order = np.argsort(x, kind="stable")
    xs = x[order]
    onehot = np.zeros((n, n_classes), dtype=np.int64)
    onehot[np.arange(n), y[order]] = 1
    left = np.cumsum(onehot, axis=0)[:-1]  # counts with left size i+1
    total = onehot.sum(axis=0)
    nl = np.arange(1, n, dtype=np.float64)
    nr = n - nl
    sl = np.sum(left.astype(np.float64) ** 2, axis=1)
    sr = np.sum((total[None, :] - left).astype(np.float64) ** 2, axis=1)
    score = (nl - sl / nl + nr - sr / nr) / n
    ok = (xs[:-1] < xs[1:]) & (nl >= min_leaf) & (nr >= min_leaf)
    return xs, score, ok


def best_split_numpy(X, y, n_classes, min_leaf):
    best_f, best_thr, best_score = -1, 0.0, np.inf
    for f in range(X.shape[1]):
        xs, score, ok = _split_scores_numpy(X[:, f], y, n_classes, min_leaf)
        if not ok.any():
            continue
        idx = np.flatnonzero(ok)
        i = idx[np.argmin(score[idx])]
        if score[i] < best_score:
            best_f, best_thr, best_score = f, float(xs[i]), float(score[i])
    return best_f, best_thr, best_score


@njit(cache=True)
def _feature_best_jit(x, y, n_classes, min_leaf):  # pragma: no cover - compiled
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    cl = np.zeros(n_classes, dtype=np.int64)
    ct = np.zeros(n_classes, dtype=np.int64)
    for i in range(n):
        ct[y[order[i]]] += 1
    best_score = np.inf
    best_thr = 0.0
    for i in range(n - 1):
        cl[y[order[i]]] += 1
        xi = x[order[i]]
        if not xi < x[order[i + 1]]:
            continue
        nl = i + 1.0
        nr = n - nl
        if nl < min_leaf or nr < min_leaf:
            continue
        sl = 0.0
        sr = 0.0
        for c in range(n_classes):
            sl += float(cl[c]) ** 2
            sr += float(ct[c] - cl[c]) ** 2
        score = (nl - sl / nl + nr - sr / nr) / n
        if score < best_score:
            best_score = score
            best_thr = xi
    return best_score, best_thr


@njit(cache=True, parallel=True)
def _best_split_jit(X, y, n_classes, min_leaf, scores, thrs):  # pragma: no cover - compiled
    for f in prange(X.shape[1]):
        s, t = _feature_best_jit(X[:, f], y, n_classes, min_leaf)
        scores[f] = s
        thrs[f] = t


def best_split_numba(X, y, n_classes, min_leaf):
    n_f = X.shape[1]
    scores = np.empty(n_f)
    thrs = np.empty(n_f)
    _best_split_jit(np.ascontiguousarray(X), y, n_classes, min_leaf, scores, thrs)
    f = -1
    best = np.inf
    for i in range(n_f):
        if scores[i] < best:
            best = scores[i]
            f = i
    if f < 0:
        return -1, 0.0, np.inf
    return f, float(thrs[f]), float(best)


# ---------------------------------------------------------------------------
# Decision-tree application over sample batches
#
# Trees are flat arrays: internal node i has feature[i] >= 0, goes left when
# x[feature[i]] <= threshold[i]; leaves carry feature[i] == -1 and leaf[i].
# ---------------------------------------------------------------------------


def tree_apply_numpy(feature, threshold, left, right, leaf, X):
    n = X.shape[0]
    node = np.zeros(n, dtype=np.int64)
    active = feature[node] >= 0
    while active.any():
        idx = np.flatnonzero(active)
        nd = node[idx]
        go_left = X[idx, feature[nd]] <= threshold[nd]
        node[idx] = np.where(go_left, left[nd], right[nd])
        active[idx] = feature[node[idx]] >= 0
    return leaf[node].astype(np.int64)


@njit(cache=True, parallel=True)
def _tree_apply_jit(feature, threshold, left, right, leaf, X, out):  # pragma: no cover - compiled
    for i in prange(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = leaf[node]


def tree_apply_numba(feature, threshold, left, right, leaf, X):
    out = np.empty(X.shape[0], dtype=np.int64)
    _tree_apply_jit(feature, threshold, left, right, leaf, np.ascontiguousarray(X), out)
    return out


if USE_NUMBA:
    rbf_ensemble = rbf_ensemble_numba
    best_split = best_split_numba
    tree_apply = tree_apply_numba
else:
    rbf_ensemble = rbf_ensemble_numpy
    best_split = best_split_numpy
    tree_apply = tree_apply_numpy
