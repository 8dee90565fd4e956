"""Streaming log-sum-exp kernels for the likelihood hot paths.

Each output row is reduced sequentially by a single worker, so results are
bit-identical no matter how many threads run; only rows are distributed.
Falls back to vectorized numpy when numba is unavailable.
"""
from __future__ import annotations

import numpy as np

try:
    import numba as _nb

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - exercised only without numba
    _nb = None
    _HAVE_NUMBA = False


def _pair_logsum_numpy(nodes, log_w, a, m):
    expo = nodes[None, :] - m[:, None]
    expo *= expo
    expo *= -0.5 * a[:, None]
    expo += log_w[None, :]
    hi = expo.max(axis=1)
    expo -= hi[:, None]
    np.exp(expo, out=expo)
    return hi + np.log(expo.sum(axis=1))


def _meta_logsum_numpy(nodes, log_w, x, sigma, folded):
    inv = 1.0 / sigma
    expo = (x[:, None] - nodes[None, :]) * inv[:, None]
    expo *= expo
    expo *= -0.5
    expo += log_w[None, :]
    if folded.any():
        flip = (x[:, None] + nodes[None, :]) * inv[:, None]
        flip *= flip
        flip *= -0.5
        flip += log_w[None, :]
        flip[~folded] = -np.inf
        expo = np.logaddexp(expo, flip)
    hi = expo.max(axis=1)
    with np.errstate(invalid="ignore"):
        expo -= hi[:, None]
    np.exp(expo, out=expo)
    return hi + np.log(expo.sum(axis=1))


if _HAVE_NUMBA:

    @_nb.njit(parallel=True, cache=True)
    def _pair_logsum_nb(nodes, log_w, a, m):  # pragma: no cover - jitted
        n = m.shape[0]
        k = nodes.shape[0]
        out = np.empty(n)
        for j in _nb.prange(n):
            hi = -np.inf
            for i in range(k):
                d = nodes[i] - m[j]
                v = log_w[i] - 0.5 * a[j] * d * d
                if v > hi:
                    hi = v
            acc = 0.0
            for i in range(k):
                d = nodes[i] - m[j]
                acc += np.exp(log_w[i] - 0.5 * a[j] * d * d - hi)
            out[j] = hi + np.log(acc)
        return out

    @_nb.njit(parallel=True, cache=True)
    def _meta_logsum_nb(nodes, log_w, x, sigma, folded):  # pragma: no cover
        n = x.shape[0]
        k = nodes.shape[0]
        out = np.empty(n)
        for j in _nb.prange(n):
            inv = 1.0 / sigma[j]
            hi = -np.inf
            for i in range(k):
                d = (x[j] - nodes[i]) * inv
                v = log_w[i] - 0.5 * d * d
                if v > hi:
                    hi = v
                if folded[j]:
                    d = (x[j] + nodes[i]) * inv
                    v = log_w[i] - 0.5 * d * d
                    if v > hi:
                        hi = v
            acc = 0.0
            for i in range(k):
                d = (x[j] - nodes[i]) * inv
                acc += np.exp(log_w[i] - 0.5 * d * d - hi)
                if folded[j]:
                    d = (x[j] + nodes[i]) * inv
                    acc += np.exp(log_w[i] - 0.5 * d * d - hi)
            out[j] = hi + np.log(acc)
        return out


def pair_logsum(nodes, log_w, a, m):
    """Row-wise logsumexp of log_w[i] - a[j]/2 * (nodes[i] - m[j])^2."""
    if _HAVE_NUMBA:
        return _pair_logsum_nb(
            np.ascontiguousarray(nodes), np.ascontiguousarray(log_w),
            np.ascontiguousarray(a), np.ascontiguousarray(m),
        )
    return _pair_logsum_numpy(nodes, log_w, a, m)


def meta_logsum(nodes, log_w, x, sigma, folded):
    """Row-wise logsumexp of the (optionally folded) scaled-normal exponents."""
    if _HAVE_NUMBA:
        return _meta_logsum_nb(
            np.ascontiguousarray(nodes), np.ascontiguousarray(log_w),
            np.ascontiguousarray(x), np.ascontiguousarray(sigma),
            np.ascontiguousarray(folded),
        )
    return _meta_logsum_numpy(nodes, log_w, x, sigma, folded)
