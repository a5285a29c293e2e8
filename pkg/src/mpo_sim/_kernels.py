"""Compiled band kernels for the Lindblad generator (optional numba backend)."""
from __future__ import annotations

import numpy as np

try:
    import numba as nb
except ImportError:  # pragma: no cover - exercised only without numba
    nb = None

HAVE_NUMBA = nb is not None


def _lindblad_bands(x, d, goffs, gw, joffs, jw, out):
    """``out = G x + x G^† + sum_j J_j x J_j^†`` for banded ``G`` and single-band ``J_j``.

    ``d`` is the diagonal of ``G``; ``gw[b, r] = G[r, r - goffs[b]]`` and
    ``jw[j, r] = J_j[r, r - joffs[j]]``.
    """
    D = x.shape[0]
    for r in range(D):
        dr = d[r]
        for c in range(D):
            out[r, c] = (dr + np.conj(d[c])) * x[r, c]
    for b in range(goffs.shape[0]):
        o = goffs[b]
        for r in range(max(0, o), min(D, D + o)):
            w = gw[b, r]
            for c in range(D):
                out[r, c] += w * x[r - o, c]
        for r in range(D):
            for c in range(max(0, o), min(D, D + o)):
                out[r, c] += np.conj(gw[b, c]) * x[r, c - o]
    for j in range(joffs.shape[0]):
        o = joffs[j]
        lo = max(0, o)
        hi = min(D, D + o)
        for r in range(lo, hi):
            w = jw[j, r]
            for c in range(lo, hi):
                out[r, c] += w * np.conj(jw[j, c]) * x[r - o, c - o]


def _lindblad_bands_herm(x, d, goffs, gw, joffs, jw, out):
    """Same as :func:`_lindblad_bands` for Hermitian ``x``: upper triangle only, then mirrored."""
    D = x.shape[0]
    dc = np.conj(d)
    for r in range(D):
        dr = d[r]
        for c in range(r, D):
            out[r, c] = (dr + dc[c]) * x[r, c]
    for b in range(goffs.shape[0]):
        o = goffs[b]
        lo = max(0, o)
        hi = min(D, D + o)
        wc = np.conj(gw[b])
        for r in range(lo, hi):
            w = gw[b, r]
            for c in range(r, D):
                out[r, c] += w * x[r - o, c]
        for r in range(D):
            for c in range(max(r, lo), hi):
                out[r, c] += wc[c] * x[r, c - o]
    for j in range(joffs.shape[0]):
        o = joffs[j]
        lo = max(0, o)
        hi = min(D, D + o)
        wc = np.conj(jw[j])
        for r in range(lo, hi):
            w = jw[j, r]
            for c in range(max(r, lo), hi):
                out[r, c] += w * wc[c] * x[r - o, c - o]
    for r in range(D):
        for c in range(r):
            out[r, c] = np.conj(out[c, r])
        out[r, r] = out[r, r].real


def _axpy(x, s, y, out):
    """``out = x + s * y`` in one pass."""
    xf = x.reshape(-1)
    yf = y.reshape(-1)
    of = out.reshape(-1)
    for i in range(xf.shape[0]):
        of[i] = xf[i] + s * yf[i]


if HAVE_NUMBA:
    axpy = nb.njit(cache=True, fastmath=True)(_axpy)
    lindblad_bands = nb.njit(cache=True, fastmath=True)(_lindblad_bands)
    lindblad_bands_herm = nb.njit(cache=True, fastmath=True)(_lindblad_bands_herm)
else:  # pragma: no cover
    axpy = lindblad_bands = lindblad_bands_herm = None
