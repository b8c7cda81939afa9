"""Compiled ranking-likelihood kernels.

Alternatives are stored as row prefixes: student ``i`` has ``n_valid[i]``
alternatives, of which the first ``n_stage[i]`` are ranked. Each kernel
walks a row with streaming log-sum-exp, so no shift can overflow. Numba is
optional; without it (or with ``CHOICEFORECAST_NO_NUMBA=1``) callers fall
back to the vectorized numpy code in ``logit``.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - exercised only without numba
    njit = None

ENABLED = njit is not None and os.environ.get("CHOICEFORECAST_NO_NUMBA", "") != "1"


def _row_normalizers(v, i, n, lse):
    m = -math.inf
    s = 0.0
    for d in range(n - 1, -1, -1):
        x = v[i, d]
        if x > m:
            s = s * math.exp(m - x) + 1.0
            m = x
        else:
            s += math.exp(x - m)
        lse[d] = m + math.log(s)


def _terms(v, n_valid, n_stage):
    rows, width = v.shape
    out = np.zeros(rows)
    lse = np.empty(width)
    for i in range(rows):
        _row_normalizers(v, i, n_valid[i], lse)
        acc = 0.0
        for c in range(n_stage[i]):
            acc += v[i, c] - lse[c]
        out[i] = acc
    return out


def _vgrad(v, n_valid, n_stage):
    rows, width = v.shape
    out = np.zeros((rows, width))
    lse = np.empty(width)
    for i in range(rows):
        _row_normalizers(v, i, n_valid[i], lse)
        run = -math.inf
        for d in range(n_valid[i]):
            if d < n_stage[i]:
                a = -lse[d]
                if a > run:
                    run = a + math.log1p(math.exp(run - a))
                else:
                    run = run + math.log1p(math.exp(a - run))
            p = math.exp(v[i, d] + run)
            out[i, d] = (1.0 if d < n_stage[i] else 0.0) - p
    return out


if ENABLED:
    _row_normalizers = njit(cache=True, nogil=True)(_row_normalizers)
    terms = njit(cache=True, nogil=True)(_terms)
    vgrad = njit(cache=True, nogil=True)(_vgrad)
else:
    terms = _terms
    vgrad = _vgrad
