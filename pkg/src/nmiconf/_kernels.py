"""Batched small-matrix kernels: Cholesky, its reverse-mode derivative, SPD inverse.

Every kernel takes a stack of square matrices shaped ``(B, n, n)``. Two
implementations exist side by side: explicit loops compiled with numba and a
vectorized numpy path. The numba path is used when numba imports and the
environment variable ``NMICONF_DISABLE_NUMBA`` is unset (or ``0``).
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "USE_NUMBA",
    "cholesky",
    "cholesky_backward",
    "spd_inverse",
    "numpy_impl",
    "numba_impl",
]


def _numba_requested() -> bool:
    flag = os.environ.get("NMICONF_DISABLE_NUMBA", "").strip().lower()
    return flag in ("", "0", "false", "no")


try:
    if not _numba_requested():
        raise ImportError("numba disabled by NMICONF_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def _np_cholesky(a):
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    out = np.zeros_like(a)
    ok = np.ones(a.shape[0], dtype=np.bool_)
    try:
        out[:] = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        for b in range(a.shape[0]):
            try:
                out[b] = np.linalg.cholesky(a[b])
            except np.linalg.LinAlgError:
                ok[b] = False
                out[b] = 0.0
    ok &= np.all(np.isfinite(out), axis=(-1, -2))
    return out, ok


def _np_cholesky_backward(chol, chol_bar):
    # Matrix form of the reverse pass: S = L^-T Phi(L^T Lbar) L^-1,
    # Phi keeps the lower triangle and halves the diagonal.
    n = chol.shape[-1]
    eye = np.broadcast_to(np.eye(n), chol.shape)
    linv = np.linalg.solve(chol, eye)
    p = np.tril(np.swapaxes(chol, -1, -2) @ np.tril(chol_bar))
    p[..., np.arange(n), np.arange(n)] *= 0.5
    s = np.swapaxes(linv, -1, -2) @ p @ linv
    return 0.5 * (s + np.swapaxes(s, -1, -2))


def _np_spd_inverse(a):
    chol, ok = _np_cholesky(a)
    n = a.shape[-1]
    out = np.full_like(a, np.nan)
    if ok.any():
        eye = np.broadcast_to(np.eye(n), chol[ok].shape)
        linv = np.linalg.solve(chol[ok], eye)
        out[ok] = np.swapaxes(linv, -1, -2) @ linv
    return out, ok


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _nb_cholesky(a):
        nb, n, _ = a.shape
        out = np.zeros_like(a)
        ok = np.ones(nb, dtype=np.bool_)
        for b in range(nb):
            for i in range(n):
                for j in range(i + 1):
                    s = 0.5 * (a[b, i, j] + a[b, j, i])
                    for k in range(j):
                        s -= out[b, i, k] * out[b, j, k]
                    if i == j:
                        if not (s > 0.0):
                            ok[b] = False
                            break
                        out[b, i, i] = np.sqrt(s)
                    else:
                        out[b, i, j] = s / out[b, j, j]
                if not ok[b]:
                    break
            if not ok[b]:
                for i in range(n):
                    for j in range(n):
                        out[b, i, j] = 0.0
        return out, ok

    @njit(cache=True, nogil=True)
    def _nb_cholesky_backward(chol, chol_bar):
        # Reverse sweep over the row-by-row factorization loop.
        nb, n, _ = chol.shape
        out = np.zeros_like(chol)
        lb = np.empty((n, n))
        ab = np.empty((n, n))
        for b in range(nb):
            for i in range(n):
                for j in range(n):
                    lb[i, j] = chol_bar[b, i, j] if j <= i else 0.0
                    ab[i, j] = 0.0
            for i in range(n - 1, -1, -1):
                for j in range(i, -1, -1):
                    if i == j:
                        sbar = 0.5 * lb[i, i] / chol[b, i, i]
                    else:
                        sbar = lb[i, j] / chol[b, j, j]
                        lb[j, j] -= lb[i, j] * chol[b, i, j] / chol[b, j, j]
                    ab[i, j] += sbar
                    for k in range(j):
                        lb[i, k] -= sbar * chol[b, j, k]
                        lb[j, k] -= sbar * chol[b, i, k]
            for i in range(n):
                out[b, i, i] = ab[i, i]
                for j in range(i):
                    half = 0.5 * ab[i, j]
                    out[b, i, j] = half
                    out[b, j, i] = half
        return out

    @njit(cache=True, nogil=True)
    def _nb_spd_inverse(a):
        chol, ok = _nb_cholesky(a)
        nb, n, _ = a.shape
        out = np.empty_like(a)
        linv = np.empty((n, n))
        for b in range(nb):
            if not ok[b]:
                for i in range(n):
                    for j in range(n):
                        out[b, i, j] = np.nan
                continue
            # forward substitution for L^-1
            for c in range(n):
                for i in range(n):
                    if i < c:
                        linv[i, c] = 0.0
                        continue
                    s = 1.0 if i == c else 0.0
                    for k in range(c, i):
                        s -= chol[b, i, k] * linv[k, c]
                    linv[i, c] = s / chol[b, i, i]
            for i in range(n):
                for j in range(i + 1):
                    s = 0.0
                    for k in range(i, n):
                        s += linv[k, i] * linv[k, j]
                    out[b, i, j] = s
                    out[b, j, i] = s
        return out, ok

else:  # pragma: no cover - exercised only without numba
    _nb_cholesky = _nb_cholesky_backward = _nb_spd_inverse = None


USE_NUMBA = HAVE_NUMBA


class _Impl:
    def __init__(self, chol, chol_bwd, inv):
        self.cholesky = chol
        self.cholesky_backward = chol_bwd
        self.spd_inverse = inv


numpy_impl = _Impl(_np_cholesky, _np_cholesky_backward, _np_spd_inverse)
numba_impl = _Impl(_nb_cholesky, _nb_cholesky_backward, _nb_spd_inverse) if HAVE_NUMBA else None
_active = numba_impl if USE_NUMBA else numpy_impl


def _as_stack(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    return a.reshape((-1,) + a.shape[-2:]), a.shape


def cholesky(a):
    """Lower Cholesky factor of ``sym(a)`` for each matrix in the stack.

    Returns ``(chol, ok)``; rows that are not positive definite come back as
    zero matrices with ``ok`` False instead of raising.
    """
    flat, shape = _as_stack(a)
    chol, ok = _active.cholesky(flat)
    return chol.reshape(shape), ok.reshape(shape[:-2])


def cholesky_backward(chol, chol_bar):
    """Symmetric adjoint of ``a`` given the adjoint of its Cholesky factor."""
    flat, shape = _as_stack(chol)
    bar, _ = _as_stack(chol_bar)
    return _active.cholesky_backward(flat, bar).reshape(shape)


def spd_inverse(a):
    """Inverse through the Cholesky factor; ``ok`` False (and NaN) where that fails."""
    flat, shape = _as_stack(a)
    inv, ok = _active.spd_inverse(flat)
    return inv.reshape(shape), ok.reshape(shape[:-2])
