"""Hot numeric kernels with a numba path and a pure-numpy path.

Each kernel exists in two flavours: a loop version that numba compiles,
and a vectorised numpy version. The module-level names point at the
compiled loops unless numba is missing or ``QBILLIARD_NO_NUMBA`` is set.
Both flavours are always importable (``NUMBA_KERNELS`` / ``NUMPY_KERNELS``)
so tests and the benchmark can compare them directly.
"""

import numpy as np

from ._accel import USE_NUMBA, _have_numba

_INV_PI2 = 1.0 / np.pi**2


# ---------------------------------------------------------------------------
# Hamiltonian: cross-derivative coupling between antisymmetrised sine pairs
# ---------------------------------------------------------------------------


def _coupling_loops(big, small, inv_kappa):
    # big/small: larger/smaller quantum number of each basis pair
    dim = big.shape[0]
    out = np.zeros((dim, dim))
    for i in range(dim):
        m1 = big[i]
        m2 = small[i]
        out[i, i] = 0.5 * (m1 * m1 + m2 * m2) * (1.0 + inv_kappa)
        if inv_kappa == 0.0:
            continue
        for j in range(i, dim):
            n1 = big[j]
            n2 = small[j]
            acc = 0.0
            # I(s, t) = 4/(s t) when both odd, else 0
            s = m1 + n2
            if s & 1:
                t = m2 + n1
                if t & 1:
                    acc += 4.0 / (s * t)
                t = m2 - n1
                if t & 1:
                    acc += 4.0 / (s * t)
            s = m1 - n2
            if s & 1:
                t = m2 + n1
                if t & 1:
                    acc += 4.0 / (s * t)
                t = m2 - n1
                if t & 1:
                    acc += 4.0 / (s * t)
            s = m1 + n1
            if s & 1:
                t = m2 + n2
                if t & 1:
                    acc -= 4.0 / (s * t)
                t = m2 - n2
                if t & 1:
                    acc -= 4.0 / (s * t)
            s = m1 - n1
            if s & 1:
                t = m2 + n2
                if t & 1:
                    acc -= 4.0 / (s * t)
                t = m2 - n2
                if t & 1:
                    acc -= 4.0 / (s * t)
            pref = float(n1 * n2) * _INV_PI2 * inv_kappa
            out[i, j] += acc * pref
            if j != i:
                out[j, i] = out[i, j]
    return out


def _itab(s, t):
    odd = (s & 1).astype(bool) & (t & 1).astype(bool)
    st = np.where(odd, s * t, 1).astype(np.float64)
    return np.where(odd, 4.0 / st, 0.0)


def _coupling_numpy(big, small, inv_kappa, chunk=512):
    big = np.asarray(big, dtype=np.int64)
    small = np.asarray(small, dtype=np.int64)
    dim = big.shape[0]
    out = np.zeros((dim, dim))
    if inv_kappa != 0.0:
        n1 = big[None, :]
        n2 = small[None, :]
        pref = (n1 * n2).astype(np.float64) * _INV_PI2 * inv_kappa
        for lo in range(0, dim, chunk):
            m1 = big[lo:lo + chunk, None]
            m2 = small[lo:lo + chunk, None]
            acc = (_itab(m1 + n2, m2 + n1) + _itab(m1 + n2, m2 - n1)
                   + _itab(m1 - n2, m2 + n1) + _itab(m1 - n2, m2 - n1)
                   - _itab(m1 + n1, m2 + n2) - _itab(m1 + n1, m2 - n2)
                   - _itab(m1 - n1, m2 + n2) - _itab(m1 - n1, m2 - n2))
            out[lo:lo + chunk] = acc * pref
        # the closed form is symmetric; mirror the upper triangle so the
        # stored matrix is bit-exactly symmetric
        out = np.triu(out) + np.triu(out, 1).T
    out[np.diag_indices(dim)] += 0.5 * (big**2 + small**2) * (1.0 + inv_kappa)
    return out


# ---------------------------------------------------------------------------
# Convolution helpers (NHWC, stride 1)
# ---------------------------------------------------------------------------


def _im2col_loops(x, k, pad):
    n, h, w, c = x.shape
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    cols = np.zeros((n, ho, wo, k * k * c), dtype=x.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                col = 0
                for di in range(k):
                    ii = i + di - pad
                    for dj in range(k):
                        jj = j + dj - pad
                        if 0 <= ii < h and 0 <= jj < w:
                            for ch in range(c):
                                cols[b, i, j, col + ch] = x[b, ii, jj, ch]
                        col += c
    return cols


def _im2col_numpy(x, k, pad):
    n, h, w, c = x.shape
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = np.empty((n, ho, wo, k * k * c), dtype=x.dtype)
    col = 0
    for di in range(k):
        for dj in range(k):
            cols[..., col:col + c] = xp[:, di:di + ho, dj:dj + wo, :]
            col += c
    return cols


def _col2im_loops(cols, h, w, c, k, pad):
    n, ho, wo, _ = cols.shape
    x = np.zeros((n, h, w, c), dtype=cols.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                col = 0
                for di in range(k):
                    ii = i + di - pad
                    for dj in range(k):
                        jj = j + dj - pad
                        if 0 <= ii < h and 0 <= jj < w:
                            for ch in range(c):
                                x[b, ii, jj, ch] += cols[b, i, j, col + ch]
                        col += c
    return x


def _col2im_numpy(cols, h, w, c, k, pad):
    n, ho, wo, _ = cols.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    col = 0
    for di in range(k):
        for dj in range(k):
            xp[:, di:di + ho, dj:dj + wo, :] += cols[..., col:col + c]
            col += c
    return xp[:, pad:pad + h, pad:pad + w, :] if pad else xp


# ---------------------------------------------------------------------------
# 2x2 max pooling; ties go to the lowest linear index in the window
# ---------------------------------------------------------------------------


def _maxpool_loops(x):
    n, h, w, c = x.shape
    ho = h // 2
    wo = w // 2
    out = np.empty((n, ho, wo, c), dtype=x.dtype)
    arg = np.empty((n, ho, wo, c), dtype=np.int8)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    best = x[b, 2 * i, 2 * j, ch]
                    a = 0
                    v = x[b, 2 * i, 2 * j + 1, ch]
                    if v > best:
                        best = v
                        a = 1
                    v = x[b, 2 * i + 1, 2 * j, ch]
                    if v > best:
                        best = v
                        a = 2
                    v = x[b, 2 * i + 1, 2 * j + 1, ch]
                    if v > best:
                        best = v
                        a = 3
                    out[b, i, j, ch] = best
                    arg[b, i, j, ch] = a
    return out, arg


def _maxpool_numpy(x):
    n, h, w, c = x.shape
    win = x[:, :h // 2 * 2, :w // 2 * 2, :].reshape(n, h // 2, 2, w // 2, 2, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


def _maxpool_back_loops(grad, arg, h, w):
    n, ho, wo, c = grad.shape
    dx = np.zeros((n, h, w, c), dtype=grad.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    a = arg[b, i, j, ch]
                    dx[b, 2 * i + a // 2, 2 * j + a % 2, ch] = grad[b, i, j, ch]
    return dx


def _maxpool_back_numpy(grad, arg, h, w):
    n, ho, wo, c = grad.shape
    onehot = arg[..., None] == np.arange(4, dtype=np.int8)
    win = np.where(onehot, grad[..., None], np.zeros((), dtype=grad.dtype))
    win = win.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros((n, h, w, c), dtype=grad.dtype)
    dx[:, :ho * 2, :wo * 2, :] = win.reshape(n, ho * 2, wo * 2, c)
    return dx


NUMPY_KERNELS = {
    "coupling": _coupling_numpy,
    "im2col": _im2col_numpy,
    "col2im": _col2im_numpy,
    "maxpool": _maxpool_numpy,
    "maxpool_back": _maxpool_back_numpy,
}

if _have_numba():
    from numba import njit as _njit

    NUMBA_KERNELS = {
        "coupling": _njit(cache=True)(_coupling_loops),
        "im2col": _njit(cache=True)(_im2col_loops),
        "col2im": _njit(cache=True)(_col2im_loops),
        "maxpool": _njit(cache=True)(_maxpool_loops),
        "maxpool_back": _njit(cache=True)(_maxpool_back_loops),
    }
else:
    NUMBA_KERNELS = None

_ACTIVE = NUMBA_KERNELS if (USE_NUMBA and NUMBA_KERNELS is not None) else NUMPY_KERNELS

coupling_matrix = _ACTIVE["coupling"]
im2col = _ACTIVE["im2col"]
col2im = _ACTIVE["col2im"]
maxpool2 = _ACTIVE["maxpool"]
maxpool2_backward = _ACTIVE["maxpool_back"]
BACKEND = "numba" if _ACTIVE is NUMBA_KERNELS else "numpy"
