# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled RGrN sequence kernel.

Thin wrapper around ``rgrn_core.c``. Same contract and cache layout as
``_rgrn_numpy``; float64 only. The large time-parallel products (input
projection, weight-gradient reductions) stay as single numpy GEMMs, only the
sequential recurrence runs in C.
"""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef extern from "rgrn_core.h":
    ctypedef void (*msgl_dgemm_fn)(char*, char*, int*, int*, int*, double*, double*,
                                   int*, double*, int*, double*, double*, int*) noexcept nogil
    void msgl_rgrn_forward(msgl_dgemm_fn gemm, int T, int n, int h,
                           const double* Zx, const double* A, const double* Wh,
                           const double* b, const double* Wg, const double* bg,
                           const double* R, double* G, double* Q, double* M,
                           double* S, double* Hd, double* H, double* hd) noexcept nogil
    void msgl_rgrn_backward(msgl_dgemm_fn gemm, int T, int n, int h,
                            const double* A, const double* Wh, const double* Wg,
                            const double* R, const double* G, const double* Q,
                            const double* M, const double* S, const double* dH,
                            double* DZ, double* DQ, double* dh_carry,
                            double* ds_carry, double* dm) noexcept nogil


cdef inline double* _ptr(cnp.ndarray a):
    return <double*> cnp.PyArray_DATA(a)


def _c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def rgrn_forward(X, A, Wx, Wh, b, Wg, bg, rmask=None):
    X, A, Wx, Wh, b, Wg, bg = (_c64(a) for a in (X, A, Wx, Wh, b, Wg, bg))
    cdef int T = X.shape[0], n = X.shape[1], h = Wh.shape[0]
    if rmask is not None:
        rmask = _c64(rmask)
    Zx = (X.reshape(T * n, -1) @ Wx).reshape(T, n, 4 * h)
    G = np.empty((T, n, 4 * h))
    Q = np.empty((T, n, h))
    Mm = np.empty((T, n, h))
    S = np.empty((T + 1, n, h))
    Hd = np.empty((T, n, h))
    H = np.empty((T, n, h))
    hd = np.empty((n, h))
    cdef const double* rp = NULL if rmask is None else _ptr(rmask)
    cdef double *pZx = _ptr(Zx)
    cdef double *pA = _ptr(A)
    cdef double *pWh = _ptr(Wh)
    cdef double *pb = _ptr(b)
    cdef double *pWg = _ptr(Wg)
    cdef double *pbg = _ptr(bg)
    cdef double *pG = _ptr(G)
    cdef double *pQ = _ptr(Q)
    cdef double *pM = _ptr(Mm)
    cdef double *pS = _ptr(S)
    cdef double *pHd = _ptr(Hd)
    cdef double *pH = _ptr(H)
    cdef double *phd = _ptr(hd)
    with nogil:
        msgl_rgrn_forward(<msgl_dgemm_fn> dgemm, T, n, h, pZx, pA, pWh, pb, pWg, pbg,
                          rp, pG, pQ, pM, pS, pHd, pH, phd)
    cache = (X, A, Wx, Wh, Wg, rmask, G, Q, Mm, S, Hd)
    return H, cache


def rgrn_backward(cache, dH, need_dx=False):
    X, A, Wx, Wh, Wg, rmask, G, Q, Mm, S, Hd = cache
    dH = _c64(dH)
    cdef int T = X.shape[0], n = X.shape[1], F = X.shape[2], h = Wh.shape[0]
    DZ = np.empty((T, n, 4 * h))
    DQ = np.empty((T, n, h))
    dh_carry = np.empty((n, h))
    ds_carry = np.empty((n, h))
    dm = np.empty((n, h))
    cdef const double* rp = NULL if rmask is None else _ptr(rmask)
    cdef double *pA = _ptr(A)
    cdef double *pWh = _ptr(Wh)
    cdef double *pWg = _ptr(Wg)
    cdef double *pG = _ptr(G)
    cdef double *pQ = _ptr(Q)
    cdef double *pM = _ptr(Mm)
    cdef double *pS = _ptr(S)
    cdef double *pdH = _ptr(dH)
    cdef double *pDZ = _ptr(DZ)
    cdef double *pDQ = _ptr(DQ)
    cdef double *phc = _ptr(dh_carry)
    cdef double *psc = _ptr(ds_carry)
    cdef double *pdm = _ptr(dm)
    with nogil:
        msgl_rgrn_backward(<msgl_dgemm_fn> dgemm, T, n, h, pA, pWh, pWg, rp, pG, pQ,
                           pM, pS, pdH, pDZ, pDQ, phc, psc, pdm)
    DZ2 = DZ.reshape(T * n, 4 * h)
    DQ2 = DQ.reshape(T * n, h)
    dWx = X.reshape(T * n, F).T @ DZ2
    dWh = Hd.reshape(T * n, h).T @ DZ2
    db = DZ2.sum(axis=0)
    dWg = S[:-1].reshape(T * n, h).T @ DQ2
    dbg = DQ2.sum(axis=0)
    dX = (DZ2 @ Wx.T).reshape(X.shape) if need_dx else None
    return dX, dWx, dWh, db, dWg, dbg
