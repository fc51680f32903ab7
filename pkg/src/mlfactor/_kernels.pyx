# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Segmented block kernels backed by BLAS dgemm.

Every MLR operation reduces to two primitives over a contiguous row
segmentation ``bounds`` (length p + 1):

* ``segment_gram``:  out[k] = A[b_k:b_{k+1}].T @ B[b_k:b_{k+1}]
* ``segment_apply``: out[b_k:b_{k+1}] = A[b_k:b_{k+1}] @ M[k]

Row operands may be strided views (e.g. column slices of a wider array) as
long as each row is contiguous; the row stride is passed to dgemm as the
leading dimension, so no copy is made. dgemm sees row-major blocks as their
Fortran transposes.
"""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef object _rows(X):
    """float64 2-d view with unit column stride; copies only when needed."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("expected a 2-d array")
    cdef Py_ssize_t s0 = X.strides[0]
    cdef Py_ssize_t s1 = X.strides[1]
    cdef Py_ssize_t c = X.shape[1]
    if (c > 1 and s1 != 8) or s0 % 8 != 0 or s0 < 8 * c:
        X = np.ascontiguousarray(X)
    return X


cdef inline int _ld(X):
    # leading dimension in elements; at least 1 as dgemm requires
    cdef Py_ssize_t s0 = X.strides[0] // 8
    return <int>(s0 if s0 > 0 else 1)


def segment_gram(A, B, bounds):
    cdef cnp.ndarray a = _rows(A)
    cdef cnp.ndarray b = _rows(B)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] bd = np.ascontiguousarray(bounds, dtype=np.int64)
    cdef int lda = _ld(a)
    cdef int ldb = _ld(b)
    cdef int ca = a.shape[1]
    cdef int cb = b.shape[1]
    cdef Py_ssize_t p = bd.shape[0] - 1
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] out = np.zeros((p, ca, cb))
    if a.shape[0] != b.shape[0]:
        raise ValueError("row count mismatch")
    if ca == 0 or cb == 0:
        return out
    cdef Py_ssize_t k
    cdef int nb
    cdef double one = 1.0, zero = 0.0
    cdef char tn = b'N'
    cdef char tt = b'T'
    cdef double* pa = <double*>cnp.PyArray_DATA(a)
    cdef double* pb = <double*>cnp.PyArray_DATA(b)
    cdef double* po = &out[0, 0, 0] if p > 0 else NULL
    with nogil:
        for k in range(p):
            nb = <int>(bd[k + 1] - bd[k])
            if nb <= 0:
                continue
            # out_k^T (cb x ca) = B_k^T (cb x nb) @ A_k (nb x ca)
            dgemm(&tn, &tt, &cb, &ca, &nb, &one,
                  pb + bd[k] * ldb, &ldb,
                  pa + bd[k] * lda, &lda,
                  &zero, po + k * ca * cb, &cb)
    return out


def segment_apply(A, M, bounds):
    cdef cnp.ndarray a = _rows(A)
    cdef int lda = _ld(a)
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] m = np.ascontiguousarray(M, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] bd = np.ascontiguousarray(bounds, dtype=np.int64)
    cdef Py_ssize_t p = bd.shape[0] - 1
    cdef int ca = a.shape[1]
    cdef int cm = m.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] out = np.zeros((a.shape[0], cm))
    if m.shape[0] != p or m.shape[1] != ca:
        raise ValueError("block operand shape mismatch")
    if ca == 0 or cm == 0 or a.shape[0] == 0:
        return out
    cdef Py_ssize_t k
    cdef int nb
    cdef double one = 1.0, zero = 0.0
    cdef char tn = b'N'
    cdef double* pa = <double*>cnp.PyArray_DATA(a)
    cdef double* pm = &m[0, 0, 0]
    cdef double* po = &out[0, 0]
    with nogil:
        for k in range(p):
            nb = <int>(bd[k + 1] - bd[k])
            if nb <= 0:
                continue
            # out_k^T (cm x nb) = M_k^T (cm x ca) @ A_k^T (ca x nb)
            dgemm(&tn, &tn, &cm, &nb, &ca, &one,
                  pm + k * ca * cm, &cm,
                  pa + bd[k] * lda, &lda,
                  &zero, po + bd[k] * cm, &cm)
    return out
