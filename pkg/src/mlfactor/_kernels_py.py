"""Pure numpy implementation of the segmented block kernels.

Used when the compiled extension is unavailable or ``MLFACTOR_PURE_PYTHON``
is set. Semantics match ``mlfactor._kernels`` exactly.
"""
import numpy as np


def _uniform(bounds):
    sizes = np.diff(bounds)
    return sizes.size > 0 and np.all(sizes == sizes[0])


def segment_gram(A, B, bounds):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    bounds = np.asarray(bounds, dtype=np.int64)
    if A.shape[0] != B.shape[0]:
        raise ValueError("row count mismatch")
    p = bounds.size - 1
    if _uniform(bounds) and bounds[0] == 0 and bounds[-1] == A.shape[0]:
        nb = bounds[1] - bounds[0]
        a = A.reshape(p, nb, A.shape[1])
        b = B.reshape(p, nb, B.shape[1])
        return np.matmul(a.transpose(0, 2, 1), b)
    out = np.zeros((p, A.shape[1], B.shape[1]))
    for k in range(p):
        s, e = bounds[k], bounds[k + 1]
        out[k] = A[s:e].T @ B[s:e]
    return out


def segment_apply(A, M, bounds):
    A = np.asarray(A, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    bounds = np.asarray(bounds, dtype=np.int64)
    p = bounds.size - 1
    if M.shape[0] != p or M.shape[1] != A.shape[1]:
        raise ValueError("block operand shape mismatch")
    if _uniform(bounds) and bounds[0] == 0 and bounds[-1] == A.shape[0]:
        nb = bounds[1] - bounds[0]
        a = A.reshape(p, nb, A.shape[1])
        return np.matmul(a, M).reshape(A.shape[0], M.shape[2])
    out = np.zeros((A.shape[0], M.shape[2]))
    for k in range(p):
        s, e = bounds[k], bounds[k + 1]
        out[s:e] = A[s:e] @ M[k]
    return out
