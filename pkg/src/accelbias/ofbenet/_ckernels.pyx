# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels.

Same contracts as ``_npkernels``: C-contiguous float64 arrays laid out as
(batch, time, channel), kernels as (tap, in_channel, out_channel).

A valid 1D convolution is a sum over taps of ``X[j:j+T'] @ W[j]``, and each
shifted block of a C-contiguous (time, channel) array is itself a row-major
matrix with leading dimension ``channels``. The kernels hand those blocks
straight to BLAS ``dgemm`` without copying.
"""

import numpy as np
from scipy.linalg.cython_blas cimport dgemm

# Row-major wrappers over column-major dgemm: a row-major C = A @ B is the
# column-major product C^T = B^T @ A^T, so operands are passed swapped.

cdef inline void _gemm_nn(int M, int N, int K, const double *A, int lda,
                          const double *Bm, int ldb, double *C, int ldc) noexcept nogil:
    # C(M,N) += A(M,K) @ B(K,N)
    cdef char n = b'N'
    cdef double one = 1.0
    dgemm(&n, &n, &N, &M, &K, &one, <double*>Bm, &ldb, <double*>A, &lda, &one, C, &ldc)


cdef inline void _gemm_tn(int M, int N, int K, const double *A, int lda,
                          const double *Bm, int ldb, double *C, int ldc) noexcept nogil:
    # C(M,N) += A^T @ B, A stored (K,M)
    cdef char n = b'N'
    cdef char t = b'T'
    cdef double one = 1.0
    dgemm(&n, &t, &N, &M, &K, &one, <double*>Bm, &ldb, <double*>A, &lda, &one, C, &ldc)


cdef inline void _gemm_nt(int M, int N, int K, const double *A, int lda,
                          const double *Bm, int ldb, double *C, int ldc) noexcept nogil:
    # C(M,N) += A @ B^T, B stored (N,K)
    cdef char n = b'N'
    cdef char t = b'T'
    cdef double one = 1.0
    dgemm(&t, &n, &N, &M, &K, &one, <double*>Bm, &ldb, <double*>A, &lda, &one, C, &ldc)


def conv1d_forward(const double[:, :, ::1] x, const double[:, :, ::1] w, const double[::1] b):
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], ci = x.shape[2]
    cdef Py_ssize_t m = w.shape[0], co = w.shape[2]
    cdef Py_ssize_t tp = T - m + 1
    out = np.empty((B, tp, co))
    cdef double[:, :, ::1] z = out
    cdef Py_ssize_t n, i, j, k
    if tp < 1 or B == 0:
        return out
    with nogil:
        for n in range(B):
            for i in range(tp):
                for k in range(co):
                    z[n, i, k] = b[k]
            for j in range(m):
                _gemm_nn(<int>tp, <int>co, <int>ci, &x[n, j, 0], <int>ci,
                         &w[j, 0, 0], <int>co, &z[n, 0, 0], <int>co)
    return out


def conv1d_backward(const double[:, :, ::1] x, const double[:, :, ::1] w,
                    const double[:, :, ::1] dz, bint need_dx=True):
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], ci = x.shape[2]
    cdef Py_ssize_t m = w.shape[0], co = w.shape[2]
    cdef Py_ssize_t tp = T - m + 1
    dx_arr = np.zeros((B, T, ci)) if need_dx else None
    dw_arr = np.zeros((m, ci, co))
    db_arr = np.zeros(co)
    cdef double[:, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef double[:, :, ::1] dx
    if need_dx:
        dx = dx_arr
    cdef Py_ssize_t n, i, j, k
    if tp < 1 or B == 0:
        return dx_arr, dw_arr, db_arr
    with nogil:
        for n in range(B):
            for i in range(tp):
                for k in range(co):
                    db[k] += dz[n, i, k]
            for j in range(m):
                _gemm_tn(<int>ci, <int>co, <int>tp, &x[n, j, 0], <int>ci,
                         &dz[n, 0, 0], <int>co, &dw[j, 0, 0], <int>co)
                if need_dx:
                    _gemm_nt(<int>tp, <int>ci, <int>co, &dz[n, 0, 0], <int>co,
                             &w[j, 0, 0], <int>co, &dx[n, j, 0], <int>ci)
    return dx_arr, dw_arr, db_arr


def avg_pool_forward(const double[:, :, ::1] z, Py_ssize_t pool):
    cdef Py_ssize_t B = z.shape[0], T = z.shape[1], C = z.shape[2]
    cdef Py_ssize_t L = T // pool
    out = np.zeros((B, L, C))
    cdef double[:, :, ::1] y = out
    cdef double p = <double>pool
    cdef Py_ssize_t n, i, r, k
    with nogil:
        for n in range(B):
            for i in range(L):
                for r in range(pool):
                    for k in range(C):
                        y[n, i, k] += z[n, i * pool + r, k]
                for k in range(C):
                    y[n, i, k] /= p
    return out


def avg_pool_backward(const double[:, :, ::1] dy, Py_ssize_t pool, Py_ssize_t T):
    cdef Py_ssize_t B = dy.shape[0], L = dy.shape[1], C = dy.shape[2]
    out = np.zeros((B, T, C))
    cdef double[:, :, ::1] dz = out
    cdef double p = <double>pool
    cdef Py_ssize_t n, i, r, k
    with nogil:
        for n in range(B):
            for i in range(L):
                for r in range(pool):
                    for k in range(C):
                        dz[n, i * pool + r, k] = dy[n, i, k] / p
    return out
