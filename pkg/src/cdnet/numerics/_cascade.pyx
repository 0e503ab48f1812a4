# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled cascade kernel (float64 only).

Same contract as ``_cascade_py``; matrix products go straight to BLAS
through scipy's cython bindings, elementwise work is plain C loops.
All matrices are row-major; ``_mm`` swaps operands so column-major dgemm
computes the row-major product.
"""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm
from libc.math cimport exp, fabs

cnp.import_array()


cdef inline double _sigmoid(double z) noexcept nogil:
    cdef double e = exp(-fabs(z))
    return 1.0 / (1.0 + e) if z >= 0 else e / (1.0 + e)


cdef inline void _mm(char ta, char tb, int m, int n, int k, double alpha,
                     double* A, int lda, double* B, int ldb, double beta,
                     double* C, int ldc) noexcept nogil:
    # row-major C[m, n] = alpha * op(A) @ op(B) + beta * C
    dgemm(&tb, &ta, &n, &m, &k, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


def cascade_forward(x0, P, double slope, W1, b1, W2, b2, W3, b3, int J, bint sigmoid_alpha=False):
    cdef int B = x0.shape[0], d = x0.shape[1]
    cdef int h1n = W2.shape[1], h2n = W2.shape[0]
    cdef int d2 = 2 * d
    cdef double[:, ::1] x0v = np.ascontiguousarray(x0, dtype=np.float64)
    cdef double[:, ::1] Pv = np.ascontiguousarray(P, dtype=np.float64)
    cdef double[:, ::1] W1v = np.ascontiguousarray(W1, dtype=np.float64)
    cdef double[::1] b1v = np.ascontiguousarray(b1, dtype=np.float64)
    cdef double[:, ::1] W2v = np.ascontiguousarray(W2, dtype=np.float64)
    cdef double[::1] b2v = np.ascontiguousarray(b2, dtype=np.float64)
    cdef double[:, ::1] W3v = np.ascontiguousarray(W3, dtype=np.float64)
    cdef double b3s = float(b3[0])

    X_arr = np.empty((J + 1, B, d))
    U_arr = np.empty((J, B, d))
    Pr_arr = np.empty((J, B, d))
    H1_arr = np.empty((J, B, h1n))
    H2_arr = np.empty((J, B, h2n))
    A_arr = np.empty((J, B))
    re_arr = np.zeros((B, d))
    cdef double[:, :, ::1] X = X_arr
    cdef double[:, :, ::1] U = U_arr
    cdef double[:, :, ::1] Pr = Pr_arr
    cdef double[:, :, ::1] H1 = H1_arr
    cdef double[:, :, ::1] H2 = H2_arr
    cdef double[:, ::1] A = A_arr
    cdef double[:, ::1] re = re_arr
    cdef int i, b, j
    cdef double u, acc, a, f

    X[0, :, :] = x0v
    with nogil:
        for i in range(J):
            _mm(b'N', b'T', B, d, d, 1.0, &X[i, 0, 0], d, &Pv[0, 0], d, 0.0, &U[i, 0, 0], d)
            for b in range(B):
                for j in range(d):
                    u = U[i, b, j]
                    Pr[i, b, j] = u if u >= 0 else slope * u
            _mm(b'N', b'T', B, h1n, d, 1.0, &X[i, 0, 0], d, &W1v[0, 0], d2, 0.0, &H1[i, 0, 0], h1n)
            _mm(b'N', b'T', B, h1n, d, 1.0, &Pr[i, 0, 0], d, &W1v[0, d], d2, 1.0, &H1[i, 0, 0], h1n)
            for b in range(B):
                for j in range(h1n):
                    acc = H1[i, b, j] + b1v[j]
                    H1[i, b, j] = acc if acc > 0 else 0.0
            _mm(b'N', b'T', B, h2n, h1n, 1.0, &H1[i, 0, 0], h1n, &W2v[0, 0], h1n, 0.0, &H2[i, 0, 0], h2n)
            for b in range(B):
                acc = b3s
                for j in range(h2n):
                    a = H2[i, b, j] + b2v[j]
                    if a < 0:
                        a = 0.0
                    H2[i, b, j] = a
                    acc = acc + a * W3v[0, j]
                if sigmoid_alpha:
                    acc = _sigmoid(acc)
                A[i, b] = acc
                for j in range(d):
                    f = acc * Pr[i, b, j]
                    re[b, j] += f
                    X[i + 1, b, j] = X[i, b, j] - f
    return re_arr, (X_arr, U_arr, Pr_arr, H1_arr, H2_arr, A_arr)


def cascade_backward(cache, P, double slope, W1, W2, W3, g_inputs, g_re, bint sigmoid_alpha=False):
    X_arr, U_arr, Pr_arr, H1_arr, H2_arr, A_arr = cache
    cdef int J = U_arr.shape[0], B = U_arr.shape[1], d = U_arr.shape[2]
    cdef int h1n = W2.shape[1], h2n = W2.shape[0]
    cdef int d2 = 2 * d
    cdef double[:, :, ::1] X = X_arr
    cdef double[:, :, ::1] U = U_arr
    cdef double[:, :, ::1] Pr = Pr_arr
    cdef double[:, :, ::1] H1 = H1_arr
    cdef double[:, :, ::1] H2 = H2_arr
    cdef double[:, ::1] A = A_arr
    cdef double[:, ::1] Pv = np.ascontiguousarray(P, dtype=np.float64)
    cdef double[:, ::1] W1v = np.ascontiguousarray(W1, dtype=np.float64)
    cdef double[:, ::1] W2v = np.ascontiguousarray(W2, dtype=np.float64)
    cdef double[:, ::1] W3v = np.ascontiguousarray(W3, dtype=np.float64)

    cdef bint has_gin = g_inputs is not None
    cdef bint has_gre = g_re is not None
    cdef double[:, :, ::1] gin
    cdef double[:, ::1] gre
    if has_gin:
        gin = np.ascontiguousarray(g_inputs, dtype=np.float64)
    if has_gre:
        gre = np.ascontiguousarray(g_re, dtype=np.float64)

    gP_arr = np.zeros((d, d))
    gW1_arr = np.zeros((h1n, d2))
    gb1_arr = np.zeros(h1n)
    gW2_arr = np.zeros((h2n, h1n))
    gb2_arr = np.zeros(h2n)
    gW3_arr = np.zeros((1, h2n))
    gb3_arr = np.zeros(1)
    cdef double[:, ::1] gP = gP_arr
    cdef double[:, ::1] gW1 = gW1_arr
    cdef double[::1] gb1 = gb1_arr
    cdef double[:, ::1] gW2 = gW2_arr
    cdef double[::1] gb2 = gb2_arr
    cdef double[:, ::1] gW3 = gW3_arr
    cdef double[:, ::1] gnext = np.zeros((B, d))
    cdef double[:, ::1] gx = np.empty((B, d))
    cdef double[:, ::1] gp = np.empty((B, d))
    cdef double[::1] ga = np.empty(B)
    cdef double[:, ::1] gh2 = np.empty((B, h2n))
    cdef double[:, ::1] gh1 = np.empty((B, h1n))
    cdef double[:, ::1] swap
    cdef double gslope = 0.0, gb3 = 0.0, gf, acc, u
    cdef int i, b, j

    with nogil:
        for i in range(J - 1, -1, -1):
            for b in range(B):
                acc = 0.0
                for j in range(d):
                    gf = (gre[b, j] if has_gre else 0.0) - gnext[b, j]
                    acc = acc + gf * Pr[i, b, j]
                    gp[b, j] = A[i, b] * gf
                    gx[b, j] = gnext[b, j] + (gin[i, b, j] if has_gin else 0.0)
                if sigmoid_alpha:
                    acc = acc * A[i, b] * (1.0 - A[i, b])
                ga[b] = acc
                gb3 = gb3 + acc
                for j in range(h2n):
                    gW3[0, j] += acc * H2[i, b, j]
                    gh2[b, j] = acc * W3v[0, j] if H2[i, b, j] > 0 else 0.0
            _mm(b'T', b'N', h2n, h1n, B, 1.0, &gh2[0, 0], h2n, &H1[i, 0, 0], h1n, 1.0, &gW2[0, 0], h1n)
            for b in range(B):
                for j in range(h2n):
                    gb2[j] += gh2[b, j]
            _mm(b'N', b'N', B, h1n, h2n, 1.0, &gh2[0, 0], h2n, &W2v[0, 0], h1n, 0.0, &gh1[0, 0], h1n)
            for b in range(B):
                for j in range(h1n):
                    if H1[i, b, j] <= 0:
                        gh1[b, j] = 0.0
                    gb1[j] += gh1[b, j]
            _mm(b'T', b'N', h1n, d, B, 1.0, &gh1[0, 0], h1n, &X[i, 0, 0], d, 1.0, &gW1[0, 0], d2)
            _mm(b'T', b'N', h1n, d, B, 1.0, &gh1[0, 0], h1n, &Pr[i, 0, 0], d, 1.0, &gW1[0, d], d2)
            _mm(b'N', b'N', B, d, h1n, 1.0, &gh1[0, 0], h1n, &W1v[0, 0], d2, 1.0, &gx[0, 0], d)
            _mm(b'N', b'N', B, d, h1n, 1.0, &gh1[0, 0], h1n, &W1v[0, d], d2, 1.0, &gp[0, 0], d)
            for b in range(B):
                for j in range(d):
                    u = U[i, b, j]
                    if u < 0:
                        gslope = gslope + gp[b, j] * u
                        gp[b, j] = slope * gp[b, j]
            _mm(b'T', b'N', d, d, B, 1.0, &gp[0, 0], d, &X[i, 0, 0], d, 1.0, &gP[0, 0], d)
            _mm(b'N', b'N', B, d, d, 1.0, &gp[0, 0], d, &Pv[0, 0], d, 1.0, &gx[0, 0], d)
            swap = gnext
            gnext = gx
            gx = swap
    gb3_arr[0] = gb3
    return (np.asarray(gnext).copy(), gP_arr, gslope, gW1_arr, gb1_arr,
            gW2_arr, gb2_arr, gW3_arr, gb3_arr)
