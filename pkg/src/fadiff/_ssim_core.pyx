# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled SSIM kernels: separable valid-mode Gaussian filtering and
all-pairs SSIM over an image stack with per-image statistics shared."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _filter_valid(const double[:, ::1] img, const double[::1] g,
                        double[:, ::1] tmp, double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t H = img.shape[0], W = img.shape[1], k = g.shape[0]
    cdef Py_ssize_t oh = H - k + 1, ow = W - k + 1
    cdef Py_ssize_t r, c, i
    cdef double acc
    for r in range(H):
        for c in range(ow):
            acc = 0.0
            for i in range(k):
                acc += g[i] * img[r, c + i]
            tmp[r, c] = acc
    for r in range(oh):
        for c in range(ow):
            acc = 0.0
            for i in range(k):
                acc += g[i] * tmp[r + i, c]
            out[r, c] = acc


cdef void _filter_product(const double[:, ::1] a, const double[:, ::1] b, const double[::1] g,
                          double[:, ::1] prod, double[:, ::1] tmp,
                          double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t r, c
    for r in range(a.shape[0]):
        for c in range(a.shape[1]):
            prod[r, c] = a[r, c] * b[r, c]
    _filter_valid(prod, g, tmp, out)


cdef double _ssim_map_mean(const double[:, ::1] mu_a, const double[:, ::1] mu_b,
                           const double[:, ::1] e_aa, const double[:, ::1] e_bb,
                           const double[:, ::1] e_ab, double c1, double c2) noexcept nogil:
    cdef Py_ssize_t r, c
    cdef Py_ssize_t oh = mu_a.shape[0], ow = mu_a.shape[1]
    cdef double ma, mb, va, vb, cov, total = 0.0
    for r in range(oh):
        for c in range(ow):
            ma = mu_a[r, c]
            mb = mu_b[r, c]
            va = e_aa[r, c] - ma * ma
            vb = e_bb[r, c] - mb * mb
            cov = e_ab[r, c] - ma * mb
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / \
                     ((ma * ma + mb * mb + c1) * (va + vb + c2))
    return total / (oh * ow)


def ssim_pair(cnp.ndarray a_in, cnp.ndarray b_in, cnp.ndarray g_in, double c1, double c2):
    cdef double[:, ::1] a = np.ascontiguousarray(a_in, dtype=np.float64)
    cdef double[:, ::1] b = np.ascontiguousarray(b_in, dtype=np.float64)
    cdef double[::1] g = np.ascontiguousarray(g_in, dtype=np.float64)
    cdef Py_ssize_t H = a.shape[0], W = a.shape[1], k = g.shape[0]
    cdef Py_ssize_t oh = H - k + 1, ow = W - k + 1
    cdef double[:, ::1] tmp = np.empty((H, ow))
    cdef double[:, ::1] prod = np.empty((H, W))
    cdef double[:, ::1] mu_a = np.empty((oh, ow))
    cdef double[:, ::1] mu_b = np.empty((oh, ow))
    cdef double[:, ::1] e_aa = np.empty((oh, ow))
    cdef double[:, ::1] e_bb = np.empty((oh, ow))
    cdef double[:, ::1] e_ab = np.empty((oh, ow))
    cdef double result
    with nogil:
        _filter_valid(a, g, tmp, mu_a)
        _filter_valid(b, g, tmp, mu_b)
        _filter_product(a, a, g, prod, tmp, e_aa)
        _filter_product(b, b, g, prod, tmp, e_bb)
        _filter_product(a, b, g, prod, tmp, e_ab)
        result = _ssim_map_mean(mu_a, mu_b, e_aa, e_bb, e_ab, c1, c2)
    return result


def pairwise_ssim(cnp.ndarray stack_in, cnp.ndarray g_in, double c1, double c2):
    """SSIM for every pair i < j of an (n, H, W) stack, in lexicographic order."""
    cdef double[:, :, ::1] stack = np.ascontiguousarray(stack_in, dtype=np.float64)
    cdef double[::1] g = np.ascontiguousarray(g_in, dtype=np.float64)
    cdef Py_ssize_t n = stack.shape[0], H = stack.shape[1], W = stack.shape[2]
    cdef Py_ssize_t k = g.shape[0]
    cdef Py_ssize_t oh = H - k + 1, ow = W - k + 1
    cdef double[:, :, ::1] mu = np.empty((n, oh, ow))
    cdef double[:, :, ::1] e2 = np.empty((n, oh, ow))
    cdef double[:, ::1] tmp = np.empty((H, ow))
    cdef double[:, ::1] prod = np.empty((H, W))
    cdef double[:, ::1] e_ab = np.empty((oh, ow))
    cdef cnp.ndarray out_arr = np.empty(n * (n - 1) // 2)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, p = 0
    with nogil:
        for i in range(n):
            _filter_valid(stack[i], g, tmp, mu[i])
            _filter_product(stack[i], stack[i], g, prod, tmp, e2[i])
        for i in range(n):
            for j in range(i + 1, n):
                _filter_product(stack[i], stack[j], g, prod, tmp, e_ab)
                out[p] = _ssim_map_mean(mu[i], mu[j], e2[i], e2[j], e_ab, c1, c2)
                p += 1
    return out_arr
