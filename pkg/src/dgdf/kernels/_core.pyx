# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled numeric hot kernels.

Same contracts as the pure-numpy backend in ``_numpy.py``; these exist to
strip Python/numpy dispatch overhead from the small dense arrays that
dominate the training loop (edge-preference convolutions and neighbor
scatter-adds).
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_forward(double[:, :, ::1] x, double[:, :, ::1] kern, double[::1] bias):
    cdef Py_ssize_t n = x.shape[0], hh = x.shape[1], ww = x.shape[2]
    cdef Py_ssize_t kh = kern.shape[0], kw = kern.shape[1], c = kern.shape[2]
    cdef Py_ssize_t oh = hh - kh + 1, ow = ww - kw + 1
    out_arr = np.empty((n, oh, ow, c))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t s, i, j, a, b, ch
    cdef double acc
    for s in range(n):
        for i in range(oh):
            for j in range(ow):
                for ch in range(c):
                    acc = bias[ch]
                    for a in range(kh):
                        for b in range(kw):
                            acc += x[s, i + a, j + b] * kern[a, b, ch]
                    out[s, i, j, ch] = acc
    return out_arr


def conv2d_backward(double[:, :, ::1] x, double[:, :, ::1] kern,
                    double[:, :, :, ::1] grad_out):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t kh = kern.shape[0], kw = kern.shape[1], c = kern.shape[2]
    cdef Py_ssize_t oh = grad_out.shape[1], ow = grad_out.shape[2]
    grad_x_arr = np.zeros((x.shape[0], x.shape[1], x.shape[2]))
    grad_k_arr = np.zeros((kh, kw, c))
    grad_b_arr = np.zeros(c)
    cdef double[:, :, ::1] grad_x = grad_x_arr
    cdef double[:, :, ::1] grad_k = grad_k_arr
    cdef double[::1] grad_b = grad_b_arr
    cdef Py_ssize_t s, i, j, a, b, ch
    cdef double g
    for s in range(n):
        for i in range(oh):
            for j in range(ow):
                for ch in range(c):
                    g = grad_out[s, i, j, ch]
                    grad_b[ch] += g
                    for a in range(kh):
                        for b in range(kw):
                            grad_k[a, b, ch] += x[s, i + a, j + b] * g
                            grad_x[s, i + a, j + b] += kern[a, b, ch] * g
    return grad_x_arr, grad_k_arr, grad_b_arr


def segment_sum(double[:, ::1] data, Py_ssize_t[::1] seg, Py_ssize_t n):
    out_arr = np.zeros((n, data.shape[1]))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t e, d, dim = data.shape[1]
    cdef Py_ssize_t s
    for e in range(data.shape[0]):
        s = seg[e]
        for d in range(dim):
            out[s, d] += data[e, d]
    return out_arr
