# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels.

Parallel loops run over the batch axis only, so every output element is
accumulated by one thread in a fixed order.
"""
from cython.parallel cimport prange
import numpy as np

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad,
           int ho, int wo, real[:, :, ::1] out, int nthreads):
    cdef Py_ssize_t n_, c_, i, j, oh, ow, row
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t hh, ww
    for n_ in prange(N, nogil=True, num_threads=nthreads, schedule="static"):
        for c_ in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c_ * kh + i) * kw + j
                    for oh in range(ho):
                        hh = oh * stride + i - pad
                        if hh < 0 or hh >= H:
                            for ow in range(wo):
                                out[n_, row, oh * wo + ow] = 0
                            continue
                        for ow in range(wo):
                            ww = ow * stride + j - pad
                            if ww < 0 or ww >= W:
                                out[n_, row, oh * wo + ow] = 0
                            else:
                                out[n_, row, oh * wo + ow] = x[n_, c_, hh, ww]


def col2im(real[:, :, ::1] cols, int kh, int kw, int stride, int pad,
           int ho, int wo, real[:, :, :, ::1] dx, int nthreads):
    cdef Py_ssize_t n_, c_, i, j, oh, ow, row
    cdef Py_ssize_t N = dx.shape[0], C = dx.shape[1], H = dx.shape[2], W = dx.shape[3]
    cdef Py_ssize_t hh, ww
    for n_ in prange(N, nogil=True, num_threads=nthreads, schedule="static"):
        for c_ in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c_ * kh + i) * kw + j
                    for oh in range(ho):
                        hh = oh * stride + i - pad
                        if hh < 0 or hh >= H:
                            continue
                        for ow in range(wo):
                            ww = ow * stride + j - pad
                            if ww >= 0 and ww < W:
                                dx[n_, c_, hh, ww] += cols[n_, row, oh * wo + ow]


def maxpool_forward(real[:, :, :, ::1] x, int k, int stride, int pad, int ho, int wo,
                    real[:, :, :, ::1] out, long long[:, :, :, ::1] argmax, int nthreads):
    cdef Py_ssize_t n_, c_, oh, ow, i, j, hh, ww, best_idx
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef real best, v
    cdef bint found
    for n_ in prange(N, nogil=True, num_threads=nthreads, schedule="static"):
        for c_ in range(C):
            for oh in range(ho):
                for ow in range(wo):
                    found = False
                    best = 0
                    best_idx = 0
                    for i in range(k):
                        hh = oh * stride + i - pad
                        if hh < 0 or hh >= H:
                            continue
                        for j in range(k):
                            ww = ow * stride + j - pad
                            if ww < 0 or ww >= W:
                                continue
                            v = x[n_, c_, hh, ww]
                            if not found or v > best:
                                best = v
                                best_idx = hh * W + ww
                                found = True
                    out[n_, c_, oh, ow] = best
                    argmax[n_, c_, oh, ow] = best_idx


def maxpool_backward(real[:, :, :, ::1] dout, long long[:, :, :, ::1] argmax,
                     real[:, ::1] dx, int nthreads):
    cdef Py_ssize_t n_, c_, oh, ow, idx
    cdef Py_ssize_t N = dout.shape[0], C = dout.shape[1], HO = dout.shape[2], WO = dout.shape[3]
    for n_ in prange(N, nogil=True, num_threads=nthreads, schedule="static"):
        for c_ in range(C):
            for oh in range(HO):
                for ow in range(WO):
                    idx = argmax[n_, c_, oh, ow]
                    dx[n_ * C + c_, idx] += dout[n_, c_, oh, ow]
