# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled gain kernels; same contract as ``endkf._kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, sin, cos, atan2

cnp.import_array()

cdef double ZERO_TANGENT = 1e-12
cdef double SERIES_ANGLE = 1e-4
cdef double ANTIPODAL_TOL = 1e-9


def log_map(const double[:, ::1] base, const double[:, ::1] target,
            const cnp.intp_t[::1] kinds, const cnp.intp_t[::1] starts, const cnp.intp_t[::1] sizes):
    cdef Py_ssize_t N = base.shape[0], d = base.shape[1]
    cdef Py_ssize_t i, r, b, a, n
    cdef double c, nrm, theta
    cdef bint antipodal = False
    out_ = np.empty((N, d))
    cdef double[:, ::1] out = out_
    for i in range(N):
        for b in range(kinds.shape[0]):
            a = starts[b]
            n = sizes[b]
            if kinds[b] == 0:
                for r in range(a, a + n):
                    out[i, r] = target[i, r] - base[i, r]
                continue
            c = 0.0
            for r in range(a, a + n):
                c = c + base[i, r] * target[i, r]
            if c < -1.0 + ANTIPODAL_TOL:
                antipodal = True
            if c > 1.0:
                c = 1.0
            elif c < -1.0:
                c = -1.0
            nrm = 0.0
            for r in range(a, a + n):
                out[i, r] = target[i, r] - base[i, r] * c
                nrm = nrm + out[i, r] * out[i, r]
            nrm = sqrt(nrm)
            if nrm < 1e-15:
                for r in range(a, a + n):
                    out[i, r] = 0.0
            else:
                theta = atan2(nrm, c) / nrm
                for r in range(a, a + n):
                    out[i, r] = out[i, r] * theta
    return out_, antipodal


cdef inline void _coeffs(double theta, double* s1, double* f3) noexcept nogil:
    cdef double t2 = theta * theta
    if theta < SERIES_ANGLE:
        s1[0] = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        f3[0] = -1.0 / 3.0 + t2 / 30.0
    else:
        s1[0] = sin(theta) / theta
        f3[0] = (theta * cos(theta) - sin(theta)) / (t2 * theta)


cdef void _forward(const double[:, ::1] G, const double[:, ::1] prior, const double[:, ::1] innov,
                   const cnp.intp_t[::1] kinds, const cnp.intp_t[::1] starts, const cnp.intp_t[::1] sizes,
                   double[:, ::1] U, double[:, ::1] W, double[:, ::1] post,
                   double[:, ::1] S1, double[:, ::1] F3) noexcept nogil:
    cdef Py_ssize_t N = prior.shape[0], d = prior.shape[1], q = innov.shape[1]
    cdef Py_ssize_t i, r, c, b, a, n
    cdef double acc, xu, theta, ct, nrm, s1, f3
    for i in range(N):
        for r in range(d):
            acc = 0.0
            for c in range(q):
                acc = acc + G[r, c] * innov[i, c]
            U[i, r] = acc
        for b in range(kinds.shape[0]):
            a = starts[b]
            n = sizes[b]
            if kinds[b] == 0:
                for r in range(a, a + n):
                    post[i, r] = prior[i, r] + U[i, r]
                continue
            xu = 0.0
            for r in range(a, a + n):
                xu = xu + prior[i, r] * U[i, r]
            theta = 0.0
            for r in range(a, a + n):
                W[i, r] = U[i, r] - prior[i, r] * xu
                theta = theta + W[i, r] * W[i, r]
            theta = sqrt(theta)
            _coeffs(theta, &s1, &f3)
            S1[i, b] = s1
            F3[i, b] = f3
            if theta < ZERO_TANGENT:
                for r in range(a, a + n):
                    post[i, r] = prior[i, r]
            else:
                ct = cos(theta)
                for r in range(a, a + n):
                    post[i, r] = ct * prior[i, r] + s1 * W[i, r]
            nrm = 0.0
            for r in range(a, a + n):
                nrm = nrm + post[i, r] * post[i, r]
            nrm = sqrt(nrm)
            for r in range(a, a + n):
                post[i, r] = post[i, r] / nrm


def apply_gain(const double[:, ::1] G, const double[:, ::1] prior, const double[:, ::1] innov,
               const cnp.intp_t[::1] kinds, const cnp.intp_t[::1] starts, const cnp.intp_t[::1] sizes):
    cdef Py_ssize_t N = prior.shape[0], d = prior.shape[1], nb = kinds.shape[0]
    U = np.empty((N, d))
    W = np.empty((N, d))
    post = np.empty((N, d))
    S1 = np.empty((N, nb))
    F3 = np.empty((N, nb))
    _forward(G, prior, innov, kinds, starts, sizes, U, W, post, S1, F3)
    return post


def objective_grad(const double[:, ::1] G, const double[:, ::1] prior, const double[:, ::1] innov,
                   const cnp.intp_t[::1] kinds, const cnp.intp_t[::1] starts, const cnp.intp_t[::1] sizes,
                   const double[::1] weights, bint want_grad=True):
    cdef Py_ssize_t N = prior.shape[0], d = prior.shape[1], q = innov.shape[1]
    cdef Py_ssize_t nb = kinds.shape[0]
    cdef Py_ssize_t i, r, c, b, a, n
    cdef double value = 0.0, acc, wb, mm, wc, xc, xd, s1, f3, coef

    U_ = np.empty((N, d))
    W_ = np.empty((N, d))
    post_ = np.empty((N, d))
    S1_ = np.empty((N, nb))
    F3_ = np.empty((N, nb))
    dU_ = np.zeros((N, d))
    mean_ = np.empty(d)
    dw_ = np.empty(d)
    cdef double[:, ::1] W = W_, post = post_, S1 = S1_, F3 = F3_, dU = dU_
    cdef double[::1] mean = mean_, dw = dw_
    cdef double[:, ::1] U = U_

    _forward(G, prior, innov, kinds, starts, sizes, U, W, post, S1, F3)

    for r in range(d):
        acc = 0.0
        for i in range(N):
            acc = acc + post[i, r]
        mean[r] = acc / N

    for b in range(nb):
        a = starts[b]
        n = sizes[b]
        wb = weights[b]
        if kinds[b] == 0:
            acc = 0.0
            coef = 2.0 * wb / (N - 1)
            for i in range(N):
                for r in range(a, a + n):
                    xd = post[i, r] - mean[r]
                    acc = acc + xd * xd
                    dU[i, r] = coef * xd
            value = value + wb * acc / (N - 1)
            continue
        mm = 0.0
        for r in range(a, a + n):
            mm = mm + mean[r] * mean[r]
        value = value + wb * (1.0 - mm)
        if not want_grad:
            continue
        coef = -2.0 * wb / N
        for i in range(N):
            s1 = S1[i, b]
            f3 = F3[i, b]
            wc = 0.0
            xc = 0.0
            for r in range(a, a + n):
                wc = wc + W[i, r] * coef * mean[r]
                xc = xc + prior[i, r] * coef * mean[r]
            xd = 0.0
            for r in range(a, a + n):
                dw[r] = s1 * coef * mean[r] + (f3 * wc - s1 * xc) * W[i, r]
                xd = xd + prior[i, r] * dw[r]
            for r in range(a, a + n):
                dU[i, r] = dw[r] - prior[i, r] * xd

    if not want_grad:
        return value, None
    grad_ = np.zeros((d, q))
    cdef double[:, ::1] grad = grad_
    for i in range(N):
        for r in range(d):
            if dU[i, r] != 0.0:
                for c in range(q):
                    grad[r, c] = grad[r, c] + dU[i, r] * innov[i, c]
    return value, grad_
