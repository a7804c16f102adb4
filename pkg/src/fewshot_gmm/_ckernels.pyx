# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled diagonal-Gaussian mixture kernels.

Same contracts as ``fewshot_gmm._pykernels``; inputs must be C-contiguous
float64. Loops are serial so reductions are deterministic.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

cdef double LOG_2PI = 1.8378770664093453


cdef void _logpdf_row(const double* x, const double* means, const double* inv,
                      const double* const_j, double* out,
                      Py_ssize_t J, Py_ssize_t T) noexcept nogil:
    cdef Py_ssize_t j, t
    cdef double acc, d
    for j in range(J):
        acc = 0.0
        for t in range(T):
            d = (x[t] - means[j * T + t]) * inv[j * T + t]
            acc += d * d
        out[j] = const_j[j] - 0.5 * acc


cdef double _normalize(double* lp, Py_ssize_t J) noexcept nogil:
    """Turn weighted log densities into responsibilities in place; return log-sum-exp."""
    cdef Py_ssize_t j
    cdef double top = lp[0], total = 0.0
    for j in range(1, J):
        if lp[j] > top:
            top = lp[j]
    for j in range(J):
        lp[j] = exp(lp[j] - top)
        total += lp[j]
    for j in range(J):
        lp[j] = lp[j] / total
    return top + log(total)


def _prepare(means, sigmas, log_w):
    sig = np.ascontiguousarray(sigmas, dtype=np.float64)
    inv = 1.0 / sig
    T = sig.shape[sig.ndim - 1]
    const = np.ascontiguousarray(log_w - np.log(sig).sum(axis=sig.ndim - 1) - 0.5 * T * LOG_2PI)
    return np.ascontiguousarray(means, dtype=np.float64), inv, const


def component_logpdf(X, means, sigmas, log_w):
    cdef const double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    mu_a, inv_a, const_a = _prepare(means, sigmas, log_w)
    cdef const double[:, ::1] mu = mu_a
    cdef const double[:, ::1] inv = inv_a
    cdef const double[::1] cj = const_a
    cdef Py_ssize_t N = x.shape[0], J = mu.shape[0], T = mu.shape[1], i
    out_a = np.empty((N, J), dtype=np.float64)
    cdef double[:, ::1] out = out_a
    if N == 0:
        return out_a
    with nogil:
        for i in range(N):
            _logpdf_row(&x[i, 0], &mu[0, 0], &inv[0, 0], &cj[0], &out[i, 0], J, T)
    return out_a


def loglik_resp(X, means, sigmas, log_w):
    cdef const double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    mu_a, inv_a, const_a = _prepare(means, sigmas, log_w)
    cdef const double[:, ::1] mu = mu_a
    cdef const double[:, ::1] inv = inv_a
    cdef const double[::1] cj = const_a
    cdef Py_ssize_t N = x.shape[0], J = mu.shape[0], T = mu.shape[1], i
    resp_a = np.empty((N, J), dtype=np.float64)
    logp_a = np.empty(N, dtype=np.float64)
    cdef double[:, ::1] resp = resp_a
    cdef double[::1] logp = logp_a
    if N == 0:
        return logp_a, resp_a
    with nogil:
        for i in range(N):
            _logpdf_row(&x[i, 0], &mu[0, 0], &inv[0, 0], &cj[0], &resp[i, 0], J, T)
            logp[i] = _normalize(&resp[i, 0], J)
    return logp_a, resp_a


def weighted_moments(X, resp):
    cdef const double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] g = np.ascontiguousarray(resp, dtype=np.float64)
    cdef Py_ssize_t N = x.shape[0], T = x.shape[1], J = g.shape[1], i, j, t
    mass_a = np.zeros(J, dtype=np.float64)
    mean_a = np.zeros((J, T), dtype=np.float64)
    var_a = np.zeros((J, T), dtype=np.float64)
    cdef double[::1] mass = mass_a
    cdef double[:, ::1] mean = mean_a
    cdef double[:, ::1] var = var_a
    cdef double w, d, s
    with nogil:
        for i in range(N):
            for j in range(J):
                w = g[i, j]
                mass[j] += w
                for t in range(T):
                    mean[j, t] += w * x[i, t]
        for j in range(J):
            s = mass[j] if mass[j] > 0.0 else 1.0
            for t in range(T):
                mean[j, t] /= s
        for i in range(N):
            for j in range(J):
                w = g[i, j]
                for t in range(T):
                    d = x[i, t] - mean[j, t]
                    var[j, t] += w * d * d
        for j in range(J):
            s = mass[j] if mass[j] > 0.0 else 1.0
            for t in range(T):
                var[j, t] /= s
    return mass_a, mean_a, var_a


def batched_nll_grad(X, means, sigmas, log_w):
    cdef const double[:, :, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    mu_a, inv_a, const_a = _prepare(means, sigmas, log_w)
    cdef const double[:, :, ::1] mu = mu_a
    cdef const double[:, :, ::1] inv = inv_a
    cdef const double[:, ::1] cj = const_a
    cdef Py_ssize_t B = x.shape[0], N = x.shape[1], T = x.shape[2], J = mu.shape[1]
    cdef Py_ssize_t b, i, j, t
    nll_a = np.zeros(B, dtype=np.float64)
    dmu_a = np.zeros((B, J, T), dtype=np.float64)
    dsig_a = np.zeros((B, J, T), dtype=np.float64)
    mass_a = np.zeros(J, dtype=np.float64)
    buf_a = np.empty(J, dtype=np.float64)
    cdef double[::1] nll = nll_a
    cdef double[:, :, ::1] dmu = dmu_a
    cdef double[:, :, ::1] dsig = dsig_a
    cdef double[::1] mass = mass_a
    cdef double[::1] buf = buf_a
    cdef double gam, z, lse
    if N == 0:
        return nll_a, dmu_a, dsig_a
    with nogil:
        for b in range(B):
            for j in range(J):
                mass[j] = 0.0
            for i in range(N):
                _logpdf_row(&x[b, i, 0], &mu[b, 0, 0], &inv[b, 0, 0], &cj[b, 0],
                            &buf[0], J, T)
                lse = _normalize(&buf[0], J)
                nll[b] -= lse
                for j in range(J):
                    gam = buf[j]
                    mass[j] += gam
                    for t in range(T):
                        z = (x[b, i, t] - mu[b, j, t]) * inv[b, j, t]
                        dmu[b, j, t] += gam * z
                        dsig[b, j, t] += gam * z * z
            for j in range(J):
                for t in range(T):
                    dmu[b, j, t] = -dmu[b, j, t] * inv[b, j, t]
                    dsig[b, j, t] = (mass[j] - dsig[b, j, t]) * inv[b, j, t]
    return nll_a, dmu_a, dsig_a
