# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. ``_kernels_py`` holds the reference numpy versions."""

import numpy as np

from libc.math cimport INFINITY


def grid_backward(const double[:, ::1] payoff, const double[:, ::1] fcost,
                  const double[::1] qup, const double[::1] qdn,
                  const unsigned char[:, ::1] mode, Py_ssize_t nu):
    cdef Py_ssize_t n = payoff.shape[0] - 1
    cdef Py_ssize_t g_all = qup.shape[0]
    cdef Py_ssize_t t, j, k, g, best
    cdef double c, cval, y
    v_arr = np.full((n + 1, n + 1), np.nan)
    arg_arr = np.zeros((n, n), dtype=np.intp)
    cdef double[:, ::1] v = v_arr
    cdef Py_ssize_t[:, ::1] arg = arg_arr
    with nogil:
        for j in range(n + 1):
            v[n, j] = payoff[n, j]
        for t in range(n - 1, -1, -1):
            g = 1 if t < nu else g_all
            for j in range(t + 1):
                y = payoff[t, j]
                if mode[t, j] == 2:
                    v[t, j] = y
                    arg[t, j] = 0
                    continue
                best = 0
                cval = INFINITY
                for k in range(g):
                    c = fcost[t, k] + qup[k] * v[t + 1, j + 1] + qdn[k] * v[t + 1, j]
                    if c < cval:
                        cval = c
                        best = k
                arg[t, j] = best
                if mode[t, j] == 1 and y > cval:
                    v[t, j] = y
                else:
                    v[t, j] = cval
    return v_arr, arg_arr


def oracle_extrema(const unsigned char[:, ::1] stop, const unsigned char[:, ::1] cont,
                   const double[::1] payoff, const double[::1] qup, const double[::1] qdn,
                   const double[:, ::1] fcost, long long start, long long end):
    cdef Py_ssize_t n_rules = stop.shape[0]
    cdef Py_ssize_t m = payoff.shape[0]
    cdef Py_ssize_t n_internal = fcost.shape[0]
    cdef Py_ssize_t g = fcost.shape[1]
    cdef Py_ssize_t i, r, e
    cdef long long p, rem
    cdef double val, pmax
    cdef double upper = INFINITY
    cdef long long upper_arg = -1

    rule_min_arr = np.full(n_rules, np.inf)
    rule_arg_arr = np.full(n_rules, -1, dtype=np.int64)
    if end <= start:
        return rule_min_arr, rule_arg_arr, upper, upper_arg

    # each rule as a sparse list into w = [prob * payoff, prob * cost]
    mask = np.concatenate([np.asarray(stop, dtype=bool),
                           np.asarray(cont, dtype=bool)], axis=1)
    ptr_arr = np.zeros(n_rules + 1, dtype=np.intp)
    ptr_arr[1:] = np.cumsum(mask.sum(axis=1))
    idx_arr = np.ascontiguousarray(np.nonzero(mask)[1], dtype=np.intp)
    digits_arr = np.zeros(n_internal, dtype=np.intp)
    prob_arr = np.zeros(m)
    w_arr = np.zeros(m + n_internal)
    cdef double[::1] rule_min = rule_min_arr
    cdef long long[::1] rule_arg = rule_arg_arr
    cdef Py_ssize_t[::1] ptr = ptr_arr
    cdef Py_ssize_t[::1] idx = idx_arr
    cdef Py_ssize_t[::1] digits = digits_arr
    cdef double[::1] prob = prob_arr
    cdef double[::1] w = w_arr

    with nogil:
        rem = start
        for i in range(n_internal):
            digits[i] = rem % g
            rem = rem // g
        for p in range(start, end):
            prob[0] = 1.0
            for i in range(n_internal):
                prob[2 * i + 1] = prob[i] * qdn[digits[i]]
                prob[2 * i + 2] = prob[i] * qup[digits[i]]
                w[m + i] = prob[i] * fcost[i, digits[i]]
            for i in range(m):
                w[i] = prob[i] * payoff[i]
            pmax = -INFINITY
            for r in range(n_rules):
                val = 0.0
                for e in range(ptr[r], ptr[r + 1]):
                    val = val + w[idx[e]]
                if val < rule_min[r]:
                    rule_min[r] = val
                    rule_arg[r] = p
                if val > pmax:
                    pmax = val
            if pmax < upper:
                upper = pmax
                upper_arg = p
            # advance the mixed-radix counter
            for i in range(n_internal):
                digits[i] += 1
                if digits[i] < g:
                    break
                digits[i] = 0
    return rule_min_arr, rule_arg_arr, upper, upper_arg
