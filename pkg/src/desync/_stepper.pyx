# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled fixed-step integrator loop used by :mod:`desync.oracle`.

Every step recomputes the number of active jobs per pool and therefore every
job's rate; nothing is carried over from the previous step. Pools ``>= 0``
are contention domains served by ``min(b_single, b_cap / m)``; pool ``-1``
is a unit-rate timer.
"""


def advance(double[::1] rem, int[::1] pool, double[::1] b_single, double[::1] b_cap,
            double dt, long max_steps, double[::1] rate, long[::1] count):
    """Step until the next step would finish some job; return whole steps taken.

    ``rem`` is updated in place. On return ``rate`` holds the rates of the
    step that was not taken.
    """
    cdef Py_ssize_t n = rem.shape[0]
    cdef Py_ssize_t npool = count.shape[0]
    cdef Py_ssize_t j, q
    cdef long s
    cdef int p
    cdef double r, share
    cdef bint crossing
    for s in range(max_steps):
        for q in range(npool):
            count[q] = 0
        for j in range(n):
            if pool[j] >= 0:
                count[pool[j]] += 1
        crossing = False
        for j in range(n):
            p = pool[j]
            if p < 0:
                r = 1.0
            else:
                share = b_cap[p] / count[p]
                r = b_single[p] if b_single[p] < share else share
            rate[j] = r
            if rem[j] <= r * dt:
                crossing = True
        if crossing:
            return s
        for j in range(n):
            rem[j] -= rate[j] * dt
    return max_steps
