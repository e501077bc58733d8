# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loop for noisy projected descent on an affine gradient field."""
from libc.math cimport sqrt


def affine_round(double[::1] y, const double[::1] center, double radius,
                 const double[:, ::1] H, const double[:, ::1] drive,
                 const double[::1] etas, double[::1] acc, double[::1] work):
    """Run ``len(etas)`` steps ``y <- Proj_ball(y - eta_t (H y + drive_t))`` in place.

    ``acc`` accumulates the pre-step iterates. Returns the largest observed
    ``||y - center|| / radius`` after projection.
    """
    cdef Py_ssize_t K = drive.shape[0]
    cdef Py_ssize_t d = y.shape[0]
    cdef Py_ssize_t t, i, j
    cdef double s, r2, scale, eta, ratio
    cdef double worst = 0.0
    cdef double rad2 = radius * radius
    for t in range(K):
        eta = etas[t]
        for i in range(d):
            acc[i] += y[i]
        for i in range(d):
            s = drive[t, i]
            for j in range(d):
                s = s + H[i, j] * y[j]
            work[i] = y[i] - eta * s - center[i]
        r2 = 0.0
        for i in range(d):
            r2 = r2 + work[i] * work[i]
        if r2 > rad2:
            scale = radius / sqrt(r2)
            ratio = 1.0
        else:
            scale = 1.0
            ratio = sqrt(r2) / radius
        for i in range(d):
            y[i] = center[i] + work[i] * scale
        if ratio > worst:
            worst = ratio
    return worst
