# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-ray trace kernel. Same batch contract as _trace_np."""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, sqrt, isfinite

cnp.import_array()

STATUS_ALIVE = 0
STATUS_VIGNETTED = 1
STATUS_TIR = 2
STATUS_NUMERICAL = 3

cdef signed char S_ALIVE = 0
cdef signed char S_VIGNETTED = 1
cdef signed char S_TIR = 2
cdef signed char S_NUMERICAL = 3

cdef double T_MIN = 1e-9
cdef double NEWTON_TOL = 1e-10
cdef int NEWTON_MAX_ITER = 50


cdef inline double _sag(double c, double k, double a0, double a1,
                        double a2, double a3, double r2) nogil:
    cdef double disc = 1.0 - (1.0 + k) * c * c * r2
    if disc < 0.0:
        disc = 0.0
    cdef double h = c * r2 / (1.0 + sqrt(disc))
    cdef double rp = r2 * r2
    h += a0 * rp
    rp *= r2
    h += a1 * rp
    rp *= r2
    h += a2 * rp
    rp *= r2
    h += a3 * rp
    return h


cdef inline double _slope(double c, double k, double a0, double a1,
                          double a2, double a3, double r) nogil:
    cdef double r2 = r * r
    cdef double disc = 1.0 - (1.0 + k) * c * c * r2
    if disc < 1e-300:
        disc = 1e-300
    cdef double s = c * r / sqrt(disc)
    cdef double rp = r2 * r  # r^3
    s += 4.0 * a0 * rp
    rp *= r2
    s += 6.0 * a1 * rp
    rp *= r2
    s += 8.0 * a2 * rp
    rp *= r2
    s += 10.0 * a3 * rp
    return s


def trace_batch(origins, dirs, kinds, c, kappa, asph, semidiam, zv, eta, image_z):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] p = np.ascontiguousarray(origins, dtype=np.float64).copy()
    cdef cnp.ndarray[cnp.float64_t, ndim=2] d = np.ascontiguousarray(dirs, dtype=np.float64).copy()
    cdef cnp.ndarray[cnp.int8_t, ndim=1] kind_a = np.ascontiguousarray(kinds, dtype=np.int8)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] c_a = np.ascontiguousarray(c, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] k_a = np.ascontiguousarray(kappa, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a_a = np.ascontiguousarray(asph, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] h_a = np.ascontiguousarray(semidiam, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] z_a = np.ascontiguousarray(zv, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] eta_a = np.ascontiguousarray(eta, dtype=np.float64)

    cdef Py_ssize_t n_rays = p.shape[0]
    cdef Py_ssize_t n_surf = kind_a.shape[0]
    cdef cnp.ndarray[cnp.int8_t, ndim=1] status = np.zeros(n_rays, dtype=np.int8)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] points = np.full((n_rays, 2), np.nan)

    cdef double iz = image_z
    cdef Py_ssize_t i, s
    cdef double cs, ks, hs, zs, a0, a1, a2, a3, e
    cdef double px, py, pz, dx, dy, dz
    cdef double t, rad, ocx, ocy, ocz, b, cq, disc, sq, t1, t2, z1, z2, other
    cdef double x, y, z, r2, g, gp, r, slope, step, dom
    cdef double nx, ny, nz, nn, cosi, sin2t, cost, coef
    cdef int it
    cdef bint dead, conic_only, flat

    with nogil:
        for i in range(n_rays):
            px = p[i, 0]; py = p[i, 1]; pz = p[i, 2]
            dx = d[i, 0]; dy = d[i, 1]; dz = d[i, 2]
            for s in range(n_surf):
                cs = c_a[s]; ks = k_a[s]; hs = h_a[s]; zs = z_a[s]
                a0 = a_a[s, 0]; a1 = a_a[s, 1]; a2 = a_a[s, 2]; a3 = a_a[s, 3]
                flat = cs == 0.0 and a0 == 0.0 and a1 == 0.0 and a2 == 0.0 and a3 == 0.0
                conic_only = ks == 0.0 and a0 == 0.0 and a1 == 0.0 and a2 == 0.0 and a3 == 0.0
                dead = False

                if flat:
                    if dz == 0.0:
                        status[i] = S_VIGNETTED
                        break
                    t = (zs - pz) / dz
                elif conic_only:
                    rad = 1.0 / cs
                    ocx = px; ocy = py; ocz = pz - (zs + rad)
                    b = 2.0 * (dx * ocx + dy * ocy + dz * ocz)
                    cq = ocx * ocx + ocy * ocy + ocz * ocz - rad * rad
                    disc = b * b - 4.0 * cq
                    if disc < 0.0:
                        status[i] = S_VIGNETTED
                        break
                    sq = sqrt(disc)
                    t1 = (-b - sq) / 2.0
                    t2 = (-b + sq) / 2.0
                    z1 = pz + t1 * dz
                    z2 = pz + t2 * dz
                    if fabs(z1 - zs) <= fabs(z2 - zs):
                        t = t1
                        other = t2
                    else:
                        t = t2
                        other = t1
                    if t <= T_MIN:
                        t = other
                else:
                    if dz == 0.0:
                        status[i] = S_VIGNETTED
                        break
                    t = (zs - pz) / dz
                    g = 1e308
                    for it in range(NEWTON_MAX_ITER):
                        x = px + t * dx
                        y = py + t * dy
                        z = pz + t * dz
                        r2 = x * x + y * y
                        dom = 1.0 - (1.0 + ks) * cs * cs * r2
                        if dom < 0.0:
                            status[i] = S_VIGNETTED
                            dead = True
                            break
                        g = z - zs - _sag(cs, ks, a0, a1, a2, a3, r2)
                        if fabs(g) <= NEWTON_TOL:
                            break
                        r = sqrt(r2)
                        if r < 1e-150:
                            r = 1e-150
                        slope = _slope(cs, ks, a0, a1, a2, a3, r)
                        gp = dz - slope * (x * dx + y * dy) / r
                        if fabs(gp) < 1e-14:
                            gp = 1e-14
                        step = g / gp
                        if step > hs + 1.0:
                            step = hs + 1.0
                        elif step < -hs - 1.0:
                            step = -hs - 1.0
                        t -= step
                    if dead:
                        break
                    if fabs(g) > NEWTON_TOL:
                        status[i] = S_NUMERICAL
                        break

                if not isfinite(t) or t <= T_MIN:
                    status[i] = S_VIGNETTED
                    break
                x = px + t * dx
                y = py + t * dy
                z = pz + t * dz
                r2 = x * x + y * y
                if r2 > hs * hs:
                    status[i] = S_VIGNETTED
                    break
                px = x; py = y; pz = z

                if kind_a[s] == 0:
                    r = sqrt(r2)
                    if r < 1e-150:
                        r = 1e-150
                    slope = _slope(cs, ks, a0, a1, a2, a3, sqrt(r2))
                    nx = -slope * x / r
                    ny = -slope * y / r
                    nz = 1.0
                    nn = sqrt(nx * nx + ny * ny + nz * nz)
                    nx /= nn; ny /= nn; nz /= nn
                    cosi = dx * nx + dy * ny + dz * nz
                    e = eta_a[s, i]
                    sin2t = e * e * (1.0 - cosi * cosi)
                    if sin2t > 1.0:
                        status[i] = S_TIR
                        break
                    cost = sqrt(1.0 - sin2t)
                    coef = e * cosi - cost
                    dx = e * dx - coef * nx
                    dy = e * dy - coef * ny
                    dz = e * dz - coef * nz

            if status[i] == S_ALIVE:
                if dz != 0.0:
                    t = (iz - pz) / dz
                    points[i, 0] = px + t * dx
                    points[i, 1] = py + t * dy
                else:
                    status[i] = S_NUMERICAL

    return points, status
