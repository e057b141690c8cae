"""Vectorized NumPy ray-trace kernel (pure-python fallback backend).

Shared batch contract with the compiled backend:

    trace_batch(origins, dirs, kinds, c, kappa, asph, semidiam, zv, eta,
                image_z) -> (points, status)

origins/dirs: (R, 3) float64; kinds: (S,) int8 (0 = refract, 1 = stop);
c/kappa/semidiam/zv: (S,); asph: (S, 4) coefficients of r^4..r^10;
eta: (S, R) = n1/n2 per surface per ray (ignored for stops);
points: (R, 2) image-plane x/y in mm; status: (R,) int8 with
0 = alive, 1 = vignetted, 2 = TIR, 3 = numerical failure.
"""
from __future__ import annotations

import numpy as np

STATUS_ALIVE = 0
STATUS_VIGNETTED = 1
STATUS_TIR = 2
STATUS_NUMERICAL = 3

_T_MIN = 1e-9
_NEWTON_TOL = 1e-10
_NEWTON_MAX_ITER = 50


def _sag(c, k, a, r2):
    disc = 1.0 - (1.0 + k) * c * c * r2
    disc = np.maximum(disc, 0.0)
    h = c * r2 / (1.0 + np.sqrt(disc))
    rp = r2
    for i in range(4):
        rp = rp * r2
        if a[i] != 0.0:
            h = h + a[i] * rp
    return h


def _sag_slope(c, k, a, r):
    r2 = r * r
    disc = 1.0 - (1.0 + k) * c * c * r2
    disc = np.maximum(disc, 1e-300)
    s = c * r / np.sqrt(disc)
    for i in range(4):
        n = 2 * (i + 2)
        if a[i] != 0.0:
            s = s + n * a[i] * r ** (n - 1)
    return s


def trace_batch(origins, dirs, kinds, c, kappa, asph, semidiam, zv, eta, image_z):
    p = np.array(origins, dtype=np.float64, copy=True)
    d = np.array(dirs, dtype=np.float64, copy=True)
    n_rays = p.shape[0]
    status = np.zeros(n_rays, dtype=np.int8)
    n_surf = len(kinds)

    for s in range(n_surf):
        alive = status == STATUS_ALIVE
        if not alive.any():
            break
        cs, ks, hs, zs = float(c[s]), float(kappa[s]), float(semidiam[s]), float(zv[s])
        a = asph[s]
        is_conic_only = ks == 0.0 and not a.any()

        pz = p[:, 2]
        dz = d[:, 2]
        t = np.full(n_rays, np.nan)
        bad = ~alive

        if cs == 0.0 and not a.any():
            # flat surface (stop, plano face)
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (zs - pz) / dz
        elif is_conic_only and ks == 0.0:
            # sphere: closed-form quadratic, root nearest the vertex
            rad = 1.0 / cs
            ocx, ocy, ocz = p[:, 0], p[:, 1], p[:, 2] - (zs + rad)
            b = 2.0 * (d[:, 0] * ocx + d[:, 1] * ocy + d[:, 2] * ocz)
            cq = ocx * ocx + ocy * ocy + ocz * ocz - rad * rad
            disc = b * b - 4.0 * cq
            miss = disc < 0.0
            sq = np.sqrt(np.maximum(disc, 0.0))
            t1 = (-b - sq) / 2.0
            t2 = (-b + sq) / 2.0
            z1 = pz + t1 * dz
            z2 = pz + t2 * dz
            pick1 = np.abs(z1 - zs) <= np.abs(z2 - zs)
            t = np.where(pick1, t1, t2)
            # fall back to the other root when the near root is behind the ray
            other = np.where(pick1, t2, t1)
            t = np.where(t <= _T_MIN, other, t)
            bad = bad | miss
        else:
            # aspheric / conic: Newton on z(t) − zv − h(r(t)) = 0 from a
            # flat-surface seed, damped, |residual| <= 1e-10 mm
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (zs - pz) / dz
            converged = np.zeros(n_rays, dtype=bool)
            domain_bad = np.zeros(n_rays, dtype=bool)
            g = np.full(n_rays, np.inf)
            for _ in range(_NEWTON_MAX_ITER):
                x = p[:, 0] + t * d[:, 0]
                y = p[:, 1] + t * d[:, 1]
                z = pz + t * dz
                r2 = x * x + y * y
                dom = 1.0 - (1.0 + ks) * cs * cs * r2
                domain_bad = dom < 0.0
                g = z - zs - _sag(cs, ks, a, r2)
                converged = np.abs(g) <= _NEWTON_TOL
                if bool((converged | domain_bad | ~alive).all()):
                    break
                r = np.sqrt(np.maximum(r2, 1e-300))
                slope = _sag_slope(cs, ks, a, r)
                gp = dz - slope * (x * d[:, 0] + y * d[:, 1]) / r
                gp = np.where(np.abs(gp) < 1e-14, 1e-14, gp)
                step = g / gp
                # damp overly large steps relative to the seed distance
                step = np.clip(step, -hs - 1.0, hs + 1.0)
                t = np.where(converged | domain_bad, t, t - step)
            bad = bad | domain_bad | (~converged & ~domain_bad & alive & (np.abs(g) > _NEWTON_TOL))
            newton_fail = ~converged & ~domain_bad & alive
            status[newton_fail & (np.abs(g) > _NEWTON_TOL)] = STATUS_NUMERICAL

        bad = bad | ~np.isfinite(t) | (t <= _T_MIN)
        hit = p + t[:, None] * d
        r_hit2 = hit[:, 0] ** 2 + hit[:, 1] ** 2
        vign = alive & (bad | (r_hit2 > semidiam[s] ** 2)) & (status != STATUS_NUMERICAL)
        status[vign] = STATUS_VIGNETTED
        alive = status == STATUS_ALIVE
        p = np.where(alive[:, None], hit, p)

        if kinds[s] == 0:
            # refract via vector Snell; surface normal from the sag slope,
            # oriented along propagation (+z)
            r = np.sqrt(np.maximum(r_hit2, 1e-300))
            slope = _sag_slope(cs, ks, a, np.where(alive, r, 0.0))
            nx = -slope * hit[:, 0] / r
            ny = -slope * hit[:, 1] / r
            nz = np.ones(n_rays)
            nn = np.sqrt(nx * nx + ny * ny + nz * nz)
            nx, ny, nz = nx / nn, ny / nn, nz / nn
            cosi = d[:, 0] * nx + d[:, 1] * ny + d[:, 2] * nz
            e = eta[s]
            sin2t = e * e * (1.0 - cosi * cosi)
            tir = alive & (sin2t > 1.0)
            status[tir] = STATUS_TIR
            alive = status == STATUS_ALIVE
            cost = np.sqrt(np.maximum(1.0 - sin2t, 0.0))
            coef = e * cosi - cost
            newd = np.empty_like(d)
            newd[:, 0] = e * d[:, 0] - coef * nx
            newd[:, 1] = e * d[:, 1] - coef * ny
            newd[:, 2] = e * d[:, 2] - coef * nz
            d = np.where(alive[:, None], newd, d)

    alive = status == STATUS_ALIVE
    points = np.full((n_rays, 2), np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        tf = (image_z - p[:, 2]) / d[:, 2]
    points[alive, 0] = p[alive, 0] + tf[alive] * d[alive, 0]
    points[alive, 1] = p[alive, 1] + tf[alive] * d[alive, 1]
    return points, status
