"""Numba @njit implementations of the hot kernels.

Same contracts as ``_numpy_impl``. prange only partitions independent
output slices, so results are run-to-run deterministic.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

BACKEND_NAME = "numba"

_JIT = dict(cache=True, nogil=True)


@njit(parallel=True, fastmath=True, **_JIT)
def conv3x3_forward(xp, w, b):
    cin, hp, wp = xp.shape
    h, wd = hp - 2, wp - 2
    cout = w.shape[0]
    out = np.empty((cout, h, wd), dtype=xp.dtype)
    for y in prange(h):
        for co in range(cout):
            row = out[co, y]
            bias = b[co]
            for x in range(wd):
                row[x] = bias
            for ci in range(cin):
                for ky in range(3):
                    src = xp[ci, y + ky]
                    w0 = w[co, ci, ky, 0]
                    w1 = w[co, ci, ky, 1]
                    w2 = w[co, ci, ky, 2]
                    for x in range(wd):
                        row[x] += w0 * src[x] + w1 * src[x + 1] + w2 * src[x + 2]
    return out


@njit(parallel=True, fastmath=True, **_JIT)
def conv3x3_backward(xp, w, go):
    cin, hp, wp = xp.shape
    h, wd = hp - 2, wp - 2
    cout = w.shape[0]
    # grad wrt padded input, gather form over a twice-padded go
    gop = np.zeros((cout, h + 4, wd + 4), dtype=xp.dtype)
    for co in range(cout):
        gop[co, 2:2 + h, 2:2 + wd] = go[co]
    gxp = np.empty_like(xp)
    for u in prange(hp):
        for ci in range(cin):
            row = gxp[ci, u]
            for x in range(wp):
                row[x] = 0.0
            for co in range(cout):
                for ky in range(3):
                    src = gop[co, u + 2 - ky]
                    w0 = w[co, ci, ky, 0]
                    w1 = w[co, ci, ky, 1]
                    w2 = w[co, ci, ky, 2]
                    for x in range(wp):
                        row[x] += w0 * src[x + 2] + w1 * src[x + 1] + w2 * src[x]
    gw = np.zeros((cout, cin, 3, 3), dtype=xp.dtype)
    gb = np.zeros(cout, dtype=xp.dtype)
    for pair in prange(cout * cin):
        co = pair // cin
        ci = pair % cin
        g = go[co]
        if ci == 0:
            acc_b = g[0, 0] * 0
            for y in range(h):
                grow = g[y]
                for x in range(wd):
                    acc_b += grow[x]
            gb[co] = acc_b
        for ky in range(3):
            a0 = g[0, 0] * 0
            a1 = a0
            a2 = a0
            for y in range(h):
                grow = g[y]
                src = xp[ci, y + ky]
                for x in range(wd):
                    gx = grow[x]
                    a0 += gx * src[x]
                    a1 += gx * src[x + 1]
                    a2 += gx * src[x + 2]
            gw[co, ci, ky, 0] = a0
            gw[co, ci, ky, 1] = a1
            gw[co, ci, ky, 2] = a2
    return gxp, gw, gb


@njit(**_JIT)
def _rasterize_core(pts, dep, triangles, width, height):
    tri_idx = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    zbuf = np.full((height, width), np.inf, dtype=np.float64)
    for t in range(len(triangles)):
        i0 = triangles[t, 0]
        i1 = triangles[t, 1]
        i2 = triangles[t, 2]
        area = (pts[i1, 0] - pts[i0, 0]) * (pts[i2, 1] - pts[i0, 1]) - (
            pts[i1, 1] - pts[i0, 1]) * (pts[i2, 0] - pts[i0, 0])
        swapped = False
        if area < 0.0:
            i1, i2 = i2, i1
            area = -area
            swapped = True
        if area == 0.0:
            continue
        x0v, y0v = pts[i0, 0], pts[i0, 1]
        x1v, y1v = pts[i1, 0], pts[i1, 1]
        x2v, y2v = pts[i2, 0], pts[i2, 1]
        xmin = max(0, int(np.ceil(min(x0v, min(x1v, x2v)))))
        xmax = min(width - 1, int(np.floor(max(x0v, max(x1v, x2v)))))
        ymin = max(0, int(np.ceil(min(y0v, min(y1v, y2v)))))
        ymax = min(height - 1, int(np.floor(max(y0v, max(y1v, y2v)))))
        if xmin > xmax or ymin > ymax:
            continue
        tl0 = (x1v < x2v) if y1v == y2v else (y1v > y2v)
        tl1 = (x2v < x0v) if y2v == y0v else (y2v > y0v)
        tl2 = (x0v < x1v) if y0v == y1v else (y0v > y1v)
        for py in range(ymin, ymax + 1):
            fy = float(py)
            for px in range(xmin, xmax + 1):
                fx = float(px)
                w0 = (x2v - x1v) * (fy - y1v) - (y2v - y1v) * (fx - x1v)
                w1 = (x0v - x2v) * (fy - y2v) - (y0v - y2v) * (fx - x2v)
                w2 = (x1v - x0v) * (fy - y0v) - (y1v - y0v) * (fx - x0v)
                ok0 = tl0 if w0 == 0.0 else w0 > 0.0
                ok1 = tl1 if w1 == 0.0 else w1 > 0.0
                ok2 = tl2 if w2 == 0.0 else w2 > 0.0
                if not (ok0 and ok1 and ok2):
                    continue
                l0 = w0 / area
                l1 = w1 / area
                l2 = w2 / area
                z = l0 * dep[i0] + l1 * dep[i1] + l2 * dep[i2]
                if z < zbuf[py, px]:
                    zbuf[py, px] = z
                    tri_idx[py, px] = t
                    bary[py, px, 0] = l0
                    if swapped:
                        bary[py, px, 1] = l2
                        bary[py, px, 2] = l1
                    else:
                        bary[py, px, 1] = l1
                        bary[py, px, 2] = l2
    return tri_idx, bary, zbuf


def rasterize(points, depth, triangles, width, height):
    pts = np.ascontiguousarray(points, dtype=np.float64)
    dep = np.ascontiguousarray(depth, dtype=np.float64)
    tris = np.ascontiguousarray(triangles, dtype=np.int64)
    return _rasterize_core(pts, dep, tris, width, height)


@njit(parallel=True, **_JIT)
def _drr_core(volume, origin, spacing, ray_origins, ray_dir, t0, n_steps, step):
    npix = len(ray_origins)
    nx, ny, nz = volume.shape
    acc = np.zeros(npix, dtype=np.float64)
    for p in prange(npix):
        ox = ray_origins[p, 0]
        oy = ray_origins[p, 1]
        oz = ray_origins[p, 2]
        total = 0.0
        for k in range(n_steps):
            t = t0 + (k + 0.5) * step
            px = ox + t * ray_dir[0]
            py = oy + t * ray_dir[1]
            pz = oz + t * ray_dir[2]
            ux = (px - origin[0]) / spacing[0] - 0.5
            uy = (py - origin[1]) / spacing[1] - 0.5
            uz = (pz - origin[2]) / spacing[2] - 0.5
            ix = int(np.floor(ux))
            iy = int(np.floor(uy))
            iz = int(np.floor(uz))
            fx = ux - ix
            fy = uy - iy
            fz = uz - iz
            val = 0.0
            for dx in range(2):
                jx = ix + dx
                if jx < 0 or jx >= nx:
                    continue
                wx = fx if dx == 1 else 1.0 - fx
                for dy in range(2):
                    jy = iy + dy
                    if jy < 0 or jy >= ny:
                        continue
                    wy = fy if dy == 1 else 1.0 - fy
                    for dz in range(2):
                        jz = iz + dz
                        if jz < 0 or jz >= nz:
                            continue
                        wz = fz if dz == 1 else 1.0 - fz
                        val += wx * wy * wz * volume[jx, jy, jz]
            total += val
        acc[p] = total * step
    return acc


def drr_accumulate(volume, origin, spacing, ray_origins, ray_dir, t0, n_steps, step):
    return _drr_core(
        np.ascontiguousarray(volume, dtype=np.float64),
        np.ascontiguousarray(origin, dtype=np.float64),
        np.ascontiguousarray(spacing, dtype=np.float64),
        np.ascontiguousarray(ray_origins, dtype=np.float64),
        np.ascontiguousarray(ray_dir, dtype=np.float64),
        float(t0), int(n_steps), float(step),
    )


@njit(**_JIT)
def _voxelize_core(v, triangles, origin, spacing, nx, ny, nz):
    marks = np.zeros((nx, ny, nz + 1), dtype=np.int64)
    for t in range(len(triangles)):
        i0 = triangles[t, 0]
        i1 = triangles[t, 1]
        i2 = triangles[t, 2]
        area = (v[i1, 0] - v[i0, 0]) * (v[i2, 1] - v[i0, 1]) - (
            v[i1, 1] - v[i0, 1]) * (v[i2, 0] - v[i0, 0])
        if area < 0.0:
            i1, i2 = i2, i1
            area = -area
        if area == 0.0:
            continue
        x0v, y0v, z0v = v[i0, 0], v[i0, 1], v[i0, 2]
        x1v, y1v, z1v = v[i1, 0], v[i1, 1], v[i1, 2]
        x2v, y2v, z2v = v[i2, 0], v[i2, 1], v[i2, 2]
        gx0 = max(0, int(np.ceil((min(x0v, min(x1v, x2v)) - origin[0]) / spacing[0] - 0.5)))
        gx1 = min(nx - 1, int(np.floor((max(x0v, max(x1v, x2v)) - origin[0]) / spacing[0] - 0.5)))
        gy0 = max(0, int(np.ceil((min(y0v, min(y1v, y2v)) - origin[1]) / spacing[1] - 0.5)))
        gy1 = min(ny - 1, int(np.floor((max(y0v, max(y1v, y2v)) - origin[1]) / spacing[1] - 0.5)))
        if gx0 > gx1 or gy0 > gy1:
            continue
        tl0 = (x1v < x2v) if y1v == y2v else (y1v > y2v)
        tl1 = (x2v < x0v) if y2v == y0v else (y2v > y0v)
        tl2 = (x0v < x1v) if y0v == y1v else (y0v > y1v)
        for gx in range(gx0, gx1 + 1):
            cxv = origin[0] + (gx + 0.5) * spacing[0]
            for gy in range(gy0, gy1 + 1):
                cyv = origin[1] + (gy + 0.5) * spacing[1]
                w0 = (x2v - x1v) * (cyv - y1v) - (y2v - y1v) * (cxv - x1v)
                w1 = (x0v - x2v) * (cyv - y2v) - (y0v - y2v) * (cxv - x2v)
                w2 = (x1v - x0v) * (cyv - y0v) - (y1v - y0v) * (cxv - x0v)
                ok0 = tl0 if w0 == 0.0 else w0 > 0.0
                ok1 = tl1 if w1 == 0.0 else w1 > 0.0
                ok2 = tl2 if w2 == 0.0 else w2 > 0.0
                if not (ok0 and ok1 and ok2):
                    continue
                zc = (w0 * z0v + w1 * z1v + w2 * z2v) / area
                iz = int(np.floor((zc - origin[2]) / spacing[2] - 0.5)) + 1
                if iz < 0:
                    iz = 0
                elif iz > nz:
                    iz = nz
                marks[gx, gy, iz] += 1
    filled = np.empty((nx, ny, nz), dtype=np.bool_)
    for gx in range(nx):
        for gy in range(ny):
            parity = 0
            for gz in range(nz):
                parity += marks[gx, gy, gz]
                filled[gx, gy, gz] = (parity % 2) == 1
    return filled


def voxelize_parity(vertices, triangles, origin, spacing, shape):
    return _voxelize_core(
        np.ascontiguousarray(vertices, dtype=np.float64),
        np.ascontiguousarray(triangles, dtype=np.int64),
        np.ascontiguousarray(origin, dtype=np.float64),
        np.ascontiguousarray(spacing, dtype=np.float64),
        int(shape[0]), int(shape[1]), int(shape[2]),
    )


@njit(**_JIT)
def _apply_csr(indptr, indices, data, x):
    n, d = x.shape
    out = np.empty((len(indptr) - 1, d), dtype=x.dtype)
    for i in range(len(indptr) - 1):
        for c in range(d):
            out[i, c] = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            wij = data[k]
            j = indices[k]
            for c in range(d):
                out[i, c] += wij * x[j, c]
    return out


def make_linear_operator(matrix: np.ndarray, dtype=np.float32):
    rows, cols = np.nonzero(matrix)
    counts = np.bincount(rows, minlength=len(matrix))
    indptr = np.zeros(len(matrix) + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    order = np.argsort(rows, kind="stable")
    indices = cols[order].astype(np.int64)
    data64 = matrix[rows[order], cols[order]]
    cache = {}

    def apply(x: np.ndarray) -> np.ndarray:
        key = x.dtype.str
        if key not in cache:
            cache[key] = data64.astype(x.dtype)
        return _apply_csr(indptr, indices, cache[key], np.ascontiguousarray(x))

    return apply
