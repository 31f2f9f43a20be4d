"""Pure-numpy implementations of the hot kernels.

Reference semantics for the numba backend; selected via
``MESHREG_BACKEND=numpy``. Convolutions go through im2col + GEMM, the
geometry kernels loop over triangles and vectorize over pixels/voxels.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


# --- 3x3 same-padding convolution (channels-first, pre-padded input) ---

def conv3x3_forward(xp: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """xp: (cin, H+2, W+2) zero-padded; w: (cout, cin, 3, 3); b: (cout,).
    Returns (cout, H, W)."""
    cin, hp, wp = xp.shape
    h, wd = hp - 2, wp - 2
    cout = w.shape[0]
    col = _im2col(xp, h, wd)
    out = (w.reshape(cout, cin * 9) @ col).reshape(cout, h, wd)
    out += b[:, None, None]
    return out


def conv3x3_backward(xp: np.ndarray, w: np.ndarray, go: np.ndarray):
    """Returns (gxp, gw, gb); gxp has the padded shape of xp."""
    cin, hp, wp = xp.shape
    h, wd = hp - 2, wp - 2
    cout = w.shape[0]
    go2 = go.reshape(cout, h * wd)
    col = _im2col(xp, h, wd)
    gw = (go2 @ col.T).reshape(w.shape)
    gb = go2.sum(axis=1)
    gcol = w.reshape(cout, cin * 9).T @ go2
    gcol = gcol.reshape(cin, 3, 3, h, wd)
    gxp = np.zeros_like(xp)
    for ky in range(3):
        for kx in range(3):
            gxp[:, ky:ky + h, kx:kx + wd] += gcol[:, ky, kx]
    return gxp, gw, gb


def _im2col(xp: np.ndarray, h: int, wd: int) -> np.ndarray:
    cin = xp.shape[0]
    col = np.empty((cin, 3, 3, h, wd), dtype=xp.dtype)
    for ky in range(3):
        for kx in range(3):
            col[:, ky, kx] = xp[:, ky:ky + h, kx:kx + wd]
    return col.reshape(cin * 9, h * wd)


# --- z-buffered triangle rasterization ---

def _orient_and_topleft(v: np.ndarray, tri: np.ndarray):
    """Enforce positive orientation; return vertex indices + top-left flags."""
    i0, i1, i2 = tri
    area = _orient2d(v[i0], v[i1], v[i2])
    if area < 0:
        i1, i2 = i2, i1
        area = -area
    return i0, i1, i2, area


def _orient2d(a, b, c):
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _is_top_left(a, b):
    # winding is normalized so the interior lies on the non-negative side
    if a[1] == b[1]:
        return a[0] < b[0]
    return a[1] > b[1]


def rasterize(points: np.ndarray, depth: np.ndarray, triangles: np.ndarray,
              width: int, height: int):
    """Coverage rule: pixel center (integer coords) strictly inside, with
    top-left tie-break on edges. Returns (tri_idx int32 (H,W), -1 empty;
    bary float64 (H,W,3) in input-vertex order; zbuf float64 (H,W))."""
    tri_idx = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    zbuf = np.full((height, width), np.inf, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    dep = np.asarray(depth, dtype=np.float64)
    for t, tri in enumerate(triangles):
        i0, i1, i2, area = _orient_and_topleft(pts, tri)
        if area == 0.0:
            continue
        swapped = i1 != tri[1]
        v0, v1, v2 = pts[i0], pts[i1], pts[i2]
        xmin = max(0, int(np.ceil(min(v0[0], v1[0], v2[0]))))
        xmax = min(width - 1, int(np.floor(max(v0[0], v1[0], v2[0]))))
        ymin = max(0, int(np.ceil(min(v0[1], v1[1], v2[1]))))
        ymax = min(height - 1, int(np.floor(max(v0[1], v1[1], v2[1]))))
        if xmin > xmax or ymin > ymax:
            continue
        gx, gy = np.meshgrid(np.arange(xmin, xmax + 1, dtype=np.float64),
                             np.arange(ymin, ymax + 1, dtype=np.float64))
        w0 = (v2[0] - v1[0]) * (gy - v1[1]) - (v2[1] - v1[1]) * (gx - v1[0])
        w1 = (v0[0] - v2[0]) * (gy - v2[1]) - (v0[1] - v2[1]) * (gx - v2[0])
        w2 = (v1[0] - v0[0]) * (gy - v0[1]) - (v1[1] - v0[1]) * (gx - v0[0])
        ok0 = np.where(w0 == 0.0, _is_top_left(v1, v2), w0 > 0.0)
        ok1 = np.where(w1 == 0.0, _is_top_left(v2, v0), w1 > 0.0)
        ok2 = np.where(w2 == 0.0, _is_top_left(v0, v1), w2 > 0.0)
        inside = ok0 & ok1 & ok2
        if not inside.any():
            continue
        l0, l1, l2 = w0 / area, w1 / area, w2 / area
        z = l0 * dep[i0] + l1 * dep[i1] + l2 * dep[i2]
        sub = zbuf[ymin:ymax + 1, xmin:xmax + 1]
        win = inside & (z < sub)
        sub[win] = z[win]
        tri_idx[ymin:ymax + 1, xmin:xmax + 1][win] = t
        bsub = bary[ymin:ymax + 1, xmin:xmax + 1]
        if swapped:
            l1, l2 = l2, l1
        bsub[win, 0] = l0[win]
        bsub[win, 1] = l1[win]
        bsub[win, 2] = l2[win]
    return tri_idx, bary, zbuf


# --- DRR ray marching ---

def drr_accumulate(volume: np.ndarray, origin: np.ndarray, spacing: np.ndarray,
                   ray_origins: np.ndarray, ray_dir: np.ndarray,
                   t0: float, n_steps: int, step: float) -> np.ndarray:
    """Midpoint-rule line integrals with trilinear sampling, zero outside.
    volume is indexed (ix, iy, iz), cell centers at origin + (i+0.5)*spacing."""
    npix = len(ray_origins)
    acc = np.zeros(npix, dtype=np.float64)
    for k in range(n_steps):
        t = t0 + (k + 0.5) * step
        pos = ray_origins + t * ray_dir
        acc += trilinear(volume, origin, spacing, pos)
    return acc * step


def trilinear(volume: np.ndarray, origin: np.ndarray, spacing: np.ndarray,
              pos: np.ndarray) -> np.ndarray:
    u = (pos - origin) / spacing - 0.5
    i0 = np.floor(u).astype(np.int64)
    f = u - i0
    out = np.zeros(len(pos), dtype=np.float64)
    nx, ny, nz = volume.shape
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        ix = i0[:, 0] + dx
        okx = (ix >= 0) & (ix < nx)
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            iy = i0[:, 1] + dy
            oky = okx & (iy >= 0) & (iy < ny)
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                iz = i0[:, 2] + dz
                ok = oky & (iz >= 0) & (iz < nz)
                if not ok.any():
                    continue
                out[ok] += (wx * wy * wz)[ok] * volume[ix[ok], iy[ok], iz[ok]]
    return out


# --- parity voxelization of closed meshes ---

def voxelize_parity(vertices: np.ndarray, triangles: np.ndarray,
                    origin: np.ndarray, spacing: np.ndarray,
                    shape: tuple[int, int, int]) -> np.ndarray:
    """Point-in-mesh test on voxel centers by z-column crossing parity.
    Returns bool (nx, ny, nz)."""
    nx, ny, nz = shape
    marks = np.zeros((nx, ny, nz + 1), dtype=np.int64)
    v = np.asarray(vertices, dtype=np.float64)
    cx = origin[0] + (np.arange(nx) + 0.5) * spacing[0]
    cy = origin[1] + (np.arange(ny) + 0.5) * spacing[1]
    for tri in triangles:
        i0, i1, i2, area = _orient_and_topleft(v[:, :2], tri)
        if area == 0.0:
            continue
        v0, v1, v2 = v[i0], v[i1], v[i2]
        x0 = max(0, int(np.ceil((min(v0[0], v1[0], v2[0]) - origin[0]) / spacing[0] - 0.5)))
        x1 = min(nx - 1, int(np.floor((max(v0[0], v1[0], v2[0]) - origin[0]) / spacing[0] - 0.5)))
        y0 = max(0, int(np.ceil((min(v0[1], v1[1], v2[1]) - origin[1]) / spacing[1] - 0.5)))
        y1 = min(ny - 1, int(np.floor((max(v0[1], v1[1], v2[1]) - origin[1]) / spacing[1] - 0.5)))
        if x0 > x1 or y0 > y1:
            continue
        gx, gy = np.meshgrid(cx[x0:x1 + 1], cy[y0:y1 + 1], indexing="ij")
        w0 = (v2[0] - v1[0]) * (gy - v1[1]) - (v2[1] - v1[1]) * (gx - v1[0])
        w1 = (v0[0] - v2[0]) * (gy - v2[1]) - (v0[1] - v2[1]) * (gx - v2[0])
        w2 = (v1[0] - v0[0]) * (gy - v0[1]) - (v1[1] - v0[1]) * (gx - v0[0])
        ok0 = np.where(w0 == 0.0, _is_top_left(v1[:2], v2[:2]), w0 > 0.0)
        ok1 = np.where(w1 == 0.0, _is_top_left(v2[:2], v0[:2]), w1 > 0.0)
        ok2 = np.where(w2 == 0.0, _is_top_left(v0[:2], v1[:2]), w2 > 0.0)
        inside = ok0 & ok1 & ok2
        if not inside.any():
            continue
        zc = (w0 * v0[2] + w1 * v1[2] + w2 * v2[2]) / area
        iz = np.floor((zc - origin[2]) / spacing[2] - 0.5).astype(np.int64) + 1
        iz = np.clip(iz, 0, nz)
        ii, jj = np.nonzero(inside)
        np.add.at(marks, (ii + x0, jj + y0, iz[inside]), 1)
    filled = np.cumsum(marks[:, :, :nz], axis=2) % 2
    return filled.astype(bool)


# --- sparse row-wise linear operators (graph propagation, Laplacians) ---

def make_linear_operator(matrix: np.ndarray, dtype=np.float32):
    """Returns apply(X) computing matrix @ X via CSR segment sums; the
    dense matrix is not retained."""
    rows, cols = np.nonzero(matrix)
    n = len(matrix)
    counts = np.bincount(rows, minlength=n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    order = np.argsort(rows, kind="stable")
    indices = cols[order].astype(np.int64)
    data64 = matrix[rows[order], cols[order]]
    has_empty_rows = bool((counts == 0).any())

    def apply(x: np.ndarray) -> np.ndarray:
        if len(indices) == 0:
            return np.zeros_like(x)
        contrib = data64.astype(x.dtype)[:, None] * x[indices]
        if not has_empty_rows:
            # exact left-fold per row, same order as the numba loop
            return np.add.reduceat(contrib, indptr[:-1], axis=0)
        out = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
        for i in range(n):
            lo, hi = indptr[i], indptr[i + 1]
            if hi > lo:
                out[i] = contrib[lo:hi].sum(axis=0)
        return out

    return apply
