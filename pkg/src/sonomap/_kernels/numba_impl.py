"""Numba-compiled hot kernels (default backend).

Same contracts as numpy_impl; see that module for the shared table layout
and corner ordering. Forward encoding parallelizes over points (each point
writes only its own slots, so results are identical for any thread count);
the table-gradient scatter stays serial because rows collide.
"""

from __future__ import annotations

import numba
import numpy as np
from numba import njit, prange

BACKEND_NAME = "numba"


def set_num_threads(n: int) -> None:
    numba.set_num_threads(min(numba.config.NUMBA_NUM_THREADS, max(1, int(n))))


@njit(cache=True, inline="always")
def _row_for(i, j, k, level, offsets, res, hashed, n_h, p1, p2):
    if hashed[level]:
        h = np.uint64(i) ^ (np.uint64(j) * np.uint64(p1)) ^ (np.uint64(k) * np.uint64(p2))
        local = np.int64(h % np.uint64(n_h))
    else:
        r1 = res[level] + 1
        local = (i * r1 + j) * r1 + k
    return offsets[level] + local


@njit(cache=True, parallel=True)
def _encode_fwd(x01, tables, offsets, res, hashed, n_h, p1, p2, feat, corners, w8, frac):
    n = x01.shape[0]
    levels = res.shape[0]
    f = tables.shape[1]
    for p in prange(n):
        for l in range(levels):
            r = res[l]
            fr3 = np.empty(3, dtype=np.float64)
            cell = np.empty(3, dtype=np.int64)
            for a in range(3):
                s = x01[p, a] * r
                i = np.int64(np.floor(s))
                if i < 0:
                    i = 0
                if i > r - 1:
                    i = r - 1
                cell[a] = i
                fr3[a] = s - i
                frac[p, l, a] = fr3[a]
            for c in range(8):
                ox = c & 1
                oy = (c >> 1) & 1
                oz = (c >> 2) & 1
                row = _row_for(
                    cell[0] + ox, cell[1] + oy, cell[2] + oz, l, offsets, res, hashed, n_h, p1, p2
                )
                wx = fr3[0] if ox else 1.0 - fr3[0]
                wy = fr3[1] if oy else 1.0 - fr3[1]
                wz = fr3[2] if oz else 1.0 - fr3[2]
                w = wx * wy * wz
                corners[p, l, c] = row
                w8[p, l, c] = w
                for d in range(f):
                    feat[p, l * f + d] += w * np.float64(tables[row, d])


def encode_fwd(x01, tables, offsets, res, hashed, n_h, p1, p2):
    n = x01.shape[0]
    levels = res.shape[0]
    f = tables.shape[1]
    feat = np.zeros((n, levels * f), dtype=np.float64)
    corners = np.empty((n, levels, 8), dtype=np.int64)
    w8 = np.empty((n, levels, 8), dtype=np.float64)
    frac = np.empty((n, levels, 3), dtype=np.float64)
    _encode_fwd(
        x01,
        tables,
        np.asarray(offsets, dtype=np.int64),
        np.asarray(res, dtype=np.int64),
        np.asarray(hashed, dtype=np.uint8),
        np.uint64(n_h),
        np.uint64(p1),
        np.uint64(p2),
        feat,
        corners,
        w8,
        frac,
    )
    return feat.astype(tables.dtype), corners, w8, frac


@njit(cache=True)
def _encode_bwd_tables(dfeat, corners, w8, grad_tables):
    n = dfeat.shape[0]
    levels = corners.shape[1]
    f = grad_tables.shape[1]
    for p in range(n):
        for l in range(levels):
            for c in range(8):
                row = corners[p, l, c]
                w = w8[p, l, c]
                for d in range(f):
                    grad_tables[row, d] += w * np.float64(dfeat[p, l * f + d])


def encode_bwd_tables(dfeat, corners, w8, grad_tables):
    _encode_bwd_tables(np.ascontiguousarray(dfeat), corners, w8, grad_tables)


@njit(cache=True)
def _encode_bwd_points(dfeat, corners, w8, frac, res, tables, out):
    n = dfeat.shape[0]
    levels = corners.shape[1]
    f = tables.shape[1]
    for p in range(n):
        for l in range(levels):
            fx = frac[p, l, 0]
            fy = frac[p, l, 1]
            fz = frac[p, l, 2]
            r = np.float64(res[l])
            for c in range(8):
                ox = c & 1
                oy = (c >> 1) & 1
                oz = (c >> 2) & 1
                row = corners[p, l, c]
                s = 0.0
                for d in range(f):
                    s += np.float64(dfeat[p, l * f + d]) * np.float64(tables[row, d])
                wx = fx if ox else 1.0 - fx
                wy = fy if oy else 1.0 - fy
                wz = fz if oz else 1.0 - fz
                sx = 1.0 if ox else -1.0
                sy = 1.0 if oy else -1.0
                sz = 1.0 if oz else -1.0
                out[p, 0] += r * s * sx * wy * wz
                out[p, 1] += r * s * wx * sy * wz
                out[p, 2] += r * s * wx * wy * sz


def encode_bwd_points(dfeat, corners, w8, frac, res, tables):
    out = np.zeros((dfeat.shape[0], 3), dtype=np.float64)
    _encode_bwd_points(
        np.ascontiguousarray(dfeat), corners, w8, frac, np.asarray(res, dtype=np.int64), tables, out
    )
    return out


@njit(cache=True)
def _volume_sample(values, origin, spacing, pts, clamp, out, inside):
    nx, ny, nz = values.shape
    n = pts.shape[0]
    for p in range(n):
        gx = (pts[p, 0] - origin[0]) / spacing[0]
        gy = (pts[p, 1] - origin[1]) / spacing[1]
        gz = (pts[p, 2] - origin[2]) / spacing[2]
        ok = 0.0 <= gx <= nx - 1.0 and 0.0 <= gy <= ny - 1.0 and 0.0 <= gz <= nz - 1.0
        inside[p] = ok
        if not ok:
            if not clamp:
                out[p] = 0.0
                continue
            gx = min(max(gx, 0.0), nx - 1.0)
            gy = min(max(gy, 0.0), ny - 1.0)
            gz = min(max(gz, 0.0), nz - 1.0)
        ix = min(max(np.int64(np.floor(gx)), 0), nx - 2)
        iy = min(max(np.int64(np.floor(gy)), 0), ny - 2)
        iz = min(max(np.int64(np.floor(gz)), 0), nz - 2)
        fx = gx - ix
        fy = gy - iy
        fz = gz - iz
        acc = 0.0
        for c in range(8):
            ox = c & 1
            oy = (c >> 1) & 1
            oz = (c >> 2) & 1
            w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy) * (fz if oz else 1.0 - fz)
            acc += w * np.float64(values[ix + ox, iy + oy, iz + oz])
        out[p] = acc


def volume_sample(values, origin, spacing, pts, clamp):
    n = pts.shape[0]
    out = np.zeros(n, dtype=np.float64)
    inside = np.zeros(n, dtype=np.bool_)
    _volume_sample(
        values,
        np.asarray(origin, dtype=np.float64),
        np.asarray(spacing, dtype=np.float64),
        np.ascontiguousarray(pts, dtype=np.float64),
        clamp,
        out,
        inside,
    )
    return out, inside


@njit(cache=True, inline="always")
def _mix64(h):
    h ^= h >> np.uint64(33)
    h = h * np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    h = h * np.uint64(0xC4CEB9FE1A85EC53)
    h ^= h >> np.uint64(33)
    return h


@njit(cache=True, inline="always")
def _lattice_value(i, j, k, seed_mix):
    h = (
        np.uint64(i) * np.uint64(0x9E3779B1)
        ^ np.uint64(j) * np.uint64(0x85EBCA77)
        ^ np.uint64(k) * np.uint64(0xC2B2AE3D)
        ^ seed_mix
    )
    return np.float64(_mix64(h)) / 18446744073709551616.0


@njit(cache=True)
def _value_noise(pts, scale_mm, seed_mix, out):
    n = pts.shape[0]
    for p in range(n):
        acc = 0.0
        gx = pts[p, 0] / scale_mm + 1024.0
        gy = pts[p, 1] / scale_mm + 1024.0
        gz = pts[p, 2] / scale_mm + 1024.0
        ix = np.int64(np.floor(gx))
        iy = np.int64(np.floor(gy))
        iz = np.int64(np.floor(gz))
        fx = gx - ix
        fy = gy - iy
        fz = gz - iz
        for c in range(8):
            ox = c & 1
            oy = (c >> 1) & 1
            oz = (c >> 2) & 1
            w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy) * (fz if oz else 1.0 - fz)
            acc += w * _lattice_value(ix + ox, iy + oy, iz + oz, seed_mix)
        out[p] = acc
    return out


def value_noise(pts, scale_mm, seed):
    seed_mix = np.uint64((int(seed) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF)
    out = np.empty(pts.shape[0], dtype=np.float64)
    _value_noise(np.ascontiguousarray(pts, dtype=np.float64), float(scale_mm), seed_mix, out)
    return out
