"""Pure-numpy reference implementation of the hot kernels.

Selected with SONOMAP_BACKEND=numpy. Semantics match numba_impl exactly;
corner accumulation is done corner-by-corner so the floating-point order
matches the loop kernels.

Shared layout: the L per-level tables are concatenated into one
(total_rows, f) array. ``offsets[l]`` is the first row of level l,
``res[l]`` the per-axis cell count N_l, ``hashed[l]`` nonzero when the
level indexes through the spatial hash instead of dense (N_l+1)^3 storage.
Corner c of a cell uses offsets (c & 1, (c >> 1) & 1, (c >> 2) & 1) on
(i, j, k).
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


def set_num_threads(n: int) -> None:  # single-threaded by construction
    return None


def _cell_and_frac(x01, res_l):
    s = x01 * res_l
    i = np.floor(s).astype(np.int64)
    np.clip(i, 0, res_l - 1, out=i)
    frac = s - i
    return i, frac


def _corner_rows(i, j, k, level, offsets, res, hashed, n_h, p1, p2):
    """Table rows for integer vertex coords of one level (vectorized)."""
    if hashed[level]:
        h = (
            i.astype(np.uint64)
            ^ (j.astype(np.uint64) * np.uint64(p1))
            ^ (k.astype(np.uint64) * np.uint64(p2))
        )
        local = (h % np.uint64(n_h)).astype(np.int64)
    else:
        r1 = res[level] + 1
        local = (i * r1 + j) * r1 + k
    return offsets[level] + local


def encode_fwd(x01, tables, offsets, res, hashed, n_h, p1, p2):
    """Multi-level trilinear hash encoding.

    x01: (N, 3) float64 coordinates normalized to the unit cube.
    Returns (feat (N, L*f), corners (N, L, 8) int64, w8 (N, L, 8) f64,
    frac (N, L, 3) f64). Weights are computed in float64; features
    accumulate in float64 and are cast to the table dtype.
    """
    n = x01.shape[0]
    levels = res.shape[0]
    f = tables.shape[1]
    feat = np.zeros((n, levels * f), dtype=np.float64)
    corners = np.empty((n, levels, 8), dtype=np.int64)
    w8 = np.empty((n, levels, 8), dtype=np.float64)
    frac = np.empty((n, levels, 3), dtype=np.float64)
    for l in range(levels):
        ix, fx = _cell_and_frac(x01[:, 0], res[l])
        iy, fy = _cell_and_frac(x01[:, 1], res[l])
        iz, fz = _cell_and_frac(x01[:, 2], res[l])
        frac[:, l, 0], frac[:, l, 1], frac[:, l, 2] = fx, fy, fz
        for c in range(8):
            ox, oy, oz = c & 1, (c >> 1) & 1, (c >> 2) & 1
            rows = _corner_rows(ix + ox, iy + oy, iz + oz, l, offsets, res, hashed, n_h, p1, p2)
            w = (
                (fx if ox else 1.0 - fx)
                * (fy if oy else 1.0 - fy)
                * (fz if oz else 1.0 - fz)
            )
            corners[:, l, c] = rows
            w8[:, l, c] = w
            feat[:, l * f : (l + 1) * f] += w[:, None] * tables[rows].astype(np.float64)
    return feat.astype(tables.dtype), corners, w8, frac


def encode_bwd_tables(dfeat, corners, w8, grad_tables):
    """Scatter-add d(loss)/d(table rows); grad_tables is modified in place."""
    n, lf = dfeat.shape
    levels = corners.shape[1]
    f = lf // levels
    total, _ = grad_tables.shape
    dfeat = dfeat.reshape(n, levels, 1, f).astype(np.float64)
    contrib = (w8[..., None] * dfeat).reshape(-1, f)  # (N*L*8, f)
    rows = corners.reshape(-1)
    for d in range(f):
        grad_tables[:, d] += np.bincount(rows, weights=contrib[:, d], minlength=total).astype(
            grad_tables.dtype
        )


def encode_bwd_points(dfeat, corners, w8, frac, res, tables):
    """d(loss)/d(x01) through the trilinear weights. Returns (N, 3) f64."""
    n, lf = dfeat.shape
    levels = corners.shape[1]
    f = lf // levels
    out = np.zeros((n, 3), dtype=np.float64)
    dfeat = dfeat.astype(np.float64)
    for l in range(levels):
        fx = frac[:, l, 0]
        fy = frac[:, l, 1]
        fz = frac[:, l, 2]
        dl = dfeat[:, l * f : (l + 1) * f]
        for c in range(8):
            ox, oy, oz = c & 1, (c >> 1) & 1, (c >> 2) & 1
            s = np.einsum("nf,nf->n", dl, tables[corners[:, l, c]].astype(np.float64))
            wx = fx if ox else 1.0 - fx
            wy = fy if oy else 1.0 - fy
            wz = fz if oz else 1.0 - fz
            sx = 1.0 if ox else -1.0
            sy = 1.0 if oy else -1.0
            sz = 1.0 if oz else -1.0
            out[:, 0] += res[l] * s * sx * wy * wz
            out[:, 1] += res[l] * s * wx * sy * wz
            out[:, 2] += res[l] * s * wx * wy * sz
    return out


def volume_sample(values, origin, spacing, pts, clamp):
    """Trilinear sampling of a (nx, ny, nz) voxel volume at world points (mm).

    Returns (samples (N,) f64, inside (N,) bool). With clamp=False,
    out-of-bounds samples are returned as 0 with inside=False; callers
    decide whether that is an error.
    """
    g = (pts - origin[None, :]) / spacing[None, :]
    nx, ny, nz = values.shape
    dims = np.array([nx, ny, nz], dtype=np.float64)
    inside = np.all((g >= 0.0) & (g <= dims[None, :] - 1.0), axis=1)
    gq = np.clip(g, 0.0, dims[None, :] - 1.0) if clamp else np.where(inside[:, None], g, 0.0)
    i = np.minimum(np.floor(gq).astype(np.int64), np.array([nx - 2, ny - 2, nz - 2]))
    np.clip(i, 0, None, out=i)
    fr = gq - i
    out = np.zeros(pts.shape[0], dtype=np.float64)
    v = values.astype(np.float64)
    for c in range(8):
        ox, oy, oz = c & 1, (c >> 1) & 1, (c >> 2) & 1
        w = (
            (fr[:, 0] if ox else 1.0 - fr[:, 0])
            * (fr[:, 1] if oy else 1.0 - fr[:, 1])
            * (fr[:, 2] if oz else 1.0 - fr[:, 2])
        )
        out += w * v[i[:, 0] + ox, i[:, 1] + oy, i[:, 2] + oz]
    if not clamp:
        out[~inside] = 0.0
    return out, inside


_MIX1 = np.uint64(0xFF51AFD7ED558CCD)
_MIX2 = np.uint64(0xC4CEB9FE1A85EC53)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _mix64(h):
    h = np.asarray(h, dtype=np.uint64)
    h ^= h >> np.uint64(33)
    h = h * _MIX1
    h ^= h >> np.uint64(33)
    h = h * _MIX2
    h ^= h >> np.uint64(33)
    return h


def _lattice_value(i, j, k, seed):
    seed_mix = np.uint64((int(seed) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF)
    h = (
        np.asarray(i).astype(np.uint64) * np.uint64(0x9E3779B1)
        ^ np.asarray(j).astype(np.uint64) * np.uint64(0x85EBCA77)
        ^ np.asarray(k).astype(np.uint64) * np.uint64(0xC2B2AE3D)
        ^ seed_mix
    )
    return _mix64(h).astype(np.float64) / 18446744073709551616.0  # 2**64


def value_noise(pts, scale_mm, seed):
    """Deterministic trilinear value noise over world coordinates, in [0, 1)."""
    g = pts / scale_mm + 1024.0  # shift keeps lattice coords positive
    i = np.floor(g).astype(np.int64)
    fr = g - i
    out = np.zeros(pts.shape[0], dtype=np.float64)
    for c in range(8):
        ox, oy, oz = c & 1, (c >> 1) & 1, (c >> 2) & 1
        w = (
            (fr[:, 0] if ox else 1.0 - fr[:, 0])
            * (fr[:, 1] if oy else 1.0 - fr[:, 1])
            * (fr[:, 2] if oz else 1.0 - fr[:, 2])
        )
        out += w * _lattice_value(i[:, 0] + ox, i[:, 1] + oy, i[:, 2] + oz, seed)
    return out
