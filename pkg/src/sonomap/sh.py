"""Real spherical-harmonic direction encoding, hardcoded Cartesian polynomials.

Component ordering is l*(l+1)+m for l = 0..degree-1; a degree-d encoding has
d*d components. Inputs must be unit vectors (the polynomials assume it).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2A = 1.0925484305920792
C2B = 0.31539156525252005
C2C = 0.5462742152960396
C3A = 0.5900435899266435
C3B = 2.890611442640554
C3C = 0.4570457994644658
C3D = 0.3731763325901154
C3E = 1.445305721320277

MAX_DEGREE = 4


def sh_dim(degree: int) -> int:
    return degree * degree


def sh_basis(dirs: np.ndarray, degree: int = 4) -> np.ndarray:
    """Evaluate the real SH basis for unit directions (N, 3) -> (N, degree^2)."""
    if not 1 <= degree <= MAX_DEGREE:
        raise ContractError(f"sh degree must be in 1..{MAX_DEGREE}")
    dirs = np.asarray(dirs, dtype=np.float64)
    single = dirs.ndim == 1
    d = dirs.reshape(-1, 3)
    norms = np.linalg.norm(d, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ContractError("sh_encode requires unit directions (|norm - 1| <= 1e-6)")
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = np.empty((d.shape[0], sh_dim(degree)))
    out[:, 0] = C0
    if degree > 1:
        out[:, 1] = -C1 * y
        out[:, 2] = C1 * z
        out[:, 3] = -C1 * x
    if degree > 2:
        out[:, 4] = C2A * x * y
        out[:, 5] = -C2A * y * z
        out[:, 6] = C2B * (2.0 * z * z - x * x - y * y)
        out[:, 7] = -C2A * x * z
        out[:, 8] = C2C * (x * x - y * y)
    if degree > 3:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 9] = -C3A * y * (3.0 * xx - yy)
        out[:, 10] = C3B * x * y * z
        out[:, 11] = -C3C * y * (4.0 * zz - xx - yy)
        out[:, 12] = C3D * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[:, 13] = -C3C * x * (4.0 * zz - xx - yy)
        out[:, 14] = C3E * z * (xx - yy)
        out[:, 15] = -C3A * x * (xx - 3.0 * yy)
    return out[0] if single else out


def sh_basis_grad(dirs: np.ndarray, d_sh: np.ndarray, degree: int = 4) -> np.ndarray:
    """Chain d(loss)/d(sh components) back to d(loss)/d(direction)."""
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(d_sh, dtype=np.float64).reshape(d.shape[0], sh_dim(degree))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    gx = np.zeros_like(x)
    gy = np.zeros_like(y)
    gz = np.zeros_like(z)
    if degree > 1:
        gy += -C1 * g[:, 1]
        gz += C1 * g[:, 2]
        gx += -C1 * g[:, 3]
    if degree > 2:
        gx += C2A * y * g[:, 4] - 2.0 * C2B * x * g[:, 6] - C2A * z * g[:, 7] + 2.0 * C2C * x * g[:, 8]
        gy += C2A * x * g[:, 4] - C2A * z * g[:, 5] - 2.0 * C2B * y * g[:, 6] - 2.0 * C2C * y * g[:, 8]
        gz += -C2A * y * g[:, 5] + 4.0 * C2B * z * g[:, 6] - C2A * x * g[:, 7]
    if degree > 3:
        xx, yy, zz = x * x, y * y, z * z
        gx += (
            -6.0 * C3A * x * y * g[:, 9]
            + C3B * y * z * g[:, 10]
            + 2.0 * C3C * x * y * g[:, 11]
            - 6.0 * C3D * x * z * g[:, 12]
            - C3C * (4.0 * zz - 3.0 * xx - yy) * g[:, 13]
            + 2.0 * C3E * x * z * g[:, 14]
            - 3.0 * C3A * (xx - yy) * g[:, 15]
        )
        gy += (
            -3.0 * C3A * (xx - yy) * g[:, 9]
            + C3B * x * z * g[:, 10]
            - C3C * (4.0 * zz - xx - 3.0 * yy) * g[:, 11]
            - 6.0 * C3D * y * z * g[:, 12]
            + 2.0 * C3C * x * y * g[:, 13]
            - 2.0 * C3E * y * z * g[:, 14]
            + 6.0 * C3A * x * y * g[:, 15]
        )
        gz += (
            C3B * x * y * g[:, 10]
            - 8.0 * C3C * y * z * g[:, 11]
            + C3D * (6.0 * zz - 3.0 * xx - 3.0 * yy) * g[:, 12]
            - 8.0 * C3C * x * z * g[:, 13]
            + C3E * (xx - yy) * g[:, 14]
        )
    return np.stack([gx, gy, gz], axis=1)
