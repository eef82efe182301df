"""Real spherical harmonics basis, degrees 0..3, in the splatting convention.

Coefficient ordering per degree l is m = -l..l, flattened degree-major, so a
full degree-3 set has 16 coefficients per channel. Colors decode as
``clip(0.5 + basis . coeffs, 0, 1)``.
"""

from __future__ import annotations

import numpy as np

from .errors import InvariantViolation, ShapeMismatch

MAX_DEGREE = 3

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the real SH basis at unit directions.

    dirs: (..., 3) unit vectors. Returns (..., (degree+1)^2), float64.
    """
    if not 0 <= degree <= MAX_DEGREE:
        raise InvariantViolation(f"SH degree {degree} outside [0, {MAX_DEGREE}]")
    dirs = np.asarray(dirs, dtype=np.float64)
    if dirs.shape[-1] != 3:
        raise ShapeMismatch(f"directions must be (..., 3), got {dirs.shape}")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]

    out = np.empty(dirs.shape[:-1] + (num_coeffs(degree),), dtype=np.float64)
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[..., 4] = SH_C2[0] * xy
        out[..., 5] = SH_C2[1] * yz
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * xz
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * xy * z
        out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def eval_sh(coeffs: np.ndarray, direction: np.ndarray, degree: int) -> np.ndarray:
    """Decode one SH color: clip(0.5 + sum_{l<=degree} c_lm Y_lm(dir), 0, 1).

    coeffs: (K, 3) with K >= (degree+1)^2; direction: unit 3-vector.
    """
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (3,):
        raise ShapeMismatch(f"direction must be a 3-vector, got {direction.shape}")
    norm = float(np.linalg.norm(direction))
    if abs(norm - 1.0) > 1e-6:
        raise InvariantViolation(f"direction norm {norm} not within 1e-6 of 1")
    coeffs = np.asarray(coeffs, dtype=np.float64)
    k = num_coeffs(degree)
    if coeffs.ndim != 2 or coeffs.shape[0] < k or coeffs.shape[1] != 3:
        raise ShapeMismatch(f"coeffs must be (>= {k}, 3), got {coeffs.shape}")
    basis = sh_basis(direction, degree)
    return np.clip(0.5 + basis @ coeffs[:k], 0.0, 1.0)
