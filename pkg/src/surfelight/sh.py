"""Degree-2 real spherical harmonics.

Coefficient ordering is (l, m) = (0,0), (1,-1), (1,0), (1,1), (2,-2), (2,-1),
(2,0), (2,1), (2,2) with the real basis used for irradiance environment maps
(no extra Condon-Shortley signs). Everything here is float64 and vectorized
over leading axes.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ContractViolation, InputDataError

NUM_COEFFS = 9
SH_DEGREE = 2

# Basis constants: Y00, band-1 and the three band-2 magnitudes.
Y00 = 0.5 / math.sqrt(math.pi)  # 0.282095
Y1 = math.sqrt(3.0 / (4.0 * math.pi))  # 0.488603
Y2_XY = 0.5 * math.sqrt(15.0 / math.pi)  # 1.092548
Y2_ZZ = 0.25 * math.sqrt(5.0 / math.pi)  # 0.315392
Y2_XX_YY = 0.25 * math.sqrt(15.0 / math.pi)  # 0.546274

# SH coefficients of the zonal lobe max(cos(theta), 0) for bands 0, 1, 2.
CLAMPED_COSINE_ZONAL = (
    math.sqrt(math.pi) / 2.0,  # 0.886227
    math.sqrt(math.pi / 3.0),  # 1.023327
    math.sqrt(5.0 * math.pi) / 8.0,  # 0.495416
)

# Quadratic-form constants of the irradiance matrix. Closed forms of the
# published 6-digit values 0.429043, 0.511664, 0.743125, 0.886227, 0.247708.
_A_HAT = (math.pi, 2.0 * math.pi / 3.0, math.pi / 4.0)
IRRADIANCE_C1 = _A_HAT[2] * Y2_XX_YY
IRRADIANCE_C2 = _A_HAT[1] * Y1 / 2.0
IRRADIANCE_C3 = _A_HAT[2] * Y2_ZZ * 3.0
IRRADIANCE_C4 = _A_HAT[0] * Y00
IRRADIANCE_C5 = _A_HAT[2] * Y2_ZZ

# Point reflection f(w) -> f(-w) flips the sign of odd bands.
REFLECTION_SIGNS = np.array([1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0, 1.0])

_UNIT_TOL = 1e-6


def _check_unit(dirs: np.ndarray, tol: float = _UNIT_TOL) -> None:
    norms = np.linalg.norm(dirs, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= tol):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ContractViolation(f"directions must be unit length (max |norm-1| = {worst:.3g})")


def eval_basis(dirs, check: bool = True) -> np.ndarray:
    """Evaluate the 9 basis functions at unit directions ``(..., 3)``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    if dirs.shape[-1] != 3:
        raise ContractViolation(f"directions must have trailing size 3, got {dirs.shape}")
    if check:
        _check_unit(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (NUM_COEFFS,))
    out[..., 0] = Y00
    out[..., 1] = Y1 * y
    out[..., 2] = Y1 * z
    out[..., 3] = Y1 * x
    out[..., 4] = Y2_XY * x * y
    out[..., 5] = Y2_XY * y * z
    out[..., 6] = Y2_ZZ * (3.0 * z * z - 1.0)
    out[..., 7] = Y2_XY * x * z
    out[..., 8] = Y2_XX_YY * (x * x - y * y)
    return out


def evaluate(coeffs, dirs, check: bool = True) -> np.ndarray:
    """Reconstruct f(w) = sum_i coeffs_i Y_i(w).

    ``coeffs`` has shape ``(..., 9)`` and ``dirs`` ``(N, 3)``; the result is
    ``(..., N)``.
    """
    basis = eval_basis(dirs, check=check)
    return np.asarray(coeffs, dtype=np.float64) @ basis.T


def sh_dot(a, b) -> np.ndarray:
    """Coefficient inner product, equal to the integral of f_a * f_b over the sphere."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != NUM_COEFFS or b.shape[-1] != NUM_COEFFS:
        raise ContractViolation("sh_dot expects 9 coefficients on the last axis")
    return np.sum(a * b, axis=-1)


def reflect(coeffs) -> np.ndarray:
    """Coefficients of f(-w)."""
    return np.asarray(coeffs, dtype=np.float64) * REFLECTION_SIGNS


# ---------------------------------------------------------------------------
# Environment maps
# ---------------------------------------------------------------------------


def envmap_directions(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center directions ``(H, W, 3)`` and per-row solid angle ``(H,)``.

    Row 0 is the top of the sphere (theta = 0, +z); column 0 is phi = 0 (+x)
    and phi grows toward +y.
    """
    theta_edges = np.linspace(0.0, math.pi, height + 1)
    theta = 0.5 * (theta_edges[:-1] + theta_edges[1:])
    phi = (np.arange(width) + 0.5) * (2.0 * math.pi / width)
    st = np.sin(theta)[:, None]
    dirs = np.stack(
        [st * np.cos(phi)[None, :], st * np.sin(phi)[None, :], np.broadcast_to(np.cos(theta)[:, None], (height, width))],
        axis=-1,
    )
    # Exact area of each latitude band, split evenly across its pixels.
    solid_angle = (np.cos(theta_edges[:-1]) - np.cos(theta_edges[1:])) * (2.0 * math.pi / width)
    return dirs, solid_angle


def project_envmap(envmap) -> np.ndarray:
    """Project an equirectangular ``(H, W, 3)`` radiance map onto SH, returning ``(3, 9)``."""
    env = np.asarray(envmap, dtype=np.float64)
    if env.ndim == 2:
        env = env[..., None]
    if env.ndim != 3:
        raise ContractViolation(f"envmap must be (H, W, C), got shape {env.shape}")
    h, w, _ = env.shape
    if h < 2 or w < 4:
        raise ContractViolation(f"envmap must be at least 2x4 pixels, got {h}x{w}")
    if np.isnan(env).any() or np.isneginf(env).any():
        raise InputDataError("envmap contains NaN or -inf pixels")
    if (env < 0).any():
        raise InputDataError("envmap contains negative radiance")
    return np.einsum("hwc,hwi->ci", env, pixel_basis_integrals(h, w))


def pixel_basis_integrals(height: int, width: int) -> np.ndarray:
    """Exact integral of every basis function over every pixel, ``(H, W, 9)``.

    The basis is a polynomial in (x, y, z), so each pixel integral separates
    into closed-form theta and phi factors. Summing over pixels therefore
    reproduces the sphere integrals exactly (constant maps project to pure DC).
    """
    u = np.cos(np.linspace(0.0, math.pi, height + 1))  # u = cos(theta), decreasing
    phi = np.linspace(0.0, 2.0 * math.pi, width + 1)

    def band(f):  # integral over each row of f(u) du, rows run top to bottom
        v = f(u)
        return v[:-1] - v[1:]

    sq = np.sqrt(np.maximum(0.0, 1.0 - u * u))
    a0 = u[:-1] - u[1:]
    az = band(lambda t: 0.5 * t * t)
    azz = band(lambda t: t**3 / 3.0)
    a_s = (u[:-1] * sq[:-1] + np.arcsin(u[:-1]) - u[1:] * sq[1:] - np.arcsin(u[1:])) / 2.0
    ass = a0 - azz
    asz = -(sq[:-1] ** 3 - sq[1:] ** 3) / 3.0

    def col(f):
        v = f(phi)
        return v[1:] - v[:-1]

    p0 = np.diff(phi)
    pc = col(np.sin)
    ps = col(lambda t: -np.cos(t))
    pcs = col(lambda t: 0.5 * np.sin(t) ** 2)
    pcc_minus_pss = col(lambda t: 0.5 * np.sin(2.0 * t))

    def outer(a, p):
        return a[:, None] * p[None, :]

    out = np.empty((height, width, NUM_COEFFS))
    out[..., 0] = Y00 * outer(a0, p0)
    out[..., 1] = Y1 * outer(a_s, ps)
    out[..., 2] = Y1 * outer(az, p0)
    out[..., 3] = Y1 * outer(a_s, pc)
    out[..., 4] = Y2_XY * outer(ass, pcs)
    out[..., 5] = Y2_XY * outer(asz, ps)
    out[..., 6] = Y2_ZZ * outer(3.0 * azz - a0, p0)
    out[..., 7] = Y2_XY * outer(asz, pc)
    out[..., 8] = Y2_XX_YY * outer(ass, pcc_minus_pss)
    return out


def render_envmap(coeffs, height: int = 64, width: int = 128) -> np.ndarray:
    """Evaluate ``(C, 9)`` coefficients on an equirectangular grid, ``(H, W, C)``."""
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))
    dirs, _ = envmap_directions(height, width)
    return eval_basis(dirs, check=False) @ coeffs.T


# ---------------------------------------------------------------------------
# Rotation
# ---------------------------------------------------------------------------

# Band-1 basis is (y, z, x) * Y1.
_BAND1_PERM = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])


def _band2_basis(dirs: np.ndarray) -> np.ndarray:
    return eval_basis(dirs, check=False)[..., 4:9]


# Five generic unit directions whose band-2 values form an invertible 5x5 system.
_B2_DIRS = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
    ]
) / np.array([1.0, 1.0, math.sqrt(2.0), math.sqrt(2.0), math.sqrt(2.0)])[:, None]
_B2_INV = np.linalg.inv(_band2_basis(_B2_DIRS))


def _check_rotation(rot: np.ndarray, tol: float = 1e-6) -> None:
    eye = np.eye(3)
    gram = np.swapaxes(rot, -1, -2) @ rot
    if not np.all(np.abs(gram - eye) <= tol):
        raise ContractViolation("rotation must be orthonormal")
    if not np.all(np.linalg.det(rot) > 0.0):
        raise ContractViolation("rotation must have determinant +1")


def sh_rotation_matrix(rot) -> np.ndarray:
    """Block-diagonal ``(..., 9, 9)`` matrix mapping coefficients of f to those of f(R^T w)."""
    rot = np.asarray(rot, dtype=np.float64)
    _check_rotation(rot)
    batch = rot.shape[:-2]
    out = np.zeros(batch + (NUM_COEFFS, NUM_COEFFS))
    out[..., 0, 0] = 1.0
    out[..., 1:4, 1:4] = _BAND1_PERM @ rot @ _BAND1_PERM.T
    # Band-2: sample f' at fixed directions and solve back for coefficients.
    rotated = np.einsum("...ji,nj->...ni", rot, _B2_DIRS)  # R^T applied to each dir
    out[..., 4:9, 4:9] = _B2_INV @ _band2_basis(rotated)
    return out


def rotate_sh(coeffs, rot) -> np.ndarray:
    """Rotate coefficients so the represented function becomes f(R^T w)."""
    mat = sh_rotation_matrix(rot)
    return np.einsum("...ij,...j->...i", mat, np.asarray(coeffs, dtype=np.float64))


def frame_from_z(normals) -> np.ndarray:
    """Rotations ``(..., 3, 3)`` whose third column is the given unit normal."""
    n = np.asarray(normals, dtype=np.float64)
    helper = np.where(np.abs(n[..., 2:3]) < 0.9, np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    a = np.cross(helper, n)
    a /= np.linalg.norm(a, axis=-1, keepdims=True)
    b = np.cross(n, a)
    return np.stack([a, b, n], axis=-1)


def zonal_coeffs(zonal) -> np.ndarray:
    """Embed per-band zonal values (z0, z1, z2) into the (l, 0) slots."""
    out = np.zeros(NUM_COEFFS)
    out[0], out[2], out[6] = zonal
    return out


def clamped_cosine_coeffs(normals) -> np.ndarray:
    """SH coefficients of max(n . w, 0) for unit normals ``(..., 3)``."""
    n = np.asarray(normals, dtype=np.float64)
    _check_unit(n)
    base = zonal_coeffs(CLAMPED_COSINE_ZONAL)
    return rotate_sh(np.broadcast_to(base, n.shape[:-1] + (NUM_COEFFS,)), frame_from_z(n))


# ---------------------------------------------------------------------------
# Irradiance quadratic form
# ---------------------------------------------------------------------------


def irradiance_matrix(light) -> np.ndarray:
    """Symmetric 4x4 matrix M with E(n) = [n, 1]^T M [n, 1] for ``(..., 9)`` light."""
    L = np.asarray(light, dtype=np.float64)
    if L.shape[-1] != NUM_COEFFS:
        raise ContractViolation("irradiance_matrix expects 9 coefficients")
    c1, c2, c3, c4, c5 = IRRADIANCE_C1, IRRADIANCE_C2, IRRADIANCE_C3, IRRADIANCE_C4, IRRADIANCE_C5
    L00, L1m1, L10, L11, L2m2, L2m1, L20, L21, L22 = np.moveaxis(L, -1, 0)
    M = np.empty(L.shape[:-1] + (4, 4))
    M[..., 0, 0] = c1 * L22
    M[..., 0, 1] = M[..., 1, 0] = c1 * L2m2
    M[..., 0, 2] = M[..., 2, 0] = c1 * L21
    M[..., 0, 3] = M[..., 3, 0] = c2 * L11
    M[..., 1, 1] = -c1 * L22
    M[..., 1, 2] = M[..., 2, 1] = c1 * L2m1
    M[..., 1, 3] = M[..., 3, 1] = c2 * L1m1
    M[..., 2, 2] = c3 * L20
    M[..., 2, 3] = M[..., 3, 2] = c2 * L10
    M[..., 3, 3] = c4 * L00 - c5 * L20
    return M


def irradiance(light, normals) -> np.ndarray:
    """E(n) via the quadratic form; broadcasts ``light (..., 9)`` against ``normals (..., 3)``."""
    n = np.asarray(normals, dtype=np.float64)
    nt = np.concatenate([n, np.ones(n.shape[:-1] + (1,))], axis=-1)
    M = irradiance_matrix(light)
    return np.einsum("...i,...ij,...j->...", nt, M, nt)


def irradiance_basis(normals) -> np.ndarray:
    """Gradient of E(n) w.r.t. the light coefficients, ``(..., 9)``.

    E(n) = light . irradiance_basis(n); this equals clamped_cosine_coeffs(n).
    """
    n = np.asarray(normals, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    c1, c2, c3, c4, c5 = IRRADIANCE_C1, IRRADIANCE_C2, IRRADIANCE_C3, IRRADIANCE_C4, IRRADIANCE_C5
    out = np.empty(n.shape[:-1] + (NUM_COEFFS,))
    out[..., 0] = c4
    out[..., 1] = 2 * c2 * y
    out[..., 2] = 2 * c2 * z
    out[..., 3] = 2 * c2 * x
    out[..., 4] = 2 * c1 * x * y
    out[..., 5] = 2 * c1 * y * z
    out[..., 6] = c3 * z * z - c5
    out[..., 7] = 2 * c1 * x * z
    out[..., 8] = c1 * (x * x - y * y)
    return out


def irradiance_normal_grad(light, normals) -> np.ndarray:
    """dE/dn for the quadratic form, ``(..., 3)``: twice the first rows of M n~."""
    n = np.asarray(normals, dtype=np.float64)
    nt = np.concatenate([n, np.ones(n.shape[:-1] + (1,))], axis=-1)
    M = irradiance_matrix(light)
    return 2.0 * np.einsum("...ij,...j->...i", M, nt)[..., :3]
