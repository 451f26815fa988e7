"""Per-surfel diffuse radiance under the unshadowed and shadowed models.

No explicit 1/pi appears: the learned light absorbs it, so a constant unit
environment produces irradiance pi.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rasterizer, sh
from .errors import ContractViolation
from .scene import Camera, Surfels, oriented_normal, oriented_transfer, quat_to_rotmat_vjp

REC709_LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass
class SurfelShading:
    """Per-surfel shading terms for one (light, camera) pair."""

    normal: np.ndarray  # oriented toward the camera, (K, 3)
    flipped: np.ndarray  # (K,)
    transfer: np.ndarray  # d_k, point-reflected where flipped, (K, 9)
    albedo: np.ndarray  # (K, 3)
    irradiance_unshadowed: np.ndarray  # (K, 3)
    irradiance_shadowed: np.ndarray  # (K, 3)

    @property
    def radiance_unshadowed(self) -> np.ndarray:
        return self.albedo * self.irradiance_unshadowed

    @property
    def radiance_shadowed(self) -> np.ndarray:
        return self.albedo * self.irradiance_shadowed


def shade(surfels: Surfels, light, cam: Camera) -> SurfelShading:
    light = np.asarray(light, dtype=np.float64)
    if light.shape != (3, sh.NUM_COEFFS):
        raise ContractViolation(f"light must be (3, 9), got {light.shape}")
    n, flipped = oriented_normal(surfels, cam)
    d = oriented_transfer(surfels, flipped)
    e_u = sh.irradiance(light[None, :, :], n[:, None, :])  # (K, 3)
    e_s = d @ light.T
    return SurfelShading(n, flipped, d, surfels.albedo, e_u, e_s)


def unshadowed_radiance(surfels: Surfels, light, cam: Camera) -> np.ndarray:
    """albedo * n~^T M(light_c) n~ per channel, ``(K, 3)``."""
    return shade(surfels, light, cam).radiance_unshadowed


def shadowed_radiance(surfels: Surfels, light, cam: Camera) -> np.ndarray:
    """albedo * <light_c, d_k> per channel, ``(K, 3)``."""
    return shade(surfels, light, cam).radiance_shadowed


@dataclass
class ShadingGrads:
    rotation: np.ndarray
    albedo_param: np.ndarray
    transfer: np.ndarray
    light: np.ndarray


def shade_backward(
    surfels: Surfels,
    light,
    shading: SurfelShading,
    grad_rad_unshadowed=None,
    grad_rad_shadowed=None,
    grad_normal=None,
    grad_albedo=None,
    grad_irr_unshadowed=None,
    grad_irr_shadowed=None,
) -> ShadingGrads:
    """Pull gradients on shading outputs back to surfel parameters and the light."""
    light = np.asarray(light, dtype=np.float64)
    k = len(surfels)
    rho = shading.albedo
    g_rho = np.zeros((k, 3)) if grad_albedo is None else np.array(grad_albedo, dtype=np.float64)
    g_eu = np.zeros((k, 3)) if grad_irr_unshadowed is None else np.array(grad_irr_unshadowed, dtype=np.float64)
    g_es = np.zeros((k, 3)) if grad_irr_shadowed is None else np.array(grad_irr_shadowed, dtype=np.float64)
    if grad_rad_unshadowed is not None:
        g_rho += grad_rad_unshadowed * shading.irradiance_unshadowed
        g_eu += grad_rad_unshadowed * rho
    if grad_rad_shadowed is not None:
        g_rho += grad_rad_shadowed * shading.irradiance_shadowed
        g_es += grad_rad_shadowed * rho
    n = shading.normal
    basis = sh.irradiance_basis(n)  # (K, 9)
    g_light = g_eu.T @ basis + g_es.T @ shading.transfer
    g_n = np.einsum("kc,kci->ki", g_eu, sh.irradiance_normal_grad(light[None, :, :], n[:, None, :]))
    if grad_normal is not None:
        g_n += grad_normal
    g_d = g_es @ light
    g_d = np.where(shading.flipped[:, None], g_d * sh.REFLECTION_SIGNS, g_d)
    # n_oriented = sign * R[:, :, 2]
    sign = np.where(shading.flipped, -1.0, 1.0)
    g_R = np.zeros((k, 3, 3))
    g_R[:, :, 2] = sign[:, None] * g_n
    return ShadingGrads(
        rotation=quat_to_rotmat_vjp(surfels.rotation, g_R),
        albedo_param=g_rho * rho * (1.0 - rho),
        transfer=g_d,
        light=g_light,
    )


# ---------------------------------------------------------------------------
# Image-level rendering
# ---------------------------------------------------------------------------


@dataclass
class RenderBuffers:
    """Composited image buffers for one lighting model."""

    color: np.ndarray  # (H, W, 3)
    albedo: np.ndarray
    normal: np.ndarray
    depth: np.ndarray  # (H, W)
    irradiance: np.ndarray
    transmittance: np.ndarray  # (H, W)


def render_lit(surfels: Surfels, light, cam: Camera) -> tuple[RenderBuffers, RenderBuffers]:
    """Render (shadowed, unshadowed) buffers from one splatting pass.

    Irradiance is composited as its own attribute, never recovered by
    dividing composited color by composited albedo.
    """
    s = shade(surfels, light, cam)
    attrs = np.concatenate(
        [s.radiance_shadowed, s.radiance_unshadowed, s.albedo, s.normal, s.irradiance_shadowed, s.irradiance_unshadowed],
        axis=1,
    )
    res = rasterizer.render(surfels, attrs, cam)
    f = res.features
    depth, trans = res.depth, res.transmittance
    shadowed = RenderBuffers(f[..., 0:3], f[..., 6:9], f[..., 9:12], depth, f[..., 12:15], trans)
    unshadowed = RenderBuffers(f[..., 3:6], f[..., 6:9], f[..., 9:12], depth, f[..., 15:18], trans)
    return shadowed, unshadowed


def shadow_map(shadowed: RenderBuffers, unshadowed: RenderBuffers) -> np.ndarray:
    """max(luma(unshadowed irradiance - shadowed irradiance), 0), ``(H, W)``."""
    if shadowed.irradiance.shape != unshadowed.irradiance.shape:
        raise ContractViolation("shadow_map needs buffers of identical shape")
    gap = unshadowed.irradiance - shadowed.irradiance
    return np.maximum(gap @ REC709_LUMA, 0.0)
