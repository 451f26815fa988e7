"""Relighting trained scenes and exporting their learned environment light."""
from __future__ import annotations

import logging
import math

import numpy as np

from . import lighting, sh
from .errors import UsageError
from .scene import Camera, Scene, mlp_forward

log = logging.getLogger(__name__)


def z_rotation(deg: float) -> np.ndarray:
    """Rotation about the world up axis (+z)."""
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def resolve_light(scene: Scene, light=None, envmap=None, image_index=None) -> np.ndarray:
    """Exactly one of an SH light, an equirectangular map, or a training-image index."""
    given = [x is not None for x in (light, envmap, image_index)]
    if sum(given) != 1:
        raise UsageError("give exactly one of a light, an environment map, or an image index")
    if light is not None:
        light = np.asarray(light, dtype=np.float64)
        if light.shape != (3, sh.NUM_COEFFS):
            raise UsageError(f"light must be (3, 9), got {light.shape}")
        return light
    if envmap is not None:
        return sh.project_envmap(envmap)
    return mlp_forward(scene.lights, image_index)


def relight(scene: Scene, cam: Camera, light=None, envmap=None, image_index=None, rotate_deg: float = 0.0, rotation=None):
    """Render color, albedo, normal, irradiance and shadow map under a chosen light.

    ``rotate_deg`` spins the light about +z. ``rotation`` takes a full 3x3
    matrix instead and ignores ``rotate_deg``.
    """
    coeffs = resolve_light(scene, light, envmap, image_index)
    R = z_rotation(rotate_deg) if rotation is None else np.asarray(rotation, dtype=np.float64)
    if rotation is not None or rotate_deg != 0.0:
        coeffs = sh.rotate_sh(coeffs, R)
    shadowed, unshadowed = lighting.render_lit(scene.surfels, coeffs, cam)
    return {
        "color": shadowed.color,
        "color_unshadowed": unshadowed.color,
        "albedo": shadowed.albedo,
        "normal": shadowed.normal,
        "irradiance": shadowed.irradiance,
        "shadow": lighting.shadow_map(shadowed, unshadowed),
        "depth": shadowed.depth,
        "transmittance": shadowed.transmittance,
        "light": coeffs,
    }


def export_envlight(scene: Scene, image_index: int, height: int = 64, width: int = 128, divide_pi: bool = False):
    """Equirectangular map of a learned light, negatives clamped to 0.

    Returns ``(map, clamped_count)``. The learned light carries the pi-folded
    scale; ``divide_pi`` rescales it for renderers expecting physical radiance
    with a 1/pi diffuse BRDF.
    """
    coeffs = mlp_forward(scene.lights, image_index)
    env = sh.render_envmap(coeffs, height, width)
    if divide_pi:
        env = env / math.pi
    negative = int(np.count_nonzero(env < 0.0))
    if negative:
        log.info("export_envlight: clamped %d negative values to 0", negative)
    return np.maximum(env, 0.0), negative


def light_gain(scene: Scene, dataset) -> np.ndarray:
    """Per-channel gain mapping the dataset's ground-truth lights into ``scene``'s gauge.

    Albedo and light are only recoverable up to one scale per channel. The
    gain is the least-squares fit of renders under the ground-truth lights to
    the unoccluded pixels of every training photo.
    """
    num = np.zeros(3)
    den = np.zeros(3)
    for e in dataset.train:
        if e.light_index not in dataset.lights:
            raise UsageError(f"training image {e.name} has no ground-truth light")
        shadowed, _ = lighting.render_lit(scene.surfels, dataset.lights[e.light_index], e.camera)
        keep = np.ones(e.image.shape[:2], dtype=bool) if e.occluder_mask is None else ~e.occluder_mask
        pred, target = shadowed.color[keep], e.image[keep]
        num += np.sum(pred * target, axis=0)
        den += np.sum(pred * pred, axis=0)
    if np.any(den <= 0):
        raise UsageError("renders under the ground-truth lights are black in some channel")
    return num / den


def gauged_light(scene: Scene, dataset, light_index: int, gain=None) -> np.ndarray:
    """Ground-truth light ``light_index`` expressed in ``scene``'s albedo/light gauge."""
    if light_index not in dataset.lights:
        raise UsageError(f"dataset has no ground-truth light {light_index}")
    gain = light_gain(scene, dataset) if gain is None else np.asarray(gain, dtype=np.float64)
    return dataset.lights[light_index] * gain[:, None]
